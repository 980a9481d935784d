// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lers/tensor.hpp"

namespace lers {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary container: "LERSKIT1", a key/value manifest, then named sections of
/// little-endian f64 or i64 payloads.
class Checkpoint {
 public:
  enum class DType : std::uint8_t { F64 = 0, I64 = 1 };

  struct Section {
    DType dtype = DType::F64;
    std::vector<std::uint64_t> dims;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;
  };

  void set(const std::string& key, const std::string& value) { manifest_[key] = value; }
  void set(const std::string& key, std::int64_t value) { manifest_[key] = std::to_string(value); }
  void set_real(const std::string& key, double value);
  bool has(const std::string& key) const { return manifest_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  const std::map<std::string, std::string>& manifest() const { return manifest_; }

  void put_tensor(const std::string& name, const Tensor& t);
  void put_ints(const std::string& name, std::vector<std::int64_t> values);
  bool has_section(const std::string& name) const { return sections_.count(name) != 0; }
  Tensor tensor(const std::string& name) const;
  const std::vector<std::int64_t>& ints(const std::string& name) const;
  const std::map<std::string, Section>& sections() const { return sections_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  const Section& section(const std::string& name, DType dtype) const;
  std::map<std::string, std::string> manifest_;
  std::map<std::string, Section> sections_;
};

}  // namespace lers
