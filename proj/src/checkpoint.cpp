// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lers/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lers {
namespace {

constexpr char kMagic[8] = {'L', 'E', 'R', 'S', 'K', 'I', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto len = read_pod<std::uint32_t>(in);
  if (len > (1u << 20)) throw CheckpointError("checkpoint: implausible string length");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return s;
}

}  // namespace

void Checkpoint::set_real(const std::string& key, double value) {
  // Shortest round-trip representation.
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  manifest_[key] = std::string(buf, end);
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = manifest_.find(key);
  if (it == manifest_.end()) throw CheckpointError("checkpoint: missing manifest key '" + key + "'");
  return it->second;
}

std::int64_t Checkpoint::get_int(const std::string& key) const {
  const auto& s = get(key);
  std::int64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw CheckpointError("checkpoint: '" + key + "' is not an integer");
  return v;
}

double Checkpoint::get_real(const std::string& key) const {
  const auto& s = get(key);
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw CheckpointError("checkpoint: '" + key + "' is not a number");
  return v;
}

void Checkpoint::put_tensor(const std::string& name, const Tensor& t) {
  Section s;
  s.dtype = DType::F64;
  for (auto d : t.shape()) s.dims.push_back(d);
  s.f64.assign(t.span().begin(), t.span().end());
  sections_[name] = std::move(s);
}

void Checkpoint::put_ints(const std::string& name, std::vector<std::int64_t> values) {
  Section s;
  s.dtype = DType::I64;
  s.dims = {values.size()};
  s.i64 = std::move(values);
  sections_[name] = std::move(s);
}

const Checkpoint::Section& Checkpoint::section(const std::string& name, DType dtype) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw CheckpointError("checkpoint: missing section '" + name + "'");
  if (it->second.dtype != dtype) throw CheckpointError("checkpoint: section '" + name + "' has the wrong dtype");
  return it->second;
}

Tensor Checkpoint::tensor(const std::string& name) const {
  const auto& s = section(name, DType::F64);
  Shape shape(s.dims.begin(), s.dims.end());
  Tensor t = Tensor::uninitialized(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(s.f64[i]);
  return t;
}

const std::vector<std::int64_t>& Checkpoint::ints(const std::string& name) const {
  return section(name, DType::I64).i64;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, sizeof kMagic);
  write_pod<std::uint64_t>(out, manifest_.size());
  for (const auto& [k, v] : manifest_) {
    write_string(out, k);
    write_string(out, v);
  }
  write_pod<std::uint64_t>(out, sections_.size());
  for (const auto& [name, s] : sections_) {
    write_string(out, name);
    write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(s.dtype));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.dims.size()));
    for (auto d : s.dims) write_pod<std::uint64_t>(out, d);
    if (s.dtype == DType::F64) {
      out.write(reinterpret_cast<const char*>(s.f64.data()), static_cast<std::streamsize>(s.f64.size() * sizeof(double)));
    } else {
      out.write(reinterpret_cast<const char*>(s.i64.data()), static_cast<std::streamsize>(s.i64.size() * sizeof(std::int64_t)));
    }
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw CheckpointError("checkpoint: cannot write " + path.string());
  const auto bytes = out.str();
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw CheckpointError("checkpoint: write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("checkpoint: bad magic in " + path.string());
  Checkpoint ck;
  const auto entries = read_pod<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < entries; ++i) {
    auto k = read_string(in);
    ck.manifest_[k] = read_string(in);
  }
  const auto count = read_pod<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = read_string(in);
    Section s;
    const auto dtype = read_pod<std::uint8_t>(in);
    if (dtype > 1) throw CheckpointError("checkpoint: unknown dtype in section '" + name + "'");
    s.dtype = static_cast<DType>(dtype);
    const auto rank = read_pod<std::uint32_t>(in);
    std::uint64_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      s.dims.push_back(read_pod<std::uint64_t>(in));
      total *= s.dims.back();
    }
    if (total > (std::uint64_t{1} << 34)) throw CheckpointError("checkpoint: section '" + name + "' too large");
    if (s.dtype == DType::F64) {
      s.f64.resize(total);
      in.read(reinterpret_cast<char*>(s.f64.data()), static_cast<std::streamsize>(total * sizeof(double)));
    } else {
      s.i64.resize(total);
      in.read(reinterpret_cast<char*>(s.i64.data()), static_cast<std::streamsize>(total * sizeof(std::int64_t)));
    }
    if (!in) throw CheckpointError("checkpoint: truncated section '" + name + "'");
    ck.sections_[name] = std::move(s);
  }
  return ck;
}

}  // namespace lers
