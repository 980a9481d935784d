// Copyright 2026 The LERS Kit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Regenerates the bundled synthetic datasets:
//   <dir>/ml100k/u.data            943 users, 1682 items, 100K interactions
//   <dir>/ctr_sample/records.tsv   20K records over 8 fields
//   <dir>/ctr_sample/schema.txt

#include <filesystem>
#include <iostream>

#include "lers/data.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path dir = argc > 1 ? argv[1] : "data";
  try {
    std::filesystem::create_directories(dir / "ml100k");
    std::filesystem::create_directories(dir / "ctr_sample");
    lers::save_interactions(lers::generate_interactions({}), dir / "ml100k" / "u.data");
    const auto ctr = lers::generate_ctr({});
    lers::save_schema(ctr.schema, dir / "ctr_sample" / "schema.txt");
    lers::save_ctr_records(ctr.records, dir / "ctr_sample" / "records.tsv");
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  std::cout << "wrote " << dir.string() << "\n";
  return 0;
}
