#pragma once
// Small text/file utilities: whole-file IO, numeric CSV with header row,
// 17-significant-digit float formatting (byte-reproducible artifacts).

#include <string>
#include <vector>

#include "opfs/common.hpp"

namespace opfs {

std::string read_file(const std::string& path);               // DataError on failure
void write_file(const std::string& path, const std::string& content);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows; // rectangular, width == header size
};

// Serialize with fmt17 cells; parse numeric CSV (header required).
std::string csv_to_string(const CsvTable& t);
CsvTable csv_from_string(const std::string& text, const std::string& what);
void write_csv(const std::string& path, const CsvTable& t);
CsvTable read_csv(const std::string& path);

} // namespace opfs
