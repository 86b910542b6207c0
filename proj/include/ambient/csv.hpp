#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace ambient {

/// "%.9g" formatting used by every CSV the library writes.
std::string format_g9(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// Minimal reader for the unquoted comma-separated files written here.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);
void require_header(const CsvTable& table, std::initializer_list<std::string_view> expected,
                    const std::filesystem::path& source);

double parse_csv_double(const std::string& field);
std::int64_t parse_csv_int(const std::string& field);

std::string read_text_file(const std::filesystem::path& path);
/// Writes the whole file or throws Error; parent directories must exist.
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace ambient
