#ifndef ROOMSBI_IO_HPP
#define ROOMSBI_IO_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace roomsbi {

/// Numeric CSV table; rows are records. Values are written with 17
/// significant digits so that reading back reproduces every double exactly.
struct CsvTable {
    std::vector<std::string> header;
    Eigen::MatrixXd rows;
};

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const Eigen::MatrixXd& rows);
CsvTable read_csv(const std::filesystem::path& path);

/// Shortest representation that parses back to the same double.
std::string format_double(double v);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_string(const std::string& data);

/// Writes through a temporary sibling and renames, so readers never see a partial file.
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace roomsbi

#endif // ROOMSBI_IO_HPP
