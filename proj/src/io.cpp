#include "roomsbi/io.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "roomsbi/errors.hpp"

namespace roomsbi {

std::string format_double(double v) {
    std::array<char, 32> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return {buf.data(), r.ptr};
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const Eigen::MatrixXd& rows) {
    if (!header.empty() && static_cast<Eigen::Index>(header.size()) != rows.cols())
        throw ValidationError("csv: header has " + std::to_string(header.size()) + " columns, data has " +
                              std::to_string(rows.cols()));
    std::string out;
    for (std::size_t c = 0; c < header.size(); ++c) out += (c ? "," : "") + header[c];
    if (!header.empty()) out += '\n';
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
        for (Eigen::Index c = 0; c < rows.cols(); ++c) {
            if (c) out += ',';
            out += format_double(rows(r, c));
        }
        out += '\n';
    }
    write_text_file(path, out);
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open " + path.string());
    CsvTable t;
    std::string line;
    std::vector<std::vector<double>> values;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (first) {
            first = false;
            double probe = 0;
            const auto r = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), probe);
            if (r.ec != std::errc{}) {
                t.header = cells;
                continue;
            }
        }
        std::vector<double> row;
        for (const auto& c : cells) {
            double v = 0;
            const auto r = std::from_chars(c.data(), c.data() + c.size(), v);
            if (r.ec != std::errc{} || r.ptr != c.data() + c.size())
                throw ArtifactError(path.string() + ": cannot parse '" + c + "'");
            row.push_back(v);
        }
        if (!values.empty() && row.size() != values.front().size())
            throw ArtifactError(path.string() + ": ragged row " + std::to_string(values.size() + 1));
        values.push_back(std::move(row));
    }
    const Eigen::Index cols = values.empty() ? static_cast<Eigen::Index>(t.header.size())
                                             : static_cast<Eigen::Index>(values.front().size());
    t.rows.resize(static_cast<Eigen::Index>(values.size()), cols);
    for (std::size_t r = 0; r < values.size(); ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            t.rows(static_cast<Eigen::Index>(r), c) = values[r][static_cast<std::size_t>(c)];
    return t;
}

namespace {

std::string hex(const unsigned char* d, unsigned n) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < n; ++i) {
        s += digits[d[i] >> 4];
        s += digits[d[i] & 15];
    }
    return s;
}

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw ArtifactError("sha256 init failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;
    void update(const char* d, std::size_t n) { EVP_DigestUpdate(ctx_, d, n); }
    std::string finish() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned n = 0;
        EVP_DigestFinal_ex(ctx_, md.data(), &n);
        return hex(md.data(), n);
    }

private:
    EVP_MD_CTX* ctx_;
};

} // namespace

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open " + path.string());
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.finish();
}

std::string sha256_string(const std::string& data) {
    Sha256 h;
    h.update(data.data(), data.size());
    return h.finish();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ArtifactError("cannot write " + tmp.string());
        out << text;
        if (!out) throw ArtifactError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace roomsbi
