#include "opfs/textio.hpp"

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace opfs {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fnv1a_hex(std::string_view bytes) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
    return buf;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw DataError("read failure on: " + path);
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open file for writing: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write failure on: " + path);
}

std::string csv_to_string(const CsvTable& t) {
    std::string out;
    for (size_t j = 0; j < t.header.size(); ++j) {
        if (j) out += ',';
        out += t.header[j];
    }
    out += '\n';
    for (const auto& row : t.rows) {
        for (size_t j = 0; j < row.size(); ++j) {
            if (j) out += ',';
            out += fmt17(row[j]);
        }
        out += '\n';
    }
    return out;
}

CsvTable csv_from_string(const std::string& text, const std::string& what) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                          : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (lineno == 1) {
            t.header = cells;
            continue;
        }
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) {
            errno = 0;
            char* end = nullptr;
            double v = std::strtod(c.c_str(), &end);
            if (end == c.c_str() || (end && *end != '\0') || errno == ERANGE)
                throw DataError(what + ": bad numeric cell '" + c + "' at line " +
                                std::to_string(lineno));
            row.push_back(v);
        }
        if (row.size() != t.header.size())
            throw DataError(what + ": ragged row at line " + std::to_string(lineno));
        t.rows.push_back(std::move(row));
    }
    if (t.header.empty()) throw DataError(what + ": empty CSV (missing header)");
    return t;
}

void write_csv(const std::string& path, const CsvTable& t) { write_file(path, csv_to_string(t)); }

CsvTable read_csv(const std::string& path) { return csv_from_string(read_file(path), path); }

} // namespace opfs
