#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "astgl/common.hpp"

namespace astgl {

/// 17 significant digits: round-trips any double exactly.
inline std::string g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw DataError(concat("cannot open ", path.string(), " for writing"));
    }

    CsvWriter& cell(const std::string& v) {
        if (!first_) out_ << ',';
        out_ << v;
        first_ = false;
        return *this;
    }
    CsvWriter& cell(double v) { return cell(g17(v)); }
    CsvWriter& cell(std::size_t v) { return cell(std::to_string(v)); }
    CsvWriter& cell(int v) { return cell(std::to_string(v)); }

    void end_row() {
        out_ << '\n';
        first_ = true;
    }

private:
    std::ofstream out_;
    bool first_ = true;
};

}  // namespace astgl
