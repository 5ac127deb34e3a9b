#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace nvrelax::io {

/// Round-trippable text form of a double (%.17g); non-finite values become "nan"/"inf".
std::string fmt(double v);

/// printf-style formatting into a std::string.
template <typename... Args>
std::string format(const char* f, Args... args) {
    int n = std::snprintf(nullptr, 0, f, args...);
    std::string out(static_cast<std::size_t>(n) + 1, '\0');
    std::snprintf(out.data(), out.size(), f, args...);
    out.resize(static_cast<std::size_t>(n));
    return out;
}

/// Minimal CSV reader: first row is the header, fields split on commas, no quoting.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    [[nodiscard]] int column(const std::string& name) const;  ///< -1 if absent
};
CsvTable read_csv(const std::filesystem::path& path);

double parse_double(const std::string& text);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline. Doubles are emitted by nlohmann's shortest
/// round-trip formatter, which is deterministic.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace nvrelax::io
