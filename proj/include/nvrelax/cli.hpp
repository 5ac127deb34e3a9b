#pragma once

#include <string>
#include <vector>

namespace nvrelax::cli {

enum class Quantity { Power, Time };

/// "5e-6", "5uW", "0.54mW" (Power) or "10us", "2ms", "1e-3" (Time). Bare numbers are SI.
double parse_quantity(const std::string& text, Quantity kind);

/// Comma-separated quantities, or a grid "log:start:stop:n" / "lin:start:stop:n".
std::vector<double> parse_grid(const std::string& text, Quantity kind);

/// Runs the command line tool. Returns the process exit code:
/// 0 success, 1 unexpected failure, 2 configuration error, 3 numerical failure.
int run(int argc, const char* const* argv);

}  // namespace nvrelax::cli
