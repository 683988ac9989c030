#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pocr {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Invalid configuration or argument (shape mismatch, bad class value, ...).
struct ValueError : std::invalid_argument {
    explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Broken file, missing record, corrupt manifest, ...
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

#define POCR_CHECK(cond, msg)                              \
    do {                                                   \
        if (!(cond)) throw ::pocr::ValueError(msg);        \
    } while (0)

#define POCR_CHECK_DATA(cond, msg)                         \
    do {                                                   \
        if (!(cond)) throw ::pocr::DataError(msg);         \
    } while (0)

}  // namespace pocr
