#pragma once

#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace acdc {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}

} // namespace detail

/// Shape/argument violations. Message carries the offending dimensions.
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

#define ACDC_REQUIRE(cond, ...) \
    do { if (!(cond)) throw std::invalid_argument(::acdc::detail::cat(__VA_ARGS__)); } while (0)

#define ACDC_FAIL(...) throw std::runtime_error(::acdc::detail::cat(__VA_ARGS__))

} // namespace acdc
