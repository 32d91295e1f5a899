#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>

namespace darts {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor dimension / layout violations. Message carries the offending shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Bad user-supplied configuration (unknown keys, invalid values).
class ConfigError : public Error {
public:
    using Error::Error;
};

// File format / filesystem problems.
class IoError : public Error {
public:
    using Error::Error;
};

// Numerical failures at runtime (non-finite loss, infeasible CTC target, ...).
class NumericError : public Error {
public:
    using Error::Error;
};

enum class Mode { Train, Eval };

template <typename... Parts>
std::string str(Parts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

// Worker cap for data-parallel loops inside primitives. Defaults to 1;
// the CLI raises it from DARTS_FORGE_THREADS. Results are bitwise
// independent of the cap (threads own disjoint output slices).
int max_threads();
void set_max_threads(int n);

// Runs fn(lo, hi) over [0, n) split into contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, const Fn& fn);

namespace detail {
void parallel_for_impl(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);
}

template <typename Fn>
void parallel_for(std::size_t n, const Fn& fn) {
    if (n == 0) return;
    if (max_threads() <= 1 || n < 2) {
        fn(std::size_t{0}, n);
        return;
    }
    detail::parallel_for_impl(n, fn);
}

}  // namespace darts
