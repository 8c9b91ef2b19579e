#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mrp {

/// Dense row-major matrix; rows are segments, columns are feature channels.
template <class S>
using MatrixT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = MatrixT<double>;

inline constexpr std::size_t kFeatureDim = 1024;
inline constexpr std::size_t kCurveLength = 100;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid argument to an operation (bad size, out-of-range index, ...).
struct ArgumentError : Error {
    using Error::Error;
};

/// Operand shapes that cannot be combined.
struct ShapeError : Error {
    using Error::Error;
};

/// Bytes on disk that do not match the declared layout.
struct FormatError : Error {
    using Error::Error;
};

/// A value that violates a domain invariant (curve outside [0,1], ...).
struct ValidationError : Error {
    using Error::Error;
};

/// A file that could not be opened or read.
struct LoadError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

template <class S>
std::string shape_string(const MatrixT<S>& m) {
    return shape_string(m.rows(), m.cols());
}

}  // namespace mrp
