#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pgpt {

// Thrown when tensor shapes are incompatible with an operation.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a NaN or Inf is produced. Never propagated silently.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a frozen-parameter, lineage, or guard contract is violated.
struct InvariantError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown for bad user input (CLI flags, config keys, malformed values).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown for filesystem failures and corrupted files.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense n-dimensional array of 32-bit floats, row-major.
// Invariant: product(shape) == data.size().
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), 0.0f);
    }

    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (count(shape) != static_cast<int64_t>(data.size())) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        for (float& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    // 2-D accessors; shape checks are the caller's job.
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }

    float& at(int i) { return data[static_cast<size_t>(i)]; }
    const float& at(int i) const { return data[static_cast<size_t>(i)]; }
    float& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    const float& at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
            n *= e;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string out = "[";
        for (size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    std::string shape_str() const { return shape_str(shape); }
};

// Scans for NaN/Inf and throws NumericError naming the producing operation.
void ensure_finite(const Tensor& t, const char* op_tag);

}  // namespace pgpt
