#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace slim {

// Raised when a computation produces NaN/Inf or violates a numeric contract.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor of 64-bit floats. Shape is a list of extents; data
// length always equals the product of the extents.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (count(shape) != static_cast<int64_t>(data.size())) {
            throw std::invalid_argument("tensor shape " + shape_str() + " does not match data length " +
                                        std::to_string(data.size()));
        }
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t e : s) {
            if (e < 0) throw std::invalid_argument("negative tensor extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    // Row-major 2-D literal, mostly for tests.
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        Tensor t;
        int64_t r = static_cast<int64_t>(rows.size());
        int64_t c = r > 0 ? static_cast<int64_t>(rows.begin()->size()) : 0;
        t.shape = {r, c};
        t.data.reserve(static_cast<size_t>(r * c));
        for (const auto& row : rows) {
            if (static_cast<int64_t>(row.size()) != c) {
                throw std::invalid_argument("ragged rows in tensor literal");
            }
            for (double v : row) t.data.push_back(v);
        }
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    bool empty() const { return data.empty(); }

    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
    double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }
    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// Throws NumericError naming `where` if any element is NaN or Inf.
void check_finite(const Tensor& t, const char* where);

// Global switch for post-op finite checks (default on).
void set_finite_checks(bool on);
bool finite_checks_enabled();

double max_abs_diff(const Tensor& a, const Tensor& b);
// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12);

}  // namespace slim
