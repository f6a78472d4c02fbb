#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace mmsde {

using Vec = std::vector<double>;

/// Dense row-major matrix, sized for the small state dimensions this
/// library works with (no BLAS, no allocation tricks).
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

inline double dot(const Vec& x, const Vec& y) {
    assert(x.size() == y.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm(const Vec& x) { return std::sqrt(dot(x, x)); }

inline double dist(const Vec& x, const Vec& y) {
    assert(x.size() == y.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return std::sqrt(s);
}

/// y += a*x
inline void axpy(double a, const Vec& x, Vec& y) {
    assert(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

/// out += a * M * x
inline void gemv_add(double a, const Mat& m, const Vec& x, Vec& out) {
    assert(m.cols == x.size() && m.rows == out.size());
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * x[j];
        out[i] += a * s;
    }
}

/// Frobenius norm.
inline double frob_norm(const Mat& m) {
    double s = 0.0;
    for (double v : m.a) s += v * v;
    return std::sqrt(s);
}

inline bool all_finite(const Vec& x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

/// Solves A z = b for small dense A by Gaussian elimination with partial
/// pivoting. Returns false when the pivot degenerates.
bool solve_dense(Mat a, Vec b, Vec& z);

}  // namespace mmsde
