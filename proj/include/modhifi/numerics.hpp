#pragma once

// Dense linear algebra shared by the scoring, selection and analysis code.
// Everything here is double precision and row-major.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "modhifi/error.hpp"

namespace modhifi {

using Vector = std::vector<double>;

class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeMismatch("matrix data length " + std::to_string(data_.size()) +
                                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    bool operator==(const DenseMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Square matrix whose writes always go to both (i, j) and (j, i).
class SymmetricMatrix {
public:
    SymmetricMatrix() = default;
    explicit SymmetricMatrix(std::size_t dim) : m_(dim, dim) {}

    /// Builds from a full square matrix, averaging mirrored entries.
    static SymmetricMatrix from_dense(const DenseMatrix& d) {
        if (d.rows() != d.cols()) throw ShapeMismatch("symmetric matrix must be square");
        SymmetricMatrix s(d.rows());
        for (std::size_t i = 0; i < d.rows(); ++i)
            for (std::size_t j = i; j < d.cols(); ++j) s.set(i, j, 0.5 * (d(i, j) + d(j, i)));
        return s;
    }

    static SymmetricMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        DenseMatrix d(rows.size(), rows.size());
        std::size_t i = 0;
        for (const auto& r : rows) {
            if (r.size() != rows.size()) throw ShapeMismatch("symmetric matrix must be square");
            std::size_t j = 0;
            for (double v : r) d(i, j++) = v;
            ++i;
        }
        return from_dense(d);
    }

    static SymmetricMatrix diagonal(std::span<const double> diag) {
        SymmetricMatrix s(diag.size());
        for (std::size_t i = 0; i < diag.size(); ++i) s.set(i, i, diag[i]);
        return s;
    }

    std::size_t dim() const noexcept { return m_.rows(); }
    double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }
    void set(std::size_t i, std::size_t j, double v) {
        m_(i, j) = v;
        m_(j, i) = v;
    }
    void add(std::size_t i, std::size_t j, double v) {
        m_(i, j) += v;
        if (i != j) m_(j, i) += v;
    }

    const DenseMatrix& dense() const noexcept { return m_; }

    /// Principal submatrix Q[idx, idx].
    SymmetricMatrix submatrix(std::span<const std::size_t> idx) const {
        SymmetricMatrix s(idx.size());
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = a; b < idx.size(); ++b) s.set(a, b, m_(idx[a], idx[b]));
        return s;
    }

    bool operator==(const SymmetricMatrix&) const = default;

private:
    DenseMatrix m_;
};

class LowerTriangular;
inline LowerTriangular cholesky_regularized(const SymmetricMatrix& q, double lambda);

/// Cholesky factor; zero above the diagonal, positive diagonal.
class LowerTriangular {
public:
    std::size_t dim() const noexcept { return m_.rows(); }
    double operator()(std::size_t i, std::size_t j) const { return j > i ? 0.0 : m_(i, j); }
    const DenseMatrix& dense() const noexcept { return m_; }

    /// Solves (L L^T) x = b.
    Vector solve(std::span<const double> b) const {
        const std::size_t n = dim();
        if (b.size() != n) throw ShapeMismatch("rhs length does not match factor");
        Vector y(b.begin(), b.end());
        for (std::size_t i = 0; i < n; ++i) {
            double s = y[i];
            for (std::size_t k = 0; k < i; ++k) s -= m_(i, k) * y[k];
            y[i] = s / m_(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= m_(k, ii) * y[k];
            y[ii] = s / m_(ii, ii);
        }
        return y;
    }

    /// Squared Euclidean norm of each row.
    Vector row_norms_squared() const {
        Vector out(dim(), 0.0);
        for (std::size_t i = 0; i < dim(); ++i)
            for (std::size_t k = 0; k <= i; ++k) out[i] += m_(i, k) * m_(i, k);
        return out;
    }

private:
    friend LowerTriangular cholesky_regularized(const SymmetricMatrix&, double);
    explicit LowerTriangular(DenseMatrix m) : m_(std::move(m)) {}
    DenseMatrix m_;
};

/// A pivot below this fraction of the largest diagonal entry of Q + lambda*I
/// is treated as a rank deficiency.
inline constexpr double kPivotTolerance = 1e-12;

inline LowerTriangular cholesky_regularized(const SymmetricMatrix& q, double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
        throw InvalidArgument("regularization must be a finite non-negative number");
    const std::size_t n = q.dim();
    DenseMatrix l(n, n);
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j)
            if (!std::isfinite(q(i, j))) throw NotPositiveDefinite("matrix has non-finite entries");
        max_diag = std::max(max_diag, q(i, i) + lambda);
    }
    const double floor = kPivotTolerance * max_diag;
    for (std::size_t j = 0; j < n; ++j) {
        double pivot = q(j, j) + lambda;
        for (std::size_t k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (!(pivot > floor) || max_diag <= 0.0)
            throw NotPositiveDefinite("pivot " + std::to_string(j) + " is " + std::to_string(pivot) +
                                      " (threshold " + std::to_string(floor) + ")");
        const double d = std::sqrt(pivot);
        l(j, j) = d;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = q(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / d;
        }
    }
    return LowerTriangular(std::move(l));
}

inline Vector solve_spd(const SymmetricMatrix& q, std::span<const double> b, double lambda) {
    if (b.size() != q.dim()) throw ShapeMismatch("rhs length does not match matrix");
    return cholesky_regularized(q, lambda).solve(b);
}

inline Vector matvec(const DenseMatrix& a, std::span<const double> x) {
    if (x.size() != a.cols()) throw ShapeMismatch("matvec dimension mismatch");
    Vector y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

inline Vector matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
    if (x.size() != a.rows()) throw ShapeMismatch("matvec dimension mismatch");
    Vector y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) y[j] += a(i, j) * x[i];
    return y;
}

inline Vector matvec(const SymmetricMatrix& q, std::span<const double> x) { return matvec(q.dense(), x); }

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double quadratic_form(const SymmetricMatrix& q, std::span<const double> u) {
    return dot(u, matvec(q, u));
}

inline double frobenius_norm(const DenseMatrix& a) { return norm2(a.data()); }

/// Largest singular value by power iteration on W^T W. The start vector is
/// drawn from `seed`, so the result is reproducible.
inline double spectral_norm(const DenseMatrix& w, std::size_t iters = 1000, double tol = 1e-12,
                            std::uint64_t seed = 0) {
    if (iters == 0) throw InvalidArgument("spectral_norm needs at least one iteration");
    if (w.rows() == 0 || w.cols() == 0) return 0.0;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    Vector v(w.cols());
    for (auto& x : v) x = gauss(rng);
    double nv = norm2(v);
    for (auto& x : v) x /= nv;

    double sigma = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
        Vector u = matvec(w, v);
        const double next = norm2(u);
        if (next == 0.0) {
            // v may have landed in the null space; W^T W has no component to follow.
            if (frobenius_norm(w) == 0.0) return 0.0;
            for (auto& x : v) x = gauss(rng);
            nv = norm2(v);
            for (auto& x : v) x /= nv;
            continue;
        }
        Vector z = matvec_transposed(w, u);
        const double nz = norm2(z);
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = z[j] / nz;
        const bool converged = std::abs(next - sigma) <= tol * next;
        sigma = next;
        if (converged) break;
    }
    return sigma;
}

namespace detail {
inline Vector average_ranks(std::span<const double> a) {
    std::vector<std::size_t> order(a.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] < a[y]; });
    Vector ranks(a.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && a[order[j + 1]] == a[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}
} // namespace detail

/// Spearman rank correlation with average ranks for ties.
inline double spearman_rank(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2)
        throw InvalidArgument("spearman_rank needs two vectors of equal length >= 2");
    const Vector ra = detail::average_ranks(a);
    const Vector rb = detail::average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1.0) / 2.0;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - mean) * (rb[i] - mean);
        saa += (ra[i] - mean) * (ra[i] - mean);
        sbb += (rb[i] - mean) * (rb[i] - mean);
    }
    if (saa == 0.0 || sbb == 0.0) throw DegenerateInput("spearman_rank of a constant vector");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

} // namespace modhifi
