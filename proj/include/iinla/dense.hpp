#pragma once

#include <cmath>
#include <vector>

#include "iinla/sparse.hpp"

namespace iinla {

struct SingularMatrix : std::runtime_error {
    explicit SingularMatrix(const std::string& what) : std::runtime_error(what) {}
};

// Small row-major dense matrix. Supports the reference computations: dense
// products, Cholesky/LU solves, inversion and a Jacobi eigensolver. Not meant
// for large problems.
class DenseMatrix {
  public:
    DenseMatrix() : nr_(0), nc_(0) {}
    DenseMatrix(int nr, int nc, double fill = 0.0) : nr_(nr), nc_(nc), a_(nr * nc, fill) {}

    static DenseMatrix identity(int n) {
        DenseMatrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static DenseMatrix from_sparse(const SparseMatrix& s) {
        DenseMatrix m(s.nrows(), s.ncols());
        for (int j = 0; j < s.ncols(); ++j)
            for (int p = s.colptr()[j]; p < s.colptr()[j + 1]; ++p)
                m(s.rowind()[p], j) += s.values()[p];
        return m;
    }

    int nrows() const { return nr_; }
    int ncols() const { return nc_; }
    double& operator()(int i, int j) { return a_[i * nc_ + j]; }
    double operator()(int i, int j) const { return a_[i * nc_ + j]; }

    DenseMatrix transposed() const {
        DenseMatrix t(nc_, nr_);
        for (int i = 0; i < nr_; ++i)
            for (int j = 0; j < nc_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    DenseMatrix multiply(const DenseMatrix& b) const {
        if (nc_ != b.nr_) throw DimensionMismatch("dense multiply: inner dimensions differ");
        DenseMatrix c(nr_, b.nc_);
        for (int i = 0; i < nr_; ++i)
            for (int k = 0; k < nc_; ++k) {
                const double aik = (*this)(i, k);
                if (aik == 0.0) continue;
                for (int j = 0; j < b.nc_; ++j) c(i, j) += aik * b(k, j);
            }
        return c;
    }

    std::vector<double> multiply(const std::vector<double>& x) const {
        if (static_cast<int>(x.size()) != nc_)
            throw DimensionMismatch("dense matvec: length mismatch");
        std::vector<double> y(nr_, 0.0);
        for (int i = 0; i < nr_; ++i) {
            double s = 0.0;
            for (int j = 0; j < nc_; ++j) s += (*this)(i, j) * x[j];
            y[i] = s;
        }
        return y;
    }

  private:
    int nr_, nc_;
    std::vector<double> a_;
};

// Lower Cholesky factor of an SPD matrix; throws NotPositiveDefinite.
inline DenseMatrix dense_cholesky(const DenseMatrix& a) {
    const int n = a.nrows();
    if (a.ncols() != n) throw DimensionMismatch("dense cholesky: not square");
    DenseMatrix l(n, n);
    for (int j = 0; j < n; ++j) {
        double d = a(j, j);
        for (int k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0) || !std::isfinite(d))
            throw NotPositiveDefinite("dense cholesky: non-positive pivot");
        l(j, j) = std::sqrt(d);
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

inline double dense_spd_logdet(const DenseMatrix& a) {
    const DenseMatrix l = dense_cholesky(a);
    double s = 0.0;
    for (int i = 0; i < a.nrows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
}

inline std::vector<double> dense_solve_spd(const DenseMatrix& a, const std::vector<double>& b) {
    const int n = a.nrows();
    const DenseMatrix l = dense_cholesky(a);
    std::vector<double> x(b);
    for (int i = 0; i < n; ++i) {
        double s = x[i];
        for (int k = 0; k < i; ++k) s -= l(i, k) * x[k];
        x[i] = s / l(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = x[i];
        for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
        x[i] = s / l(i, i);
    }
    return x;
}

inline DenseMatrix dense_inverse_spd(const DenseMatrix& a) {
    const int n = a.nrows();
    DenseMatrix inv(n, n);
    std::vector<double> e(n, 0.0);
    for (int j = 0; j < n; ++j) {
        e.assign(n, 0.0);
        e[j] = 1.0;
        const std::vector<double> col = dense_solve_spd(a, e);
        for (int i = 0; i < n; ++i) inv(i, j) = col[i];
    }
    return inv;
}

// LU with partial pivoting; independent route for log|det| checks.
inline double dense_lu_logabsdet(DenseMatrix a) {
    const int n = a.nrows();
    if (a.ncols() != n) throw DimensionMismatch("dense lu: not square");
    double logdet = 0.0;
    for (int k = 0; k < n; ++k) {
        int piv = k;
        for (int i = k + 1; i < n; ++i)
            if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
        if (a(piv, k) == 0.0) throw SingularMatrix("dense lu: zero pivot");
        if (piv != k)
            for (int j = 0; j < n; ++j) std::swap(a(piv, j), a(k, j));
        logdet += std::log(std::abs(a(k, k)));
        for (int i = k + 1; i < n; ++i) {
            const double f = a(i, k) / a(k, k);
            a(i, k) = f;
            for (int j = k + 1; j < n; ++j) a(i, j) -= f * a(k, j);
        }
    }
    return logdet;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix: a = V diag(w) V^T.
inline void jacobi_eigen_symmetric(DenseMatrix a, std::vector<double>& eigenvalues,
                                   DenseMatrix& eigenvectors) {
    const int n = a.nrows();
    eigenvectors = DenseMatrix::identity(n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-30) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = eigenvectors(k, p), vkq = eigenvectors(k, q);
                    eigenvectors(k, p) = c * vkp - s * vkq;
                    eigenvectors(k, q) = s * vkp + c * vkq;
                }
            }
    }
    eigenvalues.resize(n);
    for (int i = 0; i < n; ++i) eigenvalues[i] = a(i, i);
}

}  // namespace iinla
