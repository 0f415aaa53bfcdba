#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace iinla {

struct DimensionMismatch : std::runtime_error {
    explicit DimensionMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct NotPositiveDefinite : std::runtime_error {
    explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};

struct Triplet {
    int row;
    int col;
    double value;
};

// Compressed sparse column matrix. Row indices are strictly increasing within
// each column; explicit zeros are permitted.
class SparseMatrix {
  public:
    SparseMatrix() : nrows_(0), ncols_(0), colptr_(1, 0) {}

    SparseMatrix(int nrows, int ncols, std::vector<int> colptr, std::vector<int> rowind,
                 std::vector<double> values)
        : nrows_(nrows),
          ncols_(ncols),
          colptr_(std::move(colptr)),
          rowind_(std::move(rowind)),
          values_(std::move(values)) {
        check_structure();
    }

    static SparseMatrix identity(int n) {
        std::vector<int> cp(n + 1), ri(n);
        std::vector<double> vx(n, 1.0);
        for (int j = 0; j <= n; ++j) cp[j] = j;
        for (int j = 0; j < n; ++j) ri[j] = j;
        return SparseMatrix(n, n, std::move(cp), std::move(ri), std::move(vx));
    }

    static SparseMatrix diagonal(const std::vector<double>& d) {
        const int n = static_cast<int>(d.size());
        std::vector<int> cp(n + 1), ri(n);
        for (int j = 0; j <= n; ++j) cp[j] = j;
        for (int j = 0; j < n; ++j) ri[j] = j;
        return SparseMatrix(n, n, std::move(cp), std::move(ri), d);
    }

    // Duplicate entries are summed.
    static SparseMatrix from_triplets(int nrows, int ncols, std::vector<Triplet> t) {
        for (const Triplet& e : t) {
            if (e.row < 0 || e.row >= nrows || e.col < 0 || e.col >= ncols)
                throw DimensionMismatch("triplet index out of range");
        }
        std::sort(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
            return a.col != b.col ? a.col < b.col : a.row < b.row;
        });
        std::vector<int> cp(ncols + 1, 0), ri;
        std::vector<double> vx;
        ri.reserve(t.size());
        vx.reserve(t.size());
        for (std::size_t k = 0; k < t.size();) {
            std::size_t m = k + 1;
            double s = t[k].value;
            while (m < t.size() && t[m].col == t[k].col && t[m].row == t[k].row) {
                s += t[m].value;
                ++m;
            }
            ri.push_back(t[k].row);
            vx.push_back(s);
            ++cp[t[k].col + 1];
            k = m;
        }
        for (int j = 0; j < ncols; ++j) cp[j + 1] += cp[j];
        return SparseMatrix(nrows, ncols, std::move(cp), std::move(ri), std::move(vx));
    }

    int nrows() const { return nrows_; }
    int ncols() const { return ncols_; }
    int nnz() const { return static_cast<int>(rowind_.size()); }
    const std::vector<int>& colptr() const { return colptr_; }
    const std::vector<int>& rowind() const { return rowind_; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    double at(int i, int j) const {
        if (i < 0 || i >= nrows_ || j < 0 || j >= ncols_)
            throw DimensionMismatch("index out of range");
        const int lo = colptr_[j], hi = colptr_[j + 1];
        const auto begin = rowind_.begin() + lo, end = rowind_.begin() + hi;
        const auto it = std::lower_bound(begin, end, i);
        if (it != end && *it == i) return values_[lo + (it - begin)];
        return 0.0;
    }

    std::vector<double> multiply(const std::vector<double>& x) const {
        if (static_cast<int>(x.size()) != ncols_)
            throw DimensionMismatch("spmv: vector length != ncols");
        std::vector<double> y(nrows_, 0.0);
        for (int j = 0; j < ncols_; ++j) {
            const double xj = x[j];
            if (xj == 0.0) continue;
            for (int p = colptr_[j]; p < colptr_[j + 1]; ++p) y[rowind_[p]] += values_[p] * xj;
        }
        return y;
    }

    std::vector<double> multiply_transposed(const std::vector<double>& x) const {
        if (static_cast<int>(x.size()) != nrows_)
            throw DimensionMismatch("spmv^T: vector length != nrows");
        std::vector<double> y(ncols_, 0.0);
        for (int j = 0; j < ncols_; ++j) {
            double s = 0.0;
            for (int p = colptr_[j]; p < colptr_[j + 1]; ++p) s += values_[p] * x[rowind_[p]];
            y[j] = s;
        }
        return y;
    }

    SparseMatrix transposed() const {
        std::vector<int> cp(nrows_ + 1, 0), ri(rowind_.size());
        std::vector<double> vx(values_.size());
        for (int i : rowind_) ++cp[i + 1];
        for (int i = 0; i < nrows_; ++i) cp[i + 1] += cp[i];
        std::vector<int> next(cp.begin(), cp.end() - 1);
        for (int j = 0; j < ncols_; ++j) {
            for (int p = colptr_[j]; p < colptr_[j + 1]; ++p) {
                const int q = next[rowind_[p]]++;
                ri[q] = j;
                vx[q] = values_[p];
            }
        }
        return SparseMatrix(ncols_, nrows_, std::move(cp), std::move(ri), std::move(vx));
    }

    SparseMatrix scaled(double s) const {
        SparseMatrix r = *this;
        for (double& v : r.values_) v *= s;
        return r;
    }

    // diag(d) * A
    SparseMatrix scaled_rows(const std::vector<double>& d) const {
        if (static_cast<int>(d.size()) != nrows_)
            throw DimensionMismatch("scaled_rows: diag length != nrows");
        SparseMatrix r = *this;
        for (std::size_t p = 0; p < r.values_.size(); ++p) r.values_[p] *= d[r.rowind_[p]];
        return r;
    }

    // Entries (i, j) with i >= j.
    SparseMatrix lower_triangle() const {
        std::vector<Triplet> t;
        for (int j = 0; j < ncols_; ++j)
            for (int p = colptr_[j]; p < colptr_[j + 1]; ++p)
                if (rowind_[p] >= j) t.push_back({rowind_[p], j, values_[p]});
        return from_triplets(nrows_, ncols_, std::move(t));
    }

    void check_structure() const {
        if (nrows_ < 0 || ncols_ < 0) throw DimensionMismatch("negative dimension");
        if (static_cast<int>(colptr_.size()) != ncols_ + 1)
            throw DimensionMismatch("colptr length != ncols+1");
        if (colptr_[0] != 0 || colptr_[ncols_] != static_cast<int>(rowind_.size()) ||
            rowind_.size() != values_.size())
            throw DimensionMismatch("inconsistent storage sizes");
        for (int j = 0; j < ncols_; ++j) {
            if (colptr_[j] > colptr_[j + 1]) throw DimensionMismatch("colptr not monotone");
            for (int p = colptr_[j]; p < colptr_[j + 1]; ++p) {
                if (rowind_[p] < 0 || rowind_[p] >= nrows_)
                    throw DimensionMismatch("row index out of range");
                if (p > colptr_[j] && rowind_[p] <= rowind_[p - 1])
                    throw DimensionMismatch("row indices not strictly increasing");
            }
        }
    }

  private:
    int nrows_, ncols_;
    std::vector<int> colptr_;
    std::vector<int> rowind_;
    std::vector<double> values_;
};

// C = A * B, pattern computed by symbolic scatter per column.
inline SparseMatrix multiply(const SparseMatrix& a, const SparseMatrix& b) {
    if (a.ncols() != b.nrows()) throw DimensionMismatch("spgemm: inner dimensions differ");
    const int m = a.nrows(), n = b.ncols();
    std::vector<int> cp(n + 1, 0), ri;
    std::vector<double> vx;
    std::vector<double> work(m, 0.0);
    std::vector<int> mark(m, -1), cols;
    cols.reserve(64);
    for (int j = 0; j < n; ++j) {
        cols.clear();
        for (int pb = b.colptr()[j]; pb < b.colptr()[j + 1]; ++pb) {
            const int k = b.rowind()[pb];
            const double bkj = b.values()[pb];
            for (int pa = a.colptr()[k]; pa < a.colptr()[k + 1]; ++pa) {
                const int i = a.rowind()[pa];
                if (mark[i] != j) {
                    mark[i] = j;
                    work[i] = 0.0;
                    cols.push_back(i);
                }
                work[i] += a.values()[pa] * bkj;
            }
        }
        std::sort(cols.begin(), cols.end());
        for (int i : cols) {
            ri.push_back(i);
            vx.push_back(work[i]);
        }
        cp[j + 1] = static_cast<int>(ri.size());
    }
    return SparseMatrix(m, n, std::move(cp), std::move(ri), std::move(vx));
}

// alpha*A + beta*B with pattern union.
inline SparseMatrix add(const SparseMatrix& a, const SparseMatrix& b, double alpha = 1.0,
                        double beta = 1.0) {
    if (a.nrows() != b.nrows() || a.ncols() != b.ncols())
        throw DimensionMismatch("add: shapes differ");
    const int n = a.ncols();
    std::vector<int> cp(n + 1, 0), ri;
    std::vector<double> vx;
    ri.reserve(a.nnz() + b.nnz());
    vx.reserve(a.nnz() + b.nnz());
    for (int j = 0; j < n; ++j) {
        int pa = a.colptr()[j], pb = b.colptr()[j];
        const int ea = a.colptr()[j + 1], eb = b.colptr()[j + 1];
        while (pa < ea || pb < eb) {
            const int ia = pa < ea ? a.rowind()[pa] : a.nrows();
            const int ib = pb < eb ? b.rowind()[pb] : b.nrows();
            if (ia == ib) {
                ri.push_back(ia);
                vx.push_back(alpha * a.values()[pa++] + beta * b.values()[pb++]);
            } else if (ia < ib) {
                ri.push_back(ia);
                vx.push_back(alpha * a.values()[pa++]);
            } else {
                ri.push_back(ib);
                vx.push_back(beta * b.values()[pb++]);
            }
        }
        cp[j + 1] = static_cast<int>(ri.size());
    }
    return SparseMatrix(a.nrows(), n, std::move(cp), std::move(ri), std::move(vx));
}

// (M + M^T) / 2; kills roundoff asymmetry before factorization.
inline SparseMatrix symmetrized(const SparseMatrix& m) { return add(m, m.transposed(), 0.5, 0.5); }

inline double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionMismatch("dot: lengths differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace iinla
