#pragma once

#include <cmath>

#include "iinla/cholesky.hpp"
#include "iinla/sparse.hpp"

namespace iinla {

// Sparse LU with partial pivoting (left-looking, depth-first reach). Used for
// log|det| and solves with square nonsymmetric operators whose normal
// equations are too ill-conditioned to factor in double precision.
class SparseLUFactor {
  public:
    // col_order: column preordering; a fill-reducing ordering of the normal
    // equations' pattern works well. Empty means natural order.
    SparseLUFactor(const SparseMatrix& a, std::vector<int> col_order = {}) {
        if (a.nrows() != a.ncols()) throw DimensionMismatch("lu: matrix not square");
        n_ = a.ncols();
        if (col_order.empty()) {
            col_order.resize(n_);
            for (int i = 0; i < n_; ++i) col_order[i] = i;
        }
        q_ = std::move(col_order);

        std::vector<int> pinv(n_, -1);  // original row -> pivot position
        std::vector<std::vector<std::pair<int, double>>> lcols(n_), ucols(n_);
        std::vector<double> x(n_, 0.0);
        std::vector<int> stack(n_), estack(n_), found;
        std::vector<char> mark(n_, 0);
        logabsdet_ = 0.0;

        for (int k = 0; k < n_; ++k) {
            // sparse solve L y = A(:, q[k]) on the partially built factor
            found.clear();
            const int col = q_[k];
            for (int p = a.colptr()[col]; p < a.colptr()[col + 1]; ++p) {
                const int r = a.rowind()[p];
                if (!mark[r]) dfs_reach(r, pinv, lcols, mark, stack, estack, found);
            }
            for (int p = a.colptr()[col]; p < a.colptr()[col + 1]; ++p)
                x[a.rowind()[p]] = a.values()[p];
            // found is in reverse topological order
            for (int t = static_cast<int>(found.size()) - 1; t >= 0; --t) {
                const int r = found[t];
                if (pinv[r] < 0) continue;  // not pivotal, no elimination
                const double xr = x[r];
                if (xr == 0.0) continue;
                for (const auto& [rr, lv] : lcols[pinv[r]]) x[rr] -= lv * xr;
            }
            // pivot: largest magnitude among non-pivotal rows
            int piv = -1;
            double best = 0.0;
            for (int r : found)
                if (pinv[r] < 0 && std::abs(x[r]) > best) {
                    best = std::abs(x[r]);
                    piv = r;
                }
            if (piv < 0 || best == 0.0 || !std::isfinite(best))
                throw NotPositiveDefinite("lu: structurally or numerically singular at column " +
                                          std::to_string(k));
            const double pivot = x[piv];
            pinv[piv] = k;
            logabsdet_ += std::log(std::abs(pivot));
            for (int r : found) {
                if (x[r] == 0.0) {
                    mark[r] = 0;
                    continue;
                }
                if (pinv[r] < k && pinv[r] >= 0) {
                    ucols[k].push_back({pinv[r], x[r]});
                } else if (r != piv) {
                    lcols[k].push_back({r, x[r] / pivot});
                }
                x[r] = 0.0;
                mark[r] = 0;
            }
            x[piv] = 0.0;
            mark[piv] = 0;
            ucols[k].push_back({k, pivot});
        }

        // finalize into CSC with rows in pivot space
        pinv_ = std::move(pinv);
        lp_.assign(n_ + 1, 0);
        up_.assign(n_ + 1, 0);
        for (int k = 0; k < n_; ++k) {
            lp_[k + 1] = lp_[k] + static_cast<int>(lcols[k].size());
            up_[k + 1] = up_[k] + static_cast<int>(ucols[k].size());
        }
        li_.resize(lp_[n_]);
        lx_.resize(lp_[n_]);
        ui_.resize(up_[n_]);
        ux_.resize(up_[n_]);
        for (int k = 0; k < n_; ++k) {
            int w = lp_[k];
            for (const auto& [r, v] : lcols[k]) {
                li_[w] = pinv_[r];
                lx_[w] = v;
                ++w;
            }
            w = up_[k];
            for (const auto& [r, v] : ucols[k]) {
                ui_[w] = r;
                ux_[w] = v;
                ++w;
            }
        }
    }

    double logabsdet() const { return logabsdet_; }

    // solves a x = b
    std::vector<double> solve(const std::vector<double>& b) const {
        if (static_cast<int>(b.size()) != n_)
            throw DimensionMismatch("lu solve: vector length != order");
        std::vector<double> y(n_);
        for (int i = 0; i < n_; ++i) y[pinv_[i]] = b[i];
        // unit lower forward solve
        for (int k = 0; k < n_; ++k) {
            const double yk = y[k];
            if (yk == 0.0) continue;
            for (int p = lp_[k]; p < lp_[k + 1]; ++p) y[li_[p]] -= lx_[p] * yk;
        }
        // upper backward solve; U columns hold rows <= k with the diagonal last
        for (int k = n_ - 1; k >= 0; --k) {
            const double diag = ux_[up_[k + 1] - 1];
            const double xk = y[k] / diag;
            y[k] = xk;
            for (int p = up_[k]; p < up_[k + 1] - 1; ++p) y[ui_[p]] -= ux_[p] * xk;
        }
        std::vector<double> out(n_);
        for (int k = 0; k < n_; ++k) out[q_[k]] = y[k];
        return out;
    }

  private:
    // depth-first reach over the partial L graph; emits in reverse
    // topological order
    static void dfs_reach(int start, const std::vector<int>& pinv,
                          const std::vector<std::vector<std::pair<int, double>>>& lcols,
                          std::vector<char>& mark, std::vector<int>& stack,
                          std::vector<int>& estack, std::vector<int>& found) {
        int top = 0;
        stack[top] = start;
        estack[top] = 0;
        mark[start] = 1;
        while (top >= 0) {
            const int r = stack[top];
            const int kcol = pinv[r];
            bool descended = false;
            if (kcol >= 0) {
                int& e = estack[top];
                while (e < static_cast<int>(lcols[kcol].size())) {
                    const int child = lcols[kcol][e].first;
                    ++e;
                    if (!mark[child]) {
                        mark[child] = 1;
                        ++top;
                        stack[top] = child;
                        estack[top] = 0;
                        descended = true;
                        break;
                    }
                }
            }
            if (!descended) {
                found.push_back(r);
                --top;
            }
        }
    }

    int n_ = 0;
    std::vector<int> q_, pinv_;
    std::vector<int> lp_, li_;
    std::vector<double> lx_;
    std::vector<int> up_, ui_;
    std::vector<double> ux_;
    double logabsdet_ = 0.0;
};

}  // namespace iinla
