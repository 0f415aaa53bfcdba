#pragma once

#include <cmath>
#include <limits>
#include <queue>
#include <utility>

#include "iinla/sparse.hpp"

namespace iinla {

enum class Ordering { Natural, MinimumDegree };

namespace detail {

// Symmetric adjacency (no diagonal) from the lower triangle of a.
inline void symmetric_adjacency(const SparseMatrix& a, std::vector<int>& adjptr,
                                std::vector<int>& adj) {
    const int n = a.ncols();
    std::vector<int> deg(n, 0);
    for (int j = 0; j < n; ++j)
        for (int p = a.colptr()[j]; p < a.colptr()[j + 1]; ++p) {
            const int i = a.rowind()[p];
            if (i > j) {
                ++deg[i];
                ++deg[j];
            }
        }
    adjptr.assign(n + 1, 0);
    for (int v = 0; v < n; ++v) adjptr[v + 1] = adjptr[v] + deg[v];
    adj.assign(adjptr[n], 0);
    std::vector<int> next(adjptr.begin(), adjptr.end() - 1);
    for (int j = 0; j < n; ++j)
        for (int p = a.colptr()[j]; p < a.colptr()[j + 1]; ++p) {
            const int i = a.rowind()[p];
            if (i > j) {
                adj[next[i]++] = j;
                adj[next[j]++] = i;
            }
        }
}

// Greedy minimum-degree ordering on the elimination quotient graph. Exact
// external degrees, element absorption, no supervariable detection; a poor
// ordering only costs fill, never correctness.
inline std::vector<int> minimum_degree_ordering(const SparseMatrix& a) {
    const int n = a.ncols();
    std::vector<int> adjptr, adj;
    symmetric_adjacency(a, adjptr, adj);

    std::vector<std::vector<int>> nbrs(n), elems(n), elem_nodes;
    for (int v = 0; v < n; ++v)
        nbrs[v].assign(adj.begin() + adjptr[v], adj.begin() + adjptr[v + 1]);

    std::vector<char> eliminated(n, 0);
    std::vector<int> stamp(n, -1), degree(n);
    std::vector<int> order;
    order.reserve(n);
    int tag = 0;

    std::vector<int> struct_buf;
    auto node_struct = [&](int v) {
        struct_buf.clear();
        ++tag;
        stamp[v] = tag;
        for (int u : nbrs[v])
            if (!eliminated[u] && stamp[u] != tag) {
                stamp[u] = tag;
                struct_buf.push_back(u);
            }
        for (int e : elems[v])
            for (int u : elem_nodes[e])
                if (!eliminated[u] && stamp[u] != tag) {
                    stamp[u] = tag;
                    struct_buf.push_back(u);
                }
    };

    using Entry = std::pair<int, int>;  // (degree, node), lazy deletion
    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> heap;
    for (int v = 0; v < n; ++v) {
        node_struct(v);
        degree[v] = static_cast<int>(struct_buf.size());
        heap.push({degree[v], v});
    }

    while (static_cast<int>(order.size()) < n) {
        int p = -1;
        while (!heap.empty()) {
            auto [d, v] = heap.top();
            heap.pop();
            if (!eliminated[v] && d == degree[v]) {
                p = v;
                break;
            }
        }
        if (p < 0) {
            for (int v = 0; v < n; ++v)
                if (!eliminated[v]) order.push_back(v);
            break;
        }
        node_struct(p);
        std::vector<int> fill = struct_buf;
        eliminated[p] = 1;
        order.push_back(p);

        const int eid = static_cast<int>(elem_nodes.size());
        elem_nodes.push_back(fill);
        ++tag;
        for (int u : fill) stamp[u] = tag;
        for (int v : fill) {
            std::vector<int> kept;
            kept.reserve(elems[v].size() + 1);
            for (int e : elems[v]) {
                bool absorbed = false;
                for (int u : elem_nodes[e])
                    if (u == p) {
                        absorbed = true;
                        break;
                    }
                if (!absorbed) kept.push_back(e);
            }
            kept.push_back(eid);
            elems[v] = std::move(kept);
            // direct neighbors inside the new element are covered by it
            std::vector<int> keptn;
            keptn.reserve(nbrs[v].size());
            for (int u : nbrs[v])
                if (!eliminated[u] && stamp[u] != tag) keptn.push_back(u);
            nbrs[v] = std::move(keptn);
        }
        for (int v : fill) {
            node_struct(v);
            degree[v] = static_cast<int>(struct_buf.size());
            heap.push({degree[v], v});
        }
    }
    return order;  // order[k] = original index eliminated at step k
}

}  // namespace detail

// Symbolic analysis of an SPD pattern: fill-reducing permutation, elimination
// tree, and factor column counts. Reusable across matrices sharing a pattern.
struct CholeskySymbolic {
    int n = 0;
    std::vector<int> perm;    // permuted index k holds original index perm[k]
    std::vector<int> iperm;
    std::vector<int> parent;  // elimination tree
    std::vector<int> cp, ci;  // permuted upper-triangle pattern
    std::vector<int> lp;      // factor column pointers
};

class CholeskyFactor {
  public:
    CholeskyFactor() = default;
    CholeskyFactor(CholeskySymbolic sym, std::vector<int> li, std::vector<double> lx,
                   double logdet)
        : sym_(std::move(sym)), li_(std::move(li)), lx_(std::move(lx)), logdet_(logdet) {}

    int order() const { return sym_.n; }
    double logdet() const { return logdet_; }
    const CholeskySymbolic& symbolic() const { return sym_; }
    const std::vector<int>& factor_colptr() const { return sym_.lp; }
    const std::vector<int>& factor_rowind() const { return li_; }
    const std::vector<double>& factor_values() const { return lx_; }
    const std::vector<int>& perm() const { return sym_.perm; }

    // Solves a*x = b where a is the factored matrix.
    std::vector<double> solve(const std::vector<double>& b) const {
        const int n = sym_.n;
        if (static_cast<int>(b.size()) != n)
            throw DimensionMismatch("solve: vector length != factored order");
        std::vector<double> x(n);
        for (int k = 0; k < n; ++k) x[k] = b[sym_.perm[k]];
        for (int j = 0; j < n; ++j) {  // L z = P b
            const int s = sym_.lp[j], e = sym_.lp[j + 1];
            x[j] /= lx_[s];
            const double xj = x[j];
            for (int p = s + 1; p < e; ++p) x[li_[p]] -= lx_[p] * xj;
        }
        for (int j = n - 1; j >= 0; --j) {  // L^T w = z
            const int s = sym_.lp[j], e = sym_.lp[j + 1];
            double xj = x[j];
            for (int p = s + 1; p < e; ++p) xj -= lx_[p] * x[li_[p]];
            x[j] = xj / lx_[s];
        }
        std::vector<double> out(n);
        for (int k = 0; k < n; ++k) out[sym_.perm[k]] = x[k];
        return out;
    }

    SparseMatrix matrixL() const { return SparseMatrix(sym_.n, sym_.n, sym_.lp, li_, lx_); }

  private:
    CholeskySymbolic sym_;
    std::vector<int> li_;
    std::vector<double> lx_;
    double logdet_ = 0.0;
};

inline CholeskySymbolic analyze(const SparseMatrix& a, Ordering ord = Ordering::MinimumDegree) {
    if (a.nrows() != a.ncols()) throw DimensionMismatch("cholesky: matrix not square");
    const int n = a.ncols();
    CholeskySymbolic sym;
    sym.n = n;
    if (ord == Ordering::Natural) {
        sym.perm.resize(n);
        for (int i = 0; i < n; ++i) sym.perm[i] = i;
    } else {
        sym.perm = detail::minimum_degree_ordering(a);
    }
    sym.iperm.assign(n, 0);
    for (int k = 0; k < n; ++k) sym.iperm[sym.perm[k]] = k;

    // Permuted upper-triangular pattern, one slot per lower entry of a.
    std::vector<int> cnt(n, 0);
    for (int j = 0; j < n; ++j)
        for (int p = a.colptr()[j]; p < a.colptr()[j + 1]; ++p) {
            const int i = a.rowind()[p];
            if (i < j) continue;
            ++cnt[std::max(sym.iperm[i], sym.iperm[j])];
        }
    sym.cp.assign(n + 1, 0);
    for (int k = 0; k < n; ++k) sym.cp[k + 1] = sym.cp[k] + cnt[k];
    sym.ci.assign(sym.cp[n], 0);
    std::vector<int> next(sym.cp.begin(), sym.cp.end() - 1);
    for (int j = 0; j < n; ++j)
        for (int p = a.colptr()[j]; p < a.colptr()[j + 1]; ++p) {
            const int i = a.rowind()[p];
            if (i < j) continue;
            const int pi = sym.iperm[i], pj = sym.iperm[j];
            sym.ci[next[std::max(pi, pj)]++] = std::min(pi, pj);
        }
    for (int k = 0; k < n; ++k)
        std::sort(sym.ci.begin() + sym.cp[k], sym.ci.begin() + sym.cp[k + 1]);

    // Elimination tree with path compression.
    sym.parent.assign(n, -1);
    std::vector<int> ancestor(n, -1);
    for (int k = 0; k < n; ++k) {
        for (int p = sym.cp[k]; p < sym.cp[k + 1]; ++p) {
            int i = sym.ci[p];
            while (i != -1 && i < k) {
                const int nexti = ancestor[i];
                ancestor[i] = k;
                if (nexti == -1) sym.parent[i] = k;
                i = nexti;
            }
        }
    }

    // Column counts of L via the row-subtree reach of each row.
    std::vector<int> colcount(n, 1);
    std::vector<int> mark(n, -1);
    for (int k = 0; k < n; ++k) {
        mark[k] = k;
        for (int p = sym.cp[k]; p < sym.cp[k + 1]; ++p) {
            int i = sym.ci[p];
            while (i < k && mark[i] != k) {
                ++colcount[i];
                mark[i] = k;
                i = sym.parent[i];
            }
        }
    }
    sym.lp.assign(n + 1, 0);
    for (int k = 0; k < n; ++k) sym.lp[k + 1] = sym.lp[k] + colcount[k];
    return sym;
}

// Up-looking numeric factorization: P a P^T = L L^T. Throws
// NotPositiveDefinite on a non-positive or non-finite pivot; callers treat
// that as an invalid hyperparameter sample. Small positive pivots are kept:
// space-time priors are legitimately diffuse along homogeneous solutions of
// the operator, with pivots many orders below the largest diagonal.
inline CholeskyFactor factorize(const CholeskySymbolic& sym, const SparseMatrix& a) {
    const int n = sym.n;
    if (a.nrows() != n || a.ncols() != n) throw DimensionMismatch("factorize: order mismatch");

    // Values of the permuted upper triangle aligned with sym.cp / sym.ci.
    std::vector<double> cx(sym.cp[n], 0.0);
    {
        std::vector<std::vector<std::pair<int, double>>> cols(n);
        for (int k = 0; k < n; ++k) cols[k].reserve(sym.cp[k + 1] - sym.cp[k]);
        for (int j = 0; j < a.ncols(); ++j)
            for (int p = a.colptr()[j]; p < a.colptr()[j + 1]; ++p) {
                const int i = a.rowind()[p];
                if (i < j) continue;
                const int pi = sym.iperm[i], pj = sym.iperm[j];
                cols[std::max(pi, pj)].push_back({std::min(pi, pj), a.values()[p]});
            }
        for (int k = 0; k < n; ++k) {
            auto& c = cols[k];
            std::sort(c.begin(), c.end());
            if (static_cast<int>(c.size()) != sym.cp[k + 1] - sym.cp[k])
                throw DimensionMismatch("factorize: pattern differs from analyzed pattern");
            for (std::size_t q = 0; q < c.size(); ++q) cx[sym.cp[k] + q] = c[q].second;
        }
    }

    std::vector<int> li(sym.lp[n], 0);
    std::vector<double> lx(sym.lp[n], 0.0);
    std::vector<int> cursor(sym.lp.begin(), sym.lp.end() - 1);
    std::vector<double> x(n, 0.0);
    std::vector<int> pattern(n), path(n), mark(n, -1);
    double logdet = 0.0;

    for (int k = 0; k < n; ++k) {
        int top = n;
        mark[k] = k;
        double d = 0.0;
        for (int p = sym.cp[k]; p < sym.cp[k + 1]; ++p) {
            const int i = sym.ci[p];
            if (i == k) {
                d = cx[p];
                continue;
            }
            x[i] = cx[p];
            int len = 0, t = i;
            while (mark[t] != k) {
                path[len++] = t;
                mark[t] = k;
                t = sym.parent[t];
            }
            while (len > 0) pattern[--top] = path[--len];
        }
        for (int t = top; t < n; ++t) {
            const int j = pattern[t];
            const double lkj = x[j] / lx[sym.lp[j]];
            x[j] = 0.0;
            for (int p = sym.lp[j] + 1; p < cursor[j]; ++p) x[li[p]] -= lx[p] * lkj;
            d -= lkj * lkj;
            li[cursor[j]] = k;
            lx[cursor[j]] = lkj;
            ++cursor[j];
        }
        if (!(d > 0.0) || !std::isfinite(d))
            throw NotPositiveDefinite("non-positive pivot at column " + std::to_string(k));
        li[cursor[k]] = k;
        lx[cursor[k]] = std::sqrt(d);
        ++cursor[k];
        logdet += std::log(d);
    }
    return CholeskyFactor(sym, std::move(li), std::move(lx), logdet);
}

inline CholeskyFactor cholesky(const SparseMatrix& a, Ordering ord = Ordering::MinimumDegree) {
    return factorize(analyze(a, ord), a);
}

// Selected inverse on the factor pattern (Takahashi recursion); returns
// diag(a^{-1}) in original index order. All entries of a^{-1} needed by the
// recursion lie on pattern(L + L^T), so each column works on the dense block
// of already-computed entries over its own structure; cost is quadratic in
// per-column fill.
inline std::vector<double> takahashi_marginal_variances(const CholeskyFactor& f) {
    const CholeskySymbolic& sym = f.symbolic();
    const int n = sym.n;
    const std::vector<int>& lp = sym.lp;
    const std::vector<int>& li = f.factor_rowind();
    const std::vector<double>& lx = f.factor_values();

    std::vector<double> z(lp[n], 0.0);
    std::vector<int> pos(n, -1);
    int maxcol = 1;
    for (int c = 0; c < n; ++c) maxcol = std::max(maxcol, lp[c + 1] - lp[c]);
    std::vector<double> blk(static_cast<std::size_t>(maxcol) * maxcol, 0.0);
    std::vector<double> lhat(maxcol);

    for (int c = n - 1; c >= 0; --c) {
        const int s = lp[c], e = lp[c + 1];
        const int m = e - s;  // S = {c, rows below}; index 0 is the diagonal
        for (int i = 0; i < m; ++i) pos[li[s + i]] = i;
        const double ljj = lx[s];
        for (int i = 1; i < m; ++i) lhat[i] = lx[s + i] / ljj;

        // gather Z over S x S from the already-finished columns k > c
        for (int i = 1; i < m; ++i) {
            const int k = li[s + i];
            for (int p = lp[k]; p < lp[k + 1]; ++p) {
                const int j = pos[li[p]];
                if (j >= 0) {
                    blk[static_cast<std::size_t>(i) * m + j] = z[p];
                    blk[static_cast<std::size_t>(j) * m + i] = z[p];
                }
            }
        }

        for (int i = m - 1; i >= 0; --i) {
            double acc = 0.0;
            const double* row = blk.data() + static_cast<std::size_t>(i) * m;
            for (int j = 1; j < m; ++j) acc += lhat[j] * row[j];
            const double v = (i == 0 ? 1.0 / (ljj * ljj) : 0.0) - acc;
            z[s + i] = v;
            blk[static_cast<std::size_t>(i) * m] = v;
            blk[i] = v;  // row 0 mirror, read by later (smaller) i
        }
        for (int i = 0; i < m; ++i) pos[li[s + i]] = -1;
    }
    std::vector<double> out(n);
    for (int c = 0; c < n; ++c) out[sym.perm[c]] = z[lp[c]];
    return out;
}

}  // namespace iinla
