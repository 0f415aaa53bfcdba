#pragma once

#include <memory>
#include <optional>

#include "iinla/cholesky.hpp"
#include "iinla/sparse.hpp"

namespace iinla {

// Gaussian in precision form. Immutable after construction; the factor,
// mean and marginal variances are computed on demand and cached.
class GaussianField {
  public:
    // Information form: mu = P^{-1} info.
    static GaussianField from_information(SparseMatrix precision, std::vector<double> info,
                                          Ordering ord = Ordering::MinimumDegree) {
        GaussianField g(std::move(precision), ord);
        g.info_ = std::move(info);
        return g;
    }

    static GaussianField from_moments(SparseMatrix precision, std::vector<double> mean,
                                      Ordering ord = Ordering::MinimumDegree) {
        GaussianField g(std::move(precision), ord);
        g.mean_ = std::move(mean);
        return g;
    }

    // Prior of the linearised system L u = r + noise: P = L^T Qinv L; the
    // mean solves (L^T L) mu = L^T r and is only computed when asked for.
    static GaussianField from_operator(const SparseMatrix& l, std::vector<double> r,
                                       const SparseMatrix& qbar_inv,
                                       Ordering ord = Ordering::MinimumDegree) {
        if (l.nrows() != l.ncols()) throw DimensionMismatch("operator matrix must be square");
        if (qbar_inv.nrows() != l.nrows() || static_cast<int>(r.size()) != l.nrows())
            throw DimensionMismatch("prior ingredients have inconsistent sizes");
        std::vector<double> qdiag(l.nrows());
        for (int i = 0; i < l.nrows(); ++i) qdiag[i] = qbar_inv.at(i, i);
        GaussianField g(symmetrized(multiply(l.transposed(), l.scaled_rows(qdiag))), ord);
        std::vector<double> qr(r);
        for (int i = 0; i < l.nrows(); ++i) qr[i] *= qdiag[i];
        g.info_ = l.multiply_transposed(qr);
        g.op_ = std::make_shared<SparseMatrix>(l);
        g.op_residual_ = std::make_shared<std::vector<double>>(std::move(r));
        return g;
    }

    int dim() const { return precision_.ncols(); }
    const SparseMatrix& precision() const { return precision_; }
    Ordering ordering() const { return ordering_; }
    bool has_information() const { return info_.has_value(); }
    const std::vector<double>& information() const { return *info_; }
    const SparseMatrix* linear_operator() const { return op_ ? op_.get() : nullptr; }
    const std::vector<double>* operator_residual() const {
        return op_residual_ ? op_residual_.get() : nullptr;
    }

    const CholeskyFactor& factor() const {
        if (!*factor_) *factor_ = std::make_shared<CholeskyFactor>(cholesky(precision_, ordering_));
        return **factor_;
    }

    const std::vector<double>& mean() const {
        if (!*mean_cache_) {
            if (mean_) {
                *mean_cache_ = std::make_shared<std::vector<double>>(*mean_);
            } else if (op_) {
                // normal-equations form of the prior mean
                const CholeskyFactor f =
                    cholesky(symmetrized(multiply(op_->transposed(), *op_)), ordering_);
                *mean_cache_ = std::make_shared<std::vector<double>>(
                    f.solve(op_->multiply_transposed(*op_residual_)));
            } else if (info_) {
                *mean_cache_ = std::make_shared<std::vector<double>>(factor().solve(*info_));
            } else {
                *mean_cache_ = std::make_shared<std::vector<double>>(dim(), 0.0);
            }
        }
        return **mean_cache_;
    }

    // diag(P^{-1}) by Takahashi recursion, cached on the field
    const std::vector<double>& marginal_variances() const {
        if (!*margvar_cache_)
            *margvar_cache_ =
                std::make_shared<std::vector<double>>(takahashi_marginal_variances(factor()));
        return **margvar_cache_;
    }

  private:
    GaussianField(SparseMatrix precision, Ordering ord)
        : precision_(std::move(precision)),
          ordering_(ord),
          factor_(std::make_shared<std::shared_ptr<CholeskyFactor>>()),
          mean_cache_(std::make_shared<std::shared_ptr<std::vector<double>>>()),
          margvar_cache_(std::make_shared<std::shared_ptr<std::vector<double>>>()) {
        if (precision_.nrows() != precision_.ncols())
            throw DimensionMismatch("precision must be square");
    }

    SparseMatrix precision_;
    Ordering ordering_;
    std::optional<std::vector<double>> info_;
    std::optional<std::vector<double>> mean_;
    std::shared_ptr<const SparseMatrix> op_;
    std::shared_ptr<const std::vector<double>> op_residual_;
    // caches shared across copies of the same field
    std::shared_ptr<std::shared_ptr<CholeskyFactor>> factor_;
    std::shared_ptr<std::shared_ptr<std::vector<double>>> mean_cache_;
    std::shared_ptr<std::shared_ptr<std::vector<double>>> margvar_cache_;
};

inline GaussianField build_prior(const SparseMatrix& l, const std::vector<double>& r,
                                 const SparseMatrix& qbar_inv,
                                 Ordering ord = Ordering::MinimumDegree) {
    return GaussianField::from_operator(l, r, qbar_inv, ord);
}

// Gaussian conditioning: P_post = P + H^T R^-1 H. The posterior mean uses the
// information vector when the prior carries one, otherwise the mean-update
// form mu + P_post^{-1} H^T R^-1 (y - H mu).
inline GaussianField condition(const GaussianField& prior, const SparseMatrix& h,
                               const SparseMatrix& r_inv, const std::vector<double>& y) {
    const int n = prior.dim();
    if (h.ncols() != n || h.nrows() != r_inv.nrows() ||
        static_cast<int>(y.size()) != h.nrows())
        throw DimensionMismatch("conditioning inputs have inconsistent sizes");

    const SparseMatrix ht_rinv = multiply(h.transposed(), r_inv);
    const SparseMatrix p_post = add(prior.precision(), multiply(ht_rinv, h));

    if (prior.has_information()) {
        std::vector<double> b = prior.information();
        const std::vector<double> hy = ht_rinv.multiply(y);
        for (int i = 0; i < n; ++i) b[i] += hy[i];
        return GaussianField::from_information(p_post, std::move(b), prior.ordering());
    }
    const std::vector<double>& mu = prior.mean();
    std::vector<double> innov(y);
    const std::vector<double> hmu = h.multiply(mu);
    for (std::size_t i = 0; i < innov.size(); ++i) innov[i] -= hmu[i];
    const GaussianField post =
        GaussianField::from_information(p_post, ht_rinv.multiply(innov), prior.ordering());
    std::vector<double> mean = post.factor().solve(post.information());
    for (int i = 0; i < n; ++i) mean[i] += mu[i];
    return GaussianField::from_moments(p_post, std::move(mean), prior.ordering());
}

inline const std::vector<double>& marginal_variances(const GaussianField& g) {
    return g.marginal_variances();
}

}  // namespace iinla
