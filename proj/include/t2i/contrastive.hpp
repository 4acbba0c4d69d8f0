#pragma once

#include <vector>

#include "t2i/autodiff.hpp"
#include "t2i/common.hpp"

// Normalized temperature-scaled cross-entropy (NT-Xent) over paired
// two-branch batches. Samples are stacked block-wise, u = [e; e'], so the
// positive partner of row i is row (i + N) mod 2N.

namespace t2i::contrastive {

enum class BranchTag { first, second };

struct ContrastiveConfig {
    double temperature = 0.5;
};

// One branch of a paired batch; rows are samples.
struct EmbeddingBatch {
    Mat rows;
    BranchTag tag = BranchTag::first;

    Eigen::Index size() const { return rows.rows(); }
    Eigen::Index dim() const { return rows.cols(); }
};

inline void validate_embedding_rows(const Mat& m, const char* what) {
    require(m.rows() >= 1 && m.cols() >= 1, std::string(what) + ": empty batch");
    require_finite(m, what);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        require(m.row(r).norm() > 0.0, std::string(what) + ": zero-norm row " + std::to_string(r));
}

inline double cosine_similarity(const Vec& a, const Vec& b) {
    require(a.size() == b.size(), "cosine_similarity: dimension mismatch");
    require(a.allFinite() && b.allFinite(), "cosine_similarity: non-finite input");
    const double na = a.norm(), nb = b.norm();
    require(na > 0.0 && nb > 0.0, "cosine_similarity: zero-norm input");
    const double c = a.dot(b) / (na * nb);
    return std::min(1.0, std::max(-1.0, c));
}

// Loss of the i-th sample for stacked embeddings u (2N x d), positive partner
// j. The denominator runs over every k != i and includes the positive term.
inline double nt_xent_sample_loss(const Mat& u, Eigen::Index i, Eigen::Index j, double tau) {
    require(tau > 0.0, "nt_xent: temperature must be positive");
    require(u.rows() >= 2 && u.rows() % 2 == 0, "nt_xent: stacked batch must have 2N rows");
    require(i >= 0 && i < u.rows() && j >= 0 && j < u.rows(), "nt_xent: index out of range");
    require(i != j, "nt_xent: i and j must form a pair of distinct samples");
    validate_embedding_rows(u, "nt_xent_sample_loss");

    const Eigen::Index n2 = u.rows();
    Eigen::VectorXd sims(n2);
    for (Eigen::Index k = 0; k < n2; ++k)
        sims(k) = cosine_similarity(u.row(i).transpose(), u.row(k).transpose()) / tau;
    // log-sum-exp over k != i, max-shifted
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < n2; ++k)
        if (k != i) mx = std::max(mx, sims(k));
    double denom = 0.0;
    for (Eigen::Index k = 0; k < n2; ++k)
        if (k != i) denom += std::exp(sims(k) - mx);
    return mx + std::log(denom) - sims(j);
}

// Graph version; columns are samples (d x N per branch). Shares one code path
// with the plain API below so the two agree exactly.
inline ad::Var nt_xent_loss(ad::Var e, ad::Var ep, double tau) {
    require(tau > 0.0, "nt_xent: temperature must be positive");
    require(e->value.rows() == ep->value.rows() && e->value.cols() == ep->value.cols(),
            "nt_xent: branch shape mismatch");
    require(e->value.cols() >= 1, "nt_xent: empty batch");
    const Eigen::Index n = e->value.cols();
    const Eigen::Index n2 = 2 * n;
    for (Eigen::Index c = 0; c < n; ++c) {
        require(e->value.col(c).norm() > 0.0, "nt_xent: zero-norm embedding in first branch");
        require(ep->value.col(c).norm() > 0.0, "nt_xent: zero-norm embedding in second branch");
    }
    require_finite(e->value, "nt_xent first branch");
    require_finite(ep->value, "nt_xent second branch");

    using namespace ad;
    Var u = transpose(concat_cols(e, ep));            // 2N x d, block stacking
    Var un = normalize_rows(u);                       // rows on the unit sphere
    Var sims = scalar_mul(matmul_nt(un, un), 1.0 / tau);
    // Excluding k == i: a -inf-like additive mask underflows to zero weight
    // after the max shift inside lse_rows.
    Mat diag_mask = Mat::Zero(n2, n2);
    diag_mask.diagonal().setConstant(-1e12);
    Var masked = add(sims, constant(diag_mask));
    Var lse = lse_rows(masked);                       // 2N x 1

    std::vector<Eigen::Index> ri(static_cast<std::size_t>(n2)), pi(static_cast<std::size_t>(n2));
    for (Eigen::Index i = 0; i < n2; ++i) {
        ri[static_cast<std::size_t>(i)] = i;
        pi[static_cast<std::size_t>(i)] = (i + n) % n2;
    }
    Var pos = gather_entries(sims, ri, pi);           // sim(u_i, u_pair(i)) / tau
    return mean_all(sub(lse, pos));
}

// Eq. 2 over a paired batch; rows are samples.
inline double nt_xent_batch_loss(const EmbeddingBatch& e, const EmbeddingBatch& ep, double tau) {
    require(e.size() == ep.size() && e.dim() == ep.dim(),
            "nt_xent: branches must have identical N and d");
    validate_embedding_rows(e.rows, "nt_xent first branch");
    validate_embedding_rows(ep.rows, "nt_xent second branch");
    ad::NoGrad ng;
    ad::Var ev = ad::constant(e.rows.transpose());
    ad::Var epv = ad::constant(ep.rows.transpose());
    return nt_xent_loss(ev, epv, tau)->value(0, 0);
}

}  // namespace t2i::contrastive
