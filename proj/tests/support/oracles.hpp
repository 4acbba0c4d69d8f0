#pragma once

// Independent reference implementations used only by tests. Everything here
// is written as literal double loops over the defining formulas, with no
// shared code or vectorized shortcuts from the library under test.

#include <cmath>
#include <limits>
#include <vector>

#include "t2i/common.hpp"

namespace t2i::testing {

inline double cos_loops(const Mat& m, Eigen::Index a, Eigen::Index b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        dot += m(a, c) * m(b, c);
        na += m(a, c) * m(a, c);
        nb += m(b, c) * m(b, c);
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// NT-Xent over a paired batch, rows are samples, u = [e; e'] stacked.
// Direct transcription of the per-sample loss and the minibatch mean.
inline double nt_xent_oracle(const Mat& e, const Mat& ep, double tau) {
    require(e.rows() == ep.rows() && e.cols() == ep.cols(), "oracle: branch shape mismatch");
    require(e.rows() >= 1, "oracle: empty batch");
    require(tau > 0.0, "oracle: temperature must be positive");
    const Eigen::Index n = e.rows();
    const Eigen::Index n2 = 2 * n;
    Mat u(n2, e.cols());
    u.topRows(n) = e;
    u.bottomRows(n) = ep;
    for (Eigen::Index r = 0; r < n2; ++r)
        require(u.row(r).norm() > 0.0, "oracle: zero-norm row");

    Mat sim(n2, n2);
    for (Eigen::Index i = 0; i < n2; ++i)
        for (Eigen::Index k = 0; k < n2; ++k) sim(i, k) = cos_loops(u, i, k);

    double total = 0.0;
    for (Eigen::Index i = 0; i < n2; ++i) {
        const Eigen::Index j = (i + n) % n2;
        double denom = 0.0;
        for (Eigen::Index k = 0; k < n2; ++k)
            if (k != i) denom += std::exp(sim(i, k) / tau);
        total += -std::log(std::exp(sim(i, j) / tau) / denom);
    }
    return total / static_cast<double>(n2);
}

// Inception score by explicit loops over samples and classes.
inline std::pair<double, double> inception_score_oracle(const Mat& probs, int splits) {
    const Eigen::Index m = probs.rows(), c = probs.cols();
    std::vector<double> scores;
    Eigen::Index start = 0;
    for (int s = 0; s < splits; ++s) {
        const Eigen::Index len = m / splits + (s < m % splits ? 1 : 0);
        std::vector<double> marginal(static_cast<std::size_t>(c), 0.0);
        for (Eigen::Index i = start; i < start + len; ++i)
            for (Eigen::Index k = 0; k < c; ++k) marginal[static_cast<std::size_t>(k)] += probs(i, k);
        for (auto& v : marginal) v /= static_cast<double>(len);
        double mean_kl = 0.0;
        for (Eigen::Index i = start; i < start + len; ++i) {
            double kl = 0.0;
            for (Eigen::Index k = 0; k < c; ++k)
                if (probs(i, k) > 0.0)
                    kl += probs(i, k) * std::log(probs(i, k) / marginal[static_cast<std::size_t>(k)]);
            mean_kl += kl;
        }
        scores.push_back(std::exp(mean_kl / static_cast<double>(len)));
        start += len;
    }
    double mean = 0.0;
    for (double v : scores) mean += v;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double v : scores) var += (v - mean) * (v - mean);
    const double stddev = std::sqrt(var / static_cast<double>(scores.size()));
    return {mean, stddev};
}

// DAMSM by straight-line loops. img_globals/txt_sentences: one column per
// sample (d x B); regions[i]: R x d; words[j]: T_j x d.
inline double damsm_oracle(const Mat& img_globals, const std::vector<Mat>& regions,
                           const Mat& txt_sentences, const std::vector<Mat>& words,
                           double g1, double g2, double g3) {
    const Eigen::Index b = img_globals.cols();
    Mat score_w(b, b), score_s(b, b);
    for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index j = 0; j < b; ++j) {
            const Mat& v = regions[static_cast<std::size_t>(i)];  // R x d
            const Mat& w = words[static_cast<std::size_t>(j)];    // T x d
            const Eigen::Index r = v.rows(), t = w.rows();
            // word-region similarities
            Mat s(t, r);
            for (Eigen::Index a = 0; a < t; ++a)
                for (Eigen::Index q = 0; q < r; ++q) s(a, q) = w.row(a).dot(v.row(q));
            // softmax over words per region
            Mat sbar(t, r);
            for (Eigen::Index q = 0; q < r; ++q) {
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index a = 0; a < t; ++a) mx = std::max(mx, s(a, q));
                double z = 0.0;
                for (Eigen::Index a = 0; a < t; ++a) z += std::exp(s(a, q) - mx);
                for (Eigen::Index a = 0; a < t; ++a) sbar(a, q) = std::exp(s(a, q) - mx) / z;
            }
            // attention over regions per word, context vectors, cosine relevance
            double acc = 0.0, mxrel = -std::numeric_limits<double>::infinity();
            std::vector<double> rel(static_cast<std::size_t>(t));
            for (Eigen::Index a = 0; a < t; ++a) {
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index q = 0; q < r; ++q) mx = std::max(mx, g1 * sbar(a, q));
                double z = 0.0;
                for (Eigen::Index q = 0; q < r; ++q) z += std::exp(g1 * sbar(a, q) - mx);
                Vec ctx = Vec::Zero(v.cols());
                for (Eigen::Index q = 0; q < r; ++q)
                    ctx += (std::exp(g1 * sbar(a, q) - mx) / z) * v.row(q).transpose();
                const double cr = ctx.dot(w.row(a).transpose()) / (ctx.norm() * w.row(a).norm());
                rel[static_cast<std::size_t>(a)] = cr;
                mxrel = std::max(mxrel, g2 * cr);
            }
            for (Eigen::Index a = 0; a < t; ++a)
                acc += std::exp(g2 * rel[static_cast<std::size_t>(a)] - mxrel);
            score_w(i, j) = (mxrel + std::log(acc)) / g2;
            // sentence-level cosine
            const Vec gi = img_globals.col(i), tj = txt_sentences.col(j);
            score_s(i, j) = gi.dot(tj) / (gi.norm() * tj.norm());
        }
    }
    // four negative-log-posterior terms, each averaged over the batch
    auto term = [&](const Mat& sc, bool over_cols) {
        double tot = 0.0;
        for (Eigen::Index i = 0; i < b; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < b; ++j)
                mx = std::max(mx, g3 * (over_cols ? sc(i, j) : sc(j, i)));
            double z = 0.0;
            for (Eigen::Index j = 0; j < b; ++j)
                z += std::exp(g3 * (over_cols ? sc(i, j) : sc(j, i)) - mx);
            tot += -(g3 * sc(i, i) - mx - std::log(z));
        }
        return tot / static_cast<double>(b);
    };
    return term(score_w, true) + term(score_w, false) + term(score_s, true) + term(score_s, false);
}

}  // namespace t2i::testing
