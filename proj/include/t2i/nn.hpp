#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "t2i/autodiff.hpp"
#include "t2i/rng.hpp"

// Layers over the autodiff engine. Batch convention: columns are samples.
// Image batches are stored flattened, one column per sample, with element
// order (channel, row, col) -> index (c*H + y)*W + x.

namespace t2i::nn {

using ad::Var;

struct ConvSpec {
    int in_c, in_h, in_w;
    int out_c;
    int k = 3;
    int stride = 1;
    int pad = 1;

    int out_h() const { return (in_h + 2 * pad - k) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - k) / stride + 1; }
};

namespace detail {

inline void im2col(const double* x, const ConvSpec& s, Mat& cols) {
    const int oh = s.out_h(), ow = s.out_w();
    cols.resize(s.in_c * s.k * s.k, oh * ow);
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const int pos = oy * ow + ox;
            int row = 0;
            for (int c = 0; c < s.in_c; ++c)
                for (int ky = 0; ky < s.k; ++ky)
                    for (int kx = 0; kx < s.k; ++kx, ++row) {
                        const int iy = oy * s.stride + ky - s.pad;
                        const int ix = ox * s.stride + kx - s.pad;
                        cols(row, pos) =
                            (iy >= 0 && iy < s.in_h && ix >= 0 && ix < s.in_w)
                                ? x[(c * s.in_h + iy) * s.in_w + ix]
                                : 0.0;
                    }
        }
}

inline void col2im_add(const Mat& cols, const ConvSpec& s, double* dx) {
    const int oh = s.out_h(), ow = s.out_w();
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const int pos = oy * ow + ox;
            int row = 0;
            for (int c = 0; c < s.in_c; ++c)
                for (int ky = 0; ky < s.k; ++ky)
                    for (int kx = 0; kx < s.k; ++kx, ++row) {
                        const int iy = oy * s.stride + ky - s.pad;
                        const int ix = ox * s.stride + kx - s.pad;
                        if (iy >= 0 && iy < s.in_h && ix >= 0 && ix < s.in_w)
                            dx[(c * s.in_h + iy) * s.in_w + ix] += cols(row, pos);
                    }
        }
}

}  // namespace detail

// 2-D convolution via im2col. x: (in_c*in_h*in_w) x B, w: out_c x (in_c*k*k),
// b: out_c x 1. Output: (out_c*oh*ow) x B.
inline Var conv2d(Var x, Var w, Var b, const ConvSpec& s) {
    require(x->value.rows() == static_cast<Eigen::Index>(s.in_c) * s.in_h * s.in_w,
            "conv2d: input shape mismatch");
    require(w->value.rows() == s.out_c && w->value.cols() == static_cast<Eigen::Index>(s.in_c) * s.k * s.k,
            "conv2d: weight shape mismatch");
    const Eigen::Index batch = x->value.cols();
    const int oh = s.out_h(), ow = s.out_w();
    const Eigen::Index ohw = static_cast<Eigen::Index>(oh) * ow;
    Mat y(static_cast<Eigen::Index>(s.out_c) * ohw, batch);
    Mat cols;
    for (Eigen::Index n = 0; n < batch; ++n) {
        detail::im2col(x->value.col(n).data(), s, cols);
        Eigen::Map<Mat> ym(y.col(n).data(), ohw, s.out_c);
        ym.noalias() = cols.transpose() * w->value.transpose();
        ym.rowwise() += b->value.col(0).transpose();
    }
    return ad::make_op(std::move(y), {x, w, b}, [x, w, b, s, batch, ohw](ad::Node& n) mutable {
        Mat cols, dY;
        for (Eigen::Index i = 0; i < batch; ++i) {
            Eigen::Map<const Mat> gm(n.grad.col(i).data(), ohw, s.out_c);
            detail::im2col(x->value.col(i).data(), s, cols);
            if (w->needs_grad) w->ensure_grad().noalias() += gm.transpose() * cols.transpose();
            if (b->needs_grad) b->ensure_grad().col(0) += gm.colwise().sum().transpose();
            if (x->needs_grad) {
                dY.noalias() = w->value.transpose() * gm.transpose();
                detail::col2im_add(dY, s, x->ensure_grad().col(i).data());
            }
        }
    });
}

// Mean over the spatial extent of each channel: (C*H*W) x B -> C x B.
inline Var global_avg_pool(Var x, int c, int h, int w) {
    const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
    require(x->value.rows() == c * hw, "global_avg_pool: shape mismatch");
    const Eigen::Index batch = x->value.cols();
    Mat y(c, batch);
    for (Eigen::Index n = 0; n < batch; ++n)
        for (int ch = 0; ch < c; ++ch)
            y(ch, n) = x->value.col(n).segment(ch * hw, hw).mean();
    return ad::make_op(std::move(y), {x}, [x, c, hw, batch](ad::Node& n) mutable {
        if (!x->needs_grad) return;
        Mat& g = x->ensure_grad();
        const double inv = 1.0 / static_cast<double>(hw);
        for (Eigen::Index i = 0; i < batch; ++i)
            for (int ch = 0; ch < c; ++ch)
                g.col(i).segment(ch * hw, hw).array() += n.grad(ch, i) * inv;
    });
}

// Nearest-neighbour 2x upsampling.
inline Var upsample2x(Var x, int c, int h, int w) {
    require(x->value.rows() == static_cast<Eigen::Index>(c) * h * w, "upsample2x: shape mismatch");
    const Eigen::Index batch = x->value.cols();
    const int oh = 2 * h, ow = 2 * w;
    Mat y(static_cast<Eigen::Index>(c) * oh * ow, batch);
    for (Eigen::Index n = 0; n < batch; ++n) {
        const double* src = x->value.col(n).data();
        double* dst = y.col(n).data();
        for (int ch = 0; ch < c; ++ch)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx)
                    dst[(ch * oh + yy) * ow + xx] = src[(ch * h + yy / 2) * w + xx / 2];
    }
    return ad::make_op(std::move(y), {x}, [x, c, h, w, batch](ad::Node& n) mutable {
        if (!x->needs_grad) return;
        const int oh = 2 * h, ow = 2 * w;
        Mat& g = x->ensure_grad();
        for (Eigen::Index i = 0; i < batch; ++i) {
            const double* gs = n.grad.col(i).data();
            double* gd = g.col(i).data();
            for (int ch = 0; ch < c; ++ch)
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx)
                        gd[(ch * h + yy / 2) * w + xx / 2] += gs[(ch * oh + yy) * ow + xx];
        }
    });
}

// 2x2 average pooling on a plain matrix (no gradient; used for image pyramids).
inline Mat avg_pool2x_mat(const Mat& x, int c, int h, int w) {
    require(h % 2 == 0 && w % 2 == 0, "avg_pool2x: odd extent");
    const int oh = h / 2, ow = w / 2;
    Mat y(static_cast<Eigen::Index>(c) * oh * ow, x.cols());
    for (Eigen::Index n = 0; n < x.cols(); ++n) {
        const double* src = x.col(n).data();
        double* dst = y.col(n).data();
        for (int ch = 0; ch < c; ++ch)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx) {
                    const int y0 = 2 * yy, x0 = 2 * xx;
                    dst[(ch * oh + yy) * ow + xx] =
                        0.25 * (src[(ch * h + y0) * w + x0] + src[(ch * h + y0) * w + x0 + 1] +
                                src[(ch * h + y0 + 1) * w + x0] + src[(ch * h + y0 + 1) * w + x0 + 1]);
                }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping

struct ParamDict {
    std::vector<std::pair<std::string, Var>> items;

    void add(const std::string& name, Var v) { items.emplace_back(name, std::move(v)); }

    void merge(const std::string& prefix, const ParamDict& other) {
        for (const auto& [name, v] : other.items) items.emplace_back(prefix + "." + name, v);
    }

    std::vector<Var> vars() const {
        std::vector<Var> out;
        out.reserve(items.size());
        for (const auto& [name, v] : items) out.push_back(v);
        return out;
    }

    Var find(const std::string& name) const {
        for (const auto& [n, v] : items)
            if (n == name) return v;
        throw invalid_input("ParamDict: unknown parameter " + name);
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0;
        for (const auto& [n, v] : items) h ^= bytes_hash(v->value) + 0x9e3779b97f4a7c15ull + (h << 6);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Layers

class Linear {
public:
    Linear() = default;
    Linear(int in, int out, Rng& rng, double gain = 1.0)
        : w_(ad::leaf(rng.normal_matrix(out, in, gain / std::sqrt(static_cast<double>(in))))),
          b_(ad::leaf(Mat::Zero(out, 1))) {}

    Var operator()(Var x) const { return ad::add_colvec(ad::matmul(w_, std::move(x)), b_); }

    ParamDict params(const std::string& prefix) const {
        ParamDict d;
        d.add(prefix + ".w", w_);
        d.add(prefix + ".b", b_);
        return d;
    }

    Var weight() const { return w_; }
    Var bias() const { return b_; }

private:
    Var w_, b_;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const ConvSpec& spec, Rng& rng, double gain = 1.0) : spec_(spec) {
        const int fan_in = spec.in_c * spec.k * spec.k;
        w_ = ad::leaf(rng.normal_matrix(spec.out_c, fan_in, gain / std::sqrt(static_cast<double>(fan_in))));
        b_ = ad::leaf(Mat::Zero(spec.out_c, 1));
    }

    Var operator()(Var x) const { return conv2d(std::move(x), w_, b_, spec_); }

    const ConvSpec& spec() const { return spec_; }

    ParamDict params(const std::string& prefix) const {
        ParamDict d;
        d.add(prefix + ".w", w_);
        d.add(prefix + ".b", b_);
        return d;
    }

private:
    ConvSpec spec_{};
    Var w_, b_;
};

// Single GRU direction, batched over columns with a 0/1 validity mask per
// step. Masked steps keep the previous hidden state, so trailing padding
// cannot influence the result.
class GruCell {
public:
    GruCell() = default;
    GruCell(int input_dim, int hidden_dim, Rng& rng) : hidden_(hidden_dim) {
        const double g = 1.0 / std::sqrt(static_cast<double>(input_dim + hidden_dim));
        wz_ = ad::leaf(rng.normal_matrix(hidden_dim, input_dim + hidden_dim, g));
        wr_ = ad::leaf(rng.normal_matrix(hidden_dim, input_dim + hidden_dim, g));
        wh_ = ad::leaf(rng.normal_matrix(hidden_dim, input_dim + hidden_dim, g));
        bz_ = ad::leaf(Mat::Zero(hidden_dim, 1));
        br_ = ad::leaf(Mat::Zero(hidden_dim, 1));
        bh_ = ad::leaf(Mat::Zero(hidden_dim, 1));
    }

    int hidden_dim() const { return hidden_; }

    // One step: x (E x B), h (H x B), mask (1 x B of {0,1}).
    Var step(Var x, Var h, Var mask) const {
        using namespace ad;
        Var xh = concat_rows(x, h);
        Var z = sigmoid(add_colvec(matmul(wz_, xh), bz_));
        Var r = sigmoid(add_colvec(matmul(wr_, xh), br_));
        Var xrh = concat_rows(x, mul(r, h));
        Var cand = tanh_op(add_colvec(matmul(wh_, xrh), bh_));
        // h' = h + m * z * (cand - h)
        Var delta = mul_rowvec(mul(z, sub(cand, h)), mask);
        return add(h, delta);
    }

    ParamDict params(const std::string& prefix) const {
        ParamDict d;
        d.add(prefix + ".wz", wz_);
        d.add(prefix + ".wr", wr_);
        d.add(prefix + ".wh", wh_);
        d.add(prefix + ".bz", bz_);
        d.add(prefix + ".br", br_);
        d.add(prefix + ".bh", bh_);
        return d;
    }

private:
    int hidden_ = 0;
    Var wz_, wr_, wh_, bz_, br_, bh_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(std::vector<Var> params, const AdamConfig& cfg) : cfg_(cfg), params_(std::move(params)) {
        for (const auto& p : params_) {
            m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->ensure_grad().setZero();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const Mat& g = params_[i]->ensure_grad();
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            params_[i]->value.array() -=
                cfg_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
        }
    }

    long step_count() const { return t_; }
    const std::vector<Var>& params() const { return params_; }
    std::vector<Mat>& moment1() { return m_; }
    std::vector<Mat>& moment2() { return v_; }
    void set_step_count(long t) { t_ = t; }

private:
    AdamConfig cfg_{};
    std::vector<Var> params_;
    std::vector<Mat> m_, v_;
    long t_ = 0;
};

}  // namespace t2i::nn
