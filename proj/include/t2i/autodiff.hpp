#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "t2i/common.hpp"

// Reverse-mode automatic differentiation over Eigen double matrices.
// Graphs are built dynamically per step; leaves (parameters, inputs) persist
// across steps while interior nodes are freed when the root goes out of scope.

namespace t2i::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Mat value;
    Mat grad;  // lazily allocated, same shape as value
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    bool needs_grad = false;

    Mat& ensure_grad() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII switch for inference-only graph evaluation.
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGrad() { grad_enabled() = prev; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

inline Var constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

inline Var constant_scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

// Trainable or differentiable input.
inline Var leaf(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->needs_grad = true;
    return n;
}

inline Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled()) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p->needs_grad;
        if (needs) {
            n->needs_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(fn);
        }
    }
    return n;
}

inline void accumulate(Var& p, const Mat& g) {
    if (p->needs_grad) p->ensure_grad() += g;
}

// ---------------------------------------------------------------------------
// Arithmetic

inline Var add(Var a, Var b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "add: shape mismatch");
    return make_op(a->value + b->value, {a, b}, [a, b](Node& n) mutable {
        accumulate(a, n.grad);
        accumulate(b, n.grad);
    });
}

inline Var sub(Var a, Var b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "sub: shape mismatch");
    return make_op(a->value - b->value, {a, b}, [a, b](Node& n) mutable {
        accumulate(a, n.grad);
        if (b->needs_grad) b->ensure_grad() -= n.grad;
    });
}

inline Var mul(Var a, Var b) {  // elementwise
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "mul: shape mismatch");
    return make_op(a->value.cwiseProduct(b->value), {a, b}, [a, b](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad() += n.grad.cwiseProduct(b->value);
        if (b->needs_grad) b->ensure_grad() += n.grad.cwiseProduct(a->value);
    });
}

inline Var scalar_mul(Var a, double s) {
    return make_op(a->value * s, {a}, [a, s](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad() += n.grad * s;
    });
}

inline Var scalar_add(Var a, double s) {
    return make_op(a->value.array() + s, {a}, [a](Node& n) mutable { accumulate(a, n.grad); });
}

inline Var matmul(Var a, Var b) {
    require(a->value.cols() == b->value.rows(), "matmul: inner dimension mismatch");
    return make_op(a->value * b->value, {a, b}, [a, b](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().noalias() += n.grad * b->value.transpose();
        if (b->needs_grad) b->ensure_grad().noalias() += a->value.transpose() * n.grad;
    });
}

// a' * b without materialising the transpose node.
inline Var matmul_tn(Var a, Var b) {
    require(a->value.rows() == b->value.rows(), "matmul_tn: dimension mismatch");
    return make_op(a->value.transpose() * b->value, {a, b}, [a, b](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().noalias() += b->value * n.grad.transpose();
        if (b->needs_grad) b->ensure_grad().noalias() += a->value * n.grad;
    });
}

// a * b'
inline Var matmul_nt(Var a, Var b) {
    require(a->value.cols() == b->value.cols(), "matmul_nt: dimension mismatch");
    return make_op(a->value * b->value.transpose(), {a, b}, [a, b](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().noalias() += n.grad * b->value;
        if (b->needs_grad) b->ensure_grad().noalias() += n.grad.transpose() * a->value;
    });
}

inline Var transpose(Var a) {
    return make_op(a->value.transpose(), {a}, [a](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad() += n.grad.transpose();
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var leaky_relu(Var a, double slope = 0.2) {
    Mat y = a->value.unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
    return make_op(std::move(y), {a}, [a, slope](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat d = a->value.unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; });
        a->ensure_grad() += n.grad.cwiseProduct(d);
    });
}

inline Var relu(Var a) { return leaky_relu(std::move(a), 0.0); }

inline Var tanh_op(Var a) {
    Mat y = a->value.array().tanh();
    return make_op(y, {a}, [a, y](Node& n) mutable {
        if (a->needs_grad)
            a->ensure_grad().array() += n.grad.array() * (1.0 - y.array().square());
    });
}

inline Var sigmoid(Var a) {
    Mat y = a->value.unaryExpr([](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    return make_op(y, {a}, [a, y](Node& n) mutable {
        if (a->needs_grad)
            a->ensure_grad().array() += n.grad.array() * y.array() * (1.0 - y.array());
    });
}

inline Var exp_op(Var a) {
    Mat y = a->value.array().exp();
    return make_op(y, {a}, [a, y](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().array() += n.grad.array() * y.array();
    });
}

inline Var log_op(Var a) {
    require((a->value.array() > 0.0).all(), "log: non-positive input");
    return make_op(a->value.array().log(), {a}, [a](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().array() += n.grad.array() / a->value.array();
    });
}

inline Var square(Var a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// Broadcasts

// m x n plus m x 1, bias broadcast over columns.
inline Var add_colvec(Var a, Var b) {
    require(b->value.cols() == 1 && b->value.rows() == a->value.rows(),
            "add_colvec: bias must be rows x 1");
    Mat y = a->value.colwise() + Eigen::VectorXd(b->value.col(0));
    return make_op(std::move(y), {a, b}, [a, b](Node& n) mutable {
        accumulate(a, n.grad);
        if (b->needs_grad) b->ensure_grad() += n.grad.rowwise().sum();
    });
}

// m x n times 1 x n, columnwise scaling (masks).
inline Var mul_rowvec(Var a, Var r) {
    require(r->value.rows() == 1 && r->value.cols() == a->value.cols(),
            "mul_rowvec: scale must be 1 x cols");
    Mat y = a->value.array().rowwise() * r->value.row(0).array();
    return make_op(std::move(y), {a, r}, [a, r](Node& n) mutable {
        if (a->needs_grad)
            a->ensure_grad().array() += n.grad.array().rowwise() * r->value.row(0).array();
        if (r->needs_grad)
            r->ensure_grad() += (n.grad.cwiseProduct(a->value)).colwise().sum();
    });
}

// m x n times m x 1, rowwise scaling.
inline Var mul_colvec(Var a, Var c) {
    require(c->value.cols() == 1 && c->value.rows() == a->value.rows(),
            "mul_colvec: scale must be rows x 1");
    Mat y = a->value.array().colwise() * c->value.col(0).array();
    return make_op(std::move(y), {a, c}, [a, c](Node& n) mutable {
        if (a->needs_grad)
            a->ensure_grad().array() += n.grad.array().colwise() * c->value.col(0).array();
        if (c->needs_grad)
            c->ensure_grad() += (n.grad.cwiseProduct(a->value)).rowwise().sum();
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum_all(Var a) {
    return make_op(Mat::Constant(1, 1, a->value.sum()), {a}, [a](Node& n) mutable {
        if (a->needs_grad)
            a->ensure_grad().array() += n.grad(0, 0);
    });
}

inline Var mean_all(Var a) {
    const double inv = 1.0 / static_cast<double>(a->value.size());
    return make_op(Mat::Constant(1, 1, a->value.sum() * inv), {a}, [a, inv](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().array() += n.grad(0, 0) * inv;
    });
}

inline Var sum_rows(Var a) {  // m x n -> m x 1
    return make_op(a->value.rowwise().sum(), {a}, [a](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().colwise() += Eigen::VectorXd(n.grad.col(0));
    });
}

inline Var sum_cols(Var a) {  // m x n -> 1 x n
    return make_op(a->value.colwise().sum(), {a}, [a](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().rowwise() += Eigen::RowVectorXd(n.grad.row(0));
    });
}

inline Var mean_rows(Var a) { return scalar_mul(sum_rows(a), 1.0 / a->value.cols()); }
inline Var mean_cols(Var a) { return scalar_mul(sum_cols(a), 1.0 / a->value.rows()); }

// ---------------------------------------------------------------------------
// Softmax family (all max-shifted for stability)

inline Var softmax_rows(Var a) {
    Mat y = a->value;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double m = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    return make_op(y, {a}, [a, y](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat& g = a->ensure_grad();
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double dot = n.grad.row(r).dot(y.row(r));
            g.row(r).array() += y.row(r).array() * (n.grad.row(r).array() - dot);
        }
    });
}

inline Var softmax_cols(Var a) {
    Mat y = a->value;
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
        const double m = y.col(c).maxCoeff();
        y.col(c) = (y.col(c).array() - m).exp();
        y.col(c) /= y.col(c).sum();
    }
    return make_op(y, {a}, [a, y](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat& g = a->ensure_grad();
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
            const double dot = n.grad.col(c).dot(y.col(c));
            g.col(c).array() += y.col(c).array() * (n.grad.col(c).array() - dot);
        }
    });
}

// log(sum(exp(row))) per row -> m x 1.
inline Var lse_rows(Var a) {
    Mat y(a->value.rows(), 1);
    for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
        const double m = a->value.row(r).maxCoeff();
        y(r, 0) = m + std::log((a->value.row(r).array() - m).exp().sum());
    }
    return make_op(y, {a}, [a, y](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat& g = a->ensure_grad();
        for (Eigen::Index r = 0; r < a->value.rows(); ++r)
            g.row(r).array() +=
                n.grad(r, 0) * (a->value.row(r).array() - y(r, 0)).exp();
    });
}

// (1/scale) * log(sum(exp(scale * x))) over a column vector -> scalar.
inline Var lse_of_column(Var a, double scale) {
    require(a->value.cols() == 1, "lse_of_column: expects column vector");
    const Eigen::ArrayXd s = scale * a->value.col(0).array();
    const double m = s.maxCoeff();
    const double v = (m + std::log((s - m).exp().sum())) / scale;
    return make_op(Mat::Constant(1, 1, v), {a}, [a, scale, v](Node& n) mutable {
        if (!a->needs_grad) return;
        Eigen::ArrayXd w = (scale * (a->value.col(0).array() - v)).exp();
        a->ensure_grad().col(0).array() += n.grad(0, 0) * w;
    });
}

// ---------------------------------------------------------------------------
// Indexing and assembly

inline Var gather_entries(Var a, std::vector<Eigen::Index> rows, std::vector<Eigen::Index> cols) {
    require(rows.size() == cols.size(), "gather_entries: index size mismatch");
    Mat y(static_cast<Eigen::Index>(rows.size()), 1);
    for (std::size_t k = 0; k < rows.size(); ++k) y(static_cast<Eigen::Index>(k), 0) = a->value(rows[k], cols[k]);
    return make_op(std::move(y), {a}, [a, rows, cols](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat& g = a->ensure_grad();
        for (std::size_t k = 0; k < rows.size(); ++k)
            g(rows[k], cols[k]) += n.grad(static_cast<Eigen::Index>(k), 0);
    });
}

inline Var gather_diag(Var a) {
    const Eigen::Index n = std::min(a->value.rows(), a->value.cols());
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return gather_entries(std::move(a), idx, idx);
}

// Column lookup with repeats allowed (embedding tables).
inline Var gather_cols(Var a, std::vector<Eigen::Index> idx) {
    Mat y(a->value.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) y.col(static_cast<Eigen::Index>(k)) = a->value.col(idx[k]);
    return make_op(std::move(y), {a}, [a, idx](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat& g = a->ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k)
            g.col(idx[k]) += n.grad.col(static_cast<Eigen::Index>(k));
    });
}

inline Var concat_rows(Var a, Var b) {
    require(a->value.cols() == b->value.cols(), "concat_rows: column mismatch");
    Mat y(a->value.rows() + b->value.rows(), a->value.cols());
    y.topRows(a->value.rows()) = a->value;
    y.bottomRows(b->value.rows()) = b->value;
    return make_op(std::move(y), {a, b}, [a, b](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad() += n.grad.topRows(a->value.rows());
        if (b->needs_grad) b->ensure_grad() += n.grad.bottomRows(b->value.rows());
    });
}

inline Var concat_cols(Var a, Var b) {
    require(a->value.rows() == b->value.rows(), "concat_cols: row mismatch");
    Mat y(a->value.rows(), a->value.cols() + b->value.cols());
    y.leftCols(a->value.cols()) = a->value;
    y.rightCols(b->value.cols()) = b->value;
    return make_op(std::move(y), {a, b}, [a, b](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad() += n.grad.leftCols(a->value.cols());
        if (b->needs_grad) b->ensure_grad() += n.grad.rightCols(b->value.cols());
    });
}

inline Var concat_cols(const std::vector<Var>& vs) {
    require(!vs.empty(), "concat_cols: empty list");
    Var acc = vs[0];
    for (std::size_t i = 1; i < vs.size(); ++i) acc = concat_cols(acc, vs[i]);
    return acc;
}

inline Var slice_rows(Var a, Eigen::Index r0, Eigen::Index count) {
    require(r0 >= 0 && count >= 0 && r0 + count <= a->value.rows(), "slice_rows: out of range");
    Mat y = a->value.middleRows(r0, count);
    return make_op(std::move(y), {a}, [a, r0, count](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().middleRows(r0, count) += n.grad;
    });
}

inline Var slice_cols(Var a, Eigen::Index c0, Eigen::Index count) {
    require(c0 >= 0 && count >= 0 && c0 + count <= a->value.cols(), "slice_cols: out of range");
    Mat y = a->value.middleCols(c0, count);
    return make_op(std::move(y), {a}, [a, c0, count](Node& n) mutable {
        if (a->needs_grad) a->ensure_grad().middleCols(c0, count) += n.grad;
    });
}

// Assemble a rows x cols matrix from scalar nodes in row-major order.
inline Var stack_scalars(const std::vector<Var>& scalars, Eigen::Index rows, Eigen::Index cols) {
    require(static_cast<Eigen::Index>(scalars.size()) == rows * cols,
            "stack_scalars: count mismatch");
    Mat y(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            y(r, c) = scalars[static_cast<std::size_t>(r * cols + c)]->value(0, 0);
    std::vector<Var> parents = scalars;
    return make_op(std::move(y), std::move(parents), [scalars, rows, cols](Node& n) {
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) {
                auto& p = scalars[static_cast<std::size_t>(r * cols + c)];
                if (p->needs_grad) p->ensure_grad()(0, 0) += n.grad(r, c);
            }
    });
}

// View one column of x as a rows x cols matrix (column-major element order).
inline Var col_to_matrix(Var x, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
    require(rows * cols == x->value.rows(), "col_to_matrix: size mismatch");
    require(col >= 0 && col < x->value.cols(), "col_to_matrix: column out of range");
    Mat y = Eigen::Map<const Mat>(x->value.col(col).data(), rows, cols);
    return make_op(std::move(y), {x}, [x, col, rows, cols](Node& n) mutable {
        if (!x->needs_grad) return;
        x->ensure_grad().col(col) +=
            Eigen::Map<const Eigen::VectorXd>(n.grad.data(), rows * cols);
    });
}

inline Var softplus(Var a) {
    Mat y = a->value.unaryExpr([](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    });
    return make_op(std::move(y), {a}, [a](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat d = a->value.unaryExpr([](double x) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
        a->ensure_grad() += n.grad.cwiseProduct(d);
    });
}

// ---------------------------------------------------------------------------
// Geometry

inline Var normalize_rows(Var a, double min_norm = 1e-300) {
    Eigen::VectorXd norms = a->value.rowwise().norm();
    require((norms.array() > min_norm).all(), "normalize_rows: zero-norm row");
    Mat y = a->value.array().colwise() / norms.array();
    return make_op(y, {a}, [a, y, norms](Node& n) mutable {
        if (!a->needs_grad) return;
        Mat& g = a->ensure_grad();
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double dot = n.grad.row(r).dot(y.row(r));
            g.row(r) += (n.grad.row(r) - dot * y.row(r)) / norms(r);
        }
    });
}

// Cosine similarity between matching rows of a and b -> m x 1.
inline Var rowwise_cosine(Var a, Var b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "rowwise_cosine: shape mismatch");
    const Eigen::Index m = a->value.rows();
    Eigen::VectorXd na = a->value.rowwise().norm(), nb = b->value.rowwise().norm();
    require((na.array() > 0).all() && (nb.array() > 0).all(), "rowwise_cosine: zero-norm row");
    Mat y(m, 1);
    for (Eigen::Index r = 0; r < m; ++r)
        y(r, 0) = a->value.row(r).dot(b->value.row(r)) / (na(r) * nb(r));
    return make_op(y, {a, b}, [a, b, y, na, nb](Node& n) mutable {
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double g = n.grad(r, 0);
            if (g == 0.0) continue;
            if (a->needs_grad)
                a->ensure_grad().row(r) +=
                    g * (b->value.row(r) / (na(r) * nb(r)) -
                         y(r, 0) * a->value.row(r) / (na(r) * na(r)));
            if (b->needs_grad)
                b->ensure_grad().row(r) +=
                    g * (a->value.row(r) / (na(r) * nb(r)) -
                         y(r, 0) * b->value.row(r) / (nb(r) * nb(r)));
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Var& root) {
    require(root->value.size() == 1, "backward: root must be scalar");
    // Iterative post-order DFS; recursion would overflow on long RNN chains.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace t2i::ad
