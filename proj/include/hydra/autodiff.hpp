#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

#include "hydra/errors.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

enum class Op {
    Const,
    Input,
    Param,
    MatMul,
    Transpose,
    ConcatRows,
    SliceRows,
    Reshape,
    Add,
    Sub,
    Mul,
    ScalarMul,
    SumAll,
    SumAxis,
    MeanAxis,
    Exp,
    Log,
    Relu,
    L2NormalizeRows,
    LayerNormRows,
    SoftmaxRows,
    GroupedAttention,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Const: return "const";
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::ConcatRows: return "concat_rows";
        case Op::SliceRows: return "slice_rows";
        case Op::Reshape: return "reshape";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ScalarMul: return "scalar_mul";
        case Op::SumAll: return "sum_all";
        case Op::SumAxis: return "sum_axis";
        case Op::MeanAxis: return "mean_axis";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Relu: return "relu";
        case Op::L2NormalizeRows: return "l2_normalize";
        case Op::LayerNormRows: return "layer_norm";
        case Op::SoftmaxRows: return "softmax";
        case Op::GroupedAttention: return "attention";
    }
    return "?";
}

/// Reverse-mode differentiation tape. Nodes are appended in topological
/// order and evaluated eagerly; backward() replays the tape in reverse.
/// Values and gradients are cached per node. A Graph is built fresh for
/// each loss evaluation; parameters live outside in a ParamStore.
class Graph {
public:
    using Id = int;

    struct Node {
        Op op;
        std::vector<Id> inputs;
        Shape shape;
        double scalar = 0.0;   // ScalarMul factor / LayerNorm epsilon
        int axis = 0;          // SumAxis / MeanAxis
        int begin = 0, end = 0;  // SliceRows range
        std::string name;      // leaves only
        bool trainable = false;
    };

    std::size_t size() const { return nodes_.size(); }
    const Node& node(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }

    const Tensor& value(Id id) const { return values_[static_cast<std::size_t>(id)]; }

    /// Gradient of the last backward() target w.r.t. node `id`
    /// (zeros if the node is unreachable from the loss).
    const Tensor& grad(Id id) const {
        const auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty() && !values_[static_cast<std::size_t>(id)].empty()) {
            zero_fallback_ = Tensor(nodes_[static_cast<std::size_t>(id)].shape);
            return zero_fallback_;
        }
        return g;
    }

    // ---- leaves ----

    Id constant(Tensor v) { return add_leaf(Op::Const, std::move(v), "", false); }

    Id input(const std::string& name, Tensor v) {
        return add_leaf(Op::Input, std::move(v), name, false);
    }

    Id param(const std::string& name, Tensor v, bool trainable = true) {
        return add_leaf(Op::Param, std::move(v), name, trainable);
    }

    // ---- primitives ----

    Id matmul(Id a, Id b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
            throw ShapeError(err_prefix("matmul") + shape_str(A.shape()) + " x " +
                             shape_str(B.shape()));
        }
        return add_node({Op::MatMul, {a, b}, Shape{A.shape()[0], B.shape()[1]}});
    }

    Id transpose(Id a) {
        const Tensor& A = value(a);
        if (A.rank() != 2) throw ShapeError(err_prefix("transpose") + shape_str(A.shape()));
        return add_node({Op::Transpose, {a}, Shape{A.shape()[1], A.shape()[0]}});
    }

    /// Stack 2-D blocks with equal column counts (or concatenate 1-D vectors).
    Id concat_rows(const std::vector<Id>& parts) {
        if (parts.empty()) throw ShapeError(err_prefix("concat_rows") + "no inputs");
        const Tensor& first = value(parts[0]);
        const std::size_t r = first.rank();
        if (r != 1 && r != 2) throw ShapeError(err_prefix("concat_rows") + shape_str(first.shape()));
        std::size_t total = 0;
        for (Id p : parts) {
            const Tensor& t = value(p);
            if (t.rank() != r || (r == 2 && t.shape()[1] != first.shape()[1])) {
                throw ShapeError(err_prefix("concat_rows") + shape_str(t.shape()) + " vs " +
                                 shape_str(first.shape()));
            }
            total += t.shape()[0];
        }
        Shape out = r == 2 ? Shape{total, first.shape()[1]} : Shape{total};
        return add_node({Op::ConcatRows, parts, out});
    }

    Id slice_rows(Id a, int begin, int end) {
        const Tensor& A = value(a);
        if (A.rank() != 2 || begin < 0 || end > static_cast<int>(A.shape()[0]) || begin >= end) {
            throw ShapeError(err_prefix("slice_rows") + shape_str(A.shape()) + " [" +
                             std::to_string(begin) + "," + std::to_string(end) + ")");
        }
        Node n{Op::SliceRows, {a}, Shape{static_cast<std::size_t>(end - begin), A.shape()[1]}};
        n.begin = begin;
        n.end = end;
        return add_node(std::move(n));
    }

    Id reshape(Id a, Shape shape) {
        const Tensor& A = value(a);
        if (shape_numel(shape) != A.numel()) {
            throw ShapeError(err_prefix("reshape") + shape_str(A.shape()) + " -> " +
                             shape_str(shape));
        }
        return add_node({Op::Reshape, {a}, std::move(shape)});
    }

    Id add(Id a, Id b) { return binary(Op::Add, a, b); }
    Id sub(Id a, Id b) { return binary(Op::Sub, a, b); }
    Id mul(Id a, Id b) { return binary(Op::Mul, a, b); }

    Id scalar_mul(Id a, double c) {
        if (!std::isfinite(c)) throw NumericError(err_prefix("scalar_mul") + "non-finite factor");
        Node n{Op::ScalarMul, {a}, value(a).shape()};
        n.scalar = c;
        return add_node(std::move(n));
    }

    Id sum_all(Id a) { return add_node({Op::SumAll, {a}, Shape{1}}); }

    Id sum_axis(Id a, int axis) { return reduce(Op::SumAxis, a, axis); }
    Id mean_axis(Id a, int axis) { return reduce(Op::MeanAxis, a, axis); }

    Id exp_(Id a) { return unary(Op::Exp, a); }
    Id log_(Id a) { return unary(Op::Log, a); }
    Id relu(Id a) { return unary(Op::Relu, a); }

    /// Scaled-dot-product attention over `groups` row blocks:
    /// out rows of block i = softmax(scale * Q_i K_i^T) V_i.
    /// Fused so a whole batch costs one node per head.
    Id attention(Id q, Id k, Id v, int groups, double scale) {
        const Tensor& Q = value(q);
        const Tensor& K = value(k);
        const Tensor& V = value(v);
        if (Q.rank() != 2 || Q.shape() != K.shape() || Q.shape() != V.shape() || groups < 1 ||
            Q.shape()[0] % static_cast<std::size_t>(groups) != 0) {
            throw ShapeError(err_prefix("attention") + shape_str(Q.shape()) + " groups " +
                             std::to_string(groups));
        }
        Node n{Op::GroupedAttention, {q, k, v}, Q.shape()};
        n.axis = groups;
        n.scalar = scale;
        return add_node(std::move(n));
    }

    /// Normalize each row (or a 1-D vector) to unit Euclidean norm.
    Id l2_normalize(Id a) { return unary(Op::L2NormalizeRows, a); }

    /// Standardize each row over the last axis: (x - mean) / sqrt(var + eps).
    Id layer_norm(Id a, double eps = 1e-5) {
        Node n{Op::LayerNormRows, {a}, value(a).shape()};
        n.scalar = eps;
        return add_node(std::move(n));
    }

    Id softmax_rows(Id a) { return unary(Op::SoftmaxRows, a); }

    // ---- conveniences built from primitives ----

    /// Scalar dot product of two equally shaped tensors.
    Id dot(Id a, Id b) { return sum_all(mul(a, b)); }

    // ---- execution ----

    /// Re-evaluate the whole graph with new values bound to named Input
    /// or Param leaves. Values of every node are recomputed in
    /// topological order; read them back via value(). Gradients are
    /// cleared.
    void eval(const std::map<std::string, Tensor>& inputs) {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (n.op == Op::Input || n.op == Op::Param) {
                auto it = inputs.find(n.name);
                if (it != inputs.end()) {
                    if (it->second.shape() != n.shape) {
                        throw ShapeError("eval: input '" + n.name + "' has shape " +
                                         shape_str(it->second.shape()) + ", graph declares " +
                                         shape_str(n.shape));
                    }
                    values_[i] = it->second;
                }
            } else if (n.op != Op::Const) {
                values_[i] = execute(n);
                check_finite(values_[i], static_cast<Id>(i));
            }
        }
        std::fill(grads_.begin(), grads_.end(), Tensor());
    }

    /// Reverse pass from a scalar loss node. Returns the gradient for
    /// every trainable Param leaf (zeros when the loss does not reach it).
    std::map<std::string, Tensor> backward(Id loss) {
        if (value(loss).numel() != 1) {
            throw ShapeError("backward: loss node " + std::to_string(loss) + " has shape " +
                             shape_str(value(loss).shape()) + ", expected a scalar");
        }
        std::fill(grads_.begin(), grads_.end(), Tensor());
        grads_[static_cast<std::size_t>(loss)] = Tensor(value(loss).shape(), 1.0);
        for (Id id = loss; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            const Tensor& g = grads_[static_cast<std::size_t>(id)];
            if (g.empty() || n.inputs.empty()) continue;
            accumulate_adjoints(n, g, static_cast<Id>(id));
        }
        std::map<std::string, Tensor> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.op == Op::Param && n.trainable) {
                out[n.name] = grads_[i].empty() ? Tensor(n.shape) : grads_[i];
            }
        }
        return out;
    }

private:
    std::vector<Node> nodes_;
    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    mutable Tensor zero_fallback_;

    std::string err_prefix(const char* op) const {
        return std::string(op) + " (node " + std::to_string(nodes_.size()) + "): ";
    }

    Id add_leaf(Op op, Tensor v, const std::string& name, bool trainable) {
        Node n{op, {}, v.shape()};
        n.name = name;
        n.trainable = trainable;
        nodes_.push_back(std::move(n));
        check_finite(v, static_cast<Id>(nodes_.size() - 1));
        values_.push_back(std::move(v));
        grads_.emplace_back();
        return static_cast<Id>(nodes_.size() - 1);
    }

    Id add_node(Node n) {
        nodes_.push_back(std::move(n));
        Tensor v = execute(nodes_.back());
        check_finite(v, static_cast<Id>(nodes_.size() - 1));
        values_.push_back(std::move(v));
        grads_.emplace_back();
        return static_cast<Id>(nodes_.size() - 1);
    }

    void check_finite(const Tensor& v, Id id) const {
        if (!v.all_finite()) {
            throw NumericError("non-finite value produced by node " + std::to_string(id) + " (" +
                               op_name(nodes_[static_cast<std::size_t>(id)].op) + ")");
        }
    }

    Id unary(Op op, Id a) { return add_node({op, {a}, value(a).shape()}); }

    // Elementwise binary. Shapes must match, or b may be a 1-D vector
    // broadcast across the rows of a 2-D a.
    Id binary(Op op, Id a, Id b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        const bool same = A.shape() == B.shape();
        const bool rowb = A.rank() == 2 && B.rank() == 1 && B.shape()[0] == A.shape()[1];
        if (!same && !rowb) {
            throw ShapeError(err_prefix(op_name(op)) + shape_str(A.shape()) + " vs " +
                             shape_str(B.shape()));
        }
        return add_node({op, {a, b}, A.shape()});
    }

    Id reduce(Op op, Id a, int axis) {
        const Tensor& A = value(a);
        if (A.rank() == 1) {
            if (axis != 0) throw ShapeError(err_prefix(op_name(op)) + "axis out of range");
            Node n{op, {a}, Shape{1}};
            n.axis = 0;
            return add_node(std::move(n));
        }
        if (A.rank() != 2 || (axis != 0 && axis != 1)) {
            throw ShapeError(err_prefix(op_name(op)) + shape_str(A.shape()) + " axis " +
                             std::to_string(axis));
        }
        Node n{op, {a}, Shape{axis == 0 ? A.shape()[1] : A.shape()[0]}};
        n.axis = axis;
        return add_node(std::move(n));
    }

    // ---- forward kernels ----

    // C[m x n] += A . B with A(i,p) read through a row-major or
    // transposed view and B row-major [k x n]. Register-blocked 4x8
    // tiles keep the inner loop compute bound; per-element accumulation
    // order (p ascending) is the same on every path, so results are
    // deterministic for a given build.
    template <bool TransA>
    static void matmul_tiles(const double* a, const double* b, double* c, std::size_t m,
                             std::size_t k, std::size_t n) {
        auto at = [&](std::size_t i, std::size_t p) { return TransA ? a[p * m + i] : a[i * k + p]; };
        std::size_t i = 0;
#if defined(__AVX2__) && defined(__FMA__)
        for (; i + 4 <= m; i += 4) {
            std::size_t j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256d acc00 = _mm256_loadu_pd(c + (i + 0) * n + j);
                __m256d acc01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
                __m256d acc10 = _mm256_loadu_pd(c + (i + 1) * n + j);
                __m256d acc11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
                __m256d acc20 = _mm256_loadu_pd(c + (i + 2) * n + j);
                __m256d acc21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
                __m256d acc30 = _mm256_loadu_pd(c + (i + 3) * n + j);
                __m256d acc31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
                for (std::size_t p = 0; p < k; ++p) {
                    const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
                    const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
                    __m256d av = _mm256_set1_pd(at(i + 0, p));
                    acc00 = _mm256_fmadd_pd(av, b0, acc00);
                    acc01 = _mm256_fmadd_pd(av, b1, acc01);
                    av = _mm256_set1_pd(at(i + 1, p));
                    acc10 = _mm256_fmadd_pd(av, b0, acc10);
                    acc11 = _mm256_fmadd_pd(av, b1, acc11);
                    av = _mm256_set1_pd(at(i + 2, p));
                    acc20 = _mm256_fmadd_pd(av, b0, acc20);
                    acc21 = _mm256_fmadd_pd(av, b1, acc21);
                    av = _mm256_set1_pd(at(i + 3, p));
                    acc30 = _mm256_fmadd_pd(av, b0, acc30);
                    acc31 = _mm256_fmadd_pd(av, b1, acc31);
                }
                _mm256_storeu_pd(c + (i + 0) * n + j, acc00);
                _mm256_storeu_pd(c + (i + 0) * n + j + 4, acc01);
                _mm256_storeu_pd(c + (i + 1) * n + j, acc10);
                _mm256_storeu_pd(c + (i + 1) * n + j + 4, acc11);
                _mm256_storeu_pd(c + (i + 2) * n + j, acc20);
                _mm256_storeu_pd(c + (i + 2) * n + j + 4, acc21);
                _mm256_storeu_pd(c + (i + 3) * n + j, acc30);
                _mm256_storeu_pd(c + (i + 3) * n + j + 4, acc31);
            }
            for (; j < n; ++j) {
                for (std::size_t r = 0; r < 4; ++r) {
                    double s = c[(i + r) * n + j];
                    for (std::size_t p = 0; p < k; ++p) s += at(i + r, p) * b[p * n + j];
                    c[(i + r) * n + j] = s;
                }
            }
        }
#endif
        for (; i < m; ++i) {
            double* crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = at(i, p);
                if (av == 0.0) continue;
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }

    static void matmul_accum(const Tensor& A, const Tensor& B, Tensor& C, bool transA,
                             bool transB) {
        const std::size_t m = transA ? A.shape()[1] : A.shape()[0];
        const std::size_t k = transA ? A.shape()[0] : A.shape()[1];
        const std::size_t ncols = transB ? B.shape()[0] : B.shape()[1];
        const double* a = A.data();
        const double* b = B.data();
        double* c = C.data();
        if (!transB) {
            if (transA) {
                matmul_tiles<true>(a, b, c, m, k, ncols);
            } else {
                matmul_tiles<false>(a, b, c, m, k, ncols);
            }
        } else if (!transA) {
            // materialize B^T so the inner loop runs unit-stride
            std::vector<double> bt(k * ncols);
            for (std::size_t j = 0; j < ncols; ++j) {
                for (std::size_t p = 0; p < k; ++p) bt[p * ncols + j] = b[j * k + p];
            }
            matmul_tiles<false>(a, bt.data(), c, m, k, ncols);
        } else {
            for (std::size_t i = 0; i < m; ++i) {
                double* crow = c + i * ncols;
                for (std::size_t j = 0; j < ncols; ++j) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
                    crow[j] += s;
                }
            }
        }
    }

    Tensor execute(const Node& n) const {
        switch (n.op) {
            case Op::Const:
            case Op::Input:
            case Op::Param:
                throw Error("leaf nodes have no kernel");
            case Op::MatMul: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor C(n.shape);
                matmul_accum(A, B, C, false, false);
                return C;
            }
            case Op::Transpose: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                const std::size_t r = A.shape()[0], c = A.shape()[1];
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) C[j * r + i] = A[i * c + j];
                return C;
            }
            case Op::ConcatRows: {
                Tensor C(n.shape);
                std::size_t off = 0;
                for (Id p : n.inputs) {
                    const Tensor& t = value(p);
                    std::copy(t.data(), t.data() + t.numel(), C.data() + off);
                    off += t.numel();
                }
                return C;
            }
            case Op::SliceRows: {
                const Tensor& A = value(n.inputs[0]);
                const std::size_t c = A.shape()[1];
                Tensor C(n.shape);
                std::copy(A.data() + static_cast<std::size_t>(n.begin) * c,
                          A.data() + static_cast<std::size_t>(n.end) * c, C.data());
                return C;
            }
            case Op::Reshape: {
                Tensor C = value(n.inputs[0]);
                return Tensor(n.shape, std::move(C.vec()));
            }
            case Op::Add:
            case Op::Sub:
            case Op::Mul: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor C(n.shape);
                const std::size_t total = A.numel();
                const std::size_t bn = B.numel();
                for (std::size_t i = 0; i < total; ++i) {
                    const double bv = B[bn == total ? i : i % bn];
                    C[i] = n.op == Op::Add ? A[i] + bv
                         : n.op == Op::Sub ? A[i] - bv
                                           : A[i] * bv;
                }
                return C;
            }
            case Op::ScalarMul: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                for (std::size_t i = 0; i < A.numel(); ++i) C[i] = A[i] * n.scalar;
                return C;
            }
            case Op::SumAll: {
                const Tensor& A = value(n.inputs[0]);
                double s = 0.0;
                for (std::size_t i = 0; i < A.numel(); ++i) s += A[i];
                return Tensor::scalar(s);
            }
            case Op::SumAxis:
            case Op::MeanAxis: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                if (A.rank() == 1) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < A.numel(); ++i) s += A[i];
                    C[0] = n.op == Op::MeanAxis ? s / static_cast<double>(A.numel()) : s;
                    return C;
                }
                const std::size_t r = A.shape()[0], c = A.shape()[1];
                if (n.axis == 0) {
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) C[j] += A[i * c + j];
                    if (n.op == Op::MeanAxis)
                        for (std::size_t j = 0; j < c; ++j) C[j] /= static_cast<double>(r);
                } else {
                    for (std::size_t i = 0; i < r; ++i) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < c; ++j) s += A[i * c + j];
                        C[i] = n.op == Op::MeanAxis ? s / static_cast<double>(c) : s;
                    }
                }
                return C;
            }
            case Op::Exp:
            case Op::Log:
            case Op::Relu: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                for (std::size_t i = 0; i < A.numel(); ++i) {
                    C[i] = n.op == Op::Exp    ? std::exp(A[i])
                         : n.op == Op::Log    ? std::log(A[i])
                                              : (A[i] > 0.0 ? A[i] : 0.0);
                }
                return C;
            }
            case Op::L2NormalizeRows: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                const std::size_t r = A.rows(), c = A.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < c; ++j) s += A[i * c + j] * A[i * c + j];
                    if (s == 0.0) {
                        throw NumericError("l2_normalize: zero vector in row " + std::to_string(i));
                    }
                    const double inv = 1.0 / std::sqrt(s);
                    for (std::size_t j = 0; j < c; ++j) C[i * c + j] = A[i * c + j] * inv;
                }
                return C;
            }
            case Op::LayerNormRows: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                const std::size_t r = A.rows(), c = A.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    double mean = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mean += A[i * c + j];
                    mean /= static_cast<double>(c);
                    double var = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double d = A[i * c + j] - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(c);
                    const double inv = 1.0 / std::sqrt(var + n.scalar);
                    for (std::size_t j = 0; j < c; ++j) C[i * c + j] = (A[i * c + j] - mean) * inv;
                }
                return C;
            }
            case Op::SoftmaxRows: {
                const Tensor& A = value(n.inputs[0]);
                Tensor C(n.shape);
                const std::size_t r = A.rows(), c = A.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    double mx = A[i * c];
                    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, A[i * c + j]);
                    double s = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        C[i * c + j] = std::exp(A[i * c + j] - mx);
                        s += C[i * c + j];
                    }
                    for (std::size_t j = 0; j < c; ++j) C[i * c + j] /= s;
                }
                return C;
            }
            case Op::GroupedAttention: {
                const Tensor& Q = value(n.inputs[0]);
                const Tensor& K = value(n.inputs[1]);
                const Tensor& V = value(n.inputs[2]);
                Tensor C(n.shape);
                const std::size_t dh = Q.shape()[1];
                const std::size_t groups = static_cast<std::size_t>(n.axis);
                const std::size_t len = Q.shape()[0] / groups;
                std::vector<double> probs(len * len);
                for (std::size_t gi = 0; gi < groups; ++gi) {
                    const std::size_t off = gi * len * dh;
                    attention_probs(Q.data() + off, K.data() + off, len, dh, n.scalar,
                                    probs.data());
                    matmul_tiles<false>(probs.data(), V.data() + off, C.data() + off, len, len,
                                        dh);
                }
                return C;
            }
        }
        throw Error("unreachable op");
    }

    /// probs[len x len] = softmax_rows(scale * Q K^T) for one group.
    /// Mirrors the composed transpose/matmul/scale/softmax node sequence
    /// so both attention paths agree bitwise.
    static void attention_probs(const double* q, const double* k, std::size_t len,
                                std::size_t dh, double scale, double* probs) {
        std::vector<double> kt(dh * len);
        for (std::size_t j = 0; j < len; ++j) {
            for (std::size_t p = 0; p < dh; ++p) kt[p * len + j] = k[j * dh + p];
        }
        std::fill(probs, probs + len * len, 0.0);
        matmul_tiles<false>(q, kt.data(), probs, len, dh, len);
        for (std::size_t i = 0; i < len * len; ++i) probs[i] *= scale;
        for (std::size_t i = 0; i < len; ++i) {
            double* row = probs + i * len;
            double mx = row[0];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                row[j] = std::exp(row[j] - mx);
                s += row[j];
            }
            for (std::size_t j = 0; j < len; ++j) row[j] /= s;
        }
    }

    // ---- adjoints ----

    Tensor& grad_buf(Id id) {
        Tensor& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g = Tensor(nodes_[static_cast<std::size_t>(id)].shape);
        return g;
    }

    void accumulate_adjoints(const Node& n, const Tensor& g, Id id) {
        switch (n.op) {
            case Op::Const:
            case Op::Input:
            case Op::Param:
                return;
            case Op::MatMul: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                matmul_accum(g, B, grad_buf(n.inputs[0]), false, true);   // dA += G B^T
                matmul_accum(A, g, grad_buf(n.inputs[1]), true, false);   // dB += A^T G
                return;
            }
            case Op::Transpose: {
                Tensor& d = grad_buf(n.inputs[0]);
                const std::size_t r = n.shape[0], c = n.shape[1];
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) d[j * r + i] += g[i * c + j];
                return;
            }
            case Op::ConcatRows: {
                std::size_t off = 0;
                for (Id p : n.inputs) {
                    Tensor& d = grad_buf(p);
                    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[off + i];
                    off += d.numel();
                }
                return;
            }
            case Op::SliceRows: {
                Tensor& d = grad_buf(n.inputs[0]);
                const std::size_t c = n.shape[1];
                const std::size_t off = static_cast<std::size_t>(n.begin) * c;
                for (std::size_t i = 0; i < g.numel(); ++i) d[off + i] += g[i];
                return;
            }
            case Op::Reshape: {
                Tensor& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
                return;
            }
            case Op::Add:
            case Op::Sub: {
                Tensor& da = grad_buf(n.inputs[0]);
                Tensor& db = grad_buf(n.inputs[1]);
                const double sgn = n.op == Op::Add ? 1.0 : -1.0;
                const std::size_t bn = db.numel();
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    da[i] += g[i];
                    db[i % bn] += sgn * g[i];
                }
                return;
            }
            case Op::Mul: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor& da = grad_buf(n.inputs[0]);
                Tensor& db = grad_buf(n.inputs[1]);
                const std::size_t bn = B.numel();
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    da[i] += g[i] * B[i % bn];
                    db[i % bn] += g[i] * A[i];
                }
                return;
            }
            case Op::ScalarMul: {
                Tensor& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * n.scalar;
                return;
            }
            case Op::SumAll: {
                Tensor& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[0];
                return;
            }
            case Op::SumAxis:
            case Op::MeanAxis: {
                const Tensor& A = value(n.inputs[0]);
                Tensor& d = grad_buf(n.inputs[0]);
                if (A.rank() == 1) {
                    const double s =
                        n.op == Op::MeanAxis ? g[0] / static_cast<double>(A.numel()) : g[0];
                    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += s;
                    return;
                }
                const std::size_t r = A.shape()[0], c = A.shape()[1];
                const double div = n.op == Op::MeanAxis
                                       ? 1.0 / static_cast<double>(n.axis == 0 ? r : c)
                                       : 1.0;
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        d[i * c + j] += div * g[n.axis == 0 ? j : i];
                return;
            }
            case Op::Exp: {
                const Tensor& Y = value(id);
                Tensor& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * Y[i];
                return;
            }
            case Op::Log: {
                const Tensor& A = value(n.inputs[0]);
                Tensor& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] / A[i];
                return;
            }
            case Op::Relu: {
                const Tensor& A = value(n.inputs[0]);
                Tensor& d = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    if (A[i] > 0.0) d[i] += g[i];
                }
                return;
            }
            case Op::L2NormalizeRows: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& Y = value(id);
                Tensor& d = grad_buf(n.inputs[0]);
                const std::size_t r = A.rows(), c = A.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    double norm = 0.0, gy = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        norm += A[i * c + j] * A[i * c + j];
                        gy += g[i * c + j] * Y[i * c + j];
                    }
                    norm = std::sqrt(norm);
                    for (std::size_t j = 0; j < c; ++j) {
                        d[i * c + j] += (g[i * c + j] - Y[i * c + j] * gy) / norm;
                    }
                }
                return;
            }
            case Op::LayerNormRows: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& Y = value(id);
                Tensor& d = grad_buf(n.inputs[0]);
                const std::size_t r = A.rows(), c = A.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    double mean = 0.0, var = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mean += A[i * c + j];
                    mean /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dv = A[i * c + j] - mean;
                        var += dv * dv;
                    }
                    var /= static_cast<double>(c);
                    const double inv = 1.0 / std::sqrt(var + n.scalar);
                    double gmean = 0.0, gymean = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        gmean += g[i * c + j];
                        gymean += g[i * c + j] * Y[i * c + j];
                    }
                    gmean /= static_cast<double>(c);
                    gymean /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        d[i * c + j] += inv * (g[i * c + j] - gmean - Y[i * c + j] * gymean);
                    }
                }
                return;
            }
            case Op::SoftmaxRows: {
                const Tensor& Y = value(id);
                Tensor& d = grad_buf(n.inputs[0]);
                const std::size_t r = Y.rows(), c = Y.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    double gy = 0.0;
                    for (std::size_t j = 0; j < c; ++j) gy += g[i * c + j] * Y[i * c + j];
                    for (std::size_t j = 0; j < c; ++j) {
                        d[i * c + j] += Y[i * c + j] * (g[i * c + j] - gy);
                    }
                }
                return;
            }
            case Op::GroupedAttention: {
                const Tensor& Q = value(n.inputs[0]);
                const Tensor& K = value(n.inputs[1]);
                const Tensor& V = value(n.inputs[2]);
                Tensor& dq = grad_buf(n.inputs[0]);
                Tensor& dk = grad_buf(n.inputs[1]);
                Tensor& dv = grad_buf(n.inputs[2]);
                const std::size_t dh = Q.shape()[1];
                const std::size_t groups = static_cast<std::size_t>(n.axis);
                const std::size_t len = Q.shape()[0] / groups;
                std::vector<double> probs(len * len), dprobs(len * len), dscores(len * len);
                std::vector<double> scratch_t(std::max(len, dh) * std::max(len, dh));
                for (std::size_t gi = 0; gi < groups; ++gi) {
                    const std::size_t off = gi * len * dh;
                    const double* gg = g.data() + off;
                    attention_probs(Q.data() + off, K.data() + off, len, dh, n.scalar,
                                    probs.data());
                    // dV += P^T G
                    matmul_tiles<true>(probs.data(), gg, dv.data() + off, len, len, dh);
                    // dP = G V^T
                    std::fill(dprobs.begin(), dprobs.end(), 0.0);
                    for (std::size_t j = 0; j < len; ++j) {
                        for (std::size_t p = 0; p < dh; ++p) {
                            scratch_t[p * len + j] = V[off + j * dh + p];
                        }
                    }
                    matmul_tiles<false>(gg, scratch_t.data(), dprobs.data(), len, dh, len);
                    // softmax adjoint, with the score scale folded in
                    for (std::size_t i = 0; i < len; ++i) {
                        double gy = 0.0;
                        for (std::size_t j = 0; j < len; ++j) {
                            gy += dprobs[i * len + j] * probs[i * len + j];
                        }
                        for (std::size_t j = 0; j < len; ++j) {
                            dscores[i * len + j] =
                                n.scalar * probs[i * len + j] * (dprobs[i * len + j] - gy);
                        }
                    }
                    // dQ += dS K ; dK += dS^T Q
                    matmul_tiles<false>(dscores.data(), K.data() + off, dq.data() + off, len, len,
                                        dh);
                    matmul_tiles<true>(dscores.data(), Q.data() + off, dk.data() + off, len, len,
                                       dh);
                }
                return;
            }
        }
    }
};

}  // namespace hydra
