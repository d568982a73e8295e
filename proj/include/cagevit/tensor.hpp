#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
//
// Tensors are value-semantic handles to shared nodes. A node is immutable
// after construction except for gradient accumulation during a backward
// pass. Differentiation is opt-in: leaves registered on a GradTape via
// watch() cause every downstream primitive to append a backward record to
// that tape; tensors with no tape run pure forward math with no recording.
// A tape and all tensors recorded on it belong to one logical thread.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "cagevit/error.hpp"

namespace cagevit {

template <typename T>
class GradTape;

namespace detail {

template <typename T>
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<T> data;
    std::vector<T> grad;           // empty until backward touches this node
    GradTape<T>* tape = nullptr;   // non-owning; nullptr means constant
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw ContractError("tensor shape must have at least one axis");
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ContractError("tensor dimensions must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

}  // namespace detail

template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor supports floating point scalars");

public:
    using Node = detail::TensorNode<T>;

    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<T> data) {
        const std::size_t n = detail::checked_numel(shape);
        if (n != data.size())
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + detail::shape_str(shape));
        node_ = std::make_shared<Node>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        const std::size_t n = detail::checked_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }
    static Tensor zeros(std::vector<std::size_t> shape) { return full(std::move(shape), T(0)); }
    static Tensor ones(std::vector<std::size_t> shape) { return full(std::move(shape), T(1)); }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = T(1);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->data.size(); }

    const std::vector<T>& data() const { return node_->data; }
    // For construction and optimizer updates only; never mutate a tensor that
    // is recorded on a live tape.
    std::vector<T>& mutable_data() { return node_->data; }

    T operator()(std::size_t i) const { return node_->data.at(i); }
    T operator()(std::size_t i, std::size_t j) const {
        return node_->data[i * node_->shape[1] + j];
    }
    T operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->data[(i * node_->shape[1] + j) * node_->shape[2] + k];
    }

    bool requires_grad() const { return node_ && node_->tape != nullptr; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (!has_grad()) throw ContractError("tensor has no gradient; run backward() first");
        return node_->grad;
    }
    void clear_grad() {
        if (node_) node_->grad.clear();
    }

    // Internal node handle shared by the primitives below.
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Ordered record of executed primitives. Execution order is a topological
// order of the graph, so replaying the records once, in reverse, propagates
// gradients from the loss to every reachable leaf.
template <typename T>
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    ~GradTape() {
        for (auto& n : nodes_)
            if (n) n->tape = nullptr;
    }

    // Register a leaf so downstream primitives differentiate through it.
    void watch(const Tensor<T>& t) {
        auto node = t.node();
        if (!node) throw ContractError("cannot watch an undefined tensor");
        if (node->tape == this) return;
        if (node->tape != nullptr) throw ContractError("tensor already belongs to another tape");
        node->tape = this;
        node->grad.clear();
        nodes_.push_back(node);
    }

    std::size_t num_records() const { return records_.size(); }

    void record(std::function<void()> fn, std::shared_ptr<detail::TensorNode<T>> out) {
        out->tape = this;
        nodes_.push_back(std::move(out));
        records_.push_back(std::move(fn));
    }

    void replay_reverse() {
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> records_;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes_;
};

namespace detail {

template <typename T>
GradTape<T>* result_tape(std::initializer_list<const Tensor<T>*> inputs) {
    GradTape<T>* tape = nullptr;
    for (const Tensor<T>* t : inputs) {
        GradTape<T>* it = t->node() ? t->node()->tape : nullptr;
        if (!it) continue;
        if (tape && tape != it) throw ContractError("operands belong to different tapes");
        tape = it;
    }
    return tape;
}

template <typename T>
std::vector<T>& ensure_grad(const std::shared_ptr<TensorNode<T>>& node) {
    if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
    return node->grad;
}

// True when this node's output gradient never got populated, i.e. it does
// not lie on a path to the loss; its record is then a no-op.
template <typename T>
bool no_out_grad(const std::shared_ptr<TensorNode<T>>& node) {
    return node->grad.empty();
}

template <typename T>
void check_finite(const std::vector<T>& data, const char* op) {
    for (const T v : data)
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
}

template <typename T>
Tensor<T> make_result(std::vector<std::size_t> shape, std::vector<T> data, const char* op) {
    check_finite(data, op);
    return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul and layout primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul expects 2-D operands, got " + detail::shape_str(a.shape()) +
                             " and " + detail::shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul inner dimensions disagree: " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));

    std::vector<T> out(m * n, T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const T aik = pa[i * k + t];
            const T* brow = pb + t * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aik * brow[j];
        }
    }
    Tensor<T> c = detail::make_result({m, n}, std::move(out), "matmul");

    if (auto* tape = detail::result_tape<T>({&a, &b})) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        tape->record(
            [an, bn, cn, m, k, n] {
                if (detail::no_out_grad(cn)) return;
                const std::vector<T>& dc = cn->grad;
                if (an->tape) {
                    std::vector<T>& da = detail::ensure_grad(an);
                    // dA = dC * B^T
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t t = 0; t < k; ++t) {
                            T acc = T(0);
                            const T* dcrow = dc.data() + i * n;
                            const T* brow = bn->data.data() + t * n;
                            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
                            da[i * k + t] += acc;
                        }
                }
                if (bn->tape) {
                    std::vector<T>& db = detail::ensure_grad(bn);
                    // dB = A^T * dC
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t t = 0; t < k; ++t) {
                            const T aik = an->data[i * k + t];
                            const T* dcrow = dc.data() + i * n;
                            T* dbrow = db.data() + t * n;
                            for (std::size_t j = 0; j < n; ++j) dbrow[j] += aik * dcrow[j];
                        }
                }
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.ndim() != 2) throw DimensionError("transpose expects a 2-D tensor");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    Tensor<T> c({n, m}, std::move(out));
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        tape->record(
            [an, cn, m, n] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] += cn->grad[j * m + i];
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<std::size_t> shape) {
    const std::size_t n = detail::checked_numel(shape);
    if (n != a.size())
        throw DimensionError("reshape to " + detail::shape_str(shape) + " changes element count of " +
                             detail::shape_str(a.shape()));
    Tensor<T> c(std::move(shape), a.data());
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        tape->record(
            [an, cn] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += cn->grad[i];
            },
            cn);
    }
    return c;
}

// Rows of `a` selected by index; duplicate indices are allowed and their
// gradients accumulate.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& indices) {
    if (a.ndim() != 2) throw DimensionError("gather_rows expects a 2-D tensor");
    if (indices.empty()) throw ContractError("gather_rows needs at least one index");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<T> out(indices.size() * cols);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= rows)
            throw ContractError("row index " + std::to_string(indices[r]) + " out of range for " +
                                detail::shape_str(a.shape()));
        std::copy_n(a.data().data() + indices[r] * cols, cols, out.data() + r * cols);
    }
    Tensor<T> c({indices.size(), cols}, std::move(out));
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        auto idx = indices;
        tape->record(
            [an, cn, idx, cols] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < cols; ++j)
                        da[idx[r] * cols + j] += cn->grad[r * cols + j];
            },
            cn);
    }
    return c;
}

// Rows of `a` placed at the given indices of an n_rows-tall zero matrix;
// duplicate targets accumulate.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& a, const std::vector<std::size_t>& indices,
                       std::size_t n_rows) {
    if (a.ndim() != 2) throw DimensionError("scatter_rows expects a 2-D tensor");
    if (indices.size() != a.dim(0))
        throw ContractError("scatter_rows needs one index per input row");
    const std::size_t cols = a.dim(1);
    std::vector<T> out(n_rows * cols, T(0));
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= n_rows)
            throw ContractError("scatter target " + std::to_string(indices[r]) + " out of range");
        for (std::size_t j = 0; j < cols; ++j) out[indices[r] * cols + j] += a.data()[r * cols + j];
    }
    Tensor<T> c({n_rows, cols}, std::move(out));
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        auto idx = indices;
        tape->record(
            [an, cn, idx, cols] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < cols; ++j)
                        da[r * cols + j] += cn->grad[idx[r] * cols + j];
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows needs at least one part");
    const std::size_t cols = parts.front().dim(1);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(1) != cols)
            throw DimensionError("concat_rows parts must be 2-D with equal column counts");
        rows += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor<T> c({rows, cols}, std::move(out));

    std::vector<const Tensor<T>*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    GradTape<T>* tape = nullptr;
    for (auto* p : ptrs) {
        GradTape<T>* it = p->node()->tape;
        if (it) {
            if (tape && tape != it) throw ContractError("operands belong to different tapes");
            tape = it;
        }
    }
    if (tape) {
        std::vector<std::shared_ptr<detail::TensorNode<T>>> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        auto cn = c.node();
        tape->record(
            [ins, cn] {
                if (detail::no_out_grad(cn)) return;
                std::size_t offset = 0;
                for (const auto& in : ins) {
                    const std::size_t n = in->data.size();
                    if (in->tape) {
                        std::vector<T>& d = detail::ensure_grad(in);
                        for (std::size_t i = 0; i < n; ++i) d[i] += cn->grad[offset + i];
                    }
                    offset += n;
                }
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols needs at least one part");
    const std::size_t rows = parts.front().dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != rows)
            throw DimensionError("concat_cols parts must be 2-D with equal row counts");
        cols += p.dim(1);
    }
    std::vector<T> out(rows * cols);
    std::size_t col0 = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
            std::copy_n(p.data().data() + i * pc, pc, out.data() + i * cols + col0);
        col0 += pc;
    }
    Tensor<T> c({rows, cols}, std::move(out));

    GradTape<T>* tape = nullptr;
    for (const auto& p : parts) {
        GradTape<T>* it = p.node()->tape;
        if (it) {
            if (tape && tape != it) throw ContractError("operands belong to different tapes");
            tape = it;
        }
    }
    if (tape) {
        std::vector<std::shared_ptr<detail::TensorNode<T>>> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        auto cn = c.node();
        tape->record(
            [ins, cn, rows, cols] {
                if (detail::no_out_grad(cn)) return;
                std::size_t col0 = 0;
                for (const auto& in : ins) {
                    const std::size_t pc = in->shape[1];
                    if (in->tape) {
                        std::vector<T>& d = detail::ensure_grad(in);
                        for (std::size_t i = 0; i < rows; ++i)
                            for (std::size_t j = 0; j < pc; ++j)
                                d[i * pc + j] += cn->grad[i * cols + col0 + j];
                    }
                    col0 += pc;
                }
            },
            cn);
    }
    return c;
}

// Columns [c0, c1) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
    if (a.ndim() != 2) throw DimensionError("slice_cols expects a 2-D tensor");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (c0 >= c1 || c1 > cols)
        throw DimensionError("slice_cols range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                             ") invalid for " + detail::shape_str(a.shape()));
    const std::size_t w = c1 - c0;
    std::vector<T> out(rows * w);
    for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(a.data().data() + i * cols + c0, w, out.data() + i * w);
    Tensor<T> c({rows, w}, std::move(out));
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        tape->record(
            [an, cn, rows, cols, c0, w] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < w; ++j) da[i * cols + c0 + j] += cn->grad[i * w + j];
            },
            cn);
    }
    return c;
}

// ---------------------------------------------------------------------------
// elementwise primitives
// ---------------------------------------------------------------------------

namespace detail {

// Broadcasting is restricted by contract: shapes are identical, or exactly
// one operand matches the output shape while the other has size-1 axes where
// they differ (same rank).
template <typename T>
void binary_broadcast_shapes(const Tensor<T>& a, const Tensor<T>& b,
                             std::vector<std::size_t>& out_shape, bool& a_full, bool& b_full) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != sb.size())
        throw DimensionError("elementwise operands must have equal rank: " + shape_str(sa) +
                             " vs " + shape_str(sb));
    out_shape.resize(sa.size());
    bool a_bcast = false, b_bcast = false;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i] == sb[i]) {
            out_shape[i] = sa[i];
        } else if (sa[i] == 1) {
            out_shape[i] = sb[i];
            a_bcast = true;
        } else if (sb[i] == 1) {
            out_shape[i] = sa[i];
            b_bcast = true;
        } else {
            throw DimensionError("incompatible elementwise shapes: " + shape_str(sa) + " vs " +
                                 shape_str(sb));
        }
    }
    if (a_bcast && b_bcast)
        throw DimensionError("only one elementwise operand may broadcast: " + shape_str(sa) +
                             " vs " + shape_str(sb));
    a_full = !a_bcast;
    b_full = !b_bcast;
}

inline std::vector<std::size_t> broadcast_strides(const std::vector<std::size_t>& shape,
                                                  const std::vector<std::size_t>& out_shape) {
    std::vector<std::size_t> strides(shape.size());
    std::size_t s = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[i] = (shape[i] == 1 && out_shape[i] != 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

// Maps a linear index in out_shape to a linear index in an operand described
// by broadcast strides.
struct BroadcastIndexer {
    std::vector<std::size_t> out_shape;
    std::vector<std::size_t> strides;
    std::size_t operator()(std::size_t linear) const {
        std::size_t idx = 0;
        for (std::size_t i = out_shape.size(); i-- > 0;) {
            const std::size_t coord = linear % out_shape[i];
            linear /= out_shape[i];
            idx += coord * strides[i];
        }
        return idx;
    }
};

}  // namespace detail

namespace detail {

enum class BinaryKind { Add, Mul };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
    std::vector<std::size_t> out_shape;
    bool a_full = false, b_full = false;
    binary_broadcast_shapes(a, b, out_shape, a_full, b_full);
    const std::size_t n = checked_numel(out_shape);

    BroadcastIndexer ia{out_shape, broadcast_strides(a.shape(), out_shape)};
    BroadcastIndexer ib{out_shape, broadcast_strides(b.shape(), out_shape)};
    const bool contiguous = a_full && b_full;

    std::vector<T> out(n);
    const auto& da = a.data();
    const auto& db = b.data();
    if (contiguous) {
        if (kind == BinaryKind::Add)
            for (std::size_t i = 0; i < n; ++i) out[i] = da[i] + db[i];
        else
            for (std::size_t i = 0; i < n; ++i) out[i] = da[i] * db[i];
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const T av = da[ia(i)], bv = db[ib(i)];
            out[i] = kind == BinaryKind::Add ? av + bv : av * bv;
        }
    }
    Tensor<T> c = make_result(out_shape, std::move(out), name);

    if (auto* tape = result_tape<T>({&a, &b})) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        tape->record(
            [an, bn, cn, ia, ib, kind, n, contiguous] {
                if (no_out_grad(cn)) return;
                const std::vector<T>& g = cn->grad;
                if (an->tape) {
                    std::vector<T>& da = ensure_grad(an);
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t aidx = contiguous ? i : ia(i);
                        da[aidx] += kind == BinaryKind::Add
                                        ? g[i]
                                        : g[i] * bn->data[contiguous ? i : ib(i)];
                    }
                }
                if (bn->tape) {
                    std::vector<T>& db = ensure_grad(bn);
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t bidx = contiguous ? i : ib(i);
                        db[bidx] += kind == BinaryKind::Add
                                        ? g[i]
                                        : g[i] * an->data[contiguous ? i : ia(i)];
                    }
                }
            },
            cn);
    }
    return c;
}

template <typename T, typename Fwd, typename Drv>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Drv drv, const char* name) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = fwd(a.data()[i]);
    Tensor<T> c = make_result(a.shape(), std::move(out), name);
    if (auto* tape = result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        tape->record(
            [an, cn, drv] {
                if (no_out_grad(cn)) return;
                std::vector<T>& da = ensure_grad(an);
                for (std::size_t i = 0; i < da.size(); ++i)
                    da[i] += cn->grad[i] * drv(an->data[i], cn->data[i]);
            },
            cn);
    }
    return c;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, detail::BinaryKind::Add, "add");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, detail::BinaryKind::Mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    return detail::unary_op(
        a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto fwd = [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
    };
    return detail::unary_op(
        a, fwd, [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    // Exact form: x * Phi(x), with Phi the standard normal CDF.
    auto fwd = [](T x) {
        return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440084436210485L)));
    };
    auto drv = [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440084436210485L)));
        const T pdf = T(0.39894228040143267793994605993438L) * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
    };
    return detail::unary_op(a, fwd, drv, "gelu");
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

namespace detail {

// Walks all 1-D slices along `axis` of a row-major tensor.
template <typename T, typename Fn>
void for_each_slice(const std::vector<std::size_t>& shape, std::size_t axis, Fn fn) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) fn(o * len * inner + in, inner, len);
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    if (axis >= a.ndim()) throw DimensionError("softmax axis out of range");
    std::vector<T> out(a.size());
    const auto& x = a.data();
    detail::for_each_slice<T>(a.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        T mx = x[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[base + i * stride]);
        T sum = T(0);
        for (std::size_t i = 0; i < len; ++i) {
            const T e = std::exp(x[base + i * stride] - mx);
            out[base + i * stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= sum;
    });
    Tensor<T> c = detail::make_result(a.shape(), std::move(out), "softmax");
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        auto shape = a.shape();
        tape->record(
            [an, cn, shape, axis] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                const std::vector<T>& y = cn->data;
                const std::vector<T>& dy = cn->grad;
                // dx = y * (dy - sum(dy * y))
                detail::for_each_slice<T>(shape, axis,
                                          [&](std::size_t base, std::size_t stride, std::size_t len) {
                                              T dot = T(0);
                                              for (std::size_t i = 0; i < len; ++i) {
                                                  const std::size_t k = base + i * stride;
                                                  dot += dy[k] * y[k];
                                              }
                                              for (std::size_t i = 0; i < len; ++i) {
                                                  const std::size_t k = base + i * stride;
                                                  da[k] += y[k] * (dy[k] - dot);
                                              }
                                          });
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
    if (axis >= a.ndim()) throw DimensionError("log_softmax axis out of range");
    std::vector<T> out(a.size());
    const auto& x = a.data();
    detail::for_each_slice<T>(a.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        T mx = x[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[base + i * stride]);
        T sum = T(0);
        for (std::size_t i = 0; i < len; ++i) sum += std::exp(x[base + i * stride] - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t i = 0; i < len; ++i) out[base + i * stride] = x[base + i * stride] - lse;
    });
    Tensor<T> c = detail::make_result(a.shape(), std::move(out), "log_softmax");
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        auto shape = a.shape();
        tape->record(
            [an, cn, shape, axis] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                const std::vector<T>& y = cn->data;
                const std::vector<T>& dy = cn->grad;
                // dx = dy - softmax(x) * sum(dy)
                detail::for_each_slice<T>(shape, axis,
                                          [&](std::size_t base, std::size_t stride, std::size_t len) {
                                              T gsum = T(0);
                                              for (std::size_t i = 0; i < len; ++i)
                                                  gsum += dy[base + i * stride];
                                              for (std::size_t i = 0; i < len; ++i) {
                                                  const std::size_t k = base + i * stride;
                                                  da[k] += dy[k] - std::exp(y[k]) * gsum;
                                              }
                                          });
            },
            cn);
    }
    return c;
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// affine gain and bias (each sized to the last axis).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    const std::size_t d = x.shape().back();
    if (gain.size() != d || bias.size() != d)
        throw DimensionError("layer_norm gain/bias must match the last axis (" + std::to_string(d) +
                             ")");
    const std::size_t slices = x.size() / d;
    std::vector<T> out(x.size());
    std::vector<T> inv_std(slices), xhat(x.size());
    for (std::size_t s = 0; s < slices; ++s) {
        const T* px = x.data().data() + s * d;
        T mean = T(0);
        for (std::size_t i = 0; i < d; ++i) mean += px[i];
        mean /= T(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            const T c = px[i] - mean;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[s] = inv;
        for (std::size_t i = 0; i < d; ++i) {
            const T h = (px[i] - mean) * inv;
            xhat[s * d + i] = h;
            out[s * d + i] = h * gain.data()[i] + bias.data()[i];
        }
    }
    Tensor<T> c = detail::make_result(x.shape(), std::move(out), "layer_norm");
    if (auto* tape = detail::result_tape<T>({&x, &gain, &bias})) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), cn = c.node();
        auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
        auto inv = std::make_shared<std::vector<T>>(std::move(inv_std));
        tape->record(
            [xn, gn, bn, cn, xh, inv, slices, d] {
                if (detail::no_out_grad(cn)) return;
                const std::vector<T>& dy = cn->grad;
                if (gn->tape) {
                    std::vector<T>& dg = detail::ensure_grad(gn);
                    for (std::size_t s = 0; s < slices; ++s)
                        for (std::size_t i = 0; i < d; ++i)
                            dg[i] += dy[s * d + i] * (*xh)[s * d + i];
                }
                if (bn->tape) {
                    std::vector<T>& db = detail::ensure_grad(bn);
                    for (std::size_t s = 0; s < slices; ++s)
                        for (std::size_t i = 0; i < d; ++i) db[i] += dy[s * d + i];
                }
                if (xn->tape) {
                    std::vector<T>& dx = detail::ensure_grad(xn);
                    // dx = inv/d * (d*dh - sum(dh) - xhat * sum(dh*xhat)),
                    // where dh = dy * gain
                    for (std::size_t s = 0; s < slices; ++s) {
                        T sum_dh = T(0), sum_dh_xh = T(0);
                        for (std::size_t i = 0; i < d; ++i) {
                            const T dh = dy[s * d + i] * gn->data[i];
                            sum_dh += dh;
                            sum_dh_xh += dh * (*xh)[s * d + i];
                        }
                        const T k = (*inv)[s] / T(d);
                        for (std::size_t i = 0; i < d; ++i) {
                            const T dh = dy[s * d + i] * gn->data[i];
                            dx[s * d + i] +=
                                k * (T(d) * dh - sum_dh - (*xh)[s * d + i] * sum_dh_xh);
                        }
                    }
                }
            },
            cn);
    }
    return c;
}

// Adaptive average pooling of an [h, w, d] tensor to a p*p grid, flattened
// row-major to [p*p, d]. Cell (i, j) averages rows [floor(i*h/p),
// floor((i+1)*h/p)) and the analogous column range.
template <typename T>
Tensor<T> avg_pool_2d(const Tensor<T>& x, std::size_t p) {
    if (x.ndim() != 3) throw DimensionError("avg_pool_2d expects an [h, w, d] tensor");
    const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2);
    if (h < p || w < p)
        throw DimensionError("avg_pool_2d output grid " + std::to_string(p) + "x" +
                             std::to_string(p) + " exceeds input " + std::to_string(h) + "x" +
                             std::to_string(w));
    std::vector<T> out(p * p * d, T(0));
    for (std::size_t i = 0; i < p; ++i) {
        const std::size_t r0 = i * h / p, r1 = (i + 1) * h / p;
        for (std::size_t j = 0; j < p; ++j) {
            const std::size_t c0 = j * w / p, c1 = (j + 1) * w / p;
            const T inv = T(1) / T((r1 - r0) * (c1 - c0));
            T* cell = out.data() + (i * p + j) * d;
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) {
                    const T* px = x.data().data() + (r * w + c) * d;
                    for (std::size_t k = 0; k < d; ++k) cell[k] += px[k] * inv;
                }
        }
    }
    Tensor<T> c = detail::make_result({p * p, d}, std::move(out), "avg_pool_2d");
    if (auto* tape = detail::result_tape<T>({&x})) {
        auto xn = x.node(), cn = c.node();
        tape->record(
            [xn, cn, h, w, d, p] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& dx = detail::ensure_grad(xn);
                for (std::size_t i = 0; i < p; ++i) {
                    const std::size_t r0 = i * h / p, r1 = (i + 1) * h / p;
                    for (std::size_t j = 0; j < p; ++j) {
                        const std::size_t c0 = j * w / p, c1 = (j + 1) * w / p;
                        const T inv = T(1) / T((r1 - r0) * (c1 - c0));
                        const T* g = cn->grad.data() + (i * p + j) * d;
                        for (std::size_t r = r0; r < r1; ++r)
                            for (std::size_t c = c0; c < c1; ++c) {
                                T* pd = dx.data() + (r * w + c) * d;
                                for (std::size_t k = 0; k < d; ++k) pd[k] += g[k] * inv;
                            }
                    }
                }
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    if (a.ndim() != 2) throw DimensionError("mean_rows expects a 2-D tensor");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<T> out(cols, T(0));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j] += a.data()[i * cols + j];
    const T inv = T(1) / T(rows);
    for (auto& v : out) v *= inv;
    Tensor<T> c = detail::make_result({1, cols}, std::move(out), "mean_rows");
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        tape->record(
            [an, cn, rows, cols, inv] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) da[i * cols + j] += cn->grad[j] * inv;
            },
            cn);
    }
    return c;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (const T v : a.data()) s += v;
    Tensor<T> c = detail::make_result<T>({1}, {s}, "sum_all");
    if (auto* tape = detail::result_tape<T>({&a})) {
        auto an = a.node(), cn = c.node();
        tape->record(
            [an, cn] {
                if (detail::no_out_grad(cn)) return;
                std::vector<T>& da = detail::ensure_grad(an);
                const T g = cn->grad[0];
                for (auto& v : da) v += g;
            },
            cn);
    }
    return c;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Seeds the loss gradient with 1 and replays the loss's tape in reverse.
// Every watched leaf on a path to the loss ends up with a populated grad;
// leaves off the path keep an absent gradient.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward expects a scalar loss tensor");
    GradTape<T>* tape = loss.node()->tape;
    if (tape == nullptr || tape->num_records() == 0)
        throw ContractError("backward needs a nonempty tape; no primitives were recorded");
    detail::ensure_grad(loss.node());
    loss.node()->grad[0] += T(1);
    tape->replay_reverse();
}

}  // namespace cagevit
