#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aulite/common.hpp"

namespace aulite {

namespace detail {

template <typename T>
struct NodeT {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void()> backward_fn;  // adds into parents' grads
    const char* op = "leaf";
};

}  // namespace detail

// Thread-local switch: while disabled, ops compute values but record nothing,
// so inference graphs free eagerly and are safe to run from worker threads.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Thread-local switch for intra-op OpenMP. Sample-parallel callers turn it
// off so nested teams do not oversubscribe the machine. Results are bitwise
// identical either way (row-parallel kernels only).
void set_op_parallelism(bool enabled);
bool op_parallelism();

// Dense row-major tensor handle with reverse-mode autodiff. Copy is shallow
// (shared node); immutability after forward creation is by convention, with
// grad accumulation as the only sanctioned mutation.
template <typename T>
class TensorT {
public:
    using Scalar = T;

    TensorT() = default;

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorT full(std::vector<int> shape, T value, bool requires_grad = false);
    static TensorT from_data(std::vector<int> shape, std::vector<T> data,
                             bool requires_grad = false);
    static TensorT randn(std::vector<int> shape, T stddev, Rng& rng,
                         bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    bool is_scalar() const { return node_->value.size() == 1; }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    // Gradient buffer; allocated zero-filled on first access.
    std::vector<T>& grad();
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    void zero_grad();

    detail::NodeT<T>* node() const { return node_.get(); }

    template <typename U>
    friend class TensorT;

    // Deep value copy as a fresh leaf (drops graph history and grads).
    TensorT detached_copy() const;

    // Precision conversion (fresh leaf).
    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out = TensorT<U>::zeros(shape(), node_->requires_grad);
        for (size_t i = 0; i < node_->value.size(); ++i)
            out.data()[i] = static_cast<U>(node_->value[i]);
        return out;
    }

    static TensorT wrap(std::shared_ptr<detail::NodeT<T>> node) {
        TensorT t;
        t.node_ = std::move(node);
        return t;
    }
    std::shared_ptr<detail::NodeT<T>> shared_node() const { return node_; }

private:
    std::shared_ptr<detail::NodeT<T>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

std::string format_shape(const std::vector<int>& shape);

// ---- forward ops (all record the reverse pass when grads are enabled) ----

template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> scale(const TensorT<T>& a, T factor);

// x: [rows x n], bias: [n], broadcast over rows.
template <typename T> TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias);

template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> transpose(const TensorT<T>& x);

template <typename T> TensorT<T> slice_rows(const TensorT<T>& x, int r0, int r1);
template <typename T> TensorT<T> slice_cols(const TensorT<T>& x, int c0, int c1);
template <typename T> TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts);
template <typename T> TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts);

template <typename T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const std::vector<int>& ids);

template <typename T> TensorT<T> softmax(const TensorT<T>& x, int axis);

// Row-wise softmax over attention scores [Tq x T] where row r may only
// attend to columns <= query_begin + r; masked entries come out exactly 0.
template <typename T> TensorT<T> causal_softmax(const TensorT<T>& x, int query_begin);

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain,
                      const TensorT<T>& bias, T eps);

template <typename T> TensorT<T> gelu(const TensorT<T>& x);

template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets,
                         const std::vector<bool>& mask);

template <typename T> TensorT<T> sum(const TensorT<T>& x);
template <typename T> TensorT<T> mean(const TensorT<T>& x);

// Reverse pass from a scalar loss. Populates grads on every reachable tensor
// with requires_grad, then consumes the recorded graph edges.
template <typename T> void backward(const TensorT<T>& loss);

template <typename T> bool all_finite(const TensorT<T>& x);

}  // namespace aulite
