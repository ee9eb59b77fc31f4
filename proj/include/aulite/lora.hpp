#pragma once

#include <optional>
#include <string>

#include "aulite/tensor.hpp"

namespace aulite {

// Low-rank delta for a frozen linear layer: effective weight
// W = W0 + scale * U x V with U [d x r] Gaussian-initialized and V [r x k]
// zero-initialized, so a fresh adapter leaves the layer's output unchanged.
template <typename T>
struct LoraAdapterT {
    TensorT<T> u;  // [d x r]
    TensorT<T> v;  // [r x k]
    T scale = T(1);
    int rank = 0;
};

template <typename T>
struct LinearT {
    std::string name;
    TensorT<T> weight;  // [in x out]; forward computes x * W (+ bias)
    TensorT<T> bias;    // [out]; leave undefined for a bias-free layer
    std::optional<LoraAdapterT<T>> adapter;

    int in_dim() const { return weight.dim(0); }
    int out_dim() const { return weight.dim(1); }

    // x [rows x in] -> [rows x out]. The adapter path multiplies through the
    // factors (x*U)*V without materializing the delta.
    TensorT<T> forward(const TensorT<T>& x) const;
};

template <typename T>
LinearT<T> make_linear(std::string name, int in, int out, Rng& rng, bool with_bias = true);

// Freezes the base weight and installs a rank-r adapter. Errors on double
// attachment and on rank >= min(d, k).
template <typename T>
LoraAdapterT<T>& attach_lora(LinearT<T>& layer, int rank, uint64_t seed);

// W0 + scale * U x V, without mutating W0.
template <typename T>
TensorT<T> effective_weight(const LinearT<T>& layer);

// Detached plain layer whose single weight equals effective_weight(layer).
template <typename T>
LinearT<T> merge(const LinearT<T>& layer);

extern template struct LoraAdapterT<float>;
extern template struct LoraAdapterT<double>;
extern template struct LinearT<float>;
extern template struct LinearT<double>;

}  // namespace aulite
