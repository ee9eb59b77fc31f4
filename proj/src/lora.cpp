#include "aulite/lora.hpp"

#include <algorithm>

namespace aulite {

template <typename T>
TensorT<T> LinearT<T>::forward(const TensorT<T>& x) const {
    TensorT<T> y = matmul(x, weight);
    if (adapter) {
        TensorT<T> delta = matmul(matmul(x, adapter->u), adapter->v);
        if (adapter->scale != T(1)) delta = scale(delta, adapter->scale);
        y = add(y, delta);
    }
    if (bias.defined()) y = add_bias(y, bias);
    return y;
}

template <typename T>
LinearT<T> make_linear(std::string name, int in, int out, Rng& rng, bool with_bias) {
    LinearT<T> layer;
    layer.name = std::move(name);
    layer.weight = TensorT<T>::randn({in, out}, T(0.02), rng);
    if (with_bias) layer.bias = TensorT<T>::zeros({out});
    return layer;
}

template <typename T>
LoraAdapterT<T>& attach_lora(LinearT<T>& layer, int rank, uint64_t seed) {
    if (layer.adapter)
        throw ValueError("layer '" + layer.name + "' already has an adapter");
    const int d = layer.in_dim(), k = layer.out_dim();
    if (rank < 1 || rank >= std::min(d, k))
        throw ValueError("adapter rank " + std::to_string(rank) + " must be in [1, " +
                         std::to_string(std::min(d, k)) + ") for layer '" + layer.name + "'");
    Rng rng(seed);
    LoraAdapterT<T> adapter;
    adapter.rank = rank;
    adapter.u = TensorT<T>::randn({d, rank}, T(0.02), rng, /*requires_grad=*/true);
    adapter.v = TensorT<T>::zeros({rank, k}, /*requires_grad=*/true);
    layer.weight.set_requires_grad(false);  // base is frozen once adapted
    layer.adapter = std::move(adapter);
    return *layer.adapter;
}

template <typename T>
TensorT<T> effective_weight(const LinearT<T>& layer) {
    if (!layer.adapter) return layer.weight.detached_copy();
    NoGradGuard no_grad;
    TensorT<T> delta = matmul(layer.adapter->u, layer.adapter->v);
    if (layer.adapter->scale != T(1)) delta = scale(delta, layer.adapter->scale);
    return add(layer.weight, delta).detached_copy();
}

template <typename T>
LinearT<T> merge(const LinearT<T>& layer) {
    LinearT<T> merged;
    merged.name = layer.name;
    merged.weight = effective_weight(layer);
    merged.weight.set_requires_grad(false);
    if (layer.bias.defined()) merged.bias = layer.bias.detached_copy();
    return merged;
}

template struct LoraAdapterT<float>;
template struct LoraAdapterT<double>;
template struct LinearT<float>;
template struct LinearT<double>;

#define AULITE_INSTANTIATE(T)                                                  \
    template LinearT<T> make_linear(std::string, int, int, Rng&, bool);        \
    template LoraAdapterT<T>& attach_lora(LinearT<T>&, int, uint64_t);         \
    template TensorT<T> effective_weight(const LinearT<T>&);                   \
    template LinearT<T> merge(const LinearT<T>&);

AULITE_INSTANTIATE(float)
AULITE_INSTANTIATE(double)
#undef AULITE_INSTANTIATE

}  // namespace aulite
