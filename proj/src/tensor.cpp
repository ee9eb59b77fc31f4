#include "aulite/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace aulite {

namespace {

thread_local bool tl_grad_enabled = true;
thread_local bool tl_op_parallel = true;

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

#ifndef NDEBUG
template <typename T>
void debug_check_finite(const std::vector<T>& v, const char* op) {
    for (T x : v) assert(std::isfinite(static_cast<double>(x)) && op);
}
#define AULITE_CHECK_FINITE(vec, op) debug_check_finite(vec, op)
#else
#define AULITE_CHECK_FINITE(vec, op) ((void)0)
#endif

}  // namespace

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

void set_op_parallelism(bool enabled) { tl_op_parallel = enabled; }
bool op_parallelism() { return tl_op_parallel; }

std::string format_shape(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// TensorT
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::zeros(std::vector<int> shape, bool requires_grad) {
    auto node = std::make_shared<detail::NodeT<T>>();
    node->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

template <typename T>
TensorT<T> TensorT<T>::full(std::vector<int> shape, T value, bool requires_grad) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

template <typename T>
TensorT<T> TensorT<T>::from_data(std::vector<int> shape, std::vector<T> data,
                                 bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: " + format_shape(shape) + " does not hold " +
                         std::to_string(data.size()) + " elements");
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

template <typename T>
TensorT<T> TensorT<T>::randn(std::vector<int> shape, T stddev, Rng& rng,
                             bool requires_grad) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (T& x : t.data()) x = static_cast<T>(rng.gaussian()) * stddev;
    return t;
}

template <typename T>
T TensorT<T>::item() const {
    if (!is_scalar())
        throw ShapeError("item: tensor " + format_shape(shape()) + " is not scalar");
    return node_->value[0];
}

template <typename T>
std::vector<T>& TensorT<T>::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
}

template <typename T>
void TensorT<T>::zero_grad() {
    node_->grad.clear();
}

template <typename T>
TensorT<T> TensorT<T>::detached_copy() const {
    TensorT out = zeros(shape(), node_->requires_grad);
    out.data() = node_->value;
    return out;
}

template class TensorT<float>;
template class TensorT<double>;

// ---------------------------------------------------------------------------
// graph plumbing
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<T>& grad_buf(detail::NodeT<T>* n) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
    return n->grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + format_shape(a.shape()) +
                                        " vs " + format_shape(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto* an = a.node();
    auto* bn = b.node();
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = a.shape();
    node->value = std::move(out);
    node->op = "add";
    bool needs = (an->requires_grad || bn->requires_grad) && tl_grad_enabled;
    if (needs) {
        node->requires_grad = true;
        node->parents = {a.shared_node(), b.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [an, bn, raw]() {
            const auto& g = raw->grad;
            if (an->requires_grad) {
                auto& ga = grad_buf(an);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = grad_buf(bn);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    }
    AULITE_CHECK_FINITE(node->value, "add");
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch " + format_shape(a.shape()) +
                                        " vs " + format_shape(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = a.shape();
    node->value = std::move(out);
    node->op = "sub";
    auto* an = a.node();
    auto* bn = b.node();
    if ((an->requires_grad || bn->requires_grad) && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {a.shared_node(), b.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [an, bn, raw]() {
            const auto& g = raw->grad;
            if (an->requires_grad) {
                auto& ga = grad_buf(an);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = grad_buf(bn);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    }
    AULITE_CHECK_FINITE(node->value, "sub");
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + format_shape(a.shape()) +
                                        " vs " + format_shape(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = a.shape();
    node->value = std::move(out);
    node->op = "mul";
    auto* an = a.node();
    auto* bn = b.node();
    if ((an->requires_grad || bn->requires_grad) && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {a.shared_node(), b.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [an, bn, raw]() {
            const auto& g = raw->grad;
            if (an->requires_grad) {
                auto& ga = grad_buf(an);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& gb = grad_buf(bn);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
            }
        };
    }
    AULITE_CHECK_FINITE(node->value, "mul");
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = a.shape();
    node->value = std::move(out);
    node->op = "scale";
    auto* an = a.node();
    if (an->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {a.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [an, raw, factor]() {
            auto& ga = grad_buf(an);
            for (size_t i = 0; i < raw->grad.size(); ++i) ga[i] += raw->grad[i] * factor;
        };
    }
    AULITE_CHECK_FINITE(node->value, "scale");
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
    require(x.rank() == 2 && bias.rank() == 1 && x.dim(1) == bias.dim(0),
            "add_bias: " + format_shape(x.shape()) + " vs " + format_shape(bias.shape()));
    int rows = x.dim(0), n = x.dim(1);
    std::vector<T> out(x.data().size());
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(r) * n + j] = x.data()[static_cast<size_t>(r) * n + j] + bias.data()[j];
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = x.shape();
    node->value = std::move(out);
    node->op = "add_bias";
    auto* xn = x.node();
    auto* bn = bias.node();
    if ((xn->requires_grad || bn->requires_grad) && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node(), bias.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, bn, raw, rows, n]() {
            const auto& g = raw->grad;
            if (xn->requires_grad) {
                auto& gx = grad_buf(xn);
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = grad_buf(bn);
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j) gb[j] += g[static_cast<size_t>(r) * n + j];
            }
        };
    }
    AULITE_CHECK_FINITE(node->value, "add_bias");
    return TensorT<T>::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

namespace {

// C += A*B, row-major. Accumulation over kk is sequential per output row, so
// results do not depend on the thread count.
template <typename T>
void gemm_accum(const T* a, const T* b, T* c, int m, int k, int n, bool par) {
#pragma omp parallel for schedule(static) if (par && static_cast<int64_t>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA += dC * B^T  (dot of contiguous rows)
template <typename T>
void gemm_grad_a(const T* dc, const T* b, T* da, int m, int k, int n, bool par) {
#pragma omp parallel for schedule(static) if (par && static_cast<int64_t>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        const T* dcrow = dc + static_cast<size_t>(i) * n;
        T* darow = da + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const T* brow = b + static_cast<size_t>(kk) * n;
            T s = 0;
            for (int j = 0; j < n; ++j) s += dcrow[j] * brow[j];
            darow[kk] += s;
        }
    }
}

// dB += A^T * dC  (each thread owns a dB row, i ascending: deterministic)
template <typename T>
void gemm_grad_b(const T* a, const T* dc, T* db, int m, int k, int n, bool par) {
#pragma omp parallel for schedule(static) if (par && static_cast<int64_t>(m) * k * n > 16384)
    for (int kk = 0; kk < k; ++kk) {
        T* dbrow = db + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const T av = a[static_cast<size_t>(i) * k + kk];
            const T* dcrow = dc + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: inner dimensions disagree, " + format_shape(a.shape()) + " vs " +
                format_shape(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    gemm_accum(a.data().data(), b.data().data(), out.data(), m, k, n, tl_op_parallel);

    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {m, n};
    node->value = std::move(out);
    node->op = "matmul";
    auto* an = a.node();
    auto* bn = b.node();
    if ((an->requires_grad || bn->requires_grad) && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {a.shared_node(), b.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [an, bn, raw, m, k, n]() {
            const T* dc = raw->grad.data();
            if (an->requires_grad)
                gemm_grad_a(dc, bn->value.data(), grad_buf(an).data(), m, k, n, tl_op_parallel);
            if (bn->requires_grad)
                gemm_grad_b(an->value.data(), dc, grad_buf(bn).data(), m, k, n, tl_op_parallel);
        };
    }
    AULITE_CHECK_FINITE(node->value, "matmul");
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
    require(x.rank() == 2, "transpose: expected rank-2, got " + format_shape(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    std::vector<T> out(x.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {n, m};
    node->value = std::move(out);
    node->op = "transpose";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw, m, n]() {
            auto& gx = grad_buf(xn);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gx[static_cast<size_t>(i) * n + j] += raw->grad[static_cast<size_t>(j) * m + i];
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// slicing / concatenation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, int r0, int r1) {
    require(x.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= x.dim(0),
            "slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                ") for " + format_shape(x.shape()));
    const int n = x.dim(1);
    std::vector<T> out(static_cast<size_t>(r1 - r0) * n);
    std::copy(x.data().begin() + static_cast<size_t>(r0) * n,
              x.data().begin() + static_cast<size_t>(r1) * n, out.begin());
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {r1 - r0, n};
    node->value = std::move(out);
    node->op = "slice_rows";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw, r0, n]() {
            auto& gx = grad_buf(xn);
            for (size_t i = 0; i < raw->grad.size(); ++i)
                gx[static_cast<size_t>(r0) * n + i] += raw->grad[i];
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& x, int c0, int c1) {
    require(x.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1),
            "slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                ") for " + format_shape(x.shape()));
    const int rows = x.dim(0), n = x.dim(1), w = c1 - c0;
    std::vector<T> out(static_cast<size_t>(rows) * w);
    for (int r = 0; r < rows; ++r)
        std::copy(x.data().begin() + static_cast<size_t>(r) * n + c0,
                  x.data().begin() + static_cast<size_t>(r) * n + c1,
                  out.begin() + static_cast<size_t>(r) * w);
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {rows, w};
    node->value = std::move(out);
    node->op = "slice_cols";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw, rows, n, c0, w]() {
            auto& gx = grad_buf(xn);
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < w; ++j)
                    gx[static_cast<size_t>(r) * n + c0 + j] +=
                        raw->grad[static_cast<size_t>(r) * w + j];
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
    require(!parts.empty(), "concat_rows: empty part list");
    const int n = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        require(p.rank() == 2 && p.dim(1) == n,
                "concat_rows: column mismatch " + format_shape(p.shape()));
        rows += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(rows) * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {rows, n};
    node->value = std::move(out);
    node->op = "concat_rows";
    bool needs = false;
    for (const auto& p : parts) needs = needs || p.requires_grad();
    if (needs && tl_grad_enabled) {
        node->requires_grad = true;
        std::vector<detail::NodeT<T>*> raws;
        for (const auto& p : parts) {
            node->parents.push_back(p.shared_node());
            raws.push_back(p.node());
        }
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [raws, raw, n]() {
            size_t offset = 0;
            for (auto* pn : raws) {
                const size_t count = pn->value.size();
                if (pn->requires_grad) {
                    auto& gp = grad_buf(pn);
                    for (size_t i = 0; i < count; ++i) gp[i] += raw->grad[offset + i];
                }
                offset += count;
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    require(!parts.empty(), "concat_cols: empty part list");
    const int rows = parts[0].dim(0);
    int n = 0;
    for (const auto& p : parts) {
        require(p.rank() == 2 && p.dim(0) == rows,
                "concat_cols: row mismatch " + format_shape(p.shape()));
        n += p.dim(1);
    }
    std::vector<T> out(static_cast<size_t>(rows) * n);
    int col = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy(p.data().begin() + static_cast<size_t>(r) * w,
                      p.data().begin() + static_cast<size_t>(r + 1) * w,
                      out.begin() + static_cast<size_t>(r) * n + col);
        col += w;
    }
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {rows, n};
    node->value = std::move(out);
    node->op = "concat_cols";
    bool needs = false;
    for (const auto& p : parts) needs = needs || p.requires_grad();
    if (needs && tl_grad_enabled) {
        node->requires_grad = true;
        std::vector<detail::NodeT<T>*> raws;
        std::vector<int> widths;
        for (const auto& p : parts) {
            node->parents.push_back(p.shared_node());
            raws.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [raws, widths, raw, rows, n]() {
            int col = 0;
            for (size_t pi = 0; pi < raws.size(); ++pi) {
                auto* pn = raws[pi];
                const int w = widths[pi];
                if (pn->requires_grad) {
                    auto& gp = grad_buf(pn);
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < w; ++j)
                            gp[static_cast<size_t>(r) * w + j] +=
                                raw->grad[static_cast<size_t>(r) * n + col + j];
                }
                col += w;
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const std::vector<int>& ids) {
    require(table.rank() == 2, "embedding_lookup: table must be rank-2");
    const int vocab = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw ValueError("embedding_lookup: id " + std::to_string(id) +
                             " outside vocab of " + std::to_string(vocab));
    std::vector<T> out(ids.size() * static_cast<size_t>(d));
    for (size_t t = 0; t < ids.size(); ++t)
        std::copy(table.data().begin() + static_cast<size_t>(ids[t]) * d,
                  table.data().begin() + static_cast<size_t>(ids[t] + 1) * d,
                  out.begin() + t * d);
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {static_cast<int>(ids.size()), d};
    node->value = std::move(out);
    node->op = "embedding_lookup";
    auto* tn = table.node();
    if (tn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {table.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [tn, raw, ids, d]() {
            auto& gt = grad_buf(tn);
            for (size_t t = 0; t < ids.size(); ++t)
                for (int j = 0; j < d; ++j)
                    gt[static_cast<size_t>(ids[t]) * d + j] += raw->grad[t * d + j];
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// softmax / layer_norm / gelu
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    require(axis >= 0 && axis < x.rank(),
            "softmax: axis " + std::to_string(axis) + " out of range for " +
                format_shape(x.shape()));
    const auto& shape = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[static_cast<size_t>(i)];
    const int64_t len = shape[static_cast<size_t>(axis)];

    std::vector<T> out(x.data().size());
    const T* src = x.data().data();
    T* dst = out.data();
#pragma omp parallel for schedule(static) if (tl_op_parallel && outer * inner > 64)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            T mx = src[base];
            for (int64_t s = 1; s < len; ++s) mx = std::max(mx, src[base + s * inner]);
            T total = 0;
            for (int64_t s = 0; s < len; ++s) {
                T e = std::exp(src[base + s * inner] - mx);
                dst[base + s * inner] = e;
                total += e;
            }
            const T inv = T(1) / total;
            for (int64_t s = 0; s < len; ++s) dst[base + s * inner] *= inv;
        }
    }

    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = shape;
    node->value = std::move(out);
    node->op = "softmax";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw, outer, inner, len]() {
            auto& gx = grad_buf(xn);
            const T* y = raw->value.data();
            const T* gy = raw->grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    T dot = 0;
                    for (int64_t s = 0; s < len; ++s)
                        dot += gy[base + s * inner] * y[base + s * inner];
                    for (int64_t s = 0; s < len; ++s)
                        gx[base + s * inner] +=
                            y[base + s * inner] * (gy[base + s * inner] - dot);
                }
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> causal_softmax(const TensorT<T>& x, int query_begin) {
    require(x.rank() == 2, "causal_softmax: expected rank-2 scores");
    const int rows = x.dim(0), cols = x.dim(1);
    require(query_begin >= 0 && query_begin + rows <= cols,
            "causal_softmax: query offset " + std::to_string(query_begin) +
                " does not fit " + format_shape(x.shape()));
    std::vector<T> out(x.data().size(), T(0));
    const T* src = x.data().data();
    T* dst = out.data();
#pragma omp parallel for schedule(static) if (tl_op_parallel && rows > 64)
    for (int r = 0; r < rows; ++r) {
        const int limit = query_begin + r + 1;  // allowed columns [0, limit)
        const T* row = src + static_cast<size_t>(r) * cols;
        T* orow = dst + static_cast<size_t>(r) * cols;
        T mx = row[0];
        for (int j = 1; j < limit; ++j) mx = std::max(mx, row[j]);
        T total = 0;
        for (int j = 0; j < limit; ++j) {
            const T e = std::exp(row[j] - mx);
            orow[j] = e;
            total += e;
        }
        const T inv = T(1) / total;
        for (int j = 0; j < limit; ++j) orow[j] *= inv;
    }
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = x.shape();
    node->value = std::move(out);
    node->op = "causal_softmax";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw, rows, cols, query_begin]() {
            auto& gx = grad_buf(xn);
            const T* y = raw->value.data();
            const T* gy = raw->grad.data();
            for (int r = 0; r < rows; ++r) {
                const int limit = query_begin + r + 1;
                const size_t base = static_cast<size_t>(r) * cols;
                T dot = 0;
                for (int j = 0; j < limit; ++j) dot += gy[base + j] * y[base + j];
                for (int j = 0; j < limit; ++j)
                    gx[base + j] += y[base + j] * (gy[base + j] - dot);
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps) {
    require(x.rank() >= 1, "layer_norm: rank-0 input");
    const int n = x.shape().back();
    require(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 && bias.dim(0) == n,
            "layer_norm: gain/bias " + format_shape(gain.shape()) + "/" +
                format_shape(bias.shape()) + " do not match last dim of " +
                format_shape(x.shape()));
    if (!(eps > T(0))) throw ValueError("layer_norm: eps must be positive");
    const int64_t rows = x.numel() / n;

    std::vector<T> out(x.data().size());
    std::vector<T> inv_std(static_cast<size_t>(rows));
    std::vector<T> means(static_cast<size_t>(rows));
    const T* src = x.data().data();
    const T* g = gain.data().data();
    const T* b = bias.data().data();
#pragma omp parallel for schedule(static) if (tl_op_parallel && rows > 64)
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = src + r * n;
        T mean = 0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (int j = 0; j < n; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        means[static_cast<size_t>(r)] = mean;
        inv_std[static_cast<size_t>(r)] = is;
        T* orow = out.data() + r * n;
        for (int j = 0; j < n; ++j) orow[j] = (row[j] - mean) * is * g[j] + b[j];
    }

    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = x.shape();
    node->value = std::move(out);
    node->op = "layer_norm";
    auto* xn = x.node();
    auto* gn = gain.node();
    auto* bn = bias.node();
    if ((xn->requires_grad || gn->requires_grad || bn->requires_grad) && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node(), gain.shared_node(), bias.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, gn, bn, raw, rows, n, means, inv_std]() {
            const T* gy = raw->grad.data();
            const T* src = xn->value.data();
            const T* g = gn->value.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T mean = means[static_cast<size_t>(r)];
                const T is = inv_std[static_cast<size_t>(r)];
                const T* row = src + r * n;
                const T* gyr = gy + r * n;
                // xhat_j = (x_j - mean) * is
                if (gn->requires_grad) {
                    auto& gg = grad_buf(gn);
                    for (int j = 0; j < n; ++j) gg[j] += gyr[j] * (row[j] - mean) * is;
                }
                if (bn->requires_grad) {
                    auto& gb = grad_buf(bn);
                    for (int j = 0; j < n; ++j) gb[j] += gyr[j];
                }
                if (xn->requires_grad) {
                    auto& gx = grad_buf(xn);
                    T sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int j = 0; j < n; ++j) {
                        const T dxhat = gyr[j] * g[j];
                        const T xhat = (row[j] - mean) * is;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const T invn = T(1) / static_cast<T>(n);
                    for (int j = 0; j < n; ++j) {
                        const T dxhat = gyr[j] * g[j];
                        const T xhat = (row[j] - mean) * is;
                        gx[r * n + j] +=
                            is * (dxhat - invn * sum_dxhat - xhat * invn * sum_dxhat_xhat);
                    }
                }
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    static const T kSqrt2OverPi = static_cast<T>(0.7978845608028654);
    static const T kCubic = static_cast<T>(0.044715);
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        const T u = kSqrt2OverPi * (v + kCubic * v * v * v);
        out[i] = T(0.5) * v * (T(1) + std::tanh(u));
    }
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = x.shape();
    node->value = std::move(out);
    node->op = "gelu";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw]() {
            auto& gx = grad_buf(xn);
            for (size_t i = 0; i < raw->grad.size(); ++i) {
                const T v = xn->value[i];
                const T u = kSqrt2OverPi * (v + kCubic * v * v * v);
                const T th = std::tanh(u);
                const T du = kSqrt2OverPi * (T(1) + T(3) * kCubic * v * v);
                const T dydv = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
                gx[i] += raw->grad[i] * dydv;
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// cross_entropy / reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets,
                         const std::vector<bool>& mask) {
    require(logits.rank() == 2, "cross_entropy: logits must be [T x V]");
    const int steps = logits.dim(0), vocab = logits.dim(1);
    require(targets.size() == static_cast<size_t>(steps) && mask.size() == targets.size(),
            "cross_entropy: expected " + std::to_string(steps) + " targets/mask entries");
    int n_masked = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        ++n_masked;
        if (targets[i] < 0 || targets[i] >= vocab)
            throw ValueError("cross_entropy: target id " + std::to_string(targets[i]) +
                             " outside vocab of " + std::to_string(vocab));
    }
    if (n_masked == 0) throw ValueError("cross_entropy: degenerate all-false mask");

    // cache per-row softmax for the backward pass
    auto probs = std::make_shared<std::vector<T>>(logits.data().size());
    const T* src = logits.data().data();
    T* p = probs->data();
    double loss_acc = 0.0;
    for (int r = 0; r < steps; ++r) {
        const T* row = src + static_cast<size_t>(r) * vocab;
        T* prow = p + static_cast<size_t>(r) * vocab;
        T mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T total = 0;
        for (int j = 0; j < vocab; ++j) {
            const T e = std::exp(row[j] - mx);
            prow[j] = e;
            total += e;
        }
        const T inv = T(1) / total;
        for (int j = 0; j < vocab; ++j) prow[j] *= inv;
        if (mask[static_cast<size_t>(r)])
            loss_acc -= std::log(static_cast<double>(
                std::max(prow[targets[static_cast<size_t>(r)]], std::numeric_limits<T>::min())));
    }
    const T loss = static_cast<T>(loss_acc / n_masked);

    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {1};
    node->value = {loss};
    node->op = "cross_entropy";
    auto* ln = logits.node();
    if (ln->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {logits.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [ln, raw, probs, targets, mask, steps, vocab, n_masked]() {
            const T g = raw->grad[0] / static_cast<T>(n_masked);
            auto& gl = grad_buf(ln);
            const T* p = probs->data();
            for (int r = 0; r < steps; ++r) {
                if (!mask[static_cast<size_t>(r)]) continue;
                const T* prow = p + static_cast<size_t>(r) * vocab;
                T* grow = gl.data() + static_cast<size_t>(r) * vocab;
                for (int j = 0; j < vocab; ++j) grow[j] += g * prow[j];
                grow[targets[static_cast<size_t>(r)]] -= g;
            }
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    auto node = std::make_shared<detail::NodeT<T>>();
    node->shape = {1};
    node->value = {static_cast<T>(acc)};
    node->op = "sum";
    auto* xn = x.node();
    if (xn->requires_grad && tl_grad_enabled) {
        node->requires_grad = true;
        node->parents = {x.shared_node()};
        detail::NodeT<T>* raw = node.get();
        node->backward_fn = [xn, raw]() {
            auto& gx = grad_buf(xn);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += raw->grad[0];
        };
    }
    return TensorT<T>::wrap(std::move(node));
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
    if (!loss.is_scalar())
        throw ShapeError("backward: loss " + format_shape(loss.shape()) + " is not scalar");
    if (!loss.requires_grad())
        throw ValueError("backward: loss does not require grad (nothing on the tape)");

    // topological order via iterative post-order DFS over recorded parents
    std::vector<detail::NodeT<T>*> topo;
    std::unordered_set<detail::NodeT<T>*> visited;
    std::vector<std::pair<detail::NodeT<T>*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::NodeT<T>* parent = node->parents[idx].get();
            ++idx;
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad.assign(1, T(1));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::NodeT<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn();
    }
    // consume the tape: drop edges and closures, keep leaf grads
    for (auto* node : topo) {
        node->backward_fn = nullptr;
        node->parents.clear();
    }
}

template <typename T>
bool all_finite(const TensorT<T>& x) {
    for (T v : x.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// explicit instantiations: float for speed, double for gradient checks
#define AULITE_INSTANTIATE(T)                                                            \
    template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                       \
    template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                       \
    template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                       \
    template TensorT<T> scale(const TensorT<T>&, T);                                     \
    template TensorT<T> add_bias(const TensorT<T>&, const TensorT<T>&);                  \
    template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                    \
    template TensorT<T> transpose(const TensorT<T>&);                                    \
    template TensorT<T> slice_rows(const TensorT<T>&, int, int);                         \
    template TensorT<T> slice_cols(const TensorT<T>&, int, int);                         \
    template TensorT<T> concat_rows(const std::vector<TensorT<T>>&);                     \
    template TensorT<T> concat_cols(const std::vector<TensorT<T>>&);                     \
    template TensorT<T> embedding_lookup(const TensorT<T>&, const std::vector<int>&);    \
    template TensorT<T> softmax(const TensorT<T>&, int);                                 \
    template TensorT<T> causal_softmax(const TensorT<T>&, int);                          \
    template TensorT<T> layer_norm(const TensorT<T>&, const TensorT<T>&,                 \
                                   const TensorT<T>&, T);                                \
    template TensorT<T> gelu(const TensorT<T>&);                                         \
    template TensorT<T> cross_entropy(const TensorT<T>&, const std::vector<int>&,        \
                                      const std::vector<bool>&);                         \
    template TensorT<T> sum(const TensorT<T>&);                                          \
    template TensorT<T> mean(const TensorT<T>&);                                         \
    template void backward(const TensorT<T>&);                                           \
    template bool all_finite(const TensorT<T>&);

AULITE_INSTANTIATE(float)
AULITE_INSTANTIATE(double)

#undef AULITE_INSTANTIATE

}  // namespace aulite
