#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "metnet/errors.hpp"
#include "metnet/tensor.hpp"
#include "metnet/threading.hpp"

namespace metnet {

struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> data;

    IntTensor() = default;
    explicit IntTensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0) {}
    IntTensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
            throw ShapeError("IntTensor value count does not match shape " + shape_str(shape));
        }
    }
    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

enum class Padding { Same, Valid };
enum class Axis2D { Height = 1, Width = 2 };

namespace detail {

template <class S>
bool recording(std::initializer_list<const TensorT<S>*> inputs) {
    if (TapeT<S>::active() == nullptr) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <class S>
void record(const char* op, std::function<void()> fn) {
    TapeT<S>::active()->record(op, std::move(fn));
}

// Forward results are asserted finite in debug builds only; release builds
// rely on the trainer's per-step loss check.
template <class S>
inline void check_finite(const TensorT<S>& t, const char* op) {
#ifndef NDEBUG
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.at(i))) {
            throw NumericError(std::string(op) + ": non-finite value in forward output");
        }
    }
#else
    (void)t;
    (void)op;
#endif
}

template <class S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

inline std::int64_t same_pad_before(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride) {
    const std::int64_t total = std::max<std::int64_t>((out - 1) * stride + k - in, 0);
    return total / 2;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "add");
    TensorT<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    detail::check_finite(out, "add");
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        detail::record<S>("add", [a, b, out]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                for (std::int64_t i = 0; i < a.numel(); ++i) a.grad()[i] += g[i];
            }
            if (b.requires_grad()) {
                for (std::int64_t i = 0; i < b.numel(); ++i) b.grad()[i] += g[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "sub");
    TensorT<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    detail::check_finite(out, "sub");
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        detail::record<S>("sub", [a, b, out]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                for (std::int64_t i = 0; i < a.numel(); ++i) a.grad()[i] += g[i];
            }
            if (b.requires_grad()) {
                for (std::int64_t i = 0; i < b.numel(); ++i) b.grad()[i] -= g[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "mul");
    TensorT<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    detail::check_finite(out, "mul");
    if (detail::recording<S>({&a, &b})) {
        out.set_requires_grad(true);
        detail::record<S>("mul", [a, b, out]() mutable {
            const S* g = out.grad();
            if (a.requires_grad()) {
                for (std::int64_t i = 0; i < a.numel(); ++i) a.grad()[i] += g[i] * b.at(i);
            }
            if (b.requires_grad()) {
                for (std::int64_t i = 0; i < b.numel(); ++i) b.grad()[i] += g[i] * a.at(i);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
    TensorT<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * factor;
    detail::check_finite(out, "scale");
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("scale", [a, out, factor]() mutable {
            const S* g = out.grad();
            for (std::int64_t i = 0; i < a.numel(); ++i) a.grad()[i] += g[i] * factor;
        });
    }
    return out;
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    TensorT<S> out(Shape{1});
    S acc = S(0);
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.at(i);
    out.at(0) = acc;
    detail::check_finite(out, "sum");
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("sum", [a, out]() mutable {
            const S g = out.grad()[0];
            for (std::int64_t i = 0; i < a.numel(); ++i) a.grad()[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> tanh_op(const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = std::tanh(a.at(i));
    detail::check_finite(out, "tanh");
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("tanh", [a, out]() mutable {
            const S* g = out.grad();
            for (std::int64_t i = 0; i < a.numel(); ++i) {
                const S y = out.at(i);
                a.grad()[i] += g[i] * (S(1) - y * y);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const S x = a.at(i);
        out.at(i) = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
    }
    detail::check_finite(out, "sigmoid");
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("sigmoid", [a, out]() mutable {
            const S* g = out.grad();
            for (std::int64_t i = 0; i < a.numel(); ++i) {
                const S y = out.at(i);
                a.grad()[i] += g[i] * y * (S(1) - y);
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
    TensorT<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) > S(0) ? a.at(i) : S(0);
    detail::check_finite(out, "relu");
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("relu", [a, out]() mutable {
            const S* g = out.grad();
            for (std::int64_t i = 0; i < a.numel(); ++i) {
                if (a.at(i) > S(0)) a.grad()[i] += g[i];
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> softmax(const TensorT<S>& a, int axis) {
    const auto& shape = a.shape();
    if (axis < 0) axis += static_cast<int>(shape.size());
    if (axis < 0 || axis >= static_cast<int>(shape.size())) {
        throw ShapeError("softmax: axis out of range for shape " + shape_str(shape));
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    const std::int64_t k = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];

    TensorT<S> out(shape);
    const S* src = a.data();
    S* dst = out.data();
    parallel_for(outer, [&](std::int64_t o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * k * inner + in;
            S mx = src[base];
            for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, src[base + j * inner]);
            S denom = S(0);
            for (std::int64_t j = 0; j < k; ++j) {
                const S e = std::exp(src[base + j * inner] - mx);
                dst[base + j * inner] = e;
                denom += e;
            }
            const S inv = S(1) / denom;
            for (std::int64_t j = 0; j < k; ++j) dst[base + j * inner] *= inv;
        }
    }, 4);
    detail::check_finite(out, "softmax");
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("softmax", [a, out, outer, k, inner]() mutable {
            const S* g = out.grad();
            const S* y = out.data();
            S* da = a.grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * k * inner + in;
                    S dot = S(0);
                    for (std::int64_t j = 0; j < k; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::int64_t j = 0; j < k; ++j) {
                        const std::int64_t idx = base + j * inner;
                        da[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// Normalizes over the trailing axis, then applies gain and bias.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& bias) {
    if (a.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    const std::int64_t d = a.shape().back();
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias length must match trailing dim " + std::to_string(d));
    }
    const std::int64_t rows = a.numel() / d;
    constexpr S kEps = S(1e-5);

    TensorT<S> out(a.shape());
    std::vector<S> mean(static_cast<std::size_t>(rows)), inv_std(static_cast<std::size_t>(rows));
    const S* src = a.data();
    S* dst = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* x = src + r * d;
        S mu = S(0);
        for (std::int64_t i = 0; i < d; ++i) mu += x[i];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (std::int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= static_cast<S>(d);
        const S is = S(1) / std::sqrt(var + kEps);
        mean[static_cast<std::size_t>(r)] = mu;
        inv_std[static_cast<std::size_t>(r)] = is;
        S* y = dst + r * d;
        for (std::int64_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * is * gain.at(i) + bias.at(i);
    }
    detail::check_finite(out, "layer_norm");
    if (detail::recording<S>({&a, &gain, &bias})) {
        out.set_requires_grad(true);
        detail::record<S>("layer_norm", [a, gain, bias, out, rows, d, mean, inv_std]() mutable {
            const S* g = out.grad();
            const S* x = a.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S mu = mean[static_cast<std::size_t>(r)];
                const S is = inv_std[static_cast<std::size_t>(r)];
                const S* gr = g + r * d;
                const S* xr = x + r * d;
                S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
                for (std::int64_t i = 0; i < d; ++i) {
                    const S xhat = (xr[i] - mu) * is;
                    const S dxhat = gr[i] * gain.at(i);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gain.requires_grad()) gain.grad()[i] += gr[i] * xhat;
                    if (bias.requires_grad()) bias.grad()[i] += gr[i];
                }
                if (a.requires_grad()) {
                    const S inv_d = S(1) / static_cast<S>(d);
                    for (std::int64_t i = 0; i < d; ++i) {
                        const S xhat = (xr[i] - mu) * is;
                        const S dxhat = gr[i] * gain.at(i);
                        a.grad()[r * d + i] += is * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> concat_last(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat: empty input list");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        Shape pl(p.shape().begin(), p.shape().end() - 1);
        if (pl != lead) throw ShapeError("concat: leading dims mismatch");
        total += p.shape().back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    TensorT<S> out(out_shape);
    const std::int64_t rows = shape_numel(lead);
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t c = p.shape().back();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy_n(p.data() + r * c, c, out.data() + r * total + offset);
        }
        offset += c;
    }
    bool rec = false;
    for (const auto& p : parts) {
        if (p.requires_grad()) rec = true;
    }
    if (rec && TapeT<S>::active() != nullptr) {
        out.set_requires_grad(true);
        detail::record<S>("concat", [parts, out, rows, total]() mutable {
            const S* g = out.grad();
            std::int64_t offset2 = 0;
            for (auto& p : parts) {
                const std::int64_t c = p.shape().back();
                if (p.requires_grad()) {
                    for (std::int64_t r = 0; r < rows; ++r) {
                        S* dst = p.grad() + r * c;
                        const S* srcg = g + r * total + offset2;
                        for (std::int64_t i = 0; i < c; ++i) dst[i] += srcg[i];
                    }
                }
                offset2 += c;
            }
        });
    }
    return out;
}

template <class S>
TensorT<S> slice_last(const TensorT<S>& a, std::int64_t from, std::int64_t count) {
    const std::int64_t c = a.shape().back();
    if (from < 0 || count <= 0 || from + count > c) {
        throw ShapeError("slice: range [" + std::to_string(from) + "," + std::to_string(from + count) +
                         ") out of bounds for trailing dim " + std::to_string(c));
    }
    Shape out_shape = a.shape();
    out_shape.back() = count;
    TensorT<S> out(out_shape);
    const std::int64_t rows = a.numel() / c;
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.data() + r * c + from, count, out.data() + r * count);
    }
    if (detail::recording<S>({&a})) {
        out.set_requires_grad(true);
        detail::record<S>("slice", [a, out, rows, c, from, count]() mutable {
            const S* g = out.grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                S* dst = a.grad() + r * c + from;
                const S* srcg = g + r * count;
                for (std::int64_t i = 0; i < count; ++i) dst[i] += srcg[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Affine ops
// ---------------------------------------------------------------------------

// Affine map along the trailing axis: out[..., j] = sum_i in[..., i] W[i,j] + b[j].
template <class S>
TensorT<S> dense(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    if (w.rank() != 2) throw ShapeError("dense: weights must be rank 2");
    const std::int64_t di = w.dim(0), dout = w.dim(1);
    if (x.shape().back() != di) {
        throw ShapeError("dense: input trailing dim " + std::to_string(x.shape().back()) +
                         " does not match weights " + shape_str(w.shape()));
    }
    if (b.numel() != dout) throw ShapeError("dense: bias length mismatch");
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    TensorT<S> out(out_shape);
    const std::int64_t rows = x.numel() / di;

    // Transposed weights make the inner dot contiguous.
    std::vector<S> wt(static_cast<std::size_t>(di * dout));
    for (std::int64_t i = 0; i < di; ++i) {
        for (std::int64_t j = 0; j < dout; ++j) wt[static_cast<std::size_t>(j * di + i)] = w.at(i * dout + j);
    }
    const S* src = x.data();
    S* dst = out.data();
    parallel_for(rows, [&](std::int64_t r) {
        const S* xr = src + r * di;
        S* yr = dst + r * dout;
        for (std::int64_t j = 0; j < dout; ++j) {
            const S* wr = wt.data() + j * di;
            S acc = b.at(j);
            for (std::int64_t i = 0; i < di; ++i) acc += xr[i] * wr[i];
            yr[j] = acc;
        }
    }, 16);
    detail::check_finite(out, "dense");
    if (detail::recording<S>({&x, &w, &b})) {
        out.set_requires_grad(true);
        detail::record<S>("dense", [x, w, b, out, rows, di, dout]() mutable {
            const S* g = out.grad();
            if (x.requires_grad()) {
                S* dx = x.grad();
                parallel_for(rows, [&](std::int64_t r) {
                    const S* gr = g + r * dout;
                    S* dxr = dx + r * di;
                    for (std::int64_t i = 0; i < di; ++i) {
                        const S* wr = w.data() + i * dout;
                        S acc = S(0);
                        for (std::int64_t j = 0; j < dout; ++j) acc += gr[j] * wr[j];
                        dxr[i] += acc;
                    }
                }, 16);
            }
            if (w.requires_grad()) {
                S* dw = w.grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const S* xr = x.data() + r * di;
                    const S* gr = g + r * dout;
                    for (std::int64_t i = 0; i < di; ++i) {
                        const S xv = xr[i];
                        S* dwr = dw + i * dout;
                        for (std::int64_t j = 0; j < dout; ++j) dwr[j] += xv * gr[j];
                    }
                }
            }
            if (b.requires_grad()) {
                S* db = b.grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const S* gr = g + r * dout;
                    for (std::int64_t j = 0; j < dout; ++j) db[j] += gr[j];
                }
            }
        });
    }
    return out;
}

// Broadcast add of a per-channel bias over the trailing axis.
template <class S>
TensorT<S> add_channel_bias(const TensorT<S>& x, const TensorT<S>& b) {
    const std::int64_t c = x.shape().back();
    if (b.numel() != c) throw ShapeError("add_channel_bias: bias length mismatch");
    TensorT<S> out(x.shape());
    const std::int64_t rows = x.numel() / c;
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x.data() + r * c;
        S* yr = out.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) yr[i] = xr[i] + b.at(i);
    }
    detail::check_finite(out, "add_channel_bias");
    if (detail::recording<S>({&x, &b})) {
        out.set_requires_grad(true);
        detail::record<S>("add_channel_bias", [x, b, out, rows, c]() mutable {
            const S* g = out.grad();
            if (x.requires_grad()) {
                for (std::int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += g[i];
            }
            if (b.requires_grad()) {
                for (std::int64_t r = 0; r < rows; ++r) {
                    const S* gr = g + r * c;
                    for (std::int64_t i = 0; i < c; ++i) b.grad()[i] += gr[i];
                }
            }
        });
    }
    return out;
}

// Adds a learned per-position embedding [len, C] along the height or width
// axis of an [N,H,W,C] tensor.
template <class S>
TensorT<S> add_axis_embedding(const TensorT<S>& x, const TensorT<S>& emb, Axis2D axis) {
    if (x.rank() != 4) throw ShapeError("add_axis_embedding: input must be [N,H,W,C]");
    const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::int64_t len = axis == Axis2D::Width ? w : h;
    if (emb.rank() != 2 || emb.dim(0) != len || emb.dim(1) != c) {
        throw ShapeError("add_axis_embedding: embedding shape " + shape_str(emb.shape()) +
                         " does not match axis length " + std::to_string(len));
    }
    TensorT<S> out(x.shape());
    for (std::int64_t idx = 0; idx < n * h * w; ++idx) {
        const std::int64_t pos = axis == Axis2D::Width ? idx % w : (idx / w) % h;
        const S* e = emb.data() + pos * c;
        const S* xr = x.data() + idx * c;
        S* yr = out.data() + idx * c;
        for (std::int64_t i = 0; i < c; ++i) yr[i] = xr[i] + e[i];
    }
    detail::check_finite(out, "add_axis_embedding");
    if (detail::recording<S>({&x, &emb})) {
        out.set_requires_grad(true);
        detail::record<S>("add_axis_embedding", [x, emb, out, n, h, w, c, axis]() mutable {
            const S* g = out.grad();
            if (x.requires_grad()) {
                for (std::int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += g[i];
            }
            if (emb.requires_grad()) {
                S* de = emb.grad();
                for (std::int64_t idx = 0; idx < n * h * w; ++idx) {
                    const std::int64_t pos = axis == Axis2D::Width ? idx % w : (idx / w) % h;
                    const S* gr = g + idx * c;
                    S* er = de + pos * c;
                    for (std::int64_t i = 0; i < c; ++i) er[i] += gr[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

// input [N,H,W,Cin], kernel [kh,kw,Cin,Cout]. Same padding requires odd
// kernels and yields ceil(H/stride) spatial output.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k, std::int64_t stride, Padding padding) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [N,H,W,Cin], got " + shape_str(x.shape()));
    if (k.rank() != 4) throw ShapeError("conv2d: kernel must be [kh,kw,Cin,Cout], got " + shape_str(k.shape()));
    if (stride < 1) throw ShapeError("conv2d: stride must be positive");
    const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
    const std::int64_t kh = k.dim(0), kw = k.dim(1), co = k.dim(3);
    if (k.dim(2) != ci) {
        throw ShapeError("conv2d: input channels " + std::to_string(ci) + " do not match kernel " +
                         shape_str(k.shape()));
    }
    std::int64_t ho, wo, ph, pw;
    if (padding == Padding::Same) {
        if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: same padding requires odd kernel dims");
        ho = (h + stride - 1) / stride;
        wo = (w + stride - 1) / stride;
        ph = detail::same_pad_before(h, ho, kh, stride);
        pw = detail::same_pad_before(w, wo, kw, stride);
    } else {
        if (h < kh || w < kw) throw ShapeError("conv2d: input smaller than kernel for valid padding");
        ho = (h - kh) / stride + 1;
        wo = (w - kw) / stride + 1;
        ph = pw = 0;
    }

    // Kernel transposed to [co][kh*kw*ci] so the inner dot is contiguous.
    std::vector<S> kt(static_cast<std::size_t>(co * kh * kw * ci));
    for (std::int64_t r = 0; r < kh; ++r) {
        for (std::int64_t q = 0; q < kw; ++q) {
            for (std::int64_t i = 0; i < ci; ++i) {
                const S* src = k.data() + ((r * kw + q) * ci + i) * co;
                for (std::int64_t j = 0; j < co; ++j) {
                    kt[static_cast<std::size_t>(j * kh * kw * ci + (r * kw + q) * ci + i)] = src[j];
                }
            }
        }
    }

    if (kh * kw > 64) throw ShapeError("conv2d: kernel window larger than 8x8 is unsupported");
    TensorT<S> out(Shape{n, ho, wo, co});
    const S* src = x.data();
    S* dst = out.data();
    parallel_for(n * ho, [&](std::int64_t row) {
        const std::int64_t nn = row / ho;
        const std::int64_t oy = row % ho;
        std::int64_t taps_off[64];
        const S* taps_ptr[64];
        for (std::int64_t ox = 0; ox < wo; ++ox) {
            int taps = 0;
            for (std::int64_t r = 0; r < kh; ++r) {
                const std::int64_t iy = oy * stride - ph + r;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t q = 0; q < kw; ++q) {
                    const std::int64_t ix = ox * stride - pw + q;
                    if (ix < 0 || ix >= w) continue;
                    taps_off[taps] = (r * kw + q) * ci;
                    taps_ptr[taps] = src + ((nn * h + iy) * w + ix) * ci;
                    ++taps;
                }
            }
            S* yr = dst + ((nn * ho + oy) * wo + ox) * co;
            for (std::int64_t j = 0; j < co; ++j) {
                const S* kj = kt.data() + j * kh * kw * ci;
                S acc = S(0);
                for (int t = 0; t < taps; ++t) {
                    const S* xp = taps_ptr[t];
                    const S* kp = kj + taps_off[t];
                    for (std::int64_t i = 0; i < ci; ++i) acc += xp[i] * kp[i];
                }
                yr[j] = acc;
            }
        }
    }, 1);
    detail::check_finite(out, "conv2d");

    if (detail::recording<S>({&x, &k})) {
        out.set_requires_grad(true);
        detail::record<S>("conv2d", [x, k, out, n, h, w, ci, kh, kw, co, ho, wo, ph, pw, stride]() mutable {
            const S* g = out.grad();
            if (x.requires_grad()) {
                S* dx = x.grad();
                parallel_for(n * h, [&](std::int64_t row) {
                    const std::int64_t nn = row / h;
                    const std::int64_t iy = row % h;
                    for (std::int64_t ix = 0; ix < w; ++ix) {
                        S* dxr = dx + ((nn * h + iy) * w + ix) * ci;
                        for (std::int64_t r = 0; r < kh; ++r) {
                            const std::int64_t num_y = iy + ph - r;
                            if (num_y < 0 || num_y % stride != 0) continue;
                            const std::int64_t oy = num_y / stride;
                            if (oy >= ho) continue;
                            for (std::int64_t q = 0; q < kw; ++q) {
                                const std::int64_t num_x = ix + pw - q;
                                if (num_x < 0 || num_x % stride != 0) continue;
                                const std::int64_t ox = num_x / stride;
                                if (ox >= wo) continue;
                                const S* gr = g + ((nn * ho + oy) * wo + ox) * co;
                                const S* kr = k.data() + (r * kw + q) * ci * co;
                                for (std::int64_t i = 0; i < ci; ++i) {
                                    const S* ki = kr + i * co;
                                    S acc = S(0);
                                    for (std::int64_t j = 0; j < co; ++j) acc += gr[j] * ki[j];
                                    dxr[i] += acc;
                                }
                            }
                        }
                    }
                }, 1);
            }
            if (k.requires_grad()) {
                S* dk = k.grad();
                parallel_for(kh * kw, [&](std::int64_t tap) {
                    const std::int64_t r = tap / kw;
                    const std::int64_t q = tap % kw;
                    S* dkr = dk + tap * ci * co;
                    for (std::int64_t nn = 0; nn < n; ++nn) {
                        for (std::int64_t oy = 0; oy < ho; ++oy) {
                            const std::int64_t iy = oy * stride - ph + r;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t ox = 0; ox < wo; ++ox) {
                                const std::int64_t ix = ox * stride - pw + q;
                                if (ix < 0 || ix >= w) continue;
                                const S* xr = x.data() + ((nn * h + iy) * w + ix) * ci;
                                const S* gr = g + ((nn * ho + oy) * wo + ox) * co;
                                for (std::int64_t i = 0; i < ci; ++i) {
                                    const S xv = xr[i];
                                    S* row = dkr + i * co;
                                    for (std::int64_t j = 0; j < co; ++j) row[j] += xv * gr[j];
                                }
                            }
                        }
                    }
                }, 1);
            }
        });
    }
    return out;
}

// Gradient routes to the first maximum in row-major window order.
template <class S>
TensorT<S> max_pool2d(const TensorT<S>& x, std::int64_t window, std::int64_t stride) {
    if (x.rank() != 4) throw ShapeError("max_pool2d: input must be [N,H,W,C]");
    if (window < 1 || stride < 1) throw ShapeError("max_pool2d: window and stride must be positive");
    const std::int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if ((h - window) % stride != 0 || (w - window) % stride != 0) {
        throw ShapeError("max_pool2d: dims " + shape_str(x.shape()) + " not divisible by stride " +
                         std::to_string(stride) + " with window " + std::to_string(window));
    }
    const std::int64_t ho = (h - window) / stride + 1;
    const std::int64_t wo = (w - window) / stride + 1;
    TensorT<S> out(Shape{n, ho, wo, c});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
    const S* src = x.data();
    S* dst = out.data();
    parallel_for(n * ho, [&](std::int64_t row) {
        const std::int64_t nn = row / ho;
        const std::int64_t oy = row % ho;
        for (std::int64_t ox = 0; ox < wo; ++ox) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                S best = src[((nn * h + oy * stride) * w + ox * stride) * c + ch];
                std::int64_t best_idx = ((nn * h + oy * stride) * w + ox * stride) * c + ch;
                for (std::int64_t r = 0; r < window; ++r) {
                    for (std::int64_t q = 0; q < window; ++q) {
                        const std::int64_t idx = ((nn * h + oy * stride + r) * w + ox * stride + q) * c + ch;
                        if (src[idx] > best) {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                const std::int64_t oidx = ((nn * ho + oy) * wo + ox) * c + ch;
                dst[oidx] = best;
                (*argmax)[static_cast<std::size_t>(oidx)] = best_idx;
            }
        }
    }, 1);
    detail::check_finite(out, "max_pool2d");
    if (detail::recording<S>({&x})) {
        out.set_requires_grad(true);
        detail::record<S>("max_pool2d", [x, out, argmax]() mutable {
            const S* g = out.grad();
            S* dx = x.grad();
            for (std::int64_t i = 0; i < out.numel(); ++i) {
                dx[(*argmax)[static_cast<std::size_t>(i)]] += g[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Multi-head scaled-dot-product attention applied independently to every 1-D
// line along the chosen axis of [N,H,W,C] tensors. Softmax weights are saved
// for the backward pass.
template <class S>
TensorT<S> line_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v, Axis2D axis,
                          std::int64_t heads) {
    if (q.rank() != 4) throw ShapeError("line_attention: inputs must be [N,H,W,C]");
    detail::require_same_shape(q, k, "line_attention");
    detail::require_same_shape(q, v, "line_attention");
    const std::int64_t n = q.dim(0), h = q.dim(1), w = q.dim(2), c = q.dim(3);
    if (heads < 1 || c % heads != 0) {
        throw ShapeError("line_attention: heads " + std::to_string(heads) + " must divide channels " +
                         std::to_string(c));
    }
    const std::int64_t dh = c / heads;
    const std::int64_t len = axis == Axis2D::Width ? w : h;
    const std::int64_t lines = axis == Axis2D::Width ? n * h : n * w;
    const S scale_f = S(1) / std::sqrt(static_cast<S>(dh));

    // Element stride between consecutive line positions.
    const std::int64_t step = axis == Axis2D::Width ? c : w * c;
    const bool along_width = axis == Axis2D::Width;
    auto line_base = [along_width, h, w, c](std::int64_t line) {
        if (along_width) {
            return line * w * c;  // line = n*h index
        }
        const std::int64_t nn = line / w, ww = line % w;
        return (nn * h * w + ww) * c;
    };

    TensorT<S> out(q.shape());
    auto attn = std::make_shared<std::vector<S>>(static_cast<std::size_t>(lines * heads * len * len));
    const S* qp = q.data();
    const S* kp = k.data();
    const S* vp = v.data();
    S* op = out.data();
    parallel_for(lines, [&](std::int64_t line) {
        const std::int64_t base = line_base(line);
        for (std::int64_t hd = 0; hd < heads; ++hd) {
            const std::int64_t c0 = hd * dh;
            S* a = attn->data() + ((line * heads) + hd) * len * len;
            for (std::int64_t i = 0; i < len; ++i) {
                const S* qi = qp + base + i * step + c0;
                S* arow = a + i * len;
                S mx = -std::numeric_limits<S>::infinity();
                for (std::int64_t j = 0; j < len; ++j) {
                    const S* kj = kp + base + j * step + c0;
                    S s = S(0);
                    for (std::int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    s *= scale_f;
                    arow[j] = s;
                    mx = std::max(mx, s);
                }
                S denom = S(0);
                for (std::int64_t j = 0; j < len; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    denom += arow[j];
                }
                const S inv = S(1) / denom;
                S* oi = op + base + i * step + c0;
                for (std::int64_t d = 0; d < dh; ++d) oi[d] = S(0);
                for (std::int64_t j = 0; j < len; ++j) {
                    arow[j] *= inv;
                    const S aij = arow[j];
                    const S* vj = vp + base + j * step + c0;
                    for (std::int64_t d = 0; d < dh; ++d) oi[d] += aij * vj[d];
                }
            }
        }
    }, 1);
    detail::check_finite(out, "line_attention");

    if (detail::recording<S>({&q, &k, &v})) {
        out.set_requires_grad(true);
        detail::record<S>("line_attention",
                          [q, k, v, out, attn, lines, heads, len, dh, step, scale_f, line_base]() mutable {
            const S* g = out.grad();
            const S* qp2 = q.data();
            const S* kp2 = k.data();
            const S* vp2 = v.data();
            std::vector<S> da(static_cast<std::size_t>(len));
            std::vector<S> ds(static_cast<std::size_t>(len));
            for (std::int64_t line = 0; line < lines; ++line) {
                const std::int64_t base = line_base(line);
                for (std::int64_t hd = 0; hd < heads; ++hd) {
                    const std::int64_t c0 = hd * dh;
                    const S* a = attn->data() + ((line * heads) + hd) * len * len;
                    for (std::int64_t i = 0; i < len; ++i) {
                        const S* gi = g + base + i * step + c0;
                        const S* arow = a + i * len;
                        // dV and dA
                        S dot = S(0);
                        for (std::int64_t j = 0; j < len; ++j) {
                            const S* vj = vp2 + base + j * step + c0;
                            S daij = S(0);
                            for (std::int64_t d = 0; d < dh; ++d) daij += gi[d] * vj[d];
                            da[static_cast<std::size_t>(j)] = daij;
                            dot += daij * arow[j];
                            if (v.requires_grad()) {
                                S* dvj = v.grad() + base + j * step + c0;
                                const S aij = arow[j];
                                for (std::int64_t d = 0; d < dh; ++d) dvj[d] += aij * gi[d];
                            }
                        }
                        for (std::int64_t j = 0; j < len; ++j) {
                            ds[static_cast<std::size_t>(j)] =
                                arow[j] * (da[static_cast<std::size_t>(j)] - dot) * scale_f;
                        }
                        if (q.requires_grad()) {
                            S* dqi = q.grad() + base + i * step + c0;
                            for (std::int64_t j = 0; j < len; ++j) {
                                const S* kj = kp2 + base + j * step + c0;
                                const S dsj = ds[static_cast<std::size_t>(j)];
                                for (std::int64_t d = 0; d < dh; ++d) dqi[d] += dsj * kj[d];
                            }
                        }
                        if (k.requires_grad()) {
                            const S* qi = qp2 + base + i * step + c0;
                            for (std::int64_t j = 0; j < len; ++j) {
                                S* dkj = k.grad() + base + j * step + c0;
                                const S dsj = ds[static_cast<std::size_t>(j)];
                                for (std::int64_t d = 0; d < dh; ++d) dkj[d] += dsj * qi[d];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over masked pixels of -log softmax(logits)[target]. Pixels with mask 0
// contribute neither loss nor gradient; an all-zero mask is an error.
template <class S>
TensorT<S> masked_cross_entropy(const TensorT<S>& logits, const IntTensor& targets, const TensorT<S>& mask) {
    if (logits.rank() < 2) throw ShapeError("masked_cross_entropy: logits must have a class axis");
    const std::int64_t k = logits.shape().back();
    const std::int64_t pixels = logits.numel() / k;
    if (targets.numel() != pixels || mask.numel() != pixels) {
        throw ShapeError("masked_cross_entropy: targets/mask must match logits leading dims");
    }
    S mask_total = S(0);
    for (std::int64_t p = 0; p < pixels; ++p) {
        const S m = mask.at(p);
        if (m != S(0) && m != S(1)) throw DataError("masked_cross_entropy: mask values must be 0 or 1");
        mask_total += m;
    }
    if (mask_total == S(0)) throw DataError("masked_cross_entropy: mask is all zero, mean is undefined");

    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(logits.numel()));
    S loss_acc = S(0);
    const S* lp = logits.data();
    for (std::int64_t p = 0; p < pixels; ++p) {
        const std::int32_t t = targets.data[static_cast<std::size_t>(p)];
        if (t < 0 || t >= k) {
            throw DataError("masked_cross_entropy: target bin " + std::to_string(t) + " outside [0," +
                            std::to_string(k) + ")");
        }
        const S* row = lp + p * k;
        S* prow = probs->data() + p * k;
        S mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (std::int64_t j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        const S inv = S(1) / denom;
        for (std::int64_t j = 0; j < k; ++j) prow[j] *= inv;
        if (mask.at(p) != S(0)) {
            loss_acc += -(row[t] - mx - std::log(denom));
        }
    }
    TensorT<S> out(Shape{1});
    out.at(0) = loss_acc / mask_total;
    detail::check_finite(out, "masked_cross_entropy");
    if (detail::recording<S>({&logits})) {
        out.set_requires_grad(true);
        detail::record<S>("masked_cross_entropy", [logits, targets, mask, out, probs, pixels, k,
                                                   mask_total]() mutable {
            const S g = out.grad()[0];
            if (!logits.requires_grad()) return;
            S* dl = logits.grad();
            const S inv_m = g / mask_total;
            for (std::int64_t p = 0; p < pixels; ++p) {
                if (mask.at(p) == S(0)) continue;
                const std::int32_t t = targets.data[static_cast<std::size_t>(p)];
                const S* prow = probs->data() + p * k;
                S* drow = dl + p * k;
                for (std::int64_t j = 0; j < k; ++j) drow[j] += inv_m * prow[j];
                drow[t] -= inv_m;
            }
        });
    }
    return out;
}

}  // namespace metnet
