#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

// Differentiable tensor ops. Every op takes the tape first: pass nullptr for
// inference, in which case nothing is recorded and outputs never require grad.
namespace diffad::ops {

namespace detail {

template <class T>
bool records(const BasicTape<T>* tape, std::initializer_list<const BasicTensor<T>*> inputs) {
    if (tape == nullptr) return false;
    for (auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
    }
}

// Decompose a shape around `axis` into outer * len * inner.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// df(grad_out, input, output) -> grad_in
template <class T, class F, class DF>
BasicTensor<T> unary(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, const char* name, F&& f, DF df) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    bool rec = records(tape, {&a});
    auto y = make_op_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape->record(name, {a}, y, [a, y, df](std::span<const T> g) {
            return std::vector<std::vector<T>>{df(g, a.values(), y.values())};
        });
    }
    return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> add(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    bool rec = detail::records(tape, {&a, &b});
    auto y = make_op_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape->record("add", {a, b}, y, [](std::span<const T> g) {
            std::vector<T> gv(g.begin(), g.end());
            return std::vector<std::vector<T>>{gv, gv};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> sub(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    bool rec = detail::records(tape, {&a, &b});
    auto y = make_op_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape->record("sub", {a, b}, y, [](std::span<const T> g) {
            std::vector<T> ga(g.begin(), g.end());
            std::vector<T> gb(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
            return std::vector<std::vector<T>>{std::move(ga), std::move(gb)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> mul(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    bool rec = detail::records(tape, {&a, &b});
    auto y = make_op_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape->record("mul", {a, b}, y, [a, b](std::span<const T> g) {
            std::vector<T> ga, gb;
            if (a.requires_grad()) {
                ga.resize(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
            }
            if (b.requires_grad()) {
                gb.resize(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
            }
            return std::vector<std::vector<T>>{std::move(ga), std::move(gb)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> div(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "div");
    if (checked_mode()) {
        for (std::size_t i = 0; i < b.size(); ++i) {
            if (b[i] == T(0)) throw NumericError("div: zero divisor at element " + std::to_string(i));
        }
    }
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
    bool rec = detail::records(tape, {&a, &b});
    auto y = make_op_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape->record("div", {a, b}, y, [a, b, y](std::span<const T> g) {
            std::vector<T> ga, gb;
            if (a.requires_grad()) {
                ga.resize(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / b[i];
            }
            if (b.requires_grad()) {
                gb.resize(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i] * y[i] / b[i];
            }
            return std::vector<std::vector<T>>{std::move(ga), std::move(gb)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> add_scalar(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, std::type_identity_t<T> s) {
    return detail::unary(
        tape, a, "add_scalar", [s](T v) { return v + s; },
        [](std::span<const T> g, const std::vector<T>&, const std::vector<T>&) {
            return std::vector<T>(g.begin(), g.end());
        });
}

template <class T>
BasicTensor<T> scale(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, std::type_identity_t<T> s) {
    return detail::unary(
        tape, a, "scale", [s](T v) { return v * s; },
        [s](std::span<const T> g, const std::vector<T>&, const std::vector<T>&) {
            std::vector<T> r(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) r[i] = g[i] * s;
            return r;
        });
}

template <class T>
BasicTensor<T> div_scalar(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, std::type_identity_t<T> s) {
    if (checked_mode() && s == T(0)) throw NumericError("div: zero scalar divisor");
    return detail::unary(
        tape, a, "div_scalar", [s](T v) { return v / s; },
        [s](std::span<const T> g, const std::vector<T>&, const std::vector<T>&) {
            std::vector<T> r(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) r[i] = g[i] / s;
            return r;
        });
}

template <class T>
BasicTensor<T> sqrt(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a) {
    if (checked_mode()) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] < T(0)) throw NumericError("sqrt: negative input");
        }
    }
    return detail::unary(
        tape, a, "sqrt", [](T v) { return std::sqrt(v); },
        [](std::span<const T> g, const std::vector<T>&, const std::vector<T>& y) {
            std::vector<T> r(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) r[i] = g[i] / (T(2) * y[i]);
            return r;
        });
}

template <class T>
BasicTensor<T> square(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a) {
    return detail::unary(
        tape, a, "square", [](T v) { return v * v; },
        [](std::span<const T> g, const std::vector<T>& x, const std::vector<T>&) {
            std::vector<T> r(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) r[i] = T(2) * x[i] * g[i];
            return r;
        });
}

/// x * sigmoid(x)
template <class T>
BasicTensor<T> silu(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a) {
    return detail::unary(
        tape, a, "silu", [](T v) { return v / (T(1) + std::exp(-v)); },
        [](std::span<const T> g, const std::vector<T>& x, const std::vector<T>&) {
            std::vector<T> r(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                T s = T(1) / (T(1) + std::exp(-x[i]));
                r[i] = g[i] * s * (T(1) + x[i] * (T(1) - s));
            }
            return r;
        });
}

template <class T>
BasicTensor<T> leaky_relu(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, std::type_identity_t<T> slope) {
    return detail::unary(
        tape, a, "leaky_relu", [slope](T v) { return v >= T(0) ? v : slope * v; },
        [slope](std::span<const T> g, const std::vector<T>& x, const std::vector<T>&) {
            std::vector<T> r(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) r[i] = x[i] >= T(0) ? g[i] : slope * g[i];
            return r;
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sum(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    bool rec = detail::records(tape, {&a});
    auto y = make_op_result(Shape{}, std::vector<T>{static_cast<T>(acc)}, rec);
    if (rec) {
        std::size_t n = a.size();
        tape->record("sum", {a}, y, [n](std::span<const T> g) {
            return std::vector<std::vector<T>>{std::vector<T>(n, g[0])};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> mean(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a) {
    return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> matmul(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: both operands must be rank 2");
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k) {
        throw ShapeError("matmul: inner dimension mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    std::vector<T> out(m * n);
    detail::MapMat<T>(out.data(), m, n).noalias() =
        detail::CMapMat<T>(a.data().data(), m, k) * detail::CMapMat<T>(b.data().data(), k, n);
    bool rec = detail::records(tape, {&a, &b});
    auto y = make_op_result(Shape{m, n}, std::move(out), rec);
    if (rec) {
        tape->record("matmul", {a, b}, y, [a, b, m, k, n](std::span<const T> g) {
            detail::CMapMat<T> G(g.data(), m, n);
            std::vector<T> ga, gb;
            if (a.requires_grad()) {
                ga.resize(m * k);
                detail::MapMat<T>(ga.data(), m, k).noalias() =
                    G * detail::CMapMat<T>(b.data().data(), k, n).transpose();
            }
            if (b.requires_grad()) {
                gb.resize(k * n);
                detail::MapMat<T>(gb.data(), k, n).noalias() =
                    detail::CMapMat<T>(a.data().data(), m, k).transpose() * G;
            }
            return std::vector<std::vector<T>>{std::move(ga), std::move(gb)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> transpose(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: operand must be rank 2");
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    bool rec = detail::records(tape, {&a});
    auto y = make_op_result(Shape{n, m}, std::move(out), rec);
    if (rec) {
        tape->record("transpose", {a}, y, [m, n](std::span<const T> g) {
            std::vector<T> ga(m * n);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
            return std::vector<std::vector<T>>{std::move(ga)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> reshape(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape) + " changes element count");
    }
    bool rec = detail::records(tape, {&a});
    auto y = make_op_result(std::move(shape), a.values(), rec);
    if (rec) {
        tape->record("reshape", {a}, y, [](std::span<const T> g) {
            return std::vector<std::vector<T>>{std::vector<T>(g.begin(), g.end())};
        });
    }
    return y;
}

/// Contiguous range [start, start+len) along `axis`.
template <class T>
BasicTensor<T> slice(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, std::size_t axis, std::size_t start,
                     std::size_t len) {
    if (axis >= a.rank()) throw ShapeError("slice: axis out of range");
    if (len == 0 || start + len > a.extent(axis)) throw ShapeError("slice: range out of bounds");
    auto sp = detail::split_axis(a.shape(), axis);
    Shape shape = a.shape();
    shape[axis] = len;
    std::vector<T> out(sp.outer * len * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = a.data().data() + (o * sp.len + start) * sp.inner;
        std::copy(src, src + len * sp.inner, out.begin() + o * len * sp.inner);
    }
    bool rec = detail::records(tape, {&a});
    auto y = make_op_result(std::move(shape), std::move(out), rec);
    if (rec) {
        tape->record("slice", {a}, y, [sp, start, len](std::span<const T> g) {
            std::vector<T> ga(sp.outer * sp.len * sp.inner, T(0));
            for (std::size_t o = 0; o < sp.outer; ++o) {
                std::copy(g.begin() + o * len * sp.inner, g.begin() + (o + 1) * len * sp.inner,
                          ga.begin() + (o * sp.len + start) * sp.inner);
            }
            return std::vector<std::vector<T>>{std::move(ga)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> concat(std::type_identity_t<BasicTape<T>>* tape, const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
    Shape shape = ref;
    shape[axis] = 0;
    bool rec = false;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.extent(d) != ref[d]) {
                throw ShapeError("concat: extent mismatch " + to_string(p.shape()) + " vs " + to_string(ref));
            }
        }
        shape[axis] += p.extent(axis);
        rec = rec || (tape != nullptr && p.requires_grad());
    }
    auto sp = detail::split_axis(shape, axis);
    std::vector<T> out(numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        std::size_t plen = p.extent(axis);
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const T* src = p.data().data() + o * plen * sp.inner;
            std::copy(src, src + plen * sp.inner, out.begin() + (o * sp.len + off) * sp.inner);
        }
        off += plen;
    }
    auto y = make_op_result(std::move(shape), std::move(out), rec);
    if (rec) {
        std::vector<std::size_t> lens;
        for (const auto& p : parts) lens.push_back(p.extent(axis));
        tape->record("concat", parts, y, [sp, offsets, lens, parts](std::span<const T> g) {
            std::vector<std::vector<T>> grads(parts.size());
            for (std::size_t i = 0; i < parts.size(); ++i) {
                if (!parts[i].requires_grad()) continue;
                auto& gi = grads[i];
                gi.resize(sp.outer * lens[i] * sp.inner);
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    auto from = g.begin() + (o * sp.len + offsets[i]) * sp.inner;
                    std::copy(from, from + lens[i] * sp.inner, gi.begin() + o * lens[i] * sp.inner);
                }
            }
            return grads;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> softmax(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& a, std::size_t axis) {
    if (axis >= a.rank()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range");
    auto sp = detail::split_axis(a.shape(), axis);
    std::vector<T> out(a.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, a[base + j * sp.inner]);
            T total = 0;
            for (std::size_t j = 0; j < sp.len; ++j) {
                T e = std::exp(a[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= total;
        }
    }
    bool rec = detail::records(tape, {&a});
    auto y = make_op_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape->record("softmax", {a}, y, [sp, y](std::span<const T> g) {
            std::vector<T> ga(y.size());
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    const std::size_t base = o * sp.len * sp.inner + in;
                    T dot = 0;
                    for (std::size_t j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
                    for (std::size_t j = 0; j < sp.len; ++j) {
                        std::size_t idx = base + j * sp.inner;
                        ga[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            return std::vector<std::vector<T>>{std::move(ga)};
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

namespace detail {

struct ConvGeom {
    std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
    std::size_t k_rows() const { return c * kh * kw; }
    std::size_t positions() const { return oh * ow; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    T* dst = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const T* src = row + oy * g.ow;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip). input [N,C,H,W], kernel [O,C,kh,kw].
template <class T>
BasicTensor<T> conv2d(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                      Conv2dOptions opt = {}) {
    if (x.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv2d: input and kernel must be rank 4");
    if (opt.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (kernel.extent(1) != x.extent(1)) {
        throw ShapeError("conv2d: channel mismatch, input " + to_string(x.shape()) + " kernel " +
                         to_string(kernel.shape()));
    }
    detail::ConvGeom g{x.extent(0), x.extent(1), x.extent(2), x.extent(3), kernel.extent(0),
                       kernel.extent(2), kernel.extent(3), opt.stride, opt.padding, 0, 0};
    if (g.kh > g.h + 2 * g.pad || g.kw > g.w + 2 * g.pad) {
        throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                         to_string(x.shape()));
    }
    g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
    const std::size_t K = g.k_rows(), P = g.positions(), in_sz = g.c * g.h * g.w;

    std::vector<T> out(g.n * g.o * P);
    std::vector<T> cols(K * P);
    detail::CMapMat<T> W(kernel.data().data(), g.o, K);
    for (std::size_t n = 0; n < g.n; ++n) {
        detail::im2col(x.data().data() + n * in_sz, g, cols.data());
        detail::MapMat<T>(out.data() + n * g.o * P, g.o, P).noalias() = W * detail::CMapMat<T>(cols.data(), K, P);
    }
    bool rec = detail::records(tape, {&x, &kernel});
    auto y = make_op_result(Shape{g.n, g.o, g.oh, g.ow}, std::move(out), rec);
    if (rec) {
        tape->record("conv2d", {x, kernel}, y, [x, kernel, g](std::span<const T> gout) {
            const std::size_t K = g.k_rows(), P = g.positions(), in_sz = g.c * g.h * g.w;
            std::vector<T> gx, gw;
            std::vector<T> cols(K * P);
            detail::CMapMat<T> W(kernel.data().data(), g.o, K);
            if (x.requires_grad()) gx.assign(x.size(), T(0));
            if (kernel.requires_grad()) gw.assign(kernel.size(), T(0));
            for (std::size_t n = 0; n < g.n; ++n) {
                detail::CMapMat<T> G(gout.data() + n * g.o * P, g.o, P);
                if (kernel.requires_grad()) {
                    detail::im2col(x.data().data() + n * in_sz, g, cols.data());
                    detail::MapMat<T>(gw.data(), g.o, K).noalias() +=
                        G * detail::CMapMat<T>(cols.data(), K, P).transpose();
                }
                if (x.requires_grad()) {
                    detail::MapMat<T>(cols.data(), K, P).noalias() = W.transpose() * G;
                    detail::col2im_add(cols.data(), g, gx.data() + n * in_sz);
                }
            }
            return std::vector<std::vector<T>>{std::move(gx), std::move(gw)};
        });
    }
    return y;
}

/// 1-D cross-correlation. input [N,C,L], kernel [O,C,K], zero padding `pad` on both ends.
template <class T>
BasicTensor<T> conv1d(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                      std::size_t pad) {
    if (x.rank() != 3 || kernel.rank() != 3) throw ShapeError("conv1d: input and kernel must be rank 3");
    const std::size_t N = x.extent(0), C = x.extent(1), L = x.extent(2);
    const std::size_t O = kernel.extent(0), K = kernel.extent(2);
    if (kernel.extent(1) != C) throw ShapeError("conv1d: channel mismatch");
    if (K > L + 2 * pad) throw ShapeError("conv1d: kernel larger than padded input");
    const std::size_t OL = L + 2 * pad - K + 1;
    auto at = [&](std::size_t n, std::size_t c, long i) -> T {
        if (i < 0 || i >= static_cast<long>(L)) return T(0);
        return x[(n * C + c) * L + static_cast<std::size_t>(i)];
    };
    std::vector<T> out(N * O * OL, T(0));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t p = 0; p < OL; ++p) {
                T acc = 0;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t k = 0; k < K; ++k)
                        acc += kernel[(o * C + c) * K + k] * at(n, c, static_cast<long>(p + k) - static_cast<long>(pad));
                out[(n * O + o) * OL + p] = acc;
            }
    bool rec = detail::records(tape, {&x, &kernel});
    auto y = make_op_result(Shape{N, O, OL}, std::move(out), rec);
    if (rec) {
        tape->record("conv1d", {x, kernel}, y, [x, kernel, N, C, L, O, K, OL, pad](std::span<const T> g) {
            std::vector<T> gx, gk;
            if (x.requires_grad()) gx.assign(x.size(), T(0));
            if (kernel.requires_grad()) gk.assign(kernel.size(), T(0));
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t p = 0; p < OL; ++p) {
                        const T go = g[(n * O + o) * OL + p];
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t k = 0; k < K; ++k) {
                                long i = static_cast<long>(p + k) - static_cast<long>(pad);
                                if (i < 0 || i >= static_cast<long>(L)) continue;
                                std::size_t xi = (n * C + c) * L + static_cast<std::size_t>(i);
                                std::size_t ki = (o * C + c) * K + k;
                                if (!gk.empty()) gk[ki] += go * x[xi];
                                if (!gx.empty()) gx[xi] += go * kernel[ki];
                            }
                    }
            return std::vector<std::vector<T>>{std::move(gx), std::move(gk)};
        });
    }
    return y;
}

/// Adds b along axis 1. b is [C] (shared across batch) or [N,C] (per sample).
template <class T>
BasicTensor<T> bias_add(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x, const BasicTensor<T>& b) {
    if (x.rank() < 2) throw ShapeError("bias_add: input must have rank >= 2");
    const std::size_t N = x.extent(0), C = x.extent(1), inner = x.size() / (N * C);
    const bool per_sample = b.rank() == 2;
    if (per_sample ? (b.extent(0) != N || b.extent(1) != C) : (b.rank() != 1 || b.extent(0) != C)) {
        throw ShapeError("bias_add: bias " + to_string(b.shape()) + " incompatible with " + to_string(x.shape()));
    }
    std::vector<T> out(x.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T bv = b[per_sample ? n * C + c : c];
            const std::size_t base = (n * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = x[base + i] + bv;
        }
    bool rec = detail::records(tape, {&x, &b});
    auto y = make_op_result(x.shape(), std::move(out), rec);
    if (rec) {
        tape->record("bias_add", {x, b}, y, [N, C, inner, per_sample, b](std::span<const T> g) {
            std::vector<T> gx(g.begin(), g.end());
            std::vector<T> gb;
            if (b.requires_grad()) {
                gb.assign(b.size(), T(0));
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        T acc = 0;
                        const std::size_t base = (n * C + c) * inner;
                        for (std::size_t i = 0; i < inner; ++i) acc += g[base + i];
                        gb[per_sample ? n * C + c : c] += acc;
                    }
            }
            return std::vector<std::vector<T>>{std::move(gx), std::move(gb)};
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

/// [N,C,H,W] -> [N,C]
template <class T>
BasicTensor<T> global_avg_pool(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be rank 4");
    const std::size_t N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    std::vector<T> out(N * C);
    for (std::size_t i = 0; i < N * C; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < HW; ++j) acc += x[i * HW + j];
        out[i] = acc / static_cast<T>(HW);
    }
    bool rec = detail::records(tape, {&x});
    auto y = make_op_result(Shape{N, C}, std::move(out), rec);
    if (rec) {
        tape->record("global_avg_pool", {x}, y, [N, C, HW](std::span<const T> g) {
            std::vector<T> gx(N * C * HW);
            for (std::size_t i = 0; i < N * C; ++i)
                std::fill(gx.begin() + i * HW, gx.begin() + (i + 1) * HW, g[i] / static_cast<T>(HW));
            return std::vector<std::vector<T>>{std::move(gx)};
        });
    }
    return y;
}

template <class T>
BasicTensor<T> upsample_nearest2x(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2x: input must be rank 4");
    const std::size_t NC = x.extent(0) * x.extent(1), H = x.extent(2), W = x.extent(3);
    std::vector<T> out(NC * 4 * H * W);
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx)
                out[(p * 2 * H + y) * 2 * W + xx] = x[(p * H + y / 2) * W + xx / 2];
    bool rec = detail::records(tape, {&x});
    auto y = make_op_result(Shape{x.extent(0), x.extent(1), 2 * H, 2 * W}, std::move(out), rec);
    if (rec) {
        tape->record("upsample_nearest2x", {x}, y, [NC, H, W](std::span<const T> g) {
            std::vector<T> gx(NC * H * W, T(0));
            for (std::size_t p = 0; p < NC; ++p)
                for (std::size_t yy = 0; yy < 2 * H; ++yy)
                    for (std::size_t xx = 0; xx < 2 * W; ++xx)
                        gx[(p * H + yy / 2) * W + xx / 2] += g[(p * 2 * H + yy) * 2 * W + xx];
            return std::vector<std::vector<T>>{std::move(gx)};
        });
    }
    return y;
}

namespace detail {

struct BilinearTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

// Half-pixel-centre sampling (align_corners = false).
inline BilinearTaps bilinear_taps(std::size_t in, std::size_t out) {
    BilinearTaps t;
    const double sc = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = std::max(0.0, (static_cast<double>(i) + 0.5) * sc - 0.5);
        auto l = std::min(static_cast<std::size_t>(src), in - 1);
        t.lo.push_back(l);
        t.hi.push_back(std::min(l + 1, in - 1));
        t.frac.push_back(src - static_cast<double>(l));
    }
    return t;
}

}  // namespace detail

/// Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w].
template <class T>
BasicTensor<T> resize_bilinear(std::type_identity_t<BasicTape<T>>* tape, const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 4) throw ShapeError("resize_bilinear: input must be rank 4");
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: zero output size");
    const std::size_t NC = x.extent(0) * x.extent(1), H = x.extent(2), W = x.extent(3);
    auto ty = detail::bilinear_taps(H, out_h);
    auto tx = detail::bilinear_taps(W, out_w);
    std::vector<T> out(NC * out_h * out_w);
    for (std::size_t p = 0; p < NC; ++p) {
        const T* src = x.data().data() + p * H * W;
        for (std::size_t i = 0; i < out_h; ++i) {
            const T fy = static_cast<T>(ty.frac[i]);
            for (std::size_t j = 0; j < out_w; ++j) {
                const T fx = static_cast<T>(tx.frac[j]);
                T top = src[ty.lo[i] * W + tx.lo[j]] * (T(1) - fx) + src[ty.lo[i] * W + tx.hi[j]] * fx;
                T bot = src[ty.hi[i] * W + tx.lo[j]] * (T(1) - fx) + src[ty.hi[i] * W + tx.hi[j]] * fx;
                out[(p * out_h + i) * out_w + j] = top * (T(1) - fy) + bot * fy;
            }
        }
    }
    bool rec = detail::records(tape, {&x});
    auto y = make_op_result(Shape{x.extent(0), x.extent(1), out_h, out_w}, std::move(out), rec);
    if (rec) {
        tape->record("resize_bilinear", {x}, y, [NC, H, W, out_h, out_w, ty, tx](std::span<const T> g) {
            std::vector<T> gx(NC * H * W, T(0));
            for (std::size_t p = 0; p < NC; ++p) {
                T* dst = gx.data() + p * H * W;
                for (std::size_t i = 0; i < out_h; ++i) {
                    const T fy = static_cast<T>(ty.frac[i]);
                    for (std::size_t j = 0; j < out_w; ++j) {
                        const T fx = static_cast<T>(tx.frac[j]);
                        const T go = g[(p * out_h + i) * out_w + j];
                        dst[ty.lo[i] * W + tx.lo[j]] += go * (T(1) - fy) * (T(1) - fx);
                        dst[ty.lo[i] * W + tx.hi[j]] += go * (T(1) - fy) * fx;
                        dst[ty.hi[i] * W + tx.lo[j]] += go * fy * (T(1) - fx);
                        dst[ty.hi[i] * W + tx.hi[j]] += go * fy * fx;
                    }
                }
            }
            return std::vector<std::vector<T>>{std::move(gx)};
        });
    }
    return y;
}

}  // namespace diffad::ops
