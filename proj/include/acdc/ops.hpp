#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "acdc/graph.hpp"

namespace acdc {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

/// Normalized image view: rank-4 tensors pass through, rank-3 gets batch 1.
struct ImageView {
    int64_t n, c, y, x;
    bool batched;
};

inline ImageView image_view(const Shape& s, const char* op) {
    if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
    if (s.size() == 3) return {1, s[0], s[1], s[2], false};
    throw std::invalid_argument(cat(op, ": expected rank-3 or rank-4 image tensor, got ", shape_str(s)));
}

inline Shape image_shape(const ImageView& like, int64_t c, int64_t y, int64_t x) {
    if (like.batched) return {like.n, c, y, x};
    return {c, y, x};
}

/// im2col for one sample: cols is (C*k*k) x (oy*ox), row-major.
template <typename T>
void im2col(const T* src, int64_t C, int64_t Y, int64_t X, int64_t k, int64_t stride, int64_t pad,
            int64_t oy, int64_t ox, T* cols) {
    const int64_t P = oy * ox;
    for (int64_t ci = 0; ci < C; ++ci) {
        const T* plane = src + ci * Y * X;
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                T* row = cols + ((ci * k + ky) * k + kx) * P;
                for (int64_t py = 0; py < oy; ++py) {
                    const int64_t iy = py * stride + ky - pad;
                    T* out = row + py * ox;
                    if (iy < 0 || iy >= Y) {
                        std::fill(out, out + ox, T(0));
                        continue;
                    }
                    const T* in = plane + iy * X;
                    for (int64_t px = 0; px < ox; ++px) {
                        const int64_t ix = px * stride + kx - pad;
                        out[px] = (ix >= 0 && ix < X) ? in[ix] : T(0);
                    }
                }
            }
        }
    }
}

/// Transpose of im2col: scatter-adds cols back into the image gradient.
template <typename T>
void col2im_add(const T* cols, int64_t C, int64_t Y, int64_t X, int64_t k, int64_t stride, int64_t pad,
                int64_t oy, int64_t ox, T* dst) {
    const int64_t P = oy * ox;
    for (int64_t ci = 0; ci < C; ++ci) {
        T* plane = dst + ci * Y * X;
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                const T* row = cols + ((ci * k + ky) * k + kx) * P;
                for (int64_t py = 0; py < oy; ++py) {
                    const int64_t iy = py * stride + ky - pad;
                    if (iy < 0 || iy >= Y) continue;
                    T* out = plane + iy * X;
                    const T* in = row + py * ox;
                    for (int64_t px = 0; px < ox; ++px) {
                        const int64_t ix = px * stride + kx - pad;
                        if (ix >= 0 && ix < X) out[ix] += in[px];
                    }
                }
            }
        }
    }
}

template <typename T>
Graph<T>& same_graph(Var<T> a, Var<T> b, const char* op) {
    ACDC_REQUIRE(a.graph && a.graph == b.graph, op, ": operands belong to different graphs");
    return *a.graph;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& g = detail::same_graph(a, b, "add");
    ACDC_REQUIRE(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
    const auto& xa = a.values();
    const auto& xb = b.values();
    std::vector<T> y(xa.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];
    Var<T> out = g.make_node(a.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [aid = a.id, bid = b.id, oid = out.id](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& ga = gg.grad_of(aid);
        auto& gb = gg.grad_of(bid);
        for (size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i];
            gb[i] += go[i];
        }
    };
    return out;
}

template <typename T>
Var<T> scale(Var<T> v, double c) {
    auto& g = *v.graph;
    const auto& x = v.values();
    std::vector<T> y(x.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(x[i] * c);
    Var<T> out = g.make_node(v.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [vid = v.id, oid = out.id, c](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& gv = gg.grad_of(vid);
        for (size_t i = 0; i < go.size(); ++i) gv[i] += static_cast<T>(go[i] * c);
    };
    return out;
}

template <typename T>
Var<T> relu(Var<T> v) {
    auto& g = *v.graph;
    const auto& x = v.values();
    std::vector<T> y(x.size());
    for (size_t i = 0; i < y.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    Var<T> out = g.make_node(v.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [vid = v.id, oid = out.id](Graph<T>& gg) {
        const auto& x2 = gg.node(vid).values;
        const auto& go = gg.grad_of(oid);
        auto& gv = gg.grad_of(vid);
        for (size_t i = 0; i < go.size(); ++i)
            if (x2[i] > T(0)) gv[i] += go[i];
    };
    return out;
}

template <typename T>
Var<T> sigmoid(Var<T> v) {
    auto& g = *v.graph;
    const auto& x = v.values();
    std::vector<T> y(x.size());
    for (size_t i = 0; i < y.size(); ++i) {
        const double xv = static_cast<double>(x[i]);
        const double s = xv >= 0.0 ? 1.0 / (1.0 + std::exp(-xv)) : std::exp(xv) / (1.0 + std::exp(xv));
        y[i] = static_cast<T>(s);
    }
    Var<T> out = g.make_node(v.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [vid = v.id, oid = out.id](Graph<T>& gg) {
        const auto& s = gg.node(oid).values;
        const auto& go = gg.grad_of(oid);
        auto& gv = gg.grad_of(vid);
        for (size_t i = 0; i < go.size(); ++i) gv[i] += go[i] * s[i] * (T(1) - s[i]);
    };
    return out;
}

/// Copy with a new shape; value count must match.
template <typename T>
Var<T> reshape(Var<T> v, Shape shape) {
    auto& g = *v.graph;
    ACDC_REQUIRE(numel(shape) == v.size(),
                 "reshape: cannot view ", shape_str(v.shape()), " as ", shape_str(shape));
    Var<T> out = g.make_node(std::move(shape), v.values(), nullptr);
    g.node(out.id).backward = [vid = v.id, oid = out.id](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& gv = gg.grad_of(vid);
        for (size_t i = 0; i < go.size(); ++i) gv[i] += go[i];
    };
    return out;
}

/// Cuts the tensor out of the differentiation graph (stop-gradient).
template <typename T>
Var<T> detach(Var<T> v) {
    return v.graph->leaf(Tensor<T>(v.shape(), v.values()));
}

/// Weighted sum of all entries, producing a scalar node.
template <typename T>
Var<T> inner(Var<T> v, const std::vector<T>& weights) {
    auto& g = *v.graph;
    ACDC_REQUIRE(static_cast<int64_t>(weights.size()) == v.size(), "inner: weight count mismatch");
    const auto& x = v.values();
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * static_cast<double>(weights[i]);
    Var<T> out = g.make_node(Shape{}, {static_cast<T>(acc)}, nullptr);
    g.node(out.id).backward = [vid = v.id, oid = out.id, weights](Graph<T>& gg) {
        const T go = gg.grad_of(oid)[0];
        auto& gv = gg.grad_of(vid);
        for (size_t i = 0; i < gv.size(); ++i) gv[i] += go * weights[i];
    };
    return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
    ACDC_REQUIRE(!parts.empty(), "concat_channels: no inputs");
    auto& g = *parts[0].graph;
    auto v0 = detail::image_view(parts[0].shape(), "concat_channels");
    int64_t total_c = 0;
    for (const auto& p : parts) {
        auto v = detail::image_view(p.shape(), "concat_channels");
        ACDC_REQUIRE(v.n == v0.n && v.y == v0.y && v.x == v0.x,
                     "concat_channels: spatial/batch extents differ: ",
                     shape_str(parts[0].shape()), " vs ", shape_str(p.shape()));
        total_c += v.c;
    }
    const int64_t plane = v0.y * v0.x;
    std::vector<T> y(static_cast<size_t>(v0.n * total_c * plane));
    for (int64_t n = 0; n < v0.n; ++n) {
        int64_t coff = 0;
        for (const auto& p : parts) {
            auto v = detail::image_view(p.shape(), "concat_channels");
            const T* src = p.values().data() + n * v.c * plane;
            std::copy(src, src + v.c * plane, y.data() + (n * total_c + coff) * plane);
            coff += v.c;
        }
    }
    Var<T> out = g.make_node(detail::image_shape(v0, total_c, v0.y, v0.x), std::move(y), nullptr);
    std::vector<int> ids;
    std::vector<int64_t> chans;
    for (const auto& p : parts) {
        ids.push_back(p.id);
        chans.push_back(detail::image_view(p.shape(), "concat_channels").c);
    }
    g.node(out.id).backward = [ids, chans, oid = out.id, n = v0.n, plane, total_c](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        for (int64_t b = 0; b < n; ++b) {
            int64_t coff = 0;
            for (size_t i = 0; i < ids.size(); ++i) {
                auto& gi = gg.grad_of(ids[i]);
                const T* src = go.data() + (b * total_c + coff) * plane;
                T* dst = gi.data() + b * chans[i] * plane;
                for (int64_t k = 0; k < chans[i] * plane; ++k) dst[k] += src[k];
                coff += chans[i];
            }
        }
    };
    return out;
}

/// Channel range [c0, c1) of an image tensor.
template <typename T>
Var<T> slice_channels(Var<T> v, int64_t c0, int64_t c1) {
    auto& g = *v.graph;
    auto iv = detail::image_view(v.shape(), "slice_channels");
    ACDC_REQUIRE(0 <= c0 && c0 < c1 && c1 <= iv.c,
                 "slice_channels: range [", c0, ", ", c1, ") invalid for ", iv.c, " channels");
    const int64_t plane = iv.y * iv.x;
    const int64_t cs = c1 - c0;
    std::vector<T> y(static_cast<size_t>(iv.n * cs * plane));
    for (int64_t n = 0; n < iv.n; ++n) {
        const T* src = v.values().data() + (n * iv.c + c0) * plane;
        std::copy(src, src + cs * plane, y.data() + n * cs * plane);
    }
    Var<T> out = g.make_node(detail::image_shape(iv, cs, iv.y, iv.x), std::move(y), nullptr);
    g.node(out.id).backward = [vid = v.id, oid = out.id, iv, c0, cs, plane](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& gv = gg.grad_of(vid);
        for (int64_t n = 0; n < iv.n; ++n) {
            const T* src = go.data() + n * cs * plane;
            T* dst = gv.data() + (n * iv.c + c0) * plane;
            for (int64_t k = 0; k < cs * plane; ++k) dst[k] += src[k];
        }
    };
    return out;
}

/// Hadamard product. Accepted operand patterns for `b` relative to `a`:
/// identical shape; a 1-channel map (N,1,Y,X) broadcast across a's channels;
/// a per-channel vector (N,C) broadcast across space. Anything else is a
/// broadcast ambiguity and is rejected.
template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
    auto& g = detail::same_graph(a, b, "hadamard");
    if (a.shape() == b.shape()) {
        const auto& xa = a.values();
        const auto& xb = b.values();
        std::vector<T> y(xa.size());
        for (size_t i = 0; i < y.size(); ++i) y[i] = xa[i] * xb[i];
        Var<T> out = g.make_node(a.shape(), std::move(y), nullptr);
        g.node(out.id).backward = [aid = a.id, bid = b.id, oid = out.id](Graph<T>& gg) {
            const auto& va = gg.node(aid).values;
            const auto& vb = gg.node(bid).values;
            const auto& go = gg.grad_of(oid);
            auto& ga = gg.grad_of(aid);
            auto& gb = gg.grad_of(bid);
            for (size_t i = 0; i < go.size(); ++i) {
                ga[i] += go[i] * vb[i];
                gb[i] += go[i] * va[i];
            }
        };
        return out;
    }

    auto iv = detail::image_view(a.shape(), "hadamard");
    const Shape& bs = b.shape();
    const int64_t plane = iv.y * iv.x;

    // 1-channel spatial mask across all channels
    const bool mask_form =
        (bs.size() == 4 && bs[0] == iv.n && bs[1] == 1 && bs[2] == iv.y && bs[3] == iv.x) ||
        (bs.size() == 3 && !iv.batched && bs[0] == 1 && bs[1] == iv.y && bs[2] == iv.x);
    if (mask_form) {
        const auto& xa = a.values();
        const auto& xb = b.values();
        std::vector<T> y(xa.size());
        for (int64_t n = 0; n < iv.n; ++n)
            for (int64_t c = 0; c < iv.c; ++c) {
                const T* pa = xa.data() + (n * iv.c + c) * plane;
                const T* pb = xb.data() + n * plane;
                T* py = y.data() + (n * iv.c + c) * plane;
                for (int64_t p = 0; p < plane; ++p) py[p] = pa[p] * pb[p];
            }
        Var<T> out = g.make_node(a.shape(), std::move(y), nullptr);
        g.node(out.id).backward = [aid = a.id, bid = b.id, oid = out.id, iv, plane](Graph<T>& gg) {
            const auto& va = gg.node(aid).values;
            const auto& vb = gg.node(bid).values;
            const auto& go = gg.grad_of(oid);
            auto& ga = gg.grad_of(aid);
            auto& gb = gg.grad_of(bid);
            for (int64_t n = 0; n < iv.n; ++n)
                for (int64_t c = 0; c < iv.c; ++c) {
                    const int64_t off = (n * iv.c + c) * plane;
                    for (int64_t p = 0; p < plane; ++p) {
                        ga[off + p] += go[off + p] * vb[n * plane + p];
                        gb[n * plane + p] += go[off + p] * va[off + p];
                    }
                }
        };
        return out;
    }

    // per-channel vector across space
    const bool vec_form = (bs.size() == 2 && iv.batched && bs[0] == iv.n && bs[1] == iv.c) ||
                          (bs.size() == 1 && !iv.batched && bs[0] == iv.c);
    if (vec_form) {
        const auto& xa = a.values();
        const auto& xb = b.values();
        std::vector<T> y(xa.size());
        for (int64_t n = 0; n < iv.n; ++n)
            for (int64_t c = 0; c < iv.c; ++c) {
                const T s = xb[n * iv.c + c];
                const T* pa = xa.data() + (n * iv.c + c) * plane;
                T* py = y.data() + (n * iv.c + c) * plane;
                for (int64_t p = 0; p < plane; ++p) py[p] = pa[p] * s;
            }
        Var<T> out = g.make_node(a.shape(), std::move(y), nullptr);
        g.node(out.id).backward = [aid = a.id, bid = b.id, oid = out.id, iv, plane](Graph<T>& gg) {
            const auto& va = gg.node(aid).values;
            const auto& vb = gg.node(bid).values;
            const auto& go = gg.grad_of(oid);
            auto& ga = gg.grad_of(aid);
            auto& gb = gg.grad_of(bid);
            for (int64_t n = 0; n < iv.n; ++n)
                for (int64_t c = 0; c < iv.c; ++c) {
                    const int64_t off = (n * iv.c + c) * plane;
                    const T s = vb[n * iv.c + c];
                    double acc = 0.0;
                    for (int64_t p = 0; p < plane; ++p) {
                        ga[off + p] += go[off + p] * s;
                        acc += static_cast<double>(go[off + p]) * static_cast<double>(va[off + p]);
                    }
                    gb[n * iv.c + c] += static_cast<T>(acc);
                }
        };
        return out;
    }

    throw std::invalid_argument(detail::cat(
        "hadamard: broadcast ambiguity, ", shape_str(bs), " matches neither the 1-channel map nor the ",
        "per-channel vector pattern against ", shape_str(a.shape())));
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// 2-d convolution (cross-correlation), odd square kernel (Cout, Cin, k, k).
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, int64_t stride, int64_t padding) {
    auto& g = detail::same_graph(input, kernel, "conv2d");
    auto iv = detail::image_view(input.shape(), "conv2d");
    const Shape& ks = kernel.shape();
    ACDC_REQUIRE(ks.size() == 4 && ks[2] == ks[3] && ks[2] % 2 == 1,
                 "conv2d: kernel must be (Cout, Cin, k, k) with odd k, got ", shape_str(ks));
    ACDC_REQUIRE(ks[1] == iv.c, "conv2d: input has ", iv.c, " channels but kernel expects ", ks[1],
                 " (input ", shape_str(input.shape()), ", kernel ", shape_str(ks), ")");
    ACDC_REQUIRE(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
    const int64_t cout = ks[0], k = ks[2];
    ACDC_REQUIRE(bias.shape() == Shape{cout}, "conv2d: bias shape ", shape_str(bias.shape()),
                 " does not match ", cout, " output channels");
    const int64_t oy = (iv.y + 2 * padding - k) / stride + 1;
    const int64_t ox = (iv.x + 2 * padding - k) / stride + 1;
    ACDC_REQUIRE(oy >= 1 && ox >= 1, "conv2d: kernel ", k, " does not fit input ", shape_str(input.shape()));
    const int64_t K = iv.c * k * k, P = oy * ox;

    std::vector<T> y(static_cast<size_t>(iv.n * cout * P));
    std::vector<T> cols(static_cast<size_t>(K * P));
    detail::CMapRM<T> W(kernel.values().data(), cout, K);
    for (int64_t n = 0; n < iv.n; ++n) {
        detail::im2col(input.values().data() + n * iv.c * iv.y * iv.x, iv.c, iv.y, iv.x, k, stride,
                       padding, oy, ox, cols.data());
        detail::MapRM<T> out(y.data() + n * cout * P, cout, P);
        out.noalias() = W * detail::CMapRM<T>(cols.data(), K, P);
        const auto& bv = bias.values();
        for (int64_t co = 0; co < cout; ++co) {
            T* row = y.data() + (n * cout + co) * P;
            for (int64_t p = 0; p < P; ++p) row[p] += bv[co];
        }
    }
    Var<T> out = g.make_node(detail::image_shape(iv, cout, oy, ox), std::move(y), nullptr);
    g.node(out.id).backward = [iid = input.id, kid = kernel.id, bid = bias.id, oid = out.id, iv, k,
                               stride, padding, cout, oy, ox, K, P](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        const auto& xin = gg.node(iid).values;
        const auto& wv = gg.node(kid).values;
        auto& gi = gg.grad_of(iid);
        auto& gk = gg.grad_of(kid);
        auto& gb = gg.grad_of(bid);
        std::vector<T> cols(static_cast<size_t>(K * P));
        std::vector<T> dcols(static_cast<size_t>(K * P));
        detail::CMapRM<T> W(wv.data(), cout, K);
        detail::MapRM<T> dW(gk.data(), cout, K);
        for (int64_t n = 0; n < iv.n; ++n) {
            detail::CMapRM<T> dOut(go.data() + n * cout * P, cout, P);
            detail::im2col(xin.data() + n * iv.c * iv.y * iv.x, iv.c, iv.y, iv.x, k, stride, padding,
                           oy, ox, cols.data());
            dW.noalias() += dOut * detail::CMapRM<T>(cols.data(), K, P).transpose();
            detail::MapRM<T>(dcols.data(), K, P).noalias() = W.transpose() * dOut;
            detail::col2im_add(dcols.data(), iv.c, iv.y, iv.x, k, stride, padding, oy, ox,
                               gi.data() + n * iv.c * iv.y * iv.x);
            for (int64_t co = 0; co < cout; ++co) {
                double acc = 0.0;
                const T* row = go.data() + (n * cout + co) * P;
                for (int64_t p = 0; p < P; ++p) acc += static_cast<double>(row[p]);
                gb[co] += static_cast<T>(acc);
            }
        }
    };
    return out;
}

/// Pointwise (1x1) convolution: per-pixel linear map over channels.
/// Kernel may be (Cout, Cin) or (Cout, Cin, 1, 1).
template <typename T>
Var<T> conv1x1(Var<T> input, Var<T> kernel, Var<T> bias) {
    auto& g = detail::same_graph(input, kernel, "conv1x1");
    auto iv = detail::image_view(input.shape(), "conv1x1");
    const Shape& ks = kernel.shape();
    const bool rank4 = ks.size() == 4;
    ACDC_REQUIRE(ks.size() == 2 || (rank4 && ks[2] == 1 && ks[3] == 1),
                 "conv1x1: kernel must be (Cout, Cin) or (Cout, Cin, 1, 1), got ", shape_str(ks));
    ACDC_REQUIRE(ks[1] == iv.c, "conv1x1: input has ", iv.c, " channels but kernel expects ", ks[1]);
    const int64_t cout = ks[0], P = iv.y * iv.x;
    ACDC_REQUIRE(bias.shape() == Shape{cout}, "conv1x1: bias shape mismatch");

    std::vector<T> y(static_cast<size_t>(iv.n * cout * P));
    detail::CMapRM<T> W(kernel.values().data(), cout, iv.c);
    for (int64_t n = 0; n < iv.n; ++n) {
        detail::CMapRM<T> X(input.values().data() + n * iv.c * P, iv.c, P);
        detail::MapRM<T> out(y.data() + n * cout * P, cout, P);
        out.noalias() = W * X;
        const auto& bv = bias.values();
        for (int64_t co = 0; co < cout; ++co) {
            T* row = y.data() + (n * cout + co) * P;
            for (int64_t p = 0; p < P; ++p) row[p] += bv[co];
        }
    }
    Var<T> out = g.make_node(detail::image_shape(iv, cout, iv.y, iv.x), std::move(y), nullptr);
    g.node(out.id).backward = [iid = input.id, kid = kernel.id, bid = bias.id, oid = out.id, iv, cout,
                               P](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        const auto& xin = gg.node(iid).values;
        const auto& wv = gg.node(kid).values;
        auto& gi = gg.grad_of(iid);
        auto& gk = gg.grad_of(kid);
        auto& gb = gg.grad_of(bid);
        detail::CMapRM<T> W(wv.data(), cout, iv.c);
        detail::MapRM<T> dW(gk.data(), cout, iv.c);
        for (int64_t n = 0; n < iv.n; ++n) {
            detail::CMapRM<T> dOut(go.data() + n * cout * P, cout, P);
            detail::CMapRM<T> X(xin.data() + n * iv.c * P, iv.c, P);
            detail::MapRM<T> dX(gi.data() + n * iv.c * P, iv.c, P);
            dW.noalias() += dOut * X.transpose();
            dX.noalias() += W.transpose() * dOut;
            for (int64_t co = 0; co < cout; ++co) {
                double acc = 0.0;
                const T* row = go.data() + (n * cout + co) * P;
                for (int64_t p = 0; p < P; ++p) acc += static_cast<double>(row[p]);
                gb[co] += static_cast<T>(acc);
            }
        }
    };
    return out;
}

/// Depthwise spatial convolution: one odd square filter per channel,
/// stride 1, same padding. Kernel shape (C, k, k).
template <typename T>
Var<T> depthwise_conv(Var<T> input, Var<T> kernel) {
    auto& g = detail::same_graph(input, kernel, "depthwise_conv");
    auto iv = detail::image_view(input.shape(), "depthwise_conv");
    const Shape& ks = kernel.shape();
    ACDC_REQUIRE(ks.size() == 3 && ks[1] == ks[2] && ks[1] % 2 == 1,
                 "depthwise_conv: kernel must be (C, k, k) with odd k, got ", shape_str(ks));
    ACDC_REQUIRE(ks[0] == iv.c, "depthwise_conv: input has ", iv.c,
                 " channels but kernel has ", ks[0], " filters");
    const int64_t k = ks[1], pad = k / 2;

    std::vector<T> y(input.values().size(), T(0));
    const auto& x = input.values();
    const auto& w = kernel.values();
    for (int64_t n = 0; n < iv.n; ++n)
        for (int64_t c = 0; c < iv.c; ++c) {
            const T* plane = x.data() + (n * iv.c + c) * iv.y * iv.x;
            const T* filt = w.data() + c * k * k;
            T* dst = y.data() + (n * iv.c + c) * iv.y * iv.x;
            for (int64_t py = 0; py < iv.y; ++py)
                for (int64_t ky = 0; ky < k; ++ky) {
                    const int64_t iy = py + ky - pad;
                    if (iy < 0 || iy >= iv.y) continue;
                    for (int64_t kx = 0; kx < k; ++kx) {
                        const T wv = filt[ky * k + kx];
                        const int64_t x0 = std::max<int64_t>(0, pad - kx);
                        const int64_t x1 = std::min<int64_t>(iv.x, iv.x + pad - kx);
                        const T* src = plane + iy * iv.x + x0 + kx - pad;
                        T* out = dst + py * iv.x + x0;
                        for (int64_t px = x0; px < x1; ++px) *out++ += wv * *src++;
                    }
                }
        }
    Var<T> out = g.make_node(input.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [iid = input.id, kid = kernel.id, oid = out.id, iv, k, pad](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        const auto& x2 = gg.node(iid).values;
        const auto& w2 = gg.node(kid).values;
        auto& gi = gg.grad_of(iid);
        auto& gk = gg.grad_of(kid);
        for (int64_t n = 0; n < iv.n; ++n)
            for (int64_t c = 0; c < iv.c; ++c) {
                const int64_t off = (n * iv.c + c) * iv.y * iv.x;
                const T* filt = w2.data() + c * k * k;
                T* dfilt = gk.data() + c * k * k;
                for (int64_t py = 0; py < iv.y; ++py)
                    for (int64_t ky = 0; ky < k; ++ky) {
                        const int64_t iy = py + ky - pad;
                        if (iy < 0 || iy >= iv.y) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const int64_t x0 = std::max<int64_t>(0, pad - kx);
                            const int64_t x1 = std::min<int64_t>(iv.x, iv.x + pad - kx);
                            const T* gout = go.data() + off + py * iv.x + x0;
                            const T* src = x2.data() + off + iy * iv.x + x0 + kx - pad;
                            T* gin = gi.data() + off + iy * iv.x + x0 + kx - pad;
                            const T wv = filt[ky * k + kx];
                            double acc = 0.0;
                            for (int64_t px = x0; px < x1; ++px) {
                                acc += static_cast<double>(gout[px - x0]) * static_cast<double>(src[px - x0]);
                                gin[px - x0] += wv * gout[px - x0];
                            }
                            dfilt[ky * k + kx] += static_cast<T>(acc);
                        }
                    }
            }
    };
    return out;
}

/// Depthwise 3x3 followed by a pointwise 1x1 mix; spatial extents preserved.
template <typename T>
Var<T> depthwise_separable_conv(Var<T> input, Var<T> depth_kernel, Var<T> point_kernel, Var<T> bias) {
    return conv1x1(depthwise_conv(input, depth_kernel), point_kernel, bias);
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { Train, Infer };

/// Running-moment buffers for one batch-norm layer. `batches` counts
/// train-mode updates; infer mode before the first update is rejected.
template <typename T>
struct BnRunning {
    Tensor<T>* mean = nullptr;
    Tensor<T>* var = nullptr;
    Tensor<T>* batches = nullptr;
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.9;

/// Per-channel batch normalization over batch and spatial extents.
/// Train mode normalizes by batch moments and updates the running buffers
/// (a side effect outside the differentiation graph).
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BnRunning<T>& state, BnMode mode) {
    auto& g = detail::same_graph(input, gamma, "batch_norm");
    auto iv = detail::image_view(input.shape(), "batch_norm");
    ACDC_REQUIRE(gamma.shape() == Shape{iv.c} && beta.shape() == Shape{iv.c},
                 "batch_norm: gamma/beta must be per-channel vectors of length ", iv.c);
    ACDC_REQUIRE(state.mean && state.var && state.batches, "batch_norm: running state not wired");
    const int64_t plane = iv.y * iv.x;
    const int64_t m = iv.n * plane;

    std::vector<T> xhat(input.values().size());
    std::vector<T> inv_std(static_cast<size_t>(iv.c));
    std::vector<T> y(input.values().size());
    const auto& x = input.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();

    if (mode == BnMode::Train) {
        for (int64_t c = 0; c < iv.c; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int64_t n = 0; n < iv.n; ++n) {
                const T* p = x.data() + (n * iv.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            const double mu = sum / m;
            const double var = std::max(0.0, sq / m - mu * mu);
            const double istd = 1.0 / std::sqrt(var + kBnEpsilon);
            inv_std[c] = static_cast<T>(istd);
            for (int64_t n = 0; n < iv.n; ++n) {
                const T* p = x.data() + (n * iv.c + c) * plane;
                T* ph = xhat.data() + (n * iv.c + c) * plane;
                T* py = y.data() + (n * iv.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    ph[i] = static_cast<T>((p[i] - mu) * istd);
                    py[i] = gv[c] * ph[i] + bv[c];
                }
            }
            auto& rm = state.mean->values;
            auto& rv = state.var->values;
            rm[c] = static_cast<T>(kBnMomentum * rm[c] + (1.0 - kBnMomentum) * mu);
            rv[c] = static_cast<T>(kBnMomentum * rv[c] + (1.0 - kBnMomentum) * var);
        }
        state.batches->values[0] += T(1);
    } else {
        ACDC_REQUIRE(state.batches->values[0] > T(0),
                     "batch_norm: infer mode before any train-mode update (uninitialized moments)");
        for (int64_t c = 0; c < iv.c; ++c) {
            const double mu = state.mean->values[c];
            const double istd = 1.0 / std::sqrt(static_cast<double>(state.var->values[c]) + kBnEpsilon);
            inv_std[c] = static_cast<T>(istd);
            for (int64_t n = 0; n < iv.n; ++n) {
                const T* p = x.data() + (n * iv.c + c) * plane;
                T* ph = xhat.data() + (n * iv.c + c) * plane;
                T* py = y.data() + (n * iv.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    ph[i] = static_cast<T>((p[i] - mu) * istd);
                    py[i] = gv[c] * ph[i] + bv[c];
                }
            }
        }
    }

    Var<T> out = g.make_node(input.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [iid = input.id, gid = gamma.id, bid = beta.id, oid = out.id, iv, plane,
                               m, mode, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        const auto& gamma_v = gg.node(gid).values;
        auto& gi = gg.grad_of(iid);
        auto& ggm = gg.grad_of(gid);
        auto& gbt = gg.grad_of(bid);
        for (int64_t c = 0; c < iv.c; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int64_t n = 0; n < iv.n; ++n) {
                const int64_t off = (n * iv.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_dy += go[off + i];
                    sum_dy_xhat += static_cast<double>(go[off + i]) * xhat[off + i];
                }
            }
            ggm[c] += static_cast<T>(sum_dy_xhat);
            gbt[c] += static_cast<T>(sum_dy);
            const double k1 = sum_dy / m, k2 = sum_dy_xhat / m;
            for (int64_t n = 0; n < iv.n; ++n) {
                const int64_t off = (n * iv.c + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double dxhat = static_cast<double>(go[off + i]) * gamma_v[c];
                    if (mode == BnMode::Train) {
                        gi[off + i] += static_cast<T>(
                            inv_std[c] * (dxhat - gamma_v[c] * (k1 + static_cast<double>(xhat[off + i]) * k2)));
                    } else {
                        gi[off + i] += static_cast<T>(dxhat * inv_std[c]);
                    }
                }
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Upsampling, dense, attention
// ---------------------------------------------------------------------------

/// Doubles both spatial extents by bilinear interpolation,
/// align-corners-false convention with edge clamping.
template <typename T>
Var<T> bilinear_upsample2x(Var<T> input) {
    auto& g = *input.graph;
    auto iv = detail::image_view(input.shape(), "bilinear_upsample2x");
    const int64_t oy = iv.y * 2, ox = iv.x * 2;

    struct Tap {
        int64_t i0, i1;
        T w1; // weight of i1; i0 gets 1-w1
    };
    auto make_taps = [](int64_t in, int64_t on) {
        std::vector<Tap> taps(static_cast<size_t>(on));
        for (int64_t o = 0; o < on; ++o) {
            const double s = (o + 0.5) / 2.0 - 0.5;
            double f = std::floor(s);
            int64_t i0 = static_cast<int64_t>(f);
            T w1 = static_cast<T>(s - f);
            int64_t i1 = i0 + 1;
            if (i0 < 0) { i0 = 0; }
            if (i1 > in - 1) { i1 = in - 1; }
            if (i0 > in - 1) { i0 = in - 1; }
            taps[static_cast<size_t>(o)] = {i0, i1, w1};
        }
        return taps;
    };
    const auto ty = make_taps(iv.y, oy);
    const auto tx = make_taps(iv.x, ox);

    const auto& x = input.values();
    std::vector<T> y(static_cast<size_t>(iv.n * iv.c * oy * ox));
    for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
        const T* src = x.data() + nc * iv.y * iv.x;
        T* dst = y.data() + nc * oy * ox;
        for (int64_t py = 0; py < oy; ++py) {
            const auto& t0 = ty[static_cast<size_t>(py)];
            const T* r0 = src + t0.i0 * iv.x;
            const T* r1 = src + t0.i1 * iv.x;
            for (int64_t px = 0; px < ox; ++px) {
                const auto& t1 = tx[static_cast<size_t>(px)];
                const T a = r0[t1.i0] * (T(1) - t1.w1) + r0[t1.i1] * t1.w1;
                const T b = r1[t1.i0] * (T(1) - t1.w1) + r1[t1.i1] * t1.w1;
                dst[py * ox + px] = a * (T(1) - t0.w1) + b * t0.w1;
            }
        }
    }
    Var<T> out = g.make_node(detail::image_shape(iv, iv.c, oy, ox), std::move(y), nullptr);
    g.node(out.id).backward = [iid = input.id, oid = out.id, iv, oy, ox, ty, tx](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& gi = gg.grad_of(iid);
        for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
            const T* src = go.data() + nc * oy * ox;
            T* dst = gi.data() + nc * iv.y * iv.x;
            for (int64_t py = 0; py < oy; ++py) {
                const auto& t0 = ty[static_cast<size_t>(py)];
                for (int64_t px = 0; px < ox; ++px) {
                    const auto& t1 = tx[static_cast<size_t>(px)];
                    const T gv = src[py * ox + px];
                    dst[t0.i0 * iv.x + t1.i0] += gv * (T(1) - t0.w1) * (T(1) - t1.w1);
                    dst[t0.i0 * iv.x + t1.i1] += gv * (T(1) - t0.w1) * t1.w1;
                    dst[t0.i1 * iv.x + t1.i0] += gv * t0.w1 * (T(1) - t1.w1);
                    dst[t0.i1 * iv.x + t1.i1] += gv * t0.w1 * t1.w1;
                }
            }
        }
    };
    return out;
}

/// Fully-connected layer: (N, K) x (M, K)^T + bias -> (N, M).
template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
    auto& g = detail::same_graph(input, weight, "dense");
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    ACDC_REQUIRE(is.size() == 2, "dense: input must be (N, K), got ", shape_str(is));
    ACDC_REQUIRE(ws.size() == 2 && ws[1] == is[1],
                 "dense: weight ", shape_str(ws), " incompatible with input ", shape_str(is));
    const int64_t N = is[0], K = is[1], M = ws[0];
    ACDC_REQUIRE(bias.shape() == Shape{M}, "dense: bias shape mismatch");

    std::vector<T> y(static_cast<size_t>(N * M));
    detail::CMapRM<T> X(input.values().data(), N, K);
    detail::CMapRM<T> W(weight.values().data(), M, K);
    detail::MapRM<T> Y(y.data(), N, M);
    Y.noalias() = X * W.transpose();
    const auto& bv = bias.values();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t mcol = 0; mcol < M; ++mcol) y[static_cast<size_t>(n * M + mcol)] += bv[mcol];

    Var<T> out = g.make_node(Shape{N, M}, std::move(y), nullptr);
    g.node(out.id).backward = [iid = input.id, wid = weight.id, bid = bias.id, oid = out.id, N, K,
                               M](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        const auto& xv = gg.node(iid).values;
        const auto& wv = gg.node(wid).values;
        auto& gi = gg.grad_of(iid);
        auto& gw = gg.grad_of(wid);
        auto& gb = gg.grad_of(bid);
        detail::CMapRM<T> dY(go.data(), N, M);
        detail::CMapRM<T> X(xv.data(), N, K);
        detail::CMapRM<T> W(wv.data(), M, K);
        detail::MapRM<T>(gi.data(), N, K).noalias() += dY * W;
        detail::MapRM<T>(gw.data(), M, K).noalias() += dY.transpose() * X;
        for (int64_t mcol = 0; mcol < M; ++mcol) {
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) acc += static_cast<double>(go[static_cast<size_t>(n * M + mcol)]);
            gb[mcol] += static_cast<T>(acc);
        }
    };
    return out;
}

/// Softmax over all pixel positions of each channel, with per-channel max
/// subtraction for stability. Every output channel sums to 1.
template <typename T>
Var<T> spatial_softmax(Var<T> pre_attention) {
    auto& g = *pre_attention.graph;
    auto iv = detail::image_view(pre_attention.shape(), "spatial_softmax");
    const int64_t plane = iv.y * iv.x;
    const auto& x = pre_attention.values();
    std::vector<T> y(x.size());
    for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
        const T* src = x.data() + nc * plane;
        T* dst = y.data() + nc * plane;
        T mx = src[0];
        for (int64_t i = 1; i < plane; ++i) mx = std::max(mx, src[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < plane; ++i) {
            const double e = std::exp(static_cast<double>(src[i] - mx));
            dst[i] = static_cast<T>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(dst[i] * inv);
    }
    Var<T> out = g.make_node(pre_attention.shape(), std::move(y), nullptr);
    g.node(out.id).backward = [iid = pre_attention.id, oid = out.id, iv, plane](Graph<T>& gg) {
        const auto& phi = gg.node(oid).values;
        const auto& go = gg.grad_of(oid);
        auto& gi = gg.grad_of(iid);
        for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
            const int64_t off = nc * plane;
            double dot = 0.0;
            for (int64_t i = 0; i < plane; ++i)
                dot += static_cast<double>(go[off + i]) * phi[off + i];
            for (int64_t i = 0; i < plane; ++i)
                gi[off + i] += static_cast<T>(phi[off + i] * (static_cast<double>(go[off + i]) - dot));
        }
    };
    return out;
}

/// Expected pixel coordinate under each attention channel, zero-indexed
/// pixel centers, x rightward then y downward. Output (N, L, 2) or (L, 2).
template <typename T>
Var<T> soft_argmax(Var<T> attention) {
    auto& g = *attention.graph;
    auto iv = detail::image_view(attention.shape(), "soft_argmax");
    const int64_t plane = iv.y * iv.x;
    const auto& x = attention.values();
    for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
        double sum = 0.0;
        for (int64_t i = 0; i < plane; ++i) {
            const T v = x[nc * plane + i];
            ACDC_REQUIRE(v >= T(0), "soft_argmax: attention channel ", nc % iv.c, " has negative value");
            sum += v;
        }
        ACDC_REQUIRE(std::abs(sum - 1.0) <= 1e-5,
                     "soft_argmax: attention channel ", nc % iv.c, " sums to ", sum, ", not 1");
    }
    std::vector<T> y(static_cast<size_t>(iv.n * iv.c * 2));
    for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
        const T* src = x.data() + nc * plane;
        double ex = 0.0, ey = 0.0;
        for (int64_t py = 0; py < iv.y; ++py)
            for (int64_t px = 0; px < iv.x; ++px) {
                const double w = src[py * iv.x + px];
                ex += w * px;
                ey += w * py;
            }
        y[static_cast<size_t>(nc * 2)] = static_cast<T>(ex);
        y[static_cast<size_t>(nc * 2 + 1)] = static_cast<T>(ey);
    }
    Shape os = iv.batched ? Shape{iv.n, iv.c, 2} : Shape{iv.c, 2};
    Var<T> out = g.make_node(std::move(os), std::move(y), nullptr);
    g.node(out.id).backward = [iid = attention.id, oid = out.id, iv, plane](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& gi = gg.grad_of(iid);
        for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
            const T gx = go[nc * 2], gy = go[nc * 2 + 1];
            T* dst = gi.data() + nc * plane;
            for (int64_t py = 0; py < iv.y; ++py)
                for (int64_t px = 0; px < iv.x; ++px)
                    dst[py * iv.x + px] += gx * static_cast<T>(px) + gy * static_cast<T>(py);
        }
    };
    return out;
}

/// Sum of absolute differences; subgradient 0 at exact ties.
template <typename T>
Var<T> l1_loss(Var<T> pred, Var<T> target) {
    auto& g = detail::same_graph(pred, target, "l1_loss");
    ACDC_REQUIRE(pred.shape() == target.shape(),
                 "l1_loss: shape mismatch ", shape_str(pred.shape()), " vs ", shape_str(target.shape()));
    const auto& a = pred.values();
    const auto& b = target.values();
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
    Var<T> out = g.make_node(Shape{}, {static_cast<T>(acc)}, nullptr);
    g.node(out.id).backward = [aid = pred.id, bid = target.id, oid = out.id](Graph<T>& gg) {
        const T go = gg.grad_of(oid)[0];
        const auto& a2 = gg.node(aid).values;
        const auto& b2 = gg.node(bid).values;
        auto& ga = gg.grad_of(aid);
        auto& gb = gg.grad_of(bid);
        for (size_t i = 0; i < a2.size(); ++i) {
            const T s = a2[i] > b2[i] ? T(1) : (a2[i] < b2[i] ? T(-1) : T(0));
            ga[i] += go * s;
            gb[i] -= go * s;
        }
    };
    return out;
}

/// Merges landmark-wise attention channels into one spatial mask: each
/// channel is min-max rescaled to [0,1], then channels are reduced by a
/// pixelwise max. A degenerate channel (max-min below 1e-12) contributes
/// zeros. Input (N, L, Y, X) -> (N, 1, Y, X).
template <typename T>
Var<T> fused_mask(Var<T> attention) {
    auto& g = *attention.graph;
    auto iv = detail::image_view(attention.shape(), "fused_mask");
    ACDC_REQUIRE(iv.c >= 1, "fused_mask: needs at least one attention channel");
    const int64_t plane = iv.y * iv.x;
    const auto& x = attention.values();

    std::vector<T> rescaled(x.size());
    std::vector<T> range(static_cast<size_t>(iv.n * iv.c));
    std::vector<int64_t> argmin_i(static_cast<size_t>(iv.n * iv.c)), argmax_i(static_cast<size_t>(iv.n * iv.c));
    for (int64_t nc = 0; nc < iv.n * iv.c; ++nc) {
        const T* src = x.data() + nc * plane;
        int64_t ai = 0, bi = 0;
        for (int64_t i = 1; i < plane; ++i) {
            if (src[i] < src[ai]) ai = i;
            if (src[i] > src[bi]) bi = i;
        }
        const T mn = src[ai];
        const T d = src[bi] - mn;
        range[static_cast<size_t>(nc)] = d;
        argmin_i[static_cast<size_t>(nc)] = ai;
        argmax_i[static_cast<size_t>(nc)] = bi;
        T* dst = rescaled.data() + nc * plane;
        if (static_cast<double>(d) < 1e-12) {
            std::fill(dst, dst + plane, T(0));
        } else {
            for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - mn) / d;
        }
    }
    std::vector<T> y(static_cast<size_t>(iv.n * plane), T(0));
    std::vector<int32_t> argmax(static_cast<size_t>(iv.n * plane), 0);
    for (int64_t n = 0; n < iv.n; ++n) {
        T* dst = y.data() + n * plane;
        int32_t* am = argmax.data() + n * plane;
        for (int64_t c = 0; c < iv.c; ++c) {
            const T* src = rescaled.data() + (n * iv.c + c) * plane;
            for (int64_t i = 0; i < plane; ++i)
                if (c == 0 || src[i] > dst[i]) {
                    dst[i] = src[i];
                    am[i] = static_cast<int32_t>(c);
                }
        }
    }
    Var<T> out =
        g.make_node(detail::image_shape(iv, 1, iv.y, iv.x), std::move(y), nullptr);
    g.node(out.id).backward = [iid = attention.id, oid = out.id, iv, plane, argmax = std::move(argmax),
                               rescaled = std::move(rescaled), argmin_i = std::move(argmin_i),
                               argmax_i = std::move(argmax_i), range = std::move(range)](Graph<T>& gg) {
        const auto& go = gg.grad_of(oid);
        auto& gi = gg.grad_of(iid);
        for (int64_t n = 0; n < iv.n; ++n) {
            for (int64_t i = 0; i < plane; ++i) {
                const T dout = go[n * plane + i];
                if (dout == T(0)) continue;
                const int64_t c = argmax[static_cast<size_t>(n * plane + i)];
                const int64_t nc = n * iv.c + c;
                const T d = range[static_cast<size_t>(nc)];
                if (static_cast<double>(d) < 1e-12) continue;
                const T r = rescaled[static_cast<size_t>(nc * plane + i)];
                T* dst = gi.data() + nc * plane;
                dst[i] += dout / d;
                dst[argmin_i[static_cast<size_t>(nc)]] += dout * (r - T(1)) / d;
                dst[argmax_i[static_cast<size_t>(nc)]] -= dout * r / d;
            }
        }
    };
    return out;
}

} // namespace acdc
