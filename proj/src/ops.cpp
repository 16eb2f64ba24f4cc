#include "msil/ops.hpp"

#include <algorithm>
#include <limits>
#include <cmath>

namespace msil {

namespace {

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

bool is_channel_vector_of(const Shape& b, const Shape& a) {
    return b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1;
}

// Adds `src` into the gradient of `dst` when it participates in differentiation.
template <typename F>
void accumulate(const ImplPtr& dst, F&& body) {
    if (!dst->requires_grad) return;
    dst->ensure_grad();
    body(dst->grad);
}

enum class Binary { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool broadcast = !(sa == sb);
    if (broadcast && !is_channel_vector_of(sb, sa)) {
        throw ShapeError(std::string(name) + ": shapes " + sa.str() + " and " + sb.str() +
                         " are neither equal nor channel-broadcastable");
    }
    const std::size_t plane = broadcast ? sa.plane() : 1;
    const auto xa = a.data();
    const auto xb = b.data();
    std::vector<double> out(sa.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double vb = xb[i / plane];
        switch (kind) {
            case Binary::Add: out[i] = xa[i] + vb; break;
            case Binary::Sub: out[i] = xa[i] - vb; break;
            case Binary::Mul: out[i] = xa[i] * vb; break;
        }
    }
    ImplPtr A = a.impl();
    ImplPtr B = b.impl();
    return record_op(name, sa, std::move(out), {a, b}, [A, B, kind, plane](std::span<const double> g) {
        accumulate(A, [&](std::vector<double>& ga) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += kind == Binary::Mul ? g[i] * B->data[i / plane] : g[i];
            }
        });
        accumulate(B, [&](std::vector<double>& gb) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                double d = g[i];
                if (kind == Binary::Sub) d = -d;
                if (kind == Binary::Mul) d *= A->data[i];
                gb[i / plane] += d;
            }
        });
    });
}

}  // namespace

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
    }
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= factor;
    ImplPtr X = x.impl();
    return record_op("scale", x.shape(), std::move(out), {x}, [X, factor](std::span<const double> g) {
        accumulate(X, [&](std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
        });
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
        throw ShapeError("concat_channels: N/H/W mismatch " + sa.str() + " vs " + sb.str());
    }
    const Shape so{sa.n, sa.c + sb.c, sa.h, sa.w};
    const std::size_t blk_a = sa.c * sa.plane();
    const std::size_t blk_b = sb.c * sb.plane();
    std::vector<double> out(so.numel());
    const auto xa = a.data();
    const auto xb = b.data();
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(xa.begin() + n * blk_a, blk_a, out.begin() + n * (blk_a + blk_b));
        std::copy_n(xb.begin() + n * blk_b, blk_b, out.begin() + n * (blk_a + blk_b) + blk_a);
    }
    ImplPtr A = a.impl();
    ImplPtr B = b.impl();
    return record_op("concat_channels", so, std::move(out), {a, b},
                     [A, B, blk_a, blk_b, batch = sa.n](std::span<const double> g) {
                         accumulate(A, [&](std::vector<double>& ga) {
                             for (int n = 0; n < batch; ++n)
                                 for (std::size_t i = 0; i < blk_a; ++i)
                                     ga[n * blk_a + i] += g[n * (blk_a + blk_b) + i];
                         });
                         accumulate(B, [&](std::vector<double>& gb) {
                             for (int n = 0; n < batch; ++n)
                                 for (std::size_t i = 0; i < blk_b; ++i)
                                     gb[n * blk_b + i] += g[n * (blk_a + blk_b) + blk_a + i];
                         });
                     });
}

Tensor slice_channels(const Tensor& x, int begin, int count) {
    const Shape s = x.shape();
    if (begin < 0 || count <= 0 || begin + count > s.c) {
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " + s.str());
    }
    const Shape so{s.n, count, s.h, s.w};
    const std::size_t plane = s.plane();
    std::vector<double> out(so.numel());
    const auto xd = x.data();
    for (int n = 0; n < s.n; ++n) {
        std::copy_n(xd.begin() + (n * s.c + begin) * plane, count * plane,
                    out.begin() + n * count * plane);
    }
    ImplPtr X = x.impl();
    return record_op("slice_channels", so, std::move(out), {x},
                     [X, s, begin, count, plane](std::span<const double> g) {
                         accumulate(X, [&](std::vector<double>& gx) {
                             for (int n = 0; n < s.n; ++n)
                                 for (std::size_t i = 0; i < count * plane; ++i)
                                     gx[(n * s.c + begin) * plane + i] += g[n * count * plane + i];
                         });
                     });
}

namespace {

// Kept strictly inside (0,1): past |v| ~ 37 the exact value is not representable
// and would otherwise round to 1 (or underflow to 0).
double logistic(double v) {
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
    if (v >= 0) return std::min(hi, 1.0 / (1.0 + std::exp(-v)));
    const double e = std::exp(v);
    return std::max(lo, e / (1.0 + e));
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = logistic(xd[i]);
    ImplPtr X = x.impl();
    return record_op("sigmoid", x.shape(), std::move(out), {x}, [X](std::span<const double> g) {
        accumulate(X, [&](std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double s = logistic(X->data[i]);
                gx[i] += g[i] * s * (1.0 - s);
            }
        });
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    if (BranchRecorder::active()) {
        for (std::size_t i = 0; i < out.size(); ++i) BranchRecorder::note(xd[i] > 0.0);
    }
    ImplPtr X = x.impl();
    return record_op("relu", x.shape(), std::move(out), {x}, [X](std::span<const double> g) {
        accumulate(X, [&](std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (X->data[i] > 0.0) gx[i] += g[i];
        });
    });
}

Tensor exp(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
    ImplPtr X = x.impl();
    return record_op("exp", x.shape(), std::move(out), {x}, [X](std::span<const double> g) {
        accumulate(X, [&](std::vector<double>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * std::exp(X->data[i]);
        });
    });
}

Tensor global_avg_pool(const Tensor& x) {
    const Shape s = x.shape();
    const std::size_t plane = s.plane();
    const auto xd = x.data();
    std::vector<double> out(static_cast<std::size_t>(s.n) * s.c);
    for (std::size_t p = 0; p < out.size(); ++p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += xd[p * plane + i];
        out[p] = acc / static_cast<double>(plane);
    }
    ImplPtr X = x.impl();
    return record_op("global_avg_pool", {s.n, s.c, 1, 1}, std::move(out), {x},
                     [X, plane](std::span<const double> g) {
                         accumulate(X, [&](std::vector<double>& gx) {
                             const double inv = 1.0 / static_cast<double>(plane);
                             for (std::size_t p = 0; p < g.size(); ++p)
                                 for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += g[p] * inv;
                         });
                     });
}

Tensor global_max_pool(const Tensor& x) {
    const Shape s = x.shape();
    const std::size_t plane = s.plane();
    const auto xd = x.data();
    std::vector<double> out(static_cast<std::size_t>(s.n) * s.c);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t p = 0; p < out.size(); ++p) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < plane; ++i)
            if (xd[p * plane + i] > xd[p * plane + best]) best = i;
        argmax[p] = p * plane + best;
        out[p] = xd[argmax[p]];
        BranchRecorder::note(best);
    }
    ImplPtr X = x.impl();
    return record_op("global_max_pool", {s.n, s.c, 1, 1}, std::move(out), {x},
                     [X, argmax = std::move(argmax)](std::span<const double> g) {
                         accumulate(X, [&](std::vector<double>& gx) {
                             for (std::size_t p = 0; p < g.size(); ++p) gx[argmax[p]] += g[p];
                         });
                     });
}

Tensor avg_pool2x2(const Tensor& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avg_pool2x2: odd spatial size " + s.str());
    const Shape so{s.n, s.c, s.h / 2, s.w / 2};
    const auto xd = x.data();
    std::vector<double> out(so.numel());
    const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
    for (std::size_t p = 0; p < planes; ++p) {
        const double* in = xd.data() + p * s.plane();
        double* o = out.data() + p * so.plane();
        for (int y = 0; y < so.h; ++y)
            for (int x2 = 0; x2 < so.w; ++x2) {
                const double* r0 = in + (2 * y) * s.w + 2 * x2;
                const double* r1 = r0 + s.w;
                o[y * so.w + x2] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
            }
    }
    ImplPtr X = x.impl();
    return record_op("avg_pool2x2", so, std::move(out), {x}, [X, s, so, planes](std::span<const double> g) {
        accumulate(X, [&](std::vector<double>& gx) {
            for (std::size_t p = 0; p < planes; ++p) {
                double* gi = gx.data() + p * s.plane();
                const double* go = g.data() + p * so.plane();
                for (int y = 0; y < so.h; ++y)
                    for (int x2 = 0; x2 < so.w; ++x2) {
                        const double v = 0.25 * go[y * so.w + x2];
                        double* r0 = gi + (2 * y) * s.w + 2 * x2;
                        double* r1 = r0 + s.w;
                        r0[0] += v;
                        r0[1] += v;
                        r1[0] += v;
                        r1[1] += v;
                    }
            }
        });
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    ImplPtr X = x.impl();
    return record_op("sum", {1, 1, 1, 1}, {acc}, {x}, [X](std::span<const double> g) {
        accumulate(X, [&](std::vector<double>& gx) {
            for (double& v : gx) v += g[0];
        });
    });
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
    if (weights.size() != x.numel()) {
        throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         x.shape().str());
    }
    double acc = 0.0;
    const auto xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) acc += xd[i] * weights[i];
    ImplPtr X = x.impl();
    std::vector<double> w(weights.begin(), weights.end());
    return record_op("weighted_sum", {1, 1, 1, 1}, {acc}, {x},
                     [X, w = std::move(w)](std::span<const double> g) {
                         accumulate(X, [&](std::vector<double>& gx) {
                             for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * w[i];
                         });
                     });
}

namespace {

// Visits every (output row, input row, x-range) triple of a padded k×k
// cross-correlation for one (ky,kx) tap.
template <typename F>
void for_each_tap_row(int H, int W, int dy, int dx, F&& row) {
    const int y0 = std::max(0, -dy);
    const int y1 = std::min(H, H - dy);
    const int x0 = std::max(0, -dx);
    const int x1 = std::min(W, W - dx);
    for (int y = y0; y < y1; ++y) row(y * W + x0, (y + dy) * W + x0 + dx, x1 - x0);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const Shape sx = x.shape();
    const Shape sw = weight.shape();
    if (sw.h != sw.w || sw.h % 2 == 0) {
        throw ShapeError("conv2d: kernel must be square with odd size, got " + sw.str());
    }
    if (sx.c != sw.c) {
        throw ShapeError("conv2d: input has " + std::to_string(sx.c) + " channels, weight " +
                         sw.str() + " expects " + std::to_string(sw.c));
    }
    if (!(bias.shape() == Shape{1, sw.n, 1, 1})) {
        throw ShapeError("conv2d: bias shape " + bias.shape().str() + " for weight " + sw.str());
    }
    const int H = sx.h, W = sx.w, k = sw.h, pad = (k - 1) / 2;
    const int cin = sw.c, cout = sw.n;
    const std::size_t plane = sx.plane();
    const Shape so{sx.n, cout, H, W};
    std::vector<double> out(so.numel());
    const auto xd = x.data();
    const auto wd = weight.data();
    const auto bd = bias.data();

    for (int n = 0; n < sx.n; ++n) {
        for (int co = 0; co < cout; ++co) {
            double* o = out.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
            std::fill(o, o + plane, bd[co]);
            for (int ci = 0; ci < cin; ++ci) {
                const double* in = xd.data() + (static_cast<std::size_t>(n) * cin + ci) * plane;
                const double* wk = wd.data() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = wk[ky * k + kx];
                        for_each_tap_row(H, W, ky - pad, kx - pad, [&](int oi, int ii, int len) {
                            double* op = o + oi;
                            const double* ip = in + ii;
                            for (int i = 0; i < len; ++i) op[i] += wv * ip[i];
                        });
                    }
            }
        }
    }

    ImplPtr X = x.impl();
    ImplPtr Wt = weight.impl();
    ImplPtr B = bias.impl();
    return record_op(
        "conv2d", so, std::move(out), {x, weight, bias},
        [X, Wt, B, sx, cin, cout, k, pad, plane](std::span<const double> g) {
            const int H = sx.h, W = sx.w;
            accumulate(B, [&](std::vector<double>& gb) {
                for (int n = 0; n < sx.n; ++n)
                    for (int co = 0; co < cout; ++co) {
                        const double* go = g.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) acc += go[i];
                        gb[co] += acc;
                    }
            });
            accumulate(Wt, [&](std::vector<double>& gw) {
                for (int n = 0; n < sx.n; ++n)
                    for (int co = 0; co < cout; ++co) {
                        const double* go = g.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
                        for (int ci = 0; ci < cin; ++ci) {
                            const double* in = X->data.data() + (static_cast<std::size_t>(n) * cin + ci) * plane;
                            double* gk = gw.data() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    double acc = 0.0;
                                    for_each_tap_row(H, W, ky - pad, kx - pad, [&](int oi, int ii, int len) {
                                        const double* op = go + oi;
                                        const double* ip = in + ii;
                                        for (int i = 0; i < len; ++i) acc += op[i] * ip[i];
                                    });
                                    gk[ky * k + kx] += acc;
                                }
                        }
                    }
            });
            accumulate(X, [&](std::vector<double>& gx) {
                for (int n = 0; n < sx.n; ++n)
                    for (int co = 0; co < cout; ++co) {
                        const double* go = g.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
                        for (int ci = 0; ci < cin; ++ci) {
                            double* gi = gx.data() + (static_cast<std::size_t>(n) * cin + ci) * plane;
                            const double* wk = Wt->data.data() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const double wv = wk[ky * k + kx];
                                    for_each_tap_row(H, W, ky - pad, kx - pad, [&](int oi, int ii, int len) {
                                        const double* op = go + oi;
                                        double* ip = gi + ii;
                                        for (int i = 0; i < len; ++i) ip[i] += wv * op[i];
                                    });
                                }
                        }
                    }
            });
        });
}

}  // namespace msil
