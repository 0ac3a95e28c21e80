#include "volcast/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace volcast::ad {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct BroadcastPlan {
    Shape out;
    std::vector<int64_t> stride_a;
    std::vector<int64_t> stride_b;
};

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 0);
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    const bool a_scalar = shape_size(a) == 1;
    const bool b_scalar = shape_size(b) == 1;
    if (a_scalar && !b_scalar) {
        plan.out = b;
        plan.stride_a.assign(b.size(), 0);
        plan.stride_b = row_major_strides(b);
        return plan;
    }
    if (b_scalar) {
        plan.out = a;
        plan.stride_a = row_major_strides(a);
        plan.stride_b.assign(a.size(), 0);
        return plan;
    }
    if (a.size() != b.size())
        throw ShapeError("broadcast rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
    plan.out.resize(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i]) plan.out[i] = a[i];
        else if (a[i] == 1) plan.out[i] = b[i];
        else if (b[i] == 1) plan.out[i] = a[i];
        else throw ShapeError("incompatible broadcast: " + shape_str(a) + " vs " + shape_str(b));
    }
    plan.stride_a = row_major_strides(a);
    plan.stride_b = row_major_strides(b);
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == 1 && plan.out[i] != 1) plan.stride_a[i] = 0;
        if (b[i] == 1 && plan.out[i] != 1) plan.stride_b[i] = 0;
    }
    return plan;
}

template <typename F>
Tensor eval_binary(const Tensor& a, const Tensor& b, F&& f) {
    BroadcastPlan plan = make_plan(a.shape, b.shape);
    Tensor out = Tensor::zeros(plan.out);
    const int rank = static_cast<int>(plan.out.size());
    std::vector<int> idx(plan.out.size(), 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < out.size();) {
        out.data[static_cast<size_t>(o++)] = f(a.data[static_cast<size_t>(ia)], b.data[static_cast<size_t>(ib)]);
        int ax = rank - 1;
        while (ax >= 0) {
            idx[static_cast<size_t>(ax)]++;
            ia += plan.stride_a[static_cast<size_t>(ax)];
            ib += plan.stride_b[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < plan.out[static_cast<size_t>(ax)]) break;
            ia -= plan.stride_a[static_cast<size_t>(ax)] * plan.out[static_cast<size_t>(ax)];
            ib -= plan.stride_b[static_cast<size_t>(ax)] * plan.out[static_cast<size_t>(ax)];
            idx[static_cast<size_t>(ax)] = 0;
            --ax;
        }
        if (ax < 0) break;
    }
    return out;
}

void check_axis(const Shape& s, int axis) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
}

} // namespace

Var Tape::emit(Tensor val, std::vector<Var> parents, BackwardFn backward) {
    nodes_.push_back(Node{std::move(val), std::move(parents), std::move(backward), nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || v.index >= static_cast<int>(nodes_.size()))
        throw ShapeError("invalid tape variable");
    return nodes_[static_cast<size_t>(v.index)];
}

const Tensor& Tape::val(Var v) const { return node(v).val; }

void Tape::clear() { nodes_.clear(); }

Var Tape::value(Tensor t) {
    return emit(std::move(t), {}, nullptr);
}

Var Tape::param(ParamTensor& p) {
    Var v = emit(p.value, {}, nullptr);
    nodes_.back().bound = &p;
    return v;
}

// ---------------------------------------------------------------------------
// binary elementwise
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    Tensor out = eval_binary(val(a), val(b), [](double x, double y) { return x + y; });
    Shape sa = val(a).shape, sb = val(b).shape;
    return emit(std::move(out), {a, b}, [sa, sb, a, b](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.reduce_to_shape(adj, sa), t.reduce_to_shape(adj, sb)};
    });
}

Var Tape::sub(Var a, Var b) {
    Tensor out = eval_binary(val(a), val(b), [](double x, double y) { return x - y; });
    Shape sa = val(a).shape, sb = val(b).shape;
    return emit(std::move(out), {a, b}, [sa, sb](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.reduce_to_shape(adj, sa), t.reduce_to_shape(t.neg(adj), sb)};
    });
}

Var Tape::mul(Var a, Var b) {
    Tensor out = eval_binary(val(a), val(b), [](double x, double y) { return x * y; });
    Shape sa = val(a).shape, sb = val(b).shape;
    return emit(std::move(out), {a, b}, [sa, sb, a, b](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.reduce_to_shape(t.mul(adj, b), sa),
                                t.reduce_to_shape(t.mul(adj, a), sb)};
    });
}

Var Tape::div(Var a, Var b) {
    Tensor out = eval_binary(val(a), val(b), [](double x, double y) { return x / y; });
    Shape sa = val(a).shape, sb = val(b).shape;
    return emit(std::move(out), {a, b}, [sa, sb, a, b](Tape& t, Var self, Var adj) {
        Var da = t.reduce_to_shape(t.div(adj, b), sa);
        Var db = t.reduce_to_shape(t.neg(t.div(t.mul(adj, self), b)), sb);
        return std::vector<Var>{da, db};
    });
}

// ---------------------------------------------------------------------------
// unary elementwise
// ---------------------------------------------------------------------------

Var Tape::unary_pointwise(Var a, const std::function<double(double)>& f, const BackwardFn& backward) {
    Tensor out = val(a);
    for (auto& v : out.data) v = f(v);
    return emit(std::move(out), {a}, backward);
}

Var Tape::neg(Var a) {
    return unary_pointwise(a, [](double x) { return -x; }, [](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.neg(adj)};
    });
}

Var Tape::scale(Var a, double c) {
    return unary_pointwise(a, [c](double x) { return c * x; }, [c](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.scale(adj, c)};
    });
}

Var Tape::add_const(Var a, double c) {
    return unary_pointwise(a, [c](double x) { return x + c; }, [](Tape&, Var, Var adj) {
        return std::vector<Var>{adj};
    });
}

Var Tape::exp(Var a) {
    return unary_pointwise(a, [](double x) { return std::exp(x); }, [](Tape& t, Var self, Var adj) {
        return std::vector<Var>{t.mul(adj, self)};
    });
}

Var Tape::log(Var a) {
    return unary_pointwise(a, [](double x) { return std::log(x); }, [a](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.div(adj, a)};
    });
}

Var Tape::sqrt(Var a) {
    return unary_pointwise(a, [](double x) { return std::sqrt(x); }, [](Tape& t, Var self, Var adj) {
        return std::vector<Var>{t.scale(t.div(adj, self), 0.5)};
    });
}

// Piecewise-constant factor entering a backward rule as a constant leaf.
static Var pointwise_mask(Tape& t, const Tensor& src, double (*f)(double, double), double param) {
    Tensor m = src;
    for (auto& v : m.data) v = f(v, param);
    return t.value(std::move(m));
}

Var Tape::abs(Var a) {
    Tensor src = val(a);
    return unary_pointwise(a, [](double x) { return std::fabs(x); },
                           [src = std::move(src)](Tape& t, Var, Var adj) {
        Var sign = pointwise_mask(t, src,
                                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, 0.0);
        return std::vector<Var>{t.mul(adj, sign)};
    });
}

Var Tape::sigmoid(Var a) {
    auto sig = [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    };
    return unary_pointwise(a, sig, [](Tape& t, Var self, Var adj) {
        Var one_minus = t.add_const(t.neg(self), 1.0);
        return std::vector<Var>{t.mul(adj, t.mul(self, one_minus))};
    });
}

Var Tape::tanh(Var a) {
    return unary_pointwise(a, [](double x) { return std::tanh(x); }, [](Tape& t, Var self, Var adj) {
        Var one_minus_sq = t.add_const(t.neg(t.mul(self, self)), 1.0);
        return std::vector<Var>{t.mul(adj, one_minus_sq)};
    });
}

Var Tape::softplus(Var a) {
    // log(1 + e^x), computed overflow-free
    auto sp = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };
    return unary_pointwise(a, sp, [a](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.mul(adj, t.sigmoid(a))};
    });
}

Var Tape::leaky_relu(Var a, double negative_slope) {
    Tensor src = val(a);
    return unary_pointwise(a, [negative_slope](double x) { return x > 0.0 ? x : negative_slope * x; },
                           [src = std::move(src), negative_slope](Tape& t, Var, Var adj) {
        Var m = pointwise_mask(t, src,
                               [](double x, double s) { return x > 0.0 ? 1.0 : s; }, negative_slope);
        return std::vector<Var>{t.mul(adj, m)};
    });
}

Var Tape::norm_cdf(Var a) {
    return unary_pointwise(a, [](double x) { return 0.5 * std::erfc(-x * kInvSqrt2); },
                           [a](Tape& t, Var, Var adj) {
        // d/dx Phi = phi(x) = exp(-x^2/2) / sqrt(2 pi), kept on tape
        Var pdf = t.scale(t.exp(t.scale(t.mul(a, a), -0.5)), kInvSqrt2Pi);
        return std::vector<Var>{t.mul(adj, pdf)};
    });
}

Var Tape::clamp_min(Var a, double floor) {
    Tensor src = val(a);
    return unary_pointwise(a, [floor](double x) { return x > floor ? x : floor; },
                           [src = std::move(src), floor](Tape& t, Var, Var adj) {
        Var m = pointwise_mask(t, src,
                               [](double x, double f) { return x > f ? 1.0 : 0.0; }, floor);
        return std::vector<Var>{t.mul(adj, m)};
    });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, Shape s) {
    const Tensor& av = val(a);
    if (shape_size(s) != av.size())
        throw ShapeError("reshape " + shape_str(av.shape) + " -> " + shape_str(s) + " changes element count");
    Tensor out(s, av.data);
    Shape orig = av.shape;
    return emit(std::move(out), {a}, [orig](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.reshape(adj, orig)};
    });
}

Var Tape::slice(Var a, int axis, int start, int length) {
    const Tensor& av = val(a);
    check_axis(av.shape, axis);
    const int extent = av.shape[static_cast<size_t>(axis)];
    if (start < 0 || length <= 0 || start + length > extent)
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") out of range on axis " + std::to_string(axis) + " of " + shape_str(av.shape));
    Shape out_shape = av.shape;
    out_shape[static_cast<size_t>(axis)] = length;
    Tensor out = Tensor::zeros(out_shape);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < av.shape.size(); ++i) inner *= av.shape[i];
    for (int64_t o = 0; o < outer; ++o)
        for (int j = 0; j < length; ++j)
            std::copy_n(av.data.begin() + (o * extent + start + j) * inner, inner,
                        out.data.begin() + (o * length + j) * inner);

    Shape orig = av.shape;
    return emit(std::move(out), {a}, [orig, axis, start, length, extent](Tape& t, Var, Var adj) {
        std::vector<Var> parts;
        if (start > 0) {
            Shape s = orig;
            s[static_cast<size_t>(axis)] = start;
            parts.push_back(t.value(Tensor::zeros(s)));
        }
        parts.push_back(adj);
        if (start + length < extent) {
            Shape s = orig;
            s[static_cast<size_t>(axis)] = extent - start - length;
            parts.push_back(t.value(Tensor::zeros(s)));
        }
        return std::vector<Var>{parts.size() == 1 ? adj : t.concat(parts, axis)};
    });
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = val(parts[0]).shape;
    check_axis(first, axis);
    Shape out_shape = first;
    int total = 0;
    std::vector<int> lengths;
    for (Var p : parts) {
        const Shape& s = val(p).shape;
        if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != first[i])
                throw ShapeError("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(first));
        lengths.push_back(s[static_cast<size_t>(axis)]);
        total += lengths.back();
    }
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < first.size(); ++i) inner *= first[i];
    for (int64_t o = 0; o < outer; ++o) {
        int offset = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& pv = val(parts[pi]);
            const int len = lengths[pi];
            std::copy_n(pv.data.begin() + o * len * inner, len * inner,
                        out.data.begin() + (o * total + offset) * inner);
            offset += len;
        }
    }

    return emit(std::move(out), parts, [axis, lengths](Tape& t, Var, Var adj) {
        std::vector<Var> grads;
        int offset = 0;
        for (int len : lengths) {
            grads.push_back(t.slice(adj, axis, offset, len));
            offset += len;
        }
        return grads;
    });
}

Var Tape::broadcast_to(Var a, Shape s) {
    const Tensor& av = val(a);
    if (av.shape == s) return a;
    Tensor zero = Tensor::zeros(s);
    // reuse binary machinery: x + 0 broadcast to target
    Tensor out = eval_binary(av, zero, [](double x, double) { return x; });
    if (out.shape != s)
        throw ShapeError("cannot broadcast " + shape_str(av.shape) + " to " + shape_str(s));
    Shape orig = av.shape;
    return emit(std::move(out), {a}, [orig](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.reduce_to_shape(adj, orig)};
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var Tape::sum(Var a) {
    const Tensor& av = val(a);
    double acc = 0.0;
    for (double v : av.data) acc += v;
    Shape orig = av.shape;
    return emit(Tensor::scalar(acc), {a}, [orig](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.broadcast_to(adj, orig)};
    });
}

Var Tape::mean(Var a) {
    return scale(sum(a), 1.0 / static_cast<double>(val(a).size()));
}

Var Tape::sum_axis(Var a, int axis) {
    const Tensor& av = val(a);
    check_axis(av.shape, axis);
    Shape out_shape = av.shape;
    const int extent = out_shape[static_cast<size_t>(axis)];
    out_shape[static_cast<size_t>(axis)] = 1;
    Tensor out = Tensor::zeros(out_shape);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < av.shape.size(); ++i) inner *= av.shape[i];
    for (int64_t o = 0; o < outer; ++o)
        for (int j = 0; j < extent; ++j)
            for (int64_t k = 0; k < inner; ++k)
                out.data[static_cast<size_t>(o * inner + k)] += av.data[static_cast<size_t>((o * extent + j) * inner + k)];
    Shape orig = av.shape;
    return emit(std::move(out), {a}, [orig](Tape& t, Var, Var adj) {
        return std::vector<Var>{t.broadcast_to(adj, orig)};
    });
}

Var Tape::reduce_to_shape(Var a, Shape s) {
    const Tensor& av = val(a);
    if (av.shape == s) return a;
    if (shape_size(s) == 1) return reshape(sum(a), s);
    if (av.shape.size() != s.size())
        throw ShapeError("reduce_to_shape rank mismatch: " + shape_str(av.shape) + " -> " + shape_str(s));
    Var cur = a;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == 1 && val(cur).shape[i] != 1) cur = sum_axis(cur, static_cast<int>(i));
        else if (s[i] != val(cur).shape[i])
            throw ShapeError("reduce_to_shape " + shape_str(av.shape) + " -> " + shape_str(s));
    }
    return cur;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(av.shape) + " and " + shape_str(bv.shape));
    const int m = transpose_a ? av.shape[1] : av.shape[0];
    const int ka = transpose_a ? av.shape[0] : av.shape[1];
    const int kb = transpose_b ? bv.shape[1] : bv.shape[0];
    const int n = transpose_b ? bv.shape[0] : bv.shape[1];
    if (ka != kb)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(av.shape) +
                         (transpose_a ? "^T" : "") + " x " + shape_str(bv.shape) + (transpose_b ? "^T" : ""));

    // contiguous (k,n) view of B
    std::vector<double> bt;
    const double* bptr = bv.data.data();
    if (transpose_b) {
        bt.resize(static_cast<size_t>(ka) * n);
        for (int j = 0; j < n; ++j)
            for (int kk = 0; kk < ka; ++kk)
                bt[static_cast<size_t>(kk) * n + j] = bv.data[static_cast<size_t>(j) * ka + kk];
        bptr = bt.data();
    }

    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        double* orow = &out.data[static_cast<size_t>(i) * n];
        for (int kk = 0; kk < ka; ++kk) {
            const double aval = transpose_a ? av.data[static_cast<size_t>(kk) * m + i]
                                           : av.data[static_cast<size_t>(i) * ka + kk];
            if (aval == 0.0) continue;
            const double* brow = bptr + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }

    return emit(std::move(out), {a, b}, [a, b, transpose_a, transpose_b](Tape& t, Var, Var adj) {
        Var da = transpose_a ? t.matmul(b, adj, transpose_b, true)
                             : t.matmul(adj, b, false, !transpose_b);
        Var db = transpose_b ? t.matmul(adj, a, true, transpose_a)
                             : t.matmul(a, adj, !transpose_a, false);
        return std::vector<Var>{da, db};
    });
}

// ---------------------------------------------------------------------------
// convolutions (direct summation, stride 1)
// ---------------------------------------------------------------------------

namespace {

void check_conv_shapes(const Shape& x, const Shape& k, int padding) {
    if (x.size() != 3) throw ShapeError("conv2d input must be (channels,height,width), got " + shape_str(x));
    if (k.size() != 4) throw ShapeError("conv2d kernel must be (out,in,kh,kw), got " + shape_str(k));
    if (x[0] != k[1])
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x[0]) +
                         " channels, kernel expects " + std::to_string(k[1]));
    if (padding < 0) throw ShapeError("negative conv2d padding");
    if (x[1] + 2 * padding < k[2] || x[2] + 2 * padding < k[3])
        throw ShapeError("conv2d kernel " + shape_str(k) + " larger than padded input " + shape_str(x));
}

Tensor conv_forward(const Tensor& x, const Tensor& k, int p) {
    const int ci_n = x.shape[0], hi = x.shape[1], wi = x.shape[2];
    const int co_n = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    const int ho = hi + 2 * p - kh + 1, wo = wi + 2 * p - kw + 1;
    Tensor out = Tensor::zeros({co_n, ho, wo});
    for (int co = 0; co < co_n; ++co)
        for (int ci = 0; ci < ci_n; ++ci)
            for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx) {
                    const double w = k.data[static_cast<size_t>(((co * ci_n + ci) * kh + dy) * kw + dx)];
                    if (w == 0.0) continue;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy + dy - p;
                        if (iy < 0 || iy >= hi) continue;
                        const int ox_lo = std::max(0, p - dx);
                        const int ox_hi = std::min(wo, wi + p - dx);
                        const double* xrow = &x.data[static_cast<size_t>((ci * hi + iy) * wi)];
                        double* orow = &out.data[static_cast<size_t>((co * ho + oy) * wo)];
                        for (int ox = ox_lo; ox < ox_hi; ++ox)
                            orow[ox] += w * xrow[ox + dx - p];
                    }
                }
    return out;
}

Tensor conv_input_grad(const Tensor& g, const Tensor& k, int p, const Shape& x_shape) {
    const int ci_n = x_shape[0], hi = x_shape[1], wi = x_shape[2];
    const int co_n = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    const int ho = g.shape[1], wo = g.shape[2];
    Tensor out = Tensor::zeros(x_shape);
    for (int co = 0; co < co_n; ++co)
        for (int ci = 0; ci < ci_n; ++ci)
            for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx) {
                    const double w = k.data[static_cast<size_t>(((co * ci_n + ci) * kh + dy) * kw + dx)];
                    if (w == 0.0) continue;
                    for (int iy = 0; iy < hi; ++iy) {
                        const int gy = iy - dy + p;
                        if (gy < 0 || gy >= ho) continue;
                        const int ix_lo = std::max(0, dx - p);
                        const int ix_hi = std::min(wi, wo + dx - p);
                        const double* grow = &g.data[static_cast<size_t>((co * ho + gy) * wo)];
                        double* xrow = &out.data[static_cast<size_t>((ci * hi + iy) * wi)];
                        for (int ix = ix_lo; ix < ix_hi; ++ix)
                            xrow[ix] += w * grow[ix - dx + p];
                    }
                }
    return out;
}

Tensor conv_kernel_grad(const Tensor& g, const Tensor& x, int p, const Shape& k_shape) {
    const int ci_n = x.shape[0], hi = x.shape[1], wi = x.shape[2];
    const int co_n = k_shape[0], kh = k_shape[2], kw = k_shape[3];
    const int ho = g.shape[1], wo = g.shape[2];
    Tensor out = Tensor::zeros(k_shape);
    for (int co = 0; co < co_n; ++co)
        for (int ci = 0; ci < ci_n; ++ci)
            for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy + dy - p;
                        if (iy < 0 || iy >= hi) continue;
                        const int ox_lo = std::max(0, p - dx);
                        const int ox_hi = std::min(wo, wi + p - dx);
                        const double* grow = &g.data[static_cast<size_t>((co * ho + oy) * wo)];
                        const double* xrow = &x.data[static_cast<size_t>((ci * hi + iy) * wi)];
                        for (int ox = ox_lo; ox < ox_hi; ++ox)
                            acc += grow[ox] * xrow[ox + dx - p];
                    }
                    out.data[static_cast<size_t>(((co * ci_n + ci) * kh + dy) * kw + dx)] = acc;
                }
    return out;
}

} // namespace

Var Tape::conv2d(Var input, Var kernel, int padding) {
    const Tensor& x = val(input);
    const Tensor& k = val(kernel);
    check_conv_shapes(x.shape, k.shape, padding);
    Tensor out = conv_forward(x, k, padding);
    Shape x_shape = x.shape, k_shape = k.shape;
    return emit(std::move(out), {input, kernel},
                [input, kernel, padding, x_shape, k_shape](Tape& t, Var, Var adj) {
        Var dx = t.conv2d_input_grad(adj, kernel, padding, x_shape);
        Var dk = t.conv2d_kernel_grad(adj, input, padding, k_shape);
        return std::vector<Var>{dx, dk};
    });
}

Var Tape::conv2d_input_grad(Var out_grad, Var kernel, int padding, Shape input_shape) {
    const Tensor& g = val(out_grad);
    const Tensor& k = val(kernel);
    check_conv_shapes(input_shape, k.shape, padding);
    const int ho = input_shape[1] + 2 * padding - k.shape[2] + 1;
    const int wo = input_shape[2] + 2 * padding - k.shape[3] + 1;
    if (g.shape != Shape{k.shape[0], ho, wo})
        throw ShapeError("conv2d_input_grad: out_grad " + shape_str(g.shape) + " inconsistent with input " +
                         shape_str(input_shape) + " and kernel " + shape_str(k.shape));
    Tensor out = conv_input_grad(g, k, padding, input_shape);
    Shape k_shape = k.shape;
    return emit(std::move(out), {out_grad, kernel},
                [out_grad, kernel, padding, k_shape](Tape& t, Var, Var adj) {
        Var dg = t.conv2d(adj, kernel, padding);
        Var dk = t.conv2d_kernel_grad(out_grad, adj, padding, k_shape);
        return std::vector<Var>{dg, dk};
    });
}

Var Tape::conv2d_kernel_grad(Var out_grad, Var input, int padding, Shape kernel_shape) {
    const Tensor& g = val(out_grad);
    const Tensor& x = val(input);
    check_conv_shapes(x.shape, kernel_shape, padding);
    const int ho = x.shape[1] + 2 * padding - kernel_shape[2] + 1;
    const int wo = x.shape[2] + 2 * padding - kernel_shape[3] + 1;
    if (g.shape != Shape{kernel_shape[0], ho, wo})
        throw ShapeError("conv2d_kernel_grad: out_grad " + shape_str(g.shape) + " inconsistent with input " +
                         shape_str(x.shape) + " and kernel " + shape_str(kernel_shape));
    Tensor out = conv_kernel_grad(g, x, padding, kernel_shape);
    Shape x_shape = x.shape;
    return emit(std::move(out), {out_grad, input},
                [out_grad, input, padding, x_shape](Tape& t, Var, Var adj) {
        Var dg = t.conv2d(input, adj, padding);
        Var dx = t.conv2d_input_grad(out_grad, adj, padding, x_shape);
        return std::vector<Var>{dg, dx};
    });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

Var Tape::softmax(Var a, int axis) {
    const Tensor& av = val(a);
    check_axis(av.shape, axis);
    const int extent = av.shape[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < av.shape.size(); ++i) inner *= av.shape[i];

    Tensor out = Tensor::zeros(av.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * extent * inner + in;
            double mx = av.data[static_cast<size_t>(base)];
            for (int j = 1; j < extent; ++j)
                mx = std::max(mx, av.data[static_cast<size_t>(base + j * inner)]);
            double denom = 0.0;
            for (int j = 0; j < extent; ++j) {
                const double e = std::exp(av.data[static_cast<size_t>(base + j * inner)] - mx);
                out.data[static_cast<size_t>(base + j * inner)] = e;
                denom += e;
            }
            for (int j = 0; j < extent; ++j)
                out.data[static_cast<size_t>(base + j * inner)] /= denom;
        }

    return emit(std::move(out), {a}, [axis](Tape& t, Var self, Var adj) {
        Var weighted = t.sum_axis(t.mul(adj, self), axis);
        return std::vector<Var>{t.mul(self, t.sub(adj, weighted))};
    });
}

// ---------------------------------------------------------------------------
// differentiation
// ---------------------------------------------------------------------------

std::vector<Var> Tape::gradients(Var output, std::span<const Var> wrt) {
    const Tensor& ov = val(output);
    if (ov.size() != 1) throw ShapeError("gradients() requires a scalar output, got " + shape_str(ov.shape));
    const size_t frontier = nodes_.size();

    std::vector<char> needed(frontier, 0);
    std::vector<int> stack{output.index};
    needed[static_cast<size_t>(output.index)] = 1;
    while (!stack.empty()) {
        const int i = stack.back();
        stack.pop_back();
        for (Var p : nodes_[static_cast<size_t>(i)].parents) {
            if (p.valid() && !needed[static_cast<size_t>(p.index)]) {
                needed[static_cast<size_t>(p.index)] = 1;
                stack.push_back(p.index);
            }
        }
    }

    std::vector<Var> adj(frontier, Var{});
    adj[static_cast<size_t>(output.index)] = value(Tensor::full(ov.shape, 1.0));

    for (int i = static_cast<int>(frontier) - 1; i >= 0; --i) {
        if (!needed[static_cast<size_t>(i)]) continue;
        const Var a = adj[static_cast<size_t>(i)];
        if (!a.valid()) continue;
        // copy: the backward call may reallocate nodes_
        auto parents = nodes_[static_cast<size_t>(i)].parents;
        auto backward = nodes_[static_cast<size_t>(i)].backward;
        if (!backward) continue;
        auto contribs = backward(*this, Var{i}, a);
        if (contribs.size() != parents.size())
            throw ShapeError("backward rule returned wrong contribution count");
        for (size_t j = 0; j < parents.size(); ++j) {
            if (!contribs[j].valid() || !parents[j].valid()) continue;
            Var& slot = adj[static_cast<size_t>(parents[j].index)];
            slot = slot.valid() ? add(slot, contribs[j]) : contribs[j];
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (Var w : wrt) {
        if (!w.valid() || static_cast<size_t>(w.index) >= frontier)
            throw ShapeError("gradients(): wrt var not on tape before output");
        Var g = adj[static_cast<size_t>(w.index)];
        result.push_back(g.valid() ? g : value(Tensor::zeros(val(w).shape)));
    }
    return result;
}

void Tape::backward(Var output) {
    std::vector<Var> bound_vars;
    std::vector<ParamTensor*> bound_params;
    const size_t frontier = nodes_.size();
    for (size_t i = 0; i < frontier; ++i) {
        if (nodes_[i].bound) {
            bound_vars.push_back(Var{static_cast<int>(i)});
            bound_params.push_back(nodes_[i].bound);
        }
    }
    auto grads = gradients(output, bound_vars);
    for (size_t i = 0; i < grads.size(); ++i) {
        const Tensor& g = val(grads[i]);
        Tensor& acc = bound_params[i]->grad;
        for (size_t j = 0; j < acc.data.size(); ++j) acc.data[j] += g.data[j];
    }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

namespace {

double eval_scalar(const ScalarFn& function, const std::vector<Tensor>& points) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(points.size());
    for (const auto& p : points) leaves.push_back(tape.value(p));
    Var out = function(tape, leaves);
    return tape.val(out).item();
}

} // namespace

GradCheckReport grad_check(const ScalarFn& function, const std::vector<Tensor>& points, double tolerance) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(points.size());
    for (const auto& p : points) leaves.push_back(tape.value(p));
    Var out = function(tape, leaves);
    if (tape.val(out).size() != 1)
        throw ShapeError("grad_check requires a scalar-valued function");
    auto grads = tape.gradients(out, leaves);

    GradCheckReport report;
    for (size_t i = 0; i < points.size(); ++i) {
        const Tensor& analytic = tape.val(grads[i]);
        for (int64_t e = 0; e < points[i].size(); ++e) {
            const double a = analytic.data[static_cast<size_t>(e)];
            // Start at 1e-5 and refine: a difference quotient separated from
            // the gradient by a kink inside the step converges as the step
            // shrinks, while a wrong gradient disagrees at every step size.
            // Keeping the best step shields the small steps from roundoff.
            double rel = 1e300;
            for (const double step : {1e-5, 1e-6, 1e-7, 1e-8, 3e-9}) {
                std::vector<Tensor> shifted = points;
                shifted[i].data[static_cast<size_t>(e)] += step;
                const double up = eval_scalar(function, shifted);
                shifted[i].data[static_cast<size_t>(e)] -= 2.0 * step;
                const double down = eval_scalar(function, shifted);
                const double numeric = (up - down) / (2.0 * step);
                rel = std::min(rel, std::fabs(a - numeric) / std::max(std::fabs(a) + std::fabs(numeric), 1e-6));
                if (rel < 0.25 * tolerance) break;
            }
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = static_cast<int>(i);
                report.worst_element = e;
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    return report;
}

} // namespace volcast::ad
