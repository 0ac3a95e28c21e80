#include "volcast/nn.hpp"

#include "volcast/errors.hpp"

#include <cmath>

namespace volcast::nn {

double portable_uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

Tensor fan_uniform(Shape s, int fan_in, std::mt19937_64& rng, double gain) {
    if (fan_in <= 0) throw ShapeError("fan_uniform: nonpositive fan-in");
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data) v = portable_uniform(rng, -bound, bound);
    return t;
}

ad::Var WeightVars::take() {
    if (next >= vars.size()) throw ShapeError("weight cursor exhausted: graph consumes more weights than bound");
    return vars[next++];
}

WeightVars bind_all(ad::Tape& tape, std::vector<ParamTensor*> params) {
    WeightVars w;
    w.vars.reserve(params.size());
    for (ParamTensor* p : params) w.vars.push_back(tape.param(*p));
    return w;
}

ad::Var conv1x1(ad::Tape& t, ad::Var w, ad::Var x) {
    const Shape& ws = t.val(w).shape;
    const Shape& xs = t.val(x).shape;
    if (xs.size() != 3) throw ShapeError("conv1x1: input must be (channels,H,W), got " + shape_str(xs));
    const int out = ws[0], in = ws[1], h = xs[1], wd = xs[2];
    if (xs[0] != in)
        throw ShapeError("conv1x1: weight expects " + std::to_string(in) + " input channels, input has " +
                         shape_str(xs));
    ad::Var wm = t.reshape(w, {out, in});
    ad::Var xm = t.reshape(x, {in, h * wd});
    return t.reshape(t.matmul(wm, xm), {out, h, wd});
}

} // namespace volcast::nn
