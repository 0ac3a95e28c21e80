#include "volcast/tensor.hpp"

#include <cmath>
#include <sstream>

namespace volcast::ad {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("nonpositive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("value count " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape s) {
    auto n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double value) {
    auto n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), value));
}

Tensor Tensor::scalar(double value) {
    return Tensor({1}, {value});
}

Tensor Tensor::uniform(Shape s, double lo, double hi, std::mt19937_64& rng) {
    Tensor t = Tensor::zeros(std::move(s));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data) v = dist(rng);
    return t;
}

static int64_t flat_index(const Shape& shape, std::initializer_list<int> idx) {
    if (static_cast<int>(idx.size()) != static_cast<int>(shape.size()))
        throw ShapeError("index rank does not match tensor rank " + shape_str(shape));
    int64_t flat = 0;
    auto it = idx.begin();
    for (size_t a = 0; a < shape.size(); ++a, ++it) {
        if (*it < 0 || *it >= shape[a])
            throw ShapeError("index out of range for shape " + shape_str(shape));
        flat = flat * shape[a] + *it;
    }
    return flat;
}

double& Tensor::at(std::initializer_list<int> idx) {
    return data[static_cast<size_t>(flat_index(shape, idx))];
}

double Tensor::at(std::initializer_list<int> idx) const {
    return data[static_cast<size_t>(flat_index(shape, idx))];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
}

ParamTensor::ParamTensor(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape);
}

void ParamTensor::zero_grad() {
    std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

} // namespace volcast::ad
