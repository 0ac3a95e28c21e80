#pragma once

#include "volcast/errors.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace volcast::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_size(const Shape& s);

/// Dense row-major tensor of doubles. Rank up to 4 is what the models use
/// (scalar results are stored as shape {1}).
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> values);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double value);
    static Tensor scalar(double value);
    static Tensor uniform(Shape s, double lo, double hi, std::mt19937_64& rng);

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int dim(int axis) const { return shape[static_cast<size_t>(axis)]; }

    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    double item() const;
};

/// A learnable tensor with its gradient slot. Gradients accumulate across
/// backward calls and are cleared by the optimizer between steps.
struct ParamTensor {
    std::string name;
    Tensor value;
    Tensor grad;

    ParamTensor() = default;
    ParamTensor(std::string n, Tensor v);

    void zero_grad();
};

} // namespace volcast::ad
