#pragma once

#include "volcast/tensor.hpp"

#include <vector>

namespace volcast::opt {

using ad::ParamTensor;

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment gradient descent. step() consumes accumulated gradients
/// and zeroes them afterwards.
class Adam {
public:
    Adam(std::vector<ParamTensor*> params, AdamConfig cfg = {});

    void step();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

private:
    std::vector<ParamTensor*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

/// Halves the learning rate when the watched metric fails to improve for
/// `patience` consecutive observations, never below `floor`.
class PlateauSchedule {
public:
    PlateauSchedule(double initial_lr, int patience = 5, double floor = 1e-6)
        : lr_(initial_lr), patience_(patience), floor_(floor) {}

    /// Feeds one validation observation; returns the learning rate to use next.
    double observe(double metric);
    double lr() const { return lr_; }
    void reset(double initial_lr);

private:
    double lr_;
    int patience_;
    double floor_;
    double best_ = 1e300;
    int stale_ = 0;
};

} // namespace volcast::opt
