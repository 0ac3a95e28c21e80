#include "volcast/optimizer.hpp"

#include "volcast/errors.hpp"

#include <cmath>

namespace volcast::opt {

Adam::Adam(std::vector<ParamTensor*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const ParamTensor* p : params_) {
        m_.emplace_back(p->value.data.size(), 0.0);
        v_.emplace_back(p->value.data.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        ParamTensor& p = *params_[i];
        if (p.grad.data.size() != p.value.data.size())
            throw ShapeError("parameter '" + p.name + "' has no accumulated gradient");
        for (size_t e = 0; e < p.value.data.size(); ++e) {
            const double g = p.grad.data[e];
            m_[i][e] = cfg_.beta1 * m_[i][e] + (1.0 - cfg_.beta1) * g;
            v_[i][e] = cfg_.beta2 * v_[i][e] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[i][e] / bc1;
            const double vhat = v_[i][e] / bc2;
            p.value.data[e] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.zero_grad();
    }
}

double PlateauSchedule::observe(double metric) {
    if (metric < best_) {
        best_ = metric;
        stale_ = 0;
    } else if (++stale_ >= patience_) {
        lr_ = std::max(floor_, lr_ * 0.5);
        stale_ = 0;
    }
    return lr_;
}

void PlateauSchedule::reset(double initial_lr) {
    lr_ = initial_lr;
    best_ = 1e300;
    stale_ = 0;
}

} // namespace volcast::opt
