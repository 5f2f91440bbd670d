#include "lab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lab/errors.hpp"

namespace lab {

OptimizerState::OptimizerState(double learning_rate, double momentum, double weight_decay)
    : lr_(learning_rate), mu_(momentum), lambda_(weight_decay) {
    if (!(lr_ >= 0.0)) throw ConfigError("learning rate must be >= 0");
    // mu = 1 (pure momentum integration) is allowed here; training configs
    // restrict to [0,1) at validation time.
    if (!(mu_ >= 0.0 && mu_ <= 1.0)) throw ConfigError("momentum must be in [0,1]");
    if (!(lambda_ >= 0.0)) throw ConfigError("weight decay must be >= 0");
}

void OptimizerState::sgd_step(const std::vector<TensorPtr>& params) {
    if (velocity_.empty()) {
        velocity_.reserve(params.size());
        for (const auto& p : params) velocity_.emplace_back(p->shape());
    }
    if (velocity_.size() != params.size()) {
        throw ContractError("sgd_step: parameter count changed since first step");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (!p.has_grad()) {
            throw ContractError("sgd_step: missing gradient on parameter '" +
                                (p.name.empty() ? "<unnamed>" : p.name) + "'");
        }
        Tensor& v = velocity_[i];
        if (v.shape() != p.shape()) {
            throw ContractError("sgd_step: velocity shape " + v.shape_str() +
                                " does not match parameter '" + p.name + "' " + p.shape_str());
        }
        const std::vector<double>& g = p.grad();
        for (long j = 0; j < p.size(); ++j) {
            v.at(j) = mu_ * v.at(j) + g[static_cast<std::size_t>(j)] + lambda_ * p.at(j);
            p.at(j) -= lr_ * v.at(j);
        }
    }
}

Schedule Schedule::cosine_with_warmup(double base_lr, int total_epochs, int warmup_epochs) {
    if (!(base_lr >= 0.0)) throw ConfigError("schedule: base lr must be >= 0");
    if (total_epochs < 1) throw ConfigError("schedule: total epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > total_epochs) {
        throw ConfigError("schedule: warmup epochs must lie in [0, total]");
    }
    Schedule s;
    s.kind_ = Kind::CosineWarmup;
    s.base_lr_ = base_lr;
    s.total_epochs_ = total_epochs;
    s.warmup_epochs_ = warmup_epochs;
    return s;
}

Schedule Schedule::step_decay(double base_lr, std::vector<int> milestones, double factor) {
    if (!(base_lr >= 0.0)) throw ConfigError("schedule: base lr must be >= 0");
    if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("schedule: decay factor must be in (0,1]");
    std::sort(milestones.begin(), milestones.end());
    Schedule s;
    s.kind_ = Kind::StepDecay;
    s.base_lr_ = base_lr;
    s.milestones_ = std::move(milestones);
    s.factor_ = factor;
    return s;
}

Schedule Schedule::constant(double base_lr) {
    if (!(base_lr >= 0.0)) throw ConfigError("schedule: base lr must be >= 0");
    Schedule s;
    s.kind_ = Kind::Constant;
    s.base_lr_ = base_lr;
    return s;
}

double Schedule::lr_at(int epoch) const {
    if (epoch < 0) throw ContractError("schedule: epoch must be >= 0");
    switch (kind_) {
        case Kind::CosineWarmup: {
            if (epoch < warmup_epochs_) {
                return base_lr_ * static_cast<double>(epoch + 1) / warmup_epochs_;
            }
            const int span = std::max(1, total_epochs_ - warmup_epochs_);
            const double t = static_cast<double>(epoch - warmup_epochs_) / span;
            return base_lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
        }
        case Kind::StepDecay: {
            double lr = base_lr_;
            for (int m : milestones_) {
                if (epoch >= m) lr *= factor_;
            }
            return lr;
        }
        case Kind::Constant:
            return base_lr_;
    }
    throw ContractError("schedule: unknown kind");
}

}  // namespace lab
