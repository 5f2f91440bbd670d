#pragma once

#include <vector>

#include "lab/tensor.hpp"

namespace lab {

// Classical heavy-ball SGD: v <- mu*v + g + lambda*theta; theta <- theta - lr*v.
// Weight decay enters the gradient, not the schedule. Velocity buffers are
// created on first step and matched to parameters positionally, so the caller
// must pass the same parameter list (same order, same shapes) on every step.
class OptimizerState {
public:
    OptimizerState(double learning_rate, double momentum, double weight_decay);

    // Grads must be populated on every param; they are left untouched.
    void sgd_step(const std::vector<TensorPtr>& params);

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    double momentum() const { return mu_; }
    double weight_decay() const { return lambda_; }

    const std::vector<Tensor>& velocities() const { return velocity_; }
    // Resume support; buffers are validated against params on the next step.
    void set_velocities(std::vector<Tensor> v) { velocity_ = std::move(v); }

private:
    double lr_;
    double mu_;
    double lambda_;
    std::vector<Tensor> velocity_;
};

// Epoch-indexed learning-rate schedules.
//   cosine-with-warmup: lr(e) = base*(e+1)/warmup for e < warmup,
//                       base*0.5*(1+cos(pi*(e-warmup)/(total-warmup))) after.
//   step-decay:         base multiplied by the factor at each milestone.
//   constant:           base.
class Schedule {
public:
    enum class Kind { CosineWarmup, StepDecay, Constant };

    static Schedule cosine_with_warmup(double base_lr, int total_epochs, int warmup_epochs);
    static Schedule step_decay(double base_lr, std::vector<int> milestones, double factor);
    static Schedule constant(double base_lr);

    double lr_at(int epoch) const;

    Kind kind() const { return kind_; }
    double base_lr() const { return base_lr_; }
    int total_epochs() const { return total_epochs_; }
    int warmup_epochs() const { return warmup_epochs_; }
    const std::vector<int>& milestones() const { return milestones_; }
    double factor() const { return factor_; }

private:
    Schedule() = default;

    Kind kind_ = Kind::Constant;
    double base_lr_ = 0.0;
    int total_epochs_ = 0;
    int warmup_epochs_ = 0;
    std::vector<int> milestones_;
    double factor_ = 1.0;
};

}  // namespace lab
