#pragma once

#include <optional>
#include <vector>

#include "lab/data.hpp"
#include "lab/model.hpp"
#include "lab/optim.hpp"
#include "lab/tape.hpp"
#include "lab/tensor.hpp"

namespace lab {

// One training minibatch. view2 is only consulted by queue objectives; labels
// may be empty for pure SelfSupCon.
struct Batch {
    Tensor view1;  // [B x input_dim]
    Tensor view2;  // [B x input_dim]
    std::vector<int> labels;

    int size() const { return view1.rows(); }
};

struct LossBreakdown {
    double total = 0.0;
    std::optional<double> ce_term;
    std::optional<double> selfsup_term;
    std::optional<double> supcon_term;
    double alpha_used = 0.0;
    // Positives-per-query over the batch; all zero for non-SupCon objectives.
    int positives_min = 0;
    double positives_mean = 0.0;
    int positives_max = 0;
    // SupCon cold start: no query had a positive; the term contributed zero.
    bool cold_start = false;
};

// The scalar loss node plus its numeric breakdown. When `keys_pending` is
// set the caller owns enqueueing `keys` (train_epoch defers it until after
// the momentum update); the public loss functions enqueue before returning.
struct ObjectiveResult {
    TensorPtr loss;
    LossBreakdown breakdown;
    Tensor keys;                  // fresh key embeddings of this batch
    std::vector<int> key_labels;  // empty when the queue is unlabeled
    bool keys_pending = false;
};

// Eq.-style loss entry points. Each computes the configured forward pass on
// `tape`, returns the scalar loss, and (for queue objectives) enqueues the
// batch's fresh keys unless `enqueue` is false.
ObjectiveResult ce_loss(Tape* tape, const Batch& batch, ModelState& state);
ObjectiveResult selfsupcon_loss(Tape* tape, const Batch& batch, ModelState& state,
                                bool enqueue = true);
ObjectiveResult supcon_loss(Tape* tape, const Batch& batch, ModelState& state,
                            bool enqueue = true);
ObjectiveResult joint_loss(Tape* tape, const Batch& batch, ModelState& state, bool enqueue = true);

// Dispatch on state.config().objective.
ObjectiveResult compute_objective(Tape* tape, const Batch& batch, ModelState& state,
                                  bool enqueue = true);

namespace detail {

// (M+1)-way InfoNCE: logit columns are [q.k_pos, q.queue_0, ..., q.queue_M-1],
// scaled by 1/tau, with the positive at column 0. Inputs need not be unit
// norm here; the public wrappers guarantee it.
TensorPtr selfsup_nce(Tape* tape, const TensorPtr& q, const Tensor& pos_keys,
                      const Tensor& queue_keys, double tau);

struct SupConStats {
    int positives_min = 0;
    double positives_mean = 0.0;
    int positives_max = 0;
    bool cold_start = false;
};

// Mean over queries with at least one positive of the (mean- or sum-)
// normalized positive log-softmax terms against the candidate set.
TensorPtr supcon_nce(Tape* tape, const TensorPtr& q, const std::vector<int>& labels,
                     const Tensor& cand_keys, const std::vector<int>& cand_labels, double tau,
                     SupConSumMode mode, SupConStats* stats);

}  // namespace detail

struct TrainLoopConfig {
    int batch_size = 64;
    AugmentationPolicy policy = AugmentationPolicy::weak();
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    int steps = 0;         // optimizer steps taken (warmup fills excluded)
    int warmup_fills = 0;  // batches spent seeding an empty queue
    double mean_total = 0.0;
    double mean_ce = 0.0;
    double mean_selfsup = 0.0;
    double mean_supcon = 0.0;
    long cold_start_steps = 0;
};

// One pass over the shuffled train split. Per step: objective forward,
// backward, sgd_step, momentum update, enqueue. A queue objective spends its
// first batch filling the empty queue (keys only, no optimizer step). NaN
// loss aborts with step index, lr, and the term values.
EpochMetrics train_epoch(ModelState& state, const Dataset& train, OptimizerState& opt,
                         const Schedule& schedule, int epoch, const TrainLoopConfig& loop,
                         Rng& rng);

}  // namespace lab
