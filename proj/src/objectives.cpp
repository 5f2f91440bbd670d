#include "lab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lab/errors.hpp"

namespace lab {

namespace {

TensorPtr zero_scalar_through(Tape* tape, const TensorPtr& q) {
    return ops::scale(tape, ops::sum_all(tape, q), 0.0);
}

void require_labels(const Batch& batch, const char* who) {
    if (static_cast<int>(batch.labels.size()) != batch.size()) {
        throw ContractError(std::string(who) + " needs one label per sample, got " +
                            std::to_string(batch.labels.size()) + " for batch of " +
                            std::to_string(batch.size()));
    }
}

void require_views(const Batch& batch, const char* who) {
    if (batch.view2.rows() != batch.view1.rows() || batch.view2.cols() != batch.view1.cols()) {
        throw ContractError(std::string(who) + " needs two augmented views of equal shape");
    }
}

void require_warm_queue(const ModelState& state, const char* who) {
    if (state.queue().filled() == 0) {
        throw ContractError(std::string(who) +
                            ": queue has no enqueued keys yet; run a warmup fill "
                            "(enqueue one batch of key embeddings) before computing this loss");
    }
}

}  // namespace

namespace detail {

TensorPtr selfsup_nce(Tape* tape, const TensorPtr& q, const Tensor& pos_keys,
                      const Tensor& queue_keys, double tau) {
    auto pos = ops::rowwise_dot(tape, q, constant(pos_keys));
    auto neg = ops::matmul(tape, q, constant(transpose(queue_keys)));
    auto logits = ops::scale(tape, ops::concat_cols(tape, pos, neg), 1.0 / tau);
    const std::vector<int> targets(static_cast<std::size_t>(q->rows()), 0);
    return ops::softmax_cross_entropy(tape, logits, targets);
}

TensorPtr supcon_nce(Tape* tape, const TensorPtr& q, const std::vector<int>& labels,
                     const Tensor& cand_keys, const std::vector<int>& cand_labels, double tau,
                     SupConSumMode mode, SupConStats* stats) {
    const int B = q->rows();
    const int C = cand_keys.rows();
    std::vector<int> pos_count(static_cast<std::size_t>(B), 0);
    for (int i = 0; i < B; ++i) {
        for (int j = 0; j < C; ++j) {
            if (cand_labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
                ++pos_count[static_cast<std::size_t>(i)];
            }
        }
    }
    int contributing = 0;
    SupConStats st;
    st.positives_min = B > 0 ? pos_count[0] : 0;
    for (int i = 0; i < B; ++i) {
        const int p = pos_count[static_cast<std::size_t>(i)];
        st.positives_min = std::min(st.positives_min, p);
        st.positives_max = std::max(st.positives_max, p);
        st.positives_mean += p;
        if (p > 0) ++contributing;
    }
    if (B > 0) st.positives_mean /= B;
    st.cold_start = contributing == 0;
    if (stats) *stats = st;

    if (contributing == 0) return zero_scalar_through(tape, q);

    auto logits = ops::scale(tape, ops::matmul(tape, q, constant(transpose(cand_keys))), 1.0 / tau);
    auto log_probs = ops::log_softmax_rows(tape, logits);
    Tensor weights({B, C});
    for (int i = 0; i < B; ++i) {
        const int p = pos_count[static_cast<std::size_t>(i)];
        if (p == 0) continue;
        const double w = mode == SupConSumMode::Mean ? -1.0 / (p * static_cast<double>(contributing))
                                                     : -1.0 / contributing;
        for (int j = 0; j < C; ++j) {
            if (cand_labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
                weights.at(i, j) = w;
            }
        }
    }
    return ops::weighted_sum(tape, log_probs, std::move(weights));
}

}  // namespace detail

ObjectiveResult ce_loss(Tape* tape, const Batch& batch, ModelState& state) {
    require_labels(batch, "ce_loss");
    auto logits = state.classifier_logits(tape, state.features(tape, constant(batch.view1)));
    ObjectiveResult r;
    r.loss = ops::softmax_cross_entropy(tape, logits, batch.labels);
    r.breakdown.ce_term = r.loss->at(0L);
    r.breakdown.total = *r.breakdown.ce_term;
    return r;
}

ObjectiveResult selfsupcon_loss(Tape* tape, const Batch& batch, ModelState& state, bool enqueue) {
    require_views(batch, "selfsupcon_loss");
    require_warm_queue(state, "selfsupcon_loss");
    auto q = state.project(tape, state.features(tape, constant(batch.view1)));
    ObjectiveResult r;
    r.keys = state.key_embed(batch.view2);
    r.loss = detail::selfsup_nce(tape, q, r.keys, state.queue().valid_embeddings(),
                                 state.config().tau);
    r.breakdown.selfsup_term = r.loss->at(0L);
    r.breakdown.total = *r.breakdown.selfsup_term;
    if (state.queue().stores_labels()) r.key_labels = batch.labels;
    if (enqueue) {
        state.queue().enqueue(r.keys, r.key_labels.empty() ? nullptr : &r.key_labels);
    } else {
        r.keys_pending = true;
    }
    return r;
}

ObjectiveResult supcon_loss(Tape* tape, const Batch& batch, ModelState& state, bool enqueue) {
    require_views(batch, "supcon_loss");
    require_labels(batch, "supcon_loss");
    if (!state.queue().stores_labels()) {
        throw ContractError("supcon_loss needs a labeled queue; configure a SupCon objective");
    }
    auto q = state.project(tape, state.features(tape, constant(batch.view1)));
    ObjectiveResult r;
    r.keys = state.key_embed(batch.view2);
    r.key_labels = batch.labels;

    Tensor cand;
    std::vector<int> cand_labels;
    const int filled = state.queue().filled();
    if (filled > 0) {
        cand = state.queue().valid_embeddings();
        cand_labels = state.queue().valid_labels();
    }
    if (state.config().supcon_batch_keys) {
        Tensor joined({filled + batch.size(), state.config().embed_dim});
        for (int i = 0; i < filled; ++i) {
            for (int e = 0; e < cand.cols(); ++e) joined.at(i, e) = cand.at(i, e);
        }
        for (int i = 0; i < batch.size(); ++i) {
            for (int e = 0; e < r.keys.cols(); ++e) joined.at(filled + i, e) = r.keys.at(i, e);
        }
        cand = std::move(joined);
        cand_labels.insert(cand_labels.end(), batch.labels.begin(), batch.labels.end());
    }

    detail::SupConStats stats;
    if (cand.size() == 0) {
        stats.cold_start = true;
        r.loss = zero_scalar_through(tape, q);
    } else {
        r.loss = detail::supcon_nce(tape, q, batch.labels, cand, cand_labels, state.config().tau,
                                    state.config().supcon_sum_mode, &stats);
    }
    r.breakdown.supcon_term = r.loss->at(0L);
    r.breakdown.total = *r.breakdown.supcon_term;
    r.breakdown.positives_min = stats.positives_min;
    r.breakdown.positives_mean = stats.positives_mean;
    r.breakdown.positives_max = stats.positives_max;
    r.breakdown.cold_start = stats.cold_start;
    if (enqueue) {
        state.queue().enqueue(r.keys, &r.key_labels);
    } else {
        r.keys_pending = true;
    }
    return r;
}

ObjectiveResult joint_loss(Tape* tape, const Batch& batch, ModelState& state, bool enqueue) {
    const Objective kind = state.config().objective;
    if (!objective_is_joint(kind)) {
        throw ContractError("joint_loss called for single objective '" + objective_name(kind) +
                            "'");
    }
    const double alpha = state.config().alpha;
    if (alpha < 0.0) throw ContractError("joint objective weight alpha must be >= 0");
    require_views(batch, "joint_loss");
    require_warm_queue(state, "joint_loss");

    ObjectiveResult r;
    r.breakdown.alpha_used = alpha;
    auto feats = state.features(tape, constant(batch.view1));
    auto q = state.project(tape, feats);
    r.keys = state.key_embed(batch.view2);
    auto selfsup = detail::selfsup_nce(tape, q, r.keys, state.queue().valid_embeddings(),
                                       state.config().tau);
    r.breakdown.selfsup_term = selfsup->at(0L);

    if (kind == Objective::CESelfSupCon) {
        require_labels(batch, "joint_loss (CE term)");
        auto ce = ops::softmax_cross_entropy(tape, state.classifier_logits(tape, feats),
                                             batch.labels);
        r.breakdown.ce_term = ce->at(0L);
        r.loss = ops::add(tape, ce, ops::scale(tape, selfsup, alpha));
    } else {
        require_labels(batch, "joint_loss (SupCon term)");
        r.key_labels = batch.labels;
        Tensor cand;
        std::vector<int> cand_labels;
        const int filled = state.queue().filled();
        cand = state.queue().valid_embeddings();
        cand_labels = state.queue().valid_labels();
        if (state.config().supcon_batch_keys) {
            Tensor joined({filled + batch.size(), state.config().embed_dim});
            for (int i = 0; i < filled; ++i) {
                for (int e = 0; e < cand.cols(); ++e) joined.at(i, e) = cand.at(i, e);
            }
            for (int i = 0; i < batch.size(); ++i) {
                for (int e = 0; e < r.keys.cols(); ++e) joined.at(filled + i, e) = r.keys.at(i, e);
            }
            cand = std::move(joined);
            cand_labels.insert(cand_labels.end(), batch.labels.begin(), batch.labels.end());
        }
        detail::SupConStats stats;
        auto supcon = detail::supcon_nce(tape, q, batch.labels, cand, cand_labels,
                                         state.config().tau, state.config().supcon_sum_mode,
                                         &stats);
        r.breakdown.supcon_term = supcon->at(0L);
        r.breakdown.positives_min = stats.positives_min;
        r.breakdown.positives_mean = stats.positives_mean;
        r.breakdown.positives_max = stats.positives_max;
        r.breakdown.cold_start = stats.cold_start;
        r.loss = ops::add(tape, supcon, ops::scale(tape, selfsup, alpha));
    }
    r.breakdown.total = r.loss->at(0L);
    if (state.queue().stores_labels() && r.key_labels.empty()) r.key_labels = batch.labels;
    if (enqueue) {
        state.queue().enqueue(r.keys, r.key_labels.empty() ? nullptr : &r.key_labels);
    } else {
        r.keys_pending = true;
    }
    return r;
}

ObjectiveResult compute_objective(Tape* tape, const Batch& batch, ModelState& state,
                                  bool enqueue) {
    switch (state.config().objective) {
        case Objective::CE: return ce_loss(tape, batch, state);
        case Objective::SelfSupCon: return selfsupcon_loss(tape, batch, state, enqueue);
        case Objective::SupCon: return supcon_loss(tape, batch, state, enqueue);
        case Objective::CESelfSupCon:
        case Objective::SupConSelfSupCon: return joint_loss(tape, batch, state, enqueue);
    }
    throw ContractError("unknown objective");
}

EpochMetrics train_epoch(ModelState& state, const Dataset& train, OptimizerState& opt,
                         const Schedule& schedule, int epoch, const TrainLoopConfig& loop,
                         Rng& rng) {
    if (train.count() == 0) throw ContractError("train_epoch: dataset is empty");
    if (loop.batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (train.pixels() != state.config().encoder.input_dim) {
        throw DimensionError("train images have " + std::to_string(train.pixels()) +
                             " pixels, encoder expects " +
                             std::to_string(state.config().encoder.input_dim));
    }
    const bool uses_queue = objective_uses_queue(state.config().objective);
    const double lr = schedule.lr_at(epoch);
    opt.set_learning_rate(lr);

    std::vector<int> order(static_cast<std::size_t>(train.count()));
    for (int i = 0; i < train.count(); ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    const int S = train.image_size;
    const int P = train.pixels();
    const auto trainable = state.trainable_params();
    const auto all_params = state.all_query_params();

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(loop.batch_size)) {
        const int B = static_cast<int>(
            std::min<std::size_t>(loop.batch_size, order.size() - start));
        Batch batch;
        batch.view1 = Tensor({B, P});
        if (uses_queue) batch.view2 = Tensor({B, P});
        batch.labels.resize(static_cast<std::size_t>(B));
        for (int i = 0; i < B; ++i) {
            const int idx = order[start + static_cast<std::size_t>(i)];
            Tensor img({P});
            for (int p = 0; p < P; ++p) img.at(p) = train.images.at(idx, p);
            const Tensor v1 = augment(img, S, loop.policy, rng);
            for (int p = 0; p < P; ++p) batch.view1.at(i, p) = v1.at(p);
            if (uses_queue) {
                const Tensor v2 = augment(img, S, loop.policy, rng);
                for (int p = 0; p < P; ++p) batch.view2.at(i, p) = v2.at(p);
            }
            batch.labels[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(idx)];
        }

        if (uses_queue && state.queue().filled() == 0) {
            const Tensor keys = state.key_embed(batch.view2);
            state.queue().enqueue(keys, state.queue().stores_labels() ? &batch.labels : nullptr);
            ++m.warmup_fills;
            continue;
        }

        Tape tape;
        ObjectiveResult result = compute_objective(&tape, batch, state, /*enqueue=*/false);
        const LossBreakdown& bd = result.breakdown;
        if (!std::isfinite(bd.total)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << m.steps << " of epoch " << epoch
                << " (lr=" << lr << ", total=" << bd.total;
            if (bd.ce_term) msg << ", ce=" << *bd.ce_term;
            if (bd.selfsup_term) msg << ", selfsup=" << *bd.selfsup_term;
            if (bd.supcon_term) msg << ", supcon=" << *bd.supcon_term;
            msg << ")";
            throw NumericalError(msg.str());
        }

        for (const auto& p : all_params) p->zero_grad();
        tape.backward(result.loss);
        opt.sgd_step(trainable);
        if (uses_queue) {
            state.momentum_update();
            state.queue().enqueue(result.keys,
                                  result.key_labels.empty() ? nullptr : &result.key_labels);
        }

        ++m.steps;
        m.mean_total += bd.total;
        if (bd.ce_term) m.mean_ce += *bd.ce_term;
        if (bd.selfsup_term) m.mean_selfsup += *bd.selfsup_term;
        if (bd.supcon_term) m.mean_supcon += *bd.supcon_term;
        if (bd.cold_start) ++m.cold_start_steps;
    }
    if (m.steps > 0) {
        m.mean_total /= m.steps;
        m.mean_ce /= m.steps;
        m.mean_selfsup /= m.steps;
        m.mean_supcon /= m.steps;
    }
    return m;
}

}  // namespace lab
