#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lab/rng.hpp"
#include "lab/tape.hpp"
#include "lab/tensor.hpp"

namespace lab {

enum class Objective { CE, SelfSupCon, SupCon, CESelfSupCon, SupConSelfSupCon };

Objective parse_objective(const std::string& name);
std::string objective_name(Objective o);
// SupCon variants are the only ones that read labels out of the queue.
bool objective_stores_labels(Objective o);
bool objective_is_joint(Objective o);
bool objective_uses_queue(Objective o);

enum class SupConSumMode { Mean, Sum };

struct EncoderConfig {
    int input_dim = 256;
    std::vector<int> stage_widths = {256, 128, 128, 64};

    int num_stages() const { return static_cast<int>(stage_widths.size()); }
    int feature_dim() const { return stage_widths.back(); }
    // At least two stages, so initial-vs-final stage comparisons exist.
    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    int num_classes = 8;
    int proj_hidden = 64;
    int embed_dim = 32;
    double tau = 0.07;
    double momentum = 0.99;
    double alpha = 1.0;
    int queue_capacity = 512;
    Objective objective = Objective::CE;
    SupConSumMode supcon_sum_mode = SupConSumMode::Mean;
    // When set, fresh same-class keys of the current batch join the SupCon
    // candidate set before being enqueued.
    bool supcon_batch_keys = false;

    void validate() const;
};

struct EncoderParams {
    std::vector<TensorPtr> w;  // stage i: [width_i x prev_width]
    std::vector<TensorPtr> b;  // stage i: [width_i]
};

struct ClassifierParams {
    TensorPtr w;  // [K x feature_dim]
    TensorPtr b;  // [K]
};

struct ProjectionParams {
    TensorPtr w1, b1;  // feature_dim -> hidden
    TensorPtr w2, b2;  // hidden -> embed
};

// All S stage activations (affine + ReLU each); the last one is the feature v.
std::vector<TensorPtr> forward_stages(Tape* tape, const TensorPtr& x, const EncoderParams& params);

// p_k <- m*p_k + (1-m)*p_q for every parameter pair, in place.
void momentum_update(const std::vector<TensorPtr>& theta_k, const std::vector<TensorPtr>& theta_q,
                     double m);

// Labeled FIFO ring buffer of unit-norm key embeddings. Slots are seeded with
// random unit vectors (label -1) at construction; only the `filled` region,
// the keys actually enqueued, is handed to losses until first wraparound.
class KeyQueue {
public:
    KeyQueue(int capacity, int embed_dim, bool store_labels, Rng& rng);

    // Keys must be unit-norm rows, B <= capacity. Labels are required when
    // the queue stores them and ignored when it does not.
    void enqueue(const Tensor& keys, const std::vector<int>* labels);

    int capacity() const { return capacity_; }
    int embed_dim() const { return embed_dim_; }
    bool stores_labels() const { return store_labels_; }
    int filled() const { return filled_; }
    bool warmed_up() const { return filled_ == capacity_; }

    // Valid region in age order, oldest first. Throws while filled == 0.
    Tensor valid_embeddings() const;
    std::vector<int> valid_labels() const;

    // Raw state, for checkpoints.
    const Tensor& raw_embeddings() const { return emb_; }
    const std::vector<int>& raw_labels() const { return labels_; }
    int write_ptr() const { return write_ptr_; }
    void restore(Tensor emb, std::vector<int> labels, int write_ptr, int filled);

private:
    int slot_age_rank(int age) const;  // age 0 = oldest valid entry

    int capacity_;
    int embed_dim_;
    bool store_labels_;
    Tensor emb_;               // [capacity x embed_dim]
    std::vector<int> labels_;  // length capacity, -1 = unlabeled
    int write_ptr_ = 0;
    int filled_ = 0;
};

// Query encoder + heads, momentum key encoder + its projection, and the queue.
// The key side never sees a tape and is owned exclusively by momentum_update.
class ModelState {
public:
    ModelState(const ModelConfig& cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }

    std::vector<TensorPtr> forward_stages(Tape* tape, const TensorPtr& x) const;
    TensorPtr features(Tape* tape, const TensorPtr& x) const;
    TensorPtr classifier_logits(Tape* tape, const TensorPtr& v) const;
    TensorPtr project(Tape* tape, const TensorPtr& v) const;

    // Key path: encoder + projection of the momentum copy, never taped.
    Tensor key_embed(const Tensor& x) const;

    // Parameters the optimizer may touch for the configured objective.
    std::vector<TensorPtr> trainable_params() const;
    std::vector<TensorPtr> all_query_params() const;
    // EMA pairs: key_params()[i] tracks ema_source_params()[i].
    std::vector<TensorPtr> key_params() const;
    std::vector<TensorPtr> ema_source_params() const;

    void momentum_update();

    KeyQueue& queue() { return *queue_; }
    const KeyQueue& queue() const { return *queue_; }

    ModelState clone() const;

    const EncoderParams& encoder_q() const { return enc_q_; }
    EncoderParams& encoder_q() { return enc_q_; }
    const ClassifierParams& classifier() const { return cls_; }
    const ProjectionParams& projection_q() const { return proj_q_; }
    const EncoderParams& encoder_k() const { return enc_k_; }
    const ProjectionParams& projection_k() const { return proj_k_; }

private:
    ModelConfig cfg_;
    EncoderParams enc_q_;
    ClassifierParams cls_;
    ProjectionParams proj_q_;
    EncoderParams enc_k_;
    ProjectionParams proj_k_;
    std::optional<KeyQueue> queue_;
};

}  // namespace lab
