#include "lab/model.hpp"

#include <cmath>

#include "lab/errors.hpp"

namespace lab {

Objective parse_objective(const std::string& name) {
    if (name == "CE") return Objective::CE;
    if (name == "SelfSupCon") return Objective::SelfSupCon;
    if (name == "SupCon") return Objective::SupCon;
    if (name == "CE+SelfSupCon") return Objective::CESelfSupCon;
    if (name == "SupCon+SelfSupCon") return Objective::SupConSelfSupCon;
    throw ConfigError("unknown objective '" + name +
                      "' (expected CE, SelfSupCon, SupCon, CE+SelfSupCon, SupCon+SelfSupCon)");
}

std::string objective_name(Objective o) {
    switch (o) {
        case Objective::CE: return "CE";
        case Objective::SelfSupCon: return "SelfSupCon";
        case Objective::SupCon: return "SupCon";
        case Objective::CESelfSupCon: return "CE+SelfSupCon";
        case Objective::SupConSelfSupCon: return "SupCon+SelfSupCon";
    }
    throw ContractError("unknown objective kind");
}

bool objective_stores_labels(Objective o) {
    return o == Objective::SupCon || o == Objective::SupConSelfSupCon;
}

bool objective_is_joint(Objective o) {
    return o == Objective::CESelfSupCon || o == Objective::SupConSelfSupCon;
}

bool objective_uses_queue(Objective o) { return o != Objective::CE; }

void EncoderConfig::validate() const {
    if (input_dim < 1) throw ConfigError("encoder input dim must be >= 1");
    if (num_stages() < 2) {
        throw ConfigError("encoder needs >= 2 stages so initial vs final stage analyses exist");
    }
    for (int w : stage_widths) {
        if (w < 1) throw ConfigError("encoder stage widths must be >= 1");
    }
}

void ModelConfig::validate() const {
    encoder.validate();
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (proj_hidden < 1) throw ConfigError("proj_hidden must be >= 1");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum m must be in [0,1]");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (queue_capacity < 1) throw ConfigError("queue_capacity must be >= 1");
}

std::vector<TensorPtr> forward_stages(Tape* tape, const TensorPtr& x,
                                      const EncoderParams& params) {
    if (params.w.empty() || params.w.size() != params.b.size()) {
        throw ContractError("forward_stages: malformed encoder parameter set");
    }
    if (!x->all_finite()) throw NumericalError("forward_stages: non-finite input");
    std::vector<TensorPtr> acts;
    acts.reserve(params.w.size());
    TensorPtr h = x;
    for (std::size_t s = 0; s < params.w.size(); ++s) {
        h = ops::relu(tape, ops::affine(tape, h, params.w[s], params.b[s]));
        acts.push_back(h);
    }
    return acts;
}

void momentum_update(const std::vector<TensorPtr>& theta_k, const std::vector<TensorPtr>& theta_q,
                     double m) {
    if (!(m >= 0.0 && m <= 1.0)) throw ContractError("momentum_update: m must be in [0,1]");
    if (theta_k.size() != theta_q.size()) {
        throw ContractError("momentum_update: parameter list length mismatch");
    }
    for (std::size_t i = 0; i < theta_k.size(); ++i) {
        Tensor& k = *theta_k[i];
        const Tensor& q = *theta_q[i];
        if (k.shape() != q.shape()) {
            throw DimensionError("momentum_update: shape mismatch " + k.shape_str() + " vs " +
                                 q.shape_str() + " at '" + k.name + "'");
        }
        for (long j = 0; j < k.size(); ++j) k.at(j) = m * k.at(j) + (1.0 - m) * q.at(j);
    }
}

KeyQueue::KeyQueue(int capacity, int embed_dim, bool store_labels, Rng& rng)
    : capacity_(capacity), embed_dim_(embed_dim), store_labels_(store_labels) {
    if (capacity < 1) throw ConfigError("queue capacity must be >= 1");
    if (embed_dim < 1) throw ConfigError("queue embed dim must be >= 1");
    emb_ = Tensor({capacity, embed_dim});
    labels_.assign(static_cast<std::size_t>(capacity), -1);
    for (int i = 0; i < capacity_; ++i) {
        double* row = emb_.data() + static_cast<long>(i) * embed_dim_;
        double sq = 0.0;
        for (int d = 0; d < embed_dim_; ++d) {
            row[d] = rng.normal();
            sq += row[d] * row[d];
        }
        double n = std::sqrt(sq);
        if (n < 1e-12) {
            row[0] = 1.0;
            n = 1.0;
        }
        for (int d = 0; d < embed_dim_; ++d) row[d] /= n;
    }
}

int KeyQueue::slot_age_rank(int age) const {
    if (filled_ < capacity_) return age;
    return (write_ptr_ + age) % capacity_;
}

void KeyQueue::enqueue(const Tensor& keys, const std::vector<int>* labels) {
    const int B = keys.rows();
    if (keys.cols() != embed_dim_) {
        throw DimensionError("enqueue: key dim " + std::to_string(keys.cols()) +
                             " does not match queue embed dim " + std::to_string(embed_dim_));
    }
    if (B > capacity_) {
        throw ContractError("enqueue: batch of " + std::to_string(B) +
                            " exceeds queue capacity " + std::to_string(capacity_));
    }
    if (store_labels_ && labels == nullptr) {
        throw ContractError("enqueue: this queue stores labels; none were provided");
    }
    if (labels && static_cast<int>(labels->size()) != B) {
        throw DimensionError("enqueue: " + std::to_string(labels->size()) + " labels for " +
                             std::to_string(B) + " keys");
    }
    for (int b = 0; b < B; ++b) {
        double sq = 0.0;
        for (int d = 0; d < embed_dim_; ++d) sq += keys.at(b, d) * keys.at(b, d);
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
            throw ContractError("enqueue: key row " + std::to_string(b) +
                                " is not unit-norm (norm=" + std::to_string(std::sqrt(sq)) + ")");
        }
    }
    for (int b = 0; b < B; ++b) {
        const int slot = (write_ptr_ + b) % capacity_;
        for (int d = 0; d < embed_dim_; ++d) emb_.at(slot, d) = keys.at(b, d);
        labels_[static_cast<std::size_t>(slot)] = store_labels_ ? (*labels)[static_cast<std::size_t>(b)] : -1;
    }
    write_ptr_ = (write_ptr_ + B) % capacity_;
    filled_ = std::min(filled_ + B, capacity_);
}

Tensor KeyQueue::valid_embeddings() const {
    if (filled_ == 0) {
        throw ContractError("queue has no enqueued keys yet; run a warmup step to fill it");
    }
    Tensor out({filled_, embed_dim_});
    for (int age = 0; age < filled_; ++age) {
        const int slot = slot_age_rank(age);
        for (int d = 0; d < embed_dim_; ++d) out.at(age, d) = emb_.at(slot, d);
    }
    return out;
}

std::vector<int> KeyQueue::valid_labels() const {
    if (filled_ == 0) {
        throw ContractError("queue has no enqueued keys yet; run a warmup step to fill it");
    }
    std::vector<int> out(static_cast<std::size_t>(filled_));
    for (int age = 0; age < filled_; ++age) {
        out[static_cast<std::size_t>(age)] = labels_[static_cast<std::size_t>(slot_age_rank(age))];
    }
    return out;
}

void KeyQueue::restore(Tensor emb, std::vector<int> labels, int write_ptr, int filled) {
    if (emb.rows() != capacity_ || emb.cols() != embed_dim_) {
        throw ContractError("queue restore: embedding buffer " + emb.shape_str() +
                            " does not match capacity " + std::to_string(capacity_) + " x " +
                            std::to_string(embed_dim_));
    }
    if (static_cast<int>(labels.size()) != capacity_) {
        throw ContractError("queue restore: label buffer length mismatch");
    }
    if (write_ptr < 0 || write_ptr >= capacity_ || filled < 0 || filled > capacity_) {
        throw ContractError("queue restore: pointer out of range");
    }
    emb_ = std::move(emb);
    labels_ = std::move(labels);
    write_ptr_ = write_ptr;
    filled_ = filled;
}

namespace {

TensorPtr init_weight(int out_dim, int in_dim, Rng& rng, const std::string& name) {
    Tensor w({out_dim, in_dim});
    const double s = std::sqrt(2.0 / in_dim);
    for (long i = 0; i < w.size(); ++i) w.at(i) = s * rng.normal();
    return param(std::move(w), name);
}

// Uniform in +-1/sqrt(fan_in). A nonzero projection output bias also keeps
// rows with fully dead ReLU activations away from the zero embedding, so the
// unit-norm projection invariant holds for arbitrary finite inputs.
TensorPtr init_bias(int dim, int fan_in, Rng& rng, const std::string& name) {
    Tensor b({dim});
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (long i = 0; i < b.size(); ++i) b.at(i) = rng.uniform(-s, s);
    return param(std::move(b), name);
}

TensorPtr frozen_copy(const TensorPtr& src, const std::string& name) {
    auto t = constant(*src);
    t->name = name;
    return t;
}

}  // namespace

ModelState::ModelState(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto& widths = cfg_.encoder.stage_widths;
    int prev = cfg_.encoder.input_dim;
    for (std::size_t s = 0; s < widths.size(); ++s) {
        const std::string tag = "enc." + std::to_string(s);
        enc_q_.w.push_back(init_weight(widths[s], prev, rng, tag + ".w"));
        enc_q_.b.push_back(init_bias(widths[s], prev, rng, tag + ".b"));
        prev = widths[s];
    }
    const int D = cfg_.encoder.feature_dim();
    cls_.w = init_weight(cfg_.num_classes, D, rng, "cls.w");
    cls_.b = init_bias(cfg_.num_classes, D, rng, "cls.b");
    proj_q_.w1 = init_weight(cfg_.proj_hidden, D, rng, "proj.0.w");
    proj_q_.b1 = init_bias(cfg_.proj_hidden, D, rng, "proj.0.b");
    proj_q_.w2 = init_weight(cfg_.embed_dim, cfg_.proj_hidden, rng, "proj.1.w");
    proj_q_.b2 = init_bias(cfg_.embed_dim, cfg_.proj_hidden, rng, "proj.1.b");

    // Key side starts as an exact copy of the query side.
    for (std::size_t s = 0; s < widths.size(); ++s) {
        const std::string tag = "key.enc." + std::to_string(s);
        enc_k_.w.push_back(frozen_copy(enc_q_.w[s], tag + ".w"));
        enc_k_.b.push_back(frozen_copy(enc_q_.b[s], tag + ".b"));
    }
    proj_k_.w1 = frozen_copy(proj_q_.w1, "key.proj.0.w");
    proj_k_.b1 = frozen_copy(proj_q_.b1, "key.proj.0.b");
    proj_k_.w2 = frozen_copy(proj_q_.w2, "key.proj.1.w");
    proj_k_.b2 = frozen_copy(proj_q_.b2, "key.proj.1.b");

    queue_.emplace(cfg_.queue_capacity, cfg_.embed_dim,
                   objective_stores_labels(cfg_.objective), rng);
}

std::vector<TensorPtr> ModelState::forward_stages(Tape* tape, const TensorPtr& x) const {
    return lab::forward_stages(tape, x, enc_q_);
}

TensorPtr ModelState::features(Tape* tape, const TensorPtr& x) const {
    return forward_stages(tape, x).back();
}

TensorPtr ModelState::classifier_logits(Tape* tape, const TensorPtr& v) const {
    return ops::affine(tape, v, cls_.w, cls_.b);
}

TensorPtr ModelState::project(Tape* tape, const TensorPtr& v) const {
    auto h = ops::relu(tape, ops::affine(tape, v, proj_q_.w1, proj_q_.b1));
    return ops::l2_normalize_rows(tape, ops::affine(tape, h, proj_q_.w2, proj_q_.b2));
}

Tensor ModelState::key_embed(const Tensor& x) const {
    auto xin = constant(x);
    auto acts = lab::forward_stages(nullptr, xin, enc_k_);
    auto h = ops::relu(nullptr, ops::affine(nullptr, acts.back(), proj_k_.w1, proj_k_.b1));
    auto z = ops::l2_normalize_rows(nullptr, ops::affine(nullptr, h, proj_k_.w2, proj_k_.b2));
    return *z;
}

std::vector<TensorPtr> ModelState::trainable_params() const {
    std::vector<TensorPtr> out;
    for (std::size_t s = 0; s < enc_q_.w.size(); ++s) {
        out.push_back(enc_q_.w[s]);
        out.push_back(enc_q_.b[s]);
    }
    const bool has_ce = cfg_.objective == Objective::CE || cfg_.objective == Objective::CESelfSupCon;
    if (has_ce) {
        out.push_back(cls_.w);
        out.push_back(cls_.b);
    }
    if (objective_uses_queue(cfg_.objective)) {
        out.push_back(proj_q_.w1);
        out.push_back(proj_q_.b1);
        out.push_back(proj_q_.w2);
        out.push_back(proj_q_.b2);
    }
    return out;
}

std::vector<TensorPtr> ModelState::all_query_params() const {
    std::vector<TensorPtr> out;
    for (std::size_t s = 0; s < enc_q_.w.size(); ++s) {
        out.push_back(enc_q_.w[s]);
        out.push_back(enc_q_.b[s]);
    }
    out.push_back(cls_.w);
    out.push_back(cls_.b);
    out.push_back(proj_q_.w1);
    out.push_back(proj_q_.b1);
    out.push_back(proj_q_.w2);
    out.push_back(proj_q_.b2);
    return out;
}

std::vector<TensorPtr> ModelState::key_params() const {
    std::vector<TensorPtr> out;
    for (std::size_t s = 0; s < enc_k_.w.size(); ++s) {
        out.push_back(enc_k_.w[s]);
        out.push_back(enc_k_.b[s]);
    }
    out.push_back(proj_k_.w1);
    out.push_back(proj_k_.b1);
    out.push_back(proj_k_.w2);
    out.push_back(proj_k_.b2);
    return out;
}

std::vector<TensorPtr> ModelState::ema_source_params() const {
    std::vector<TensorPtr> out;
    for (std::size_t s = 0; s < enc_q_.w.size(); ++s) {
        out.push_back(enc_q_.w[s]);
        out.push_back(enc_q_.b[s]);
    }
    out.push_back(proj_q_.w1);
    out.push_back(proj_q_.b1);
    out.push_back(proj_q_.w2);
    out.push_back(proj_q_.b2);
    return out;
}

void ModelState::momentum_update() {
    lab::momentum_update(key_params(), ema_source_params(), cfg_.momentum);
}

ModelState ModelState::clone() const {
    ModelState out = *this;
    auto deep = [](std::vector<TensorPtr>& v) {
        for (auto& p : v) p = std::make_shared<Tensor>(*p);
    };
    deep(out.enc_q_.w);
    deep(out.enc_q_.b);
    out.cls_.w = std::make_shared<Tensor>(*out.cls_.w);
    out.cls_.b = std::make_shared<Tensor>(*out.cls_.b);
    out.proj_q_.w1 = std::make_shared<Tensor>(*out.proj_q_.w1);
    out.proj_q_.b1 = std::make_shared<Tensor>(*out.proj_q_.b1);
    out.proj_q_.w2 = std::make_shared<Tensor>(*out.proj_q_.w2);
    out.proj_q_.b2 = std::make_shared<Tensor>(*out.proj_q_.b2);
    deep(out.enc_k_.w);
    deep(out.enc_k_.b);
    out.proj_k_.w1 = std::make_shared<Tensor>(*out.proj_k_.w1);
    out.proj_k_.b1 = std::make_shared<Tensor>(*out.proj_k_.b1);
    out.proj_k_.w2 = std::make_shared<Tensor>(*out.proj_k_.w2);
    out.proj_k_.b2 = std::make_shared<Tensor>(*out.proj_k_.b2);
    return out;
}

}  // namespace lab
