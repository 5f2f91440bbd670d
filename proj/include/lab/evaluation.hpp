#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lab/data.hpp"
#include "lab/model.hpp"
#include "lab/rng.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Frozen penultimate features of a sample set.
struct FeatureSet {
    Tensor x;            // [n x dim]
    std::vector<int> y;  // length n
    int num_classes = 0;

    int count() const { return static_cast<int>(y.size()); }
    int dim() const { return x.cols(); }
};

// Per-dimension affine map fitted on training features only. The variance
// floor keeps zero-variance dimensions finite; their centered values are ~0,
// so they pass through as (near-)zero columns instead of blowing up.
struct FeatureStandardizer {
    std::vector<double> mean;
    std::vector<double> inv_std;  // 1 / sqrt(var + kVarianceFloor)

    static constexpr double kVarianceFloor = 1e-12;

    static FeatureStandardizer fit(const Tensor& features);
    Tensor apply(const Tensor& features) const;
};

struct ProbeConfig {
    int epochs = 50;
    std::vector<int> milestones = {25, 37};
    double decay_factor = 0.1;
    double momentum = 0.9;
    std::vector<double> lr_grid = {0.001, 0.01, 0.1};
    std::vector<int> batch_grid = {32, 128};
    std::vector<double> wd_grid = {0.0, 1e-4, 1e-5};
    double val_fraction = 0.30;

    void validate() const;
};

// The default {32,128} batch grid drops to {16,64} when the downstream train
// split holds fewer than 512 samples; an explicitly configured grid is kept.
std::vector<int> effective_batch_grid(const ProbeConfig& cfg, int train_count);

struct GridCell {
    double lr = 0.0;
    int batch = 0;
    double wd = 0.0;
};

struct CellScore {
    GridCell cell;
    double val_accuracy = 0.0;
};

struct ProbeResult {
    double test_accuracy = 0.0;
    GridCell best;
    double best_val_accuracy = 0.0;
    std::vector<CellScore> sweep;  // lr-major, then batch, then weight decay
    int split_resamples = 0;       // reshuffles forced by a single-class train part
};

// Inference-mode forward of every sample; no augmentation anywhere downstream.
FeatureSet extract_features(const ModelState& model, const Dataset& data);
FeatureSet extract_features(const ModelState& model, const Dataset& data, Split split);

// 70/30 train/val split, full grid sweep, best cell retrained on train+val,
// then a single test pass. Ties keep the earliest cell in sweep order, and
// test labels reach only that final scoring call. The head trains on
// standardized features; the standardizer is refitted for the retrain.
ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test, const ProbeConfig& cfg,
                         Rng& rng);

// Same sweep with the whole query encoder trainable under a fresh linear head
// per cell, on a class-balanced subsample of the train split (raw features,
// no standardizer, no augmentation). sample_cap is the total budget; classes
// with index < cap % K receive one extra sample.
ProbeResult finetune(const ModelState& pretrained, const Dataset& data, const ProbeConfig& cfg,
                     Rng& rng, int sample_cap = 100);

struct FewShotResult {
    std::vector<double> episode_accuracies;  // numerically healthy episodes, in order
    double mean_accuracy = 0.0;
    double ci95 = 0.0;  // 1.96 * sample std / sqrt(#episodes)
    int episodes_excluded = 0;
};

// Episodic N-way K-shot evaluation on frozen features: per episode, features
// are standardized on the support set and a multinomial logistic regression
// is fit by full-batch gradient descent. Episodes that go non-finite are
// excluded and counted; hitting the iteration cap is a valid fit.
FewShotResult fewshot_eval(const ModelState& model, const Dataset& data, const EpisodeSpec& spec,
                           Rng& rng);

enum class EvalProtocol { Probe, Finetune, FewShot };

EvalProtocol parse_protocol(const std::string& name);
std::string protocol_name(EvalProtocol p);

struct SweepPoint {
    int epoch = 0;
    std::string domain;
    double value = 0.0;
    double ci95 = 0.0;  // few-shot only, 0 otherwise
    std::string checkpoint;
};

struct SweepResult {
    std::vector<SweepPoint> points;    // ascending epoch, domains in given order
    std::vector<std::string> skipped;  // unreadable checkpoint files
};

// Evaluates every checkpoint_epoch_*.json under `dir` on every domain with an
// RNG stream forked per (epoch, domain), so each point replays the matching
// standalone run. Unreadable files are skipped with a warning.
SweepResult checkpoint_sweep_eval(const std::string& dir, EvalProtocol protocol,
                                  const std::vector<Dataset>& domains, const ProbeConfig& cfg,
                                  const EpisodeSpec& episodes, Rng& rng);

namespace detail {

// RNG stream layout of the sweeps: cell i forks at kCellSaltBase + i off the
// post-split state, the winning retrain at kRetrainSalt.
inline constexpr std::uint64_t kCellSaltBase = 0x100;
inline constexpr std::uint64_t kRetrainSalt = 0x99;

// Global dataset indices of the class-balanced finetune pool, grouped by
// class in ascending order.
std::vector<int> balanced_subsample(const Dataset& data, int sample_cap, Rng& rng);

struct LinearHead {
    TensorPtr w;  // [K x dim]
    TensorPtr b;  // [K]
};

LinearHead init_linear_head(int dim, int num_classes, Rng& rng);
// Argmax accuracy of the head on feature rows; ties pick the lowest class.
double head_accuracy(const LinearHead& head, const Tensor& x, const std::vector<int>& y);
// Heavy-ball SGD with the config's step-decay schedule. lr = 0 returns the
// freshly initialized head untouched (same draws, no updates).
LinearHead train_linear_head(const Tensor& x, const std::vector<int>& y, int num_classes,
                             const ProbeConfig& cfg, const GridCell& cell, Rng& rng);

inline constexpr double kLogRegLambda = 1e-4;
inline constexpr double kLogRegGradTol = 1e-6;
inline constexpr int kLogRegMaxIters = 500;

struct LogRegFit {
    Tensor w;               // [K x dim]
    std::vector<double> b;  // length K
    int iterations = 0;
    bool hit_tolerance = false;  // gradient norm fell below kLogRegGradTol
    bool finite = true;          // false marks a numerically failed fit
};

// Full-batch gradient descent from zero init, fixed step 1/L with L bounded
// via power iteration on the bias-augmented Gram matrix. L2 penalty applies
// to weights only.
LogRegFit fit_logistic_regression(const Tensor& x, const std::vector<int>& y, int num_classes);
std::vector<int> logreg_predict(const LogRegFit& fit, const Tensor& x);

std::uint64_t sweep_salt(int epoch, int domain_index);

}  // namespace detail

}  // namespace lab
