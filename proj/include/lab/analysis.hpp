#pragma once

#include <string>
#include <vector>

#include "lab/data.hpp"
#include "lab/model.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Stage activations with their provenance, the unit CKA operates on.
struct ActivationMatrix {
    Tensor x;  // [n x d]
    std::string model_id;
    int stage = 0;
    std::string domain;
    std::string split;

    int count() const { return x.rank() == 2 ? x.rows() : 0; }
    void validate() const;  // n >= 2, no NaN
};

// Linear CKA with simple column centering: ||Yc^T Xc||_F^2 over the product
// of the self-norms. Symmetric, in [0,1], invariant to orthogonal right
// rotation and nonzero isotropic scaling of either side.
double linear_cka(const Tensor& x, const Tensor& y);
double linear_cka(const ActivationMatrix& x, const ActivationMatrix& y);

struct NamedModel {
    std::string id;
    const ModelState* state = nullptr;
};

struct CkaGrids {
    std::vector<std::string> model_ids;
    int stages = 0;
    std::vector<Tensor> within;  // per model: [stages x stages]
    std::vector<Tensor> across;  // per stage: [models x models]
};

// Stage activations are computed once per model on the identical sample set.
CkaGrids cka_stage_grid(const std::vector<NamedModel>& models, const Dataset& data);

// 15 equal-width confidence bins over (0,1]; bin b covers ((b-1)/15, b/15].
struct ReliabilityBins {
    static constexpr int kBins = 15;
    std::vector<int> count;
    std::vector<double> mean_confidence;  // 0 for empty bins
    std::vector<double> accuracy;
};

struct CalibrationResult {
    double ece = 0.0;
    double nll = 0.0;
    ReliabilityBins bins;
};

// Confidence is the max softmax probability; ECE is the count-weighted mean
// gap |accuracy - confidence| over bins; NLL the mean negative log-likelihood.
CalibrationResult calibration(const Tensor& logits, const std::vector<int>& labels);

struct SeparationResult {
    double r_intra = 0.0;
    double r_inter = 0.0;
};

// Mean (1 - cosine) within classes (the double sum includes i = j, which
// contributes 0) and across ordered class pairs. The cross-pair denominator
// is N_k * N_m; `literal_denominator` reproduces the N_k^2 variant instead.
SeparationResult class_separation(const Tensor& features, const std::vector<int>& labels,
                                  bool literal_denominator = false);

// Argmax error of head logits w = [K x dim] on raw penultimate features; the
// probe standardizer is expected to be folded into the head already.
double top1_error(const ModelState& model, const Tensor& head_w, const std::vector<double>& head_b,
                  const Dataset& data);

struct CorruptionCell {
    CorruptionType type;
    int severity = 0;
    double error = 0.0;
};

struct CorruptionSweepResult {
    double clean_error = 0.0;
    double mce = 0.0;  // unweighted mean over cells
    std::vector<CorruptionCell> cells;  // type-major, severity ascending
};

CorruptionSweepResult corruption_sweep(const ModelState& model, const Tensor& head_w,
                                       const std::vector<double>& head_b, const Dataset& clean_test,
                                       const std::vector<CorruptionType>& types);

struct PgdResult {
    std::vector<double> epsilons;
    std::vector<double> accuracies;
};

// L-inf PGD without random start, eta = 2.5 * eps / steps, projecting onto
// the eps ball around the clean input and then into [0,1] every step.
PgdResult pgd_attack(const ModelState& model, const Tensor& head_w,
                     const std::vector<double>& head_b, const Tensor& images,
                     const std::vector<int>& labels, const std::vector<double>& epsilons,
                     int steps = 20);

// CSV manifest (index,label,split,domain) + "LABEMB01" binary, u32 count,
// u32 dim, then count*dim little-endian f64 feature rows.
void export_embeddings(const ModelState& model, const Dataset& data, const std::string& basename);

struct EmbeddingFile {
    Tensor x;  // [n x dim]
    std::vector<int> labels;
    std::vector<int> splits;
    std::string domain;
};

EmbeddingFile import_embeddings(const std::string& basename);

namespace detail {

// The full attacked batch for one epsilon; exposed so tests can check the
// per-step ball/range invariants and the one-step FGSM equivalence.
Tensor pgd_perturb(const ModelState& model, const Tensor& head_w,
                   const std::vector<double>& head_b, const Tensor& images,
                   const std::vector<int>& labels, double epsilon, int steps);

}  // namespace detail

}  // namespace lab
