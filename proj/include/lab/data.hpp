#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lab/rng.hpp"
#include "lab/tensor.hpp"

namespace lab {

// Split tags carried per sample.
enum class Split : int { Train = 0, Val = 1, Test = 2 };

enum class ClassRule { Shape, TextureFrequency, BrightnessBand };

// A synthetic domain: 16x16 grayscale images in [0,1], exact labels. The
// class rule decides which generation attribute carries the label; everything
// else is nuisance.
struct DomainSpec {
    std::string id = "source";
    int image_size = 16;
    int num_classes = 8;
    ClassRule rule = ClassRule::Shape;
    int shape_offset = 0;  // first shape-inventory index used by a shape rule

    // Nuisance ranges (the labeled attribute ignores its own range and uses
    // per-class bands instead).
    double tex_freq_lo = 1.0;
    double tex_freq_hi = 6.5;
    double tex_amp = 0.22;
    double brightness_lo = 0.15;
    double brightness_hi = 0.65;
    double center_jitter = 1.0;
    double shape_contrast = 0.38;

    int train_count = 512;
    int val_count = 0;
    int test_count = 256;
    uint64_t seed = 1;

    void validate() const;
};

// Named presets: "source" (8 shape classes), "near" (4 held-out shape
// classes), "far_texture" (6 frequency bands), "far_brightness" (6 brightness
// bands). The far rules label exactly the attributes that are nuisance in the
// source.
DomainSpec domain_preset(const std::string& name);

struct Dataset {
    std::string domain_id;
    int image_size = 0;
    int num_classes = 0;
    uint64_t seed = 0;
    Tensor images;              // [N x image_size^2]
    std::vector<int> labels;    // length N
    std::vector<int> splits;    // length N, values from Split

    int count() const { return static_cast<int>(labels.size()); }
    int pixels() const { return image_size * image_size; }
    std::vector<int> indices_of(Split s) const;
    Dataset subset(Split s) const;
    Dataset take(const std::vector<int>& indices) const;
};

int shape_inventory_size();

Dataset generate_domain(const DomainSpec& spec);

// Fixed op order: crop-and-resize, horizontal flip, brightness shift,
// contrast scale, pixel noise, blur gate; each op consumes its draws even at
// zero strength, and the result is clamped to [0,1] once at the end. The
// weak policy is the strong policy with the last four strengths at zero.
struct AugmentationPolicy {
    double crop_min_frac = 0.7;
    double flip_prob = 0.5;
    double brightness_jitter = 0.0;
    double contrast_jitter = 0.0;
    double noise_sigma = 0.0;
    double blur_prob = 0.0;

    static AugmentationPolicy weak();
    static AugmentationPolicy strong();
    static AugmentationPolicy identity();  // zero strength everywhere
};

// `image` is one flattened image_size x image_size row vector.
Tensor augment(const Tensor& image, int image_size, const AugmentationPolicy& policy, Rng& rng);

enum class CorruptionType { GaussianNoise, Blur, Contrast, Pixelate };

CorruptionType parse_corruption_type(const std::string& name);
std::string corruption_type_name(CorruptionType t);

inline constexpr int kCorruptionSeverities = 5;

// Severity tables live in docs/formats.md; severity is 1-based.
struct CorruptionSpec {
    CorruptionType type = CorruptionType::GaussianNoise;
    int severity = 1;

    void validate() const;
};

// Labels and split tags are preserved; the noise stream is derived from the
// dataset seed and the spec, so replays are identical.
Dataset corrupt(const Dataset& clean, const CorruptionSpec& spec);

struct EpisodeSpec {
    int ways = 5;
    int shots = 5;    // K in {1,5,20} for the paper protocol; any K >= 1 works
    int queries = 15;
    int episodes = 600;

    void validate() const;
};

struct Episode {
    Tensor support_images;  // [N*K x pixels]
    std::vector<int> support_labels;  // episode-local labels 0..N-1
    Tensor query_images;    // [N*Q x pixels]
    std::vector<int> query_labels;
};

Episode sample_episode(const Dataset& data, const EpisodeSpec& spec, Rng& rng);

// CSV manifest (index,label,split,domain) + flat binary image file.
// Binary layout: magic "LABIMG01", u32 count, u32 height, u32 width, then
// count*height*width little-endian f64.
void export_dataset(const Dataset& data, const std::string& basename);
Dataset import_dataset_images(const std::string& basename);

}  // namespace lab
