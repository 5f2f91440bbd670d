#include "lab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "lab/errors.hpp"

namespace lab {

namespace {

constexpr int kShapeInventory = 12;

struct Vec2 {
    double x, y;
};

double length(Vec2 v) { return std::sqrt(v.x * v.x + v.y * v.y); }

double sdf_disk(Vec2 p, double r) { return length(p) - r; }

double sdf_box(Vec2 p, double hx, double hy) {
    const double qx = std::abs(p.x) - hx;
    const double qy = std::abs(p.y) - hy;
    const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
}

Vec2 rot45(Vec2 p) {
    constexpr double c = std::numbers::sqrt2 / 2.0;
    return {c * (p.x + p.y), c * (p.y - p.x)};
}

// Signed distance of shape `index` at centered coordinates, radius scale r.
// Index order: disk, ring, hbar, vbar, cross, xcross, square, diamond,
// triangle, lcorner, twodots, halfdisk. Exact rules in docs/formats.md.
double shape_sdf(int index, Vec2 p, double r) {
    const double t = 0.35 * r;
    switch (index) {
        case 0: return sdf_disk(p, r);
        case 1: return std::abs(length(p) - 0.78 * r) - 0.5 * t;
        case 2: return sdf_box(p, r, t);
        case 3: return sdf_box(p, t, r);
        case 4: return std::min(sdf_box(p, r, t), sdf_box(p, t, r));
        case 5: {
            Vec2 q = rot45(p);
            return std::min(sdf_box(q, r, t), sdf_box(q, t, r));
        }
        case 6: return sdf_box(p, 0.82 * r, 0.82 * r);
        case 7: return (std::abs(p.x) + std::abs(p.y)) * (std::numbers::sqrt2 / 2.0) - 0.9 * r;
        case 8: {
            // Upward triangle as an intersection of three half planes through
            // vertices (0,-r), (-0.9r, 0.72r), (0.9r, 0.72r).
            const double d1 = p.y - 0.72 * r;
            const double el = length({0.9 * r, 1.72 * r});
            const double d2 = (1.72 * p.x - 0.9 * (p.y + r)) * r / el;
            const double d3 = (-1.72 * p.x - 0.9 * (p.y + r)) * r / el;
            return std::max({d1, d2, d3});
        }
        case 9: {
            const double bar = 0.3 * r;
            const double v = sdf_box({p.x + r - bar, p.y}, bar, r);
            const double h = sdf_box({p.x, p.y + r - bar}, r, bar);
            return std::min(v, h);
        }
        case 10: {
            const double rr = 0.38 * r, off = 0.55 * r;
            return std::min(sdf_disk({p.x - off, p.y}, rr), sdf_disk({p.x + off, p.y}, rr));
        }
        case 11: return std::max(sdf_disk(p, r), -p.y);
        default: throw ContractError("shape index out of inventory");
    }
}

struct Band {
    double lo, hi;
};

// Class c of K owns the c-th equal slice of [lo,hi], shrunk 15% on each side.
Band class_band(double lo, double hi, int K, int c) {
    const double w = (hi - lo) / K;
    return {lo + c * w + 0.15 * w, lo + (c + 1) * w - 0.15 * w};
}

void render_image(const DomainSpec& spec, int label, Rng& rng, double* out) {
    const int S = spec.image_size;
    int shape_index;
    double freq, beta;
    // Draw order is fixed per class rule; documented in docs/formats.md.
    switch (spec.rule) {
        case ClassRule::Shape:
            shape_index = spec.shape_offset + label;
            freq = rng.uniform(spec.tex_freq_lo, spec.tex_freq_hi);
            beta = rng.uniform(spec.brightness_lo, spec.brightness_hi);
            break;
        case ClassRule::TextureFrequency: {
            shape_index = rng.uniform_int(kShapeInventory);
            const Band b = class_band(spec.tex_freq_lo, spec.tex_freq_hi, spec.num_classes, label);
            freq = rng.uniform(b.lo, b.hi);
            beta = rng.uniform(spec.brightness_lo, spec.brightness_hi);
            break;
        }
        case ClassRule::BrightnessBand: {
            shape_index = rng.uniform_int(kShapeInventory);
            freq = rng.uniform(spec.tex_freq_lo, spec.tex_freq_hi);
            const Band b =
                class_band(spec.brightness_lo, spec.brightness_hi, spec.num_classes, label);
            beta = rng.uniform(b.lo, b.hi);
            break;
        }
        default: throw ContractError("unknown class rule");
    }
    const double phi = rng.uniform(0.0, std::numbers::pi);
    const double psi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double jx = rng.uniform(-spec.center_jitter, spec.center_jitter);
    const double jy = rng.uniform(-spec.center_jitter, spec.center_jitter);

    const double cx = S / 2.0 + jx, cy = S / 2.0 + jy;
    const double r = 0.28 * S;
    const double cphi = std::cos(phi), sphi = std::sin(phi);
    for (int row = 0; row < S; ++row) {
        for (int col = 0; col < S; ++col) {
            const double px = col + 0.5, py = row + 0.5;
            const double tex =
                spec.tex_amp *
                std::sin(2.0 * std::numbers::pi * freq * (px * cphi + py * sphi) / S + psi);
            const double d = shape_sdf(shape_index, {px - cx, py - cy}, r);
            const double cover = std::clamp(0.5 - d, 0.0, 1.0);
            const double v = beta + tex + cover * spec.shape_contrast;
            out[row * S + col] = std::clamp(v, 0.0, 1.0);
        }
    }
}

}  // namespace

int shape_inventory_size() { return kShapeInventory; }

void DomainSpec::validate() const {
    if (image_size < 8) throw ConfigError("image size must be >= 8");
    if (num_classes < 2) throw ConfigError("domain needs >= 2 classes");
    if (rule == ClassRule::Shape && shape_offset + num_classes > kShapeInventory) {
        throw ConfigError("class count " + std::to_string(num_classes) + " at shape offset " +
                          std::to_string(shape_offset) + " exceeds the " +
                          std::to_string(kShapeInventory) + "-shape inventory");
    }
    if (shape_offset < 0) throw ConfigError("shape offset must be >= 0");
    if (!(tex_freq_lo > 0.0 && tex_freq_hi > tex_freq_lo)) {
        throw ConfigError("texture frequency range must satisfy 0 < lo < hi");
    }
    if (tex_freq_hi > image_size / 2.0) {
        throw ConfigError("texture frequency above Nyquist (image_size/2)");
    }
    if (!(brightness_lo >= 0.0 && brightness_hi > brightness_lo && brightness_hi <= 1.0)) {
        throw ConfigError("brightness range must satisfy 0 <= lo < hi <= 1");
    }
    if (tex_amp < 0.0 || shape_contrast < 0.0 || center_jitter < 0.0) {
        throw ConfigError("texture amplitude, shape contrast, and jitter must be >= 0");
    }
    if (train_count < 0 || val_count < 0 || test_count < 0 || train_count + test_count == 0) {
        throw ConfigError("split counts must be >= 0 with train+test > 0");
    }
}

DomainSpec domain_preset(const std::string& name) {
    DomainSpec s;
    if (name == "source") {
        s.id = "source";
        s.num_classes = 8;
        s.rule = ClassRule::Shape;
        s.shape_offset = 0;
        s.train_count = 512;
        s.test_count = 256;
        s.seed = 11;
    } else if (name == "near") {
        s.id = "near";
        s.num_classes = 4;
        s.rule = ClassRule::Shape;
        s.shape_offset = 8;
        s.train_count = 256;
        s.test_count = 256;
        s.seed = 12;
    } else if (name == "far_texture") {
        s.id = "far_texture";
        s.num_classes = 6;
        s.rule = ClassRule::TextureFrequency;
        s.train_count = 384;
        s.test_count = 256;
        s.seed = 13;
    } else if (name == "far_brightness") {
        s.id = "far_brightness";
        s.num_classes = 6;
        s.rule = ClassRule::BrightnessBand;
        s.train_count = 384;
        s.test_count = 256;
        s.seed = 14;
    } else {
        throw ConfigError("unknown domain '" + name +
                          "' (expected source, near, far_texture, far_brightness)");
    }
    return s;
}

std::vector<int> Dataset::indices_of(Split s) const {
    std::vector<int> out;
    for (int i = 0; i < count(); ++i) {
        if (splits[static_cast<std::size_t>(i)] == static_cast<int>(s)) out.push_back(i);
    }
    return out;
}

Dataset Dataset::take(const std::vector<int>& indices) const {
    if (indices.empty()) throw ContractError("cannot take an empty dataset subset");
    Dataset out;
    out.domain_id = domain_id;
    out.image_size = image_size;
    out.num_classes = num_classes;
    out.seed = seed;
    out.images = Tensor({static_cast<int>(indices.size()), pixels()});
    out.labels.reserve(indices.size());
    out.splits.reserve(indices.size());
    int row = 0;
    for (int idx : indices) {
        if (idx < 0 || idx >= count()) throw IndexError("dataset index out of range");
        for (int p = 0; p < pixels(); ++p) out.images.at(row, p) = images.at(idx, p);
        out.labels.push_back(labels[static_cast<std::size_t>(idx)]);
        out.splits.push_back(splits[static_cast<std::size_t>(idx)]);
        ++row;
    }
    return out;
}

Dataset Dataset::subset(Split s) const { return take(indices_of(s)); }

Dataset generate_domain(const DomainSpec& spec) {
    spec.validate();
    Dataset out;
    out.domain_id = spec.id;
    out.image_size = spec.image_size;
    out.num_classes = spec.num_classes;
    out.seed = spec.seed;
    const int total = spec.train_count + spec.val_count + spec.test_count;
    out.images = Tensor({total, spec.image_size * spec.image_size});
    out.labels.reserve(static_cast<std::size_t>(total));
    out.splits.reserve(static_cast<std::size_t>(total));

    Rng root(spec.seed);
    const std::pair<Split, int> plan[] = {{Split::Train, spec.train_count},
                                          {Split::Val, spec.val_count},
                                          {Split::Test, spec.test_count}};
    int row = 0;
    for (const auto& [split, n] : plan) {
        Rng stream = root.fork(static_cast<uint64_t>(split) + 1);
        for (int i = 0; i < n; ++i) {
            const int label = i % spec.num_classes;
            render_image(spec, label, stream, out.images.data() + static_cast<long>(row) * out.pixels());
            out.labels.push_back(label);
            out.splits.push_back(static_cast<int>(split));
            ++row;
        }
    }
    return out;
}

AugmentationPolicy AugmentationPolicy::weak() { return AugmentationPolicy{}; }

AugmentationPolicy AugmentationPolicy::strong() {
    AugmentationPolicy p;
    p.brightness_jitter = 0.2;
    p.contrast_jitter = 0.2;
    p.noise_sigma = 0.05;
    p.blur_prob = 0.5;
    return p;
}

AugmentationPolicy AugmentationPolicy::identity() {
    AugmentationPolicy p;
    p.crop_min_frac = 1.0;
    p.flip_prob = 0.0;
    return p;
}

namespace {

double bilinear(const double* img, int S, double y, double x) {
    // Pixel (r,c) sits at coordinate (r,c); edges clamp.
    const double yc = std::clamp(y, 0.0, S - 1.0);
    const double xc = std::clamp(x, 0.0, S - 1.0);
    const int y0 = static_cast<int>(std::floor(yc));
    const int x0 = static_cast<int>(std::floor(xc));
    const int y1 = std::min(y0 + 1, S - 1);
    const int x1 = std::min(x0 + 1, S - 1);
    const double fy = yc - y0, fx = xc - x0;
    const double a = img[y0 * S + x0] * (1 - fx) + img[y0 * S + x1] * fx;
    const double b = img[y1 * S + x0] * (1 - fx) + img[y1 * S + x1] * fx;
    return a * (1 - fy) + b * fy;
}

void blur3x3(std::vector<double>& img, int S) {
    static const double k[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    std::vector<double> out(img.size());
    for (int r = 0; r < S; ++r) {
        for (int c = 0; c < S; ++c) {
            double acc = 0.0;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = std::clamp(r + dr, 0, S - 1);
                    const int cc = std::clamp(c + dc, 0, S - 1);
                    acc += k[dr + 1][dc + 1] * img[static_cast<std::size_t>(rr) * S + cc];
                }
            }
            out[static_cast<std::size_t>(r) * S + c] = acc / 16.0;
        }
    }
    img.swap(out);
}

}  // namespace

Tensor augment(const Tensor& image, int image_size, const AugmentationPolicy& policy, Rng& rng) {
    const int S = image_size;
    if (image.size() != static_cast<long>(S) * S) {
        throw DimensionError("augment: image length " + std::to_string(image.size()) +
                             " does not match size " + std::to_string(S) + "x" +
                             std::to_string(S));
    }
    // 1. crop-and-resize
    const double frac = rng.uniform(policy.crop_min_frac, 1.0);
    const double side = frac * S;
    const double oy = rng.uniform(0.0, S - side);
    const double ox = rng.uniform(0.0, S - side);
    std::vector<double> buf(static_cast<std::size_t>(S) * S);
    for (int r = 0; r < S; ++r) {
        for (int c = 0; c < S; ++c) {
            const double sy = oy + (r + 0.5) * side / S - 0.5;
            const double sx = ox + (c + 0.5) * side / S - 0.5;
            buf[static_cast<std::size_t>(r) * S + c] = bilinear(image.data(), S, sy, sx);
        }
    }
    // 2. horizontal flip
    if (rng.uniform() < policy.flip_prob) {
        for (int r = 0; r < S; ++r) {
            for (int c = 0; c < S / 2; ++c) {
                std::swap(buf[static_cast<std::size_t>(r) * S + c],
                          buf[static_cast<std::size_t>(r) * S + (S - 1 - c)]);
            }
        }
    }
    // 3. brightness shift
    const double shift = rng.uniform(-policy.brightness_jitter, policy.brightness_jitter);
    // 4. contrast scale about mid-gray; skipped arithmetic keeps zero-strength
    // policies bit-exact while the draws above are still consumed
    const double gain = std::exp(rng.uniform(-policy.contrast_jitter, policy.contrast_jitter));
    if (shift != 0.0 || gain != 1.0) {
        for (auto& v : buf) v = 0.5 + (v + shift - 0.5) * gain;
    }
    // 5. pixel noise (draws consumed even at zero sigma)
    for (auto& v : buf) v += policy.noise_sigma * rng.normal();
    // 6. blur gate
    if (rng.uniform() < policy.blur_prob) blur3x3(buf, S);

    Tensor out({S * S});
    for (long i = 0; i < out.size(); ++i) {
        out.at(i) = std::clamp(buf[static_cast<std::size_t>(i)], 0.0, 1.0);
    }
    return out;
}

CorruptionType parse_corruption_type(const std::string& name) {
    if (name == "gaussian-noise") return CorruptionType::GaussianNoise;
    if (name == "blur") return CorruptionType::Blur;
    if (name == "contrast") return CorruptionType::Contrast;
    if (name == "pixelate") return CorruptionType::Pixelate;
    throw ConfigError("unknown corruption type '" + name +
                      "' (expected gaussian-noise, blur, contrast, pixelate)");
}

std::string corruption_type_name(CorruptionType t) {
    switch (t) {
        case CorruptionType::GaussianNoise: return "gaussian-noise";
        case CorruptionType::Blur: return "blur";
        case CorruptionType::Contrast: return "contrast";
        case CorruptionType::Pixelate: return "pixelate";
    }
    throw ContractError("unknown corruption type");
}

namespace {
// Severity tables, 1-based; see docs/formats.md.
constexpr double kNoiseSigma[5] = {0.04, 0.08, 0.12, 0.18, 0.26};
constexpr int kBlurPasses[5] = {1, 2, 3, 4, 6};
constexpr double kContrastFactor[5] = {0.75, 0.60, 0.45, 0.30, 0.20};
constexpr int kPixelateBlock[5] = {2, 3, 4, 6, 8};
}  // namespace

void CorruptionSpec::validate() const {
    if (severity < 1 || severity > 5) {
        throw ConfigError("corruption severity must be in 1..5, got " + std::to_string(severity));
    }
}

Dataset corrupt(const Dataset& clean, const CorruptionSpec& spec) {
    spec.validate();
    Dataset out = clean;
    const int S = clean.image_size;
    const int n = clean.count();
    const int idx = static_cast<int>(spec.type);
    Rng rng = Rng(clean.seed).fork(0xC0 + static_cast<uint64_t>(idx) * 8 +
                                   static_cast<uint64_t>(spec.severity));
    const int s = spec.severity - 1;
    for (int i = 0; i < n; ++i) {
        double* img = out.images.data() + static_cast<long>(i) * out.pixels();
        switch (spec.type) {
            case CorruptionType::GaussianNoise:
                for (int p = 0; p < S * S; ++p) {
                    img[p] = std::clamp(img[p] + kNoiseSigma[s] * rng.normal(), 0.0, 1.0);
                }
                break;
            case CorruptionType::Blur: {
                std::vector<double> buf(img, img + S * S);
                for (int pass = 0; pass < kBlurPasses[s]; ++pass) blur3x3(buf, S);
                for (int p = 0; p < S * S; ++p) img[p] = std::clamp(buf[static_cast<std::size_t>(p)], 0.0, 1.0);
                break;
            }
            case CorruptionType::Contrast:
                for (int p = 0; p < S * S; ++p) {
                    img[p] = std::clamp(0.5 + (img[p] - 0.5) * kContrastFactor[s], 0.0, 1.0);
                }
                break;
            case CorruptionType::Pixelate: {
                const int b = kPixelateBlock[s];
                for (int br = 0; br < S; br += b) {
                    for (int bc = 0; bc < S; bc += b) {
                        const int rend = std::min(br + b, S), cend = std::min(bc + b, S);
                        double acc = 0.0;
                        int cnt = 0;
                        for (int r = br; r < rend; ++r)
                            for (int c = bc; c < cend; ++c) {
                                acc += img[r * S + c];
                                ++cnt;
                            }
                        const double mean = acc / cnt;
                        for (int r = br; r < rend; ++r)
                            for (int c = bc; c < cend; ++c) img[r * S + c] = mean;
                    }
                }
                break;
            }
        }
    }
    return out;
}

void EpisodeSpec::validate() const {
    if (ways < 1) throw ConfigError("episode ways must be >= 1");
    if (shots < 1) throw ConfigError("episode shots must be >= 1");
    if (queries < 1) throw ConfigError("episode queries must be >= 1");
    if (episodes < 1) throw ConfigError("episode count must be >= 1");
}

Episode sample_episode(const Dataset& data, const EpisodeSpec& spec, Rng& rng) {
    spec.validate();
    if (spec.ways > data.num_classes) {
        throw ConfigError("episode ways " + std::to_string(spec.ways) + " exceed the " +
                          std::to_string(data.num_classes) + " classes of domain '" +
                          data.domain_id + "'");
    }
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(data.num_classes));
    for (int i = 0; i < data.count(); ++i) {
        by_class[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)])].push_back(i);
    }
    const int need = spec.shots + spec.queries;
    for (int c = 0; c < data.num_classes; ++c) {
        if (static_cast<int>(by_class[static_cast<std::size_t>(c)].size()) < need) {
            throw ConfigError("class " + std::to_string(c) + " of domain '" + data.domain_id +
                              "' has " +
                              std::to_string(by_class[static_cast<std::size_t>(c)].size()) +
                              " samples, episode needs " + std::to_string(need));
        }
    }

    std::vector<int> classes(static_cast<std::size_t>(data.num_classes));
    for (int c = 0; c < data.num_classes; ++c) classes[static_cast<std::size_t>(c)] = c;
    rng.shuffle(classes);
    classes.resize(static_cast<std::size_t>(spec.ways));

    const int P = data.pixels();
    Episode ep;
    ep.support_images = Tensor({spec.ways * spec.shots, P});
    ep.query_images = Tensor({spec.ways * spec.queries, P});
    int srow = 0, qrow = 0;
    for (int w = 0; w < spec.ways; ++w) {
        auto pool = by_class[static_cast<std::size_t>(classes[static_cast<std::size_t>(w)])];
        rng.shuffle(pool);
        for (int k = 0; k < spec.shots; ++k) {
            const int idx = pool[static_cast<std::size_t>(k)];
            for (int p = 0; p < P; ++p) ep.support_images.at(srow, p) = data.images.at(idx, p);
            ep.support_labels.push_back(w);
            ++srow;
        }
        for (int q = 0; q < spec.queries; ++q) {
            const int idx = pool[static_cast<std::size_t>(spec.shots + q)];
            for (int p = 0; p < P; ++p) ep.query_images.at(qrow, p) = data.images.at(idx, p);
            ep.query_labels.push_back(w);
            ++qrow;
        }
    }
    return ep;
}

void export_dataset(const Dataset& data, const std::string& basename) {
    {
        std::ofstream csv(basename + ".csv");
        if (!csv) throw IoError("cannot open '" + basename + ".csv' for writing");
        csv << "index,label,split,domain\n";
        for (int i = 0; i < data.count(); ++i) {
            csv << i << "," << data.labels[static_cast<std::size_t>(i)] << ","
                << data.splits[static_cast<std::size_t>(i)] << "," << data.domain_id << "\n";
        }
    }
    std::ofstream bin(basename + ".bin", std::ios::binary);
    if (!bin) throw IoError("cannot open '" + basename + ".bin' for writing");
    bin.write("LABIMG01", 8);
    const uint32_t count = static_cast<uint32_t>(data.count());
    const uint32_t h = static_cast<uint32_t>(data.image_size);
    const uint32_t w = h;
    bin.write(reinterpret_cast<const char*>(&count), 4);
    bin.write(reinterpret_cast<const char*>(&h), 4);
    bin.write(reinterpret_cast<const char*>(&w), 4);
    bin.write(reinterpret_cast<const char*>(data.images.data()),
              static_cast<std::streamsize>(sizeof(double)) * data.images.size());
    if (!bin) throw IoError("write to '" + basename + ".bin' failed");
}

Dataset import_dataset_images(const std::string& basename) {
    std::ifstream bin(basename + ".bin", std::ios::binary);
    if (!bin) throw LoadError("cannot open '" + basename + ".bin'");
    char magic[8];
    bin.read(magic, 8);
    if (!bin || std::memcmp(magic, "LABIMG01", 8) != 0) {
        throw LoadError("'" + basename + ".bin' is not a LABIMG01 file");
    }
    uint32_t count = 0, h = 0, w = 0;
    bin.read(reinterpret_cast<char*>(&count), 4);
    bin.read(reinterpret_cast<char*>(&h), 4);
    bin.read(reinterpret_cast<char*>(&w), 4);
    if (!bin || h != w || count == 0) throw LoadError("'" + basename + ".bin' header is malformed");
    Dataset out;
    out.image_size = static_cast<int>(h);
    out.images = Tensor({static_cast<int>(count), static_cast<int>(h * w)});
    bin.read(reinterpret_cast<char*>(out.images.data()),
             static_cast<std::streamsize>(sizeof(double)) * out.images.size());
    if (!bin) throw LoadError("'" + basename + ".bin' is truncated");

    std::ifstream csv(basename + ".csv");
    if (!csv) throw LoadError("cannot open '" + basename + ".csv'");
    std::string line;
    std::getline(csv, line);  // header
    int max_label = 0;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        const auto c3 = line.find(',', c2 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos || c3 == std::string::npos) {
            throw LoadError("'" + basename + ".csv' has a malformed row: " + line);
        }
        out.labels.push_back(std::stoi(line.substr(c1 + 1, c2 - c1 - 1)));
        out.splits.push_back(std::stoi(line.substr(c2 + 1, c3 - c2 - 1)));
        out.domain_id = line.substr(c3 + 1);
        max_label = std::max(max_label, out.labels.back());
    }
    if (static_cast<uint32_t>(out.labels.size()) != count) {
        throw LoadError("'" + basename + "' manifest row count disagrees with binary header");
    }
    out.num_classes = max_label + 1;
    return out;
}

}  // namespace lab
