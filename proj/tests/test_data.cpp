#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <set>
#include <vector>

#include <doctest.h>

#include "lab/data.hpp"
#include "lab/errors.hpp"
#include "lab/optim.hpp"
#include "lab/tape.hpp"

using namespace lab;

namespace {

Tensor row_of(const Dataset& ds, int i) {
    Tensor out({ds.pixels()});
    for (int p = 0; p < ds.pixels(); ++p) out.at(p) = ds.images.at(i, p);
    return out;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

double mse(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (long i = 0; i < a.size(); ++i) {
        const double d = a.at(i) - b.at(i);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("domain generation is deterministic and balanced") {
    const DomainSpec spec = domain_preset("source");
    const Dataset a = generate_domain(spec);
    const Dataset b = generate_domain(spec);
    CHECK(same_bits(a.images, b.images));
    CHECK(a.labels == b.labels);
    CHECK(a.splits == b.splits);

    CHECK(a.count() == spec.train_count + spec.test_count);
    CHECK(a.image_size == 16);
    CHECK(a.num_classes == 8);

    for (long i = 0; i < a.images.size(); ++i) {
        CHECK(a.images.at(i) >= 0.0);
        CHECK(a.images.at(i) <= 1.0);
    }

    for (Split s : {Split::Train, Split::Test}) {
        std::map<int, int> counts;
        for (int idx : a.indices_of(s)) counts[a.labels[static_cast<std::size_t>(idx)]]++;
        CHECK(static_cast<int>(counts.size()) == a.num_classes);
        int lo = 1 << 30, hi = 0;
        for (const auto& [cls, n] : counts) {
            lo = std::min(lo, n);
            hi = std::max(hi, n);
        }
        CHECK(hi - lo <= 1);
    }
}

TEST_CASE("different seeds give different pixels") {
    DomainSpec spec = domain_preset("near");
    const Dataset a = generate_domain(spec);
    spec.seed += 1;
    const Dataset b = generate_domain(spec);
    CHECK_FALSE(same_bits(a.images, b.images));
}

TEST_CASE("brightness-band classes are ordered by mean intensity") {
    const Dataset ds = generate_domain(domain_preset("far_brightness"));
    std::vector<double> mean(static_cast<std::size_t>(ds.num_classes), 0.0);
    std::vector<int> n(static_cast<std::size_t>(ds.num_classes), 0);
    for (int i = 0; i < ds.count(); ++i) {
        double acc = 0.0;
        for (int p = 0; p < ds.pixels(); ++p) acc += ds.images.at(i, p);
        mean[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])] += acc / ds.pixels();
        n[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])]++;
    }
    for (int c = 0; c < ds.num_classes; ++c) mean[static_cast<std::size_t>(c)] /= n[static_cast<std::size_t>(c)];
    for (int c = 0; c + 1 < ds.num_classes; ++c) {
        CHECK(mean[static_cast<std::size_t>(c)] < mean[static_cast<std::size_t>(c + 1)]);
    }
}

TEST_CASE("spec validation rejects bad domains") {
    DomainSpec spec = domain_preset("source");
    spec.num_classes = 9;
    spec.shape_offset = 4;
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    spec = domain_preset("source");
    spec.brightness_lo = 0.8;
    spec.brightness_hi = 0.4;
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    spec = domain_preset("source");
    spec.tex_freq_hi = 20.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    spec = domain_preset("source");
    spec.train_count = 0;
    spec.test_count = 0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    CHECK_THROWS_AS(domain_preset("mars"), ConfigError);
}

TEST_CASE("presets use disjoint shape slices for source and near") {
    const DomainSpec src = domain_preset("source");
    const DomainSpec near = domain_preset("near");
    CHECK(src.shape_offset + src.num_classes <= near.shape_offset);
    CHECK(near.shape_offset + near.num_classes <= shape_inventory_size());
}

TEST_CASE("two-class shape domain is linearly separable from raw pixels") {
    DomainSpec spec = domain_preset("source");
    spec.num_classes = 2;
    spec.train_count = 512;
    spec.test_count = 128;
    const Dataset ds = generate_domain(spec);
    const Dataset train = ds.subset(Split::Train);
    const Dataset test = ds.subset(Split::Test);

    Rng rng(7);
    Tensor w0({2, ds.pixels()});
    for (long i = 0; i < w0.size(); ++i) w0.at(i) = 0.01 * rng.normal();
    auto w = param(std::move(w0), "w");
    auto b = param(Tensor({2}), "b");

    OptimizerState opt(0.1, 0.0, 1e-3);
    auto x = constant(train.images);
    for (int step = 0; step < 500; ++step) {
        Tape tape;
        auto logits = ops::affine(&tape, x, w, b);
        auto loss = ops::softmax_cross_entropy(&tape, logits, train.labels);
        w->zero_grad();
        b->zero_grad();
        tape.backward(loss);
        opt.sgd_step({w, b});
    }

    auto logits = ops::affine(nullptr, constant(test.images), w, b);
    int correct = 0;
    for (int i = 0; i < test.count(); ++i) {
        const int pred = logits->at(i, 0) > logits->at(i, 1) ? 0 : 1;
        if (pred == test.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    CHECK(static_cast<double>(correct) / test.count() >= 0.90);
}

TEST_CASE("identity augmentation is bit-exact and flips are involutions") {
    const Dataset ds = generate_domain(domain_preset("source"));
    const Tensor img = row_of(ds, 3);

    Rng rng(42);
    const Tensor same = augment(img, ds.image_size, AugmentationPolicy::identity(), rng);
    CHECK(same_bits(img, same));

    AugmentationPolicy flip = AugmentationPolicy::identity();
    flip.flip_prob = 1.0;
    Rng r1(9), r2(9);
    const Tensor once = augment(img, ds.image_size, flip, r1);
    CHECK_FALSE(same_bits(img, once));
    Rng r3(9);
    const Tensor twice = augment(once, ds.image_size, flip, r3);
    CHECK(same_bits(img, twice));
}

TEST_CASE("weak equals strong with strengths zeroed") {
    const Dataset ds = generate_domain(domain_preset("source"));
    AugmentationPolicy zeroed = AugmentationPolicy::strong();
    zeroed.brightness_jitter = 0.0;
    zeroed.contrast_jitter = 0.0;
    zeroed.noise_sigma = 0.0;
    zeroed.blur_prob = 0.0;
    for (int i = 0; i < 8; ++i) {
        const Tensor img = row_of(ds, i);
        Rng ra(100 + static_cast<uint64_t>(i));
        Rng rb(100 + static_cast<uint64_t>(i));
        const Tensor a = augment(img, ds.image_size, AugmentationPolicy::weak(), ra);
        const Tensor b = augment(img, ds.image_size, zeroed, rb);
        CHECK(same_bits(a, b));
    }
}

TEST_CASE("augmentation stays in range and is seed-deterministic") {
    const Dataset ds = generate_domain(domain_preset("source"));
    for (int i = 0; i < 6; ++i) {
        const Tensor img = row_of(ds, i);
        Rng ra(55 + static_cast<uint64_t>(i));
        Rng rb(55 + static_cast<uint64_t>(i));
        const Tensor a = augment(img, ds.image_size, AugmentationPolicy::strong(), ra);
        const Tensor b = augment(img, ds.image_size, AugmentationPolicy::strong(), rb);
        CHECK(same_bits(a, b));
        for (long p = 0; p < a.size(); ++p) {
            CHECK(a.at(p) >= 0.0);
            CHECK(a.at(p) <= 1.0);
        }
    }
}

TEST_CASE("blur gate matches a direct 3x3 convolution") {
    const Dataset ds = generate_domain(domain_preset("source"));
    const int S = ds.image_size;
    const Tensor img = row_of(ds, 11);

    AugmentationPolicy pol = AugmentationPolicy::identity();
    pol.blur_prob = 1.0;
    Rng rng(5);
    const Tensor got = augment(img, S, pol, rng);

    const double k[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    Tensor want({S * S});
    for (int r = 0; r < S; ++r) {
        for (int c = 0; c < S; ++c) {
            double acc = 0.0;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = std::clamp(r + dr, 0, S - 1);
                    const int cc = std::clamp(c + dc, 0, S - 1);
                    acc += k[dr + 1][dc + 1] * img.at(rr * S + cc);
                }
            }
            want.at(r * S + c) = acc / 16.0;
        }
    }
    for (long p = 0; p < want.size(); ++p) {
        CHECK(std::abs(got.at(p) - std::clamp(want.at(p), 0.0, 1.0)) < 1e-12);
    }
}

TEST_CASE("corruptions replay identically and preserve labels") {
    const Dataset clean = generate_domain(domain_preset("source"));
    for (CorruptionType t : {CorruptionType::GaussianNoise, CorruptionType::Blur,
                             CorruptionType::Contrast, CorruptionType::Pixelate}) {
        const CorruptionSpec spec{t, 3};
        const Dataset a = corrupt(clean, spec);
        const Dataset b = corrupt(clean, spec);
        CHECK(same_bits(a.images, b.images));
        CHECK(a.labels == clean.labels);
        CHECK(a.splits == clean.splits);
        CHECK_FALSE(same_bits(a.images, clean.images));
        for (long i = 0; i < a.images.size(); ++i) {
            CHECK(a.images.at(i) >= 0.0);
            CHECK(a.images.at(i) <= 1.0);
        }
    }
}

TEST_CASE("corruption severity increases distortion monotonically") {
    const Dataset clean = generate_domain(domain_preset("source"));
    for (CorruptionType t : {CorruptionType::GaussianNoise, CorruptionType::Blur,
                             CorruptionType::Contrast, CorruptionType::Pixelate}) {
        double prev = 0.0;
        for (int s = 1; s <= 5; ++s) {
            const Dataset bad = corrupt(clean, CorruptionSpec{t, s});
            const double err = mse(clean.images, bad.images);
            CHECK(err > prev);
            prev = err;
        }
    }
}

TEST_CASE("pixelate at top severity gives constant blocks") {
    const Dataset clean = generate_domain(domain_preset("source"));
    const Dataset bad = corrupt(clean, CorruptionSpec{CorruptionType::Pixelate, 5});
    const int S = clean.image_size;
    for (int i = 0; i < 4; ++i) {
        for (int br = 0; br < S; br += 8) {
            for (int bc = 0; bc < S; bc += 8) {
                const double v = bad.images.at(i, br * S + bc);
                for (int r = br; r < br + 8; ++r) {
                    for (int c = bc; c < bc + 8; ++c) {
                        CHECK(bad.images.at(i, r * S + c) == v);
                    }
                }
            }
        }
    }
}

TEST_CASE("corruption spec validation") {
    CHECK_THROWS_AS((CorruptionSpec{CorruptionType::Blur, 0}.validate()), ConfigError);
    CHECK_THROWS_AS((CorruptionSpec{CorruptionType::Blur, 6}.validate()), ConfigError);
    CHECK_THROWS_AS(parse_corruption_type("sepia"), ConfigError);
    CHECK(parse_corruption_type("gaussian-noise") == CorruptionType::GaussianNoise);
    CHECK(corruption_type_name(CorruptionType::Pixelate) == "pixelate");
}

TEST_CASE("episodes keep support and query disjoint with local labels") {
    DomainSpec spec = domain_preset("source");
    spec.num_classes = 5;
    spec.train_count = 60;
    spec.test_count = 0;
    const Dataset ds = generate_domain(spec);

    EpisodeSpec es;
    es.ways = 3;
    es.shots = 2;
    es.queries = 2;
    Rng rng(77);
    for (int trial = 0; trial < 10000; ++trial) {
        const Episode ep = sample_episode(ds, es, rng);
        REQUIRE(static_cast<int>(ep.support_labels.size()) == es.ways * es.shots);
        REQUIRE(static_cast<int>(ep.query_labels.size()) == es.ways * es.queries);
        for (int w = 0; w < es.ways; ++w) {
            CHECK(std::count(ep.support_labels.begin(), ep.support_labels.end(), w) == es.shots);
            CHECK(std::count(ep.query_labels.begin(), ep.query_labels.end(), w) == es.queries);
        }
        const int P = ds.pixels();
        for (int s = 0; s < es.ways * es.shots; ++s) {
            for (int q = 0; q < es.ways * es.queries; ++q) {
                CHECK(std::memcmp(ep.support_images.data() + static_cast<long>(s) * P,
                                  ep.query_images.data() + static_cast<long>(q) * P,
                                  static_cast<std::size_t>(P) * sizeof(double)) != 0);
            }
        }
    }
}

TEST_CASE("episode sampling rejects undersized classes by name") {
    DomainSpec spec = domain_preset("source");
    spec.num_classes = 3;
    spec.train_count = 9;
    spec.test_count = 0;
    const Dataset ds = generate_domain(spec);
    EpisodeSpec es;
    es.ways = 3;
    es.shots = 2;
    es.queries = 2;
    Rng rng(1);
    CHECK_THROWS_WITH_AS(sample_episode(ds, es, rng), doctest::Contains("class 0"), ConfigError);

    EpisodeSpec wide;
    wide.ways = 4;
    CHECK_THROWS_WITH_AS(sample_episode(ds, wide, rng), doctest::Contains("exceed"), ConfigError);
}

TEST_CASE("dataset export and import round trip") {
    DomainSpec spec = domain_preset("near");
    spec.train_count = 24;
    spec.test_count = 12;
    const Dataset ds = generate_domain(spec);
    const std::string base = "roundtrip_dataset";
    export_dataset(ds, base);
    const Dataset back = import_dataset_images(base);
    CHECK(same_bits(ds.images, back.images));
    CHECK(back.labels == ds.labels);
    CHECK(back.splits == ds.splits);
    CHECK(back.domain_id == ds.domain_id);
    CHECK(back.image_size == ds.image_size);
    CHECK(back.num_classes == ds.num_classes);
    std::remove((base + ".csv").c_str());
    std::remove((base + ".bin").c_str());
}

TEST_CASE("subset and take select the expected rows") {
    const Dataset ds = generate_domain(domain_preset("near"));
    const Dataset train = ds.subset(Split::Train);
    CHECK(train.count() == 256);
    for (int s : train.splits) CHECK(s == static_cast<int>(Split::Train));

    const Dataset pair = ds.take({0, 5});
    CHECK(pair.count() == 2);
    CHECK(same_bits(row_of(pair, 1), row_of(ds, 5)));
    CHECK_THROWS_AS(ds.take({}), ContractError);
    CHECK_THROWS_AS(ds.take({ds.count()}), IndexError);
}
