#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include <doctest.h>

#include "lab/analysis.hpp"
#include "lab/checkpoint.hpp"
#include "lab/data.hpp"
#include "lab/errors.hpp"
#include "lab/evaluation.hpp"

using namespace lab;

namespace {

Tensor gaussian(int rows, int cols, Rng& rng) {
    Tensor t({rows, cols});
    for (long i = 0; i < t.size(); ++i) t.at(i) = rng.normal();
    return t;
}

// Orthonormal square matrix via Gram-Schmidt on a random one.
Tensor random_orthogonal(int d, Rng& rng) {
    Tensor q = gaussian(d, d, rng);
    for (int c = 0; c < d; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (int r = 0; r < d; ++r) dot += q.at(r, c) * q.at(r, prev);
            for (int r = 0; r < d; ++r) q.at(r, c) -= dot * q.at(r, prev);
        }
        double norm = 0.0;
        for (int r = 0; r < d; ++r) norm += q.at(r, c) * q.at(r, c);
        norm = std::sqrt(norm);
        for (int r = 0; r < d; ++r) q.at(r, c) /= norm;
    }
    return q;
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.cols()});
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = acc;
        }
    }
    return out;
}

// Biased-HSIC ratio straight from the Gram matrices.
double hsic_cka_oracle(const Tensor& x, const Tensor& y) {
    const int n = x.rows();
    auto gram = [n](const Tensor& a) {
        Tensor g({n, n});
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                double dot = 0.0;
                for (int c = 0; c < a.cols(); ++c) dot += a.at(i, c) * a.at(j, c);
                g.at(i, j) = dot;
            }
        }
        return g;
    };
    auto center = [n](const Tensor& g) {
        Tensor out({n, n});
        std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
        double all = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                row_mean[i] += g.at(i, j);
                col_mean[j] += g.at(i, j);
                all += g.at(i, j);
            }
        }
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                out.at(i, j) = g.at(i, j) - row_mean[i] / n - col_mean[j] / n + all / (n * n);
            }
        }
        return out;
    };
    auto inner = [n](const Tensor& a, const Tensor& b) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) s += a.at(i, j) * b.at(i, j);
        }
        return s;
    };
    const Tensor kc = center(gram(x));
    const Tensor lc = center(gram(y));
    return inner(kc, lc) / std::sqrt(inner(kc, kc) * inner(lc, lc));
}

DomainSpec small_domain(int classes, int train_n, int test_n, uint64_t seed) {
    DomainSpec spec;
    spec.id = "small";
    spec.image_size = 8;
    spec.num_classes = classes;
    spec.tex_freq_hi = 3.5;
    spec.center_jitter = 0.5;
    spec.train_count = train_n;
    spec.val_count = 0;
    spec.test_count = test_n;
    spec.seed = seed;
    return spec;
}

ModelState tiny_model(int classes, uint64_t seed) {
    ModelConfig cfg;
    cfg.encoder.input_dim = 64;
    cfg.encoder.stage_widths = {16, 8};
    cfg.num_classes = classes;
    cfg.proj_hidden = 8;
    cfg.embed_dim = 4;
    cfg.queue_capacity = 32;
    Rng rng(seed);
    return ModelState(cfg, rng);
}

// Probe head trained on standardized features, folded back into raw feature
// space: W' = W diag(inv_std), b' = b - W' mean.
void trained_raw_head(const ModelState& model, const Dataset& data, Tensor& w_out,
                      std::vector<double>& b_out) {
    FeatureSet train = extract_features(model, data, Split::Train);
    FeatureStandardizer st = FeatureStandardizer::fit(train.x);
    ProbeConfig cfg;
    cfg.epochs = 10;
    cfg.milestones = {6, 8};
    Rng rng(99);
    detail::LinearHead head = detail::train_linear_head(st.apply(train.x), train.y,
                                                        train.num_classes, cfg,
                                                        {0.1, 16, 0.0}, rng);
    const int k = head.w->rows();
    const int d = head.w->cols();
    w_out = Tensor({k, d});
    b_out.assign(k, 0.0);
    for (int r = 0; r < k; ++r) {
        double shift = 0.0;
        for (int c = 0; c < d; ++c) {
            w_out.at(r, c) = head.w->at(r, c) * st.inv_std[c];
            shift += w_out.at(r, c) * st.mean[c];
        }
        b_out[r] = head.b->at(r) - shift;
    }
}

double manual_accuracy(const ModelState& model, const Tensor& w, const std::vector<double>& b,
                       const Tensor& images, const std::vector<int>& labels) {
    const Tensor feats = *model.features(nullptr, constant(images));
    int correct = 0;
    for (int r = 0; r < feats.rows(); ++r) {
        int best = 0;
        double best_z = -1e300;
        for (int k = 0; k < w.rows(); ++k) {
            double z = b[k];
            for (int c = 0; c < w.cols(); ++c) z += w.at(k, c) * feats.at(r, c);
            if (z > best_z) {
                best_z = z;
                best = k;
            }
        }
        if (best == labels[r]) ++correct;
    }
    return static_cast<double>(correct) / feats.rows();
}

}  // namespace

TEST_CASE("linear CKA invariances: self, rotation, scale, symmetry") {
    Rng rng(5);
    Tensor x = gaussian(20, 6, rng);
    CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-10);

    Tensor q = random_orthogonal(6, rng);
    CHECK(std::abs(linear_cka(x, matmul_plain(x, q)) - 1.0) < 1e-8);

    Tensor scaled = x;
    for (long i = 0; i < scaled.size(); ++i) scaled.at(i) *= 1e-8;
    CHECK(std::abs(linear_cka(x, scaled) - 1.0) < 1e-8);
    for (long i = 0; i < scaled.size(); ++i) scaled.at(i) = -3.5 * x.at(i);
    CHECK(std::abs(linear_cka(x, scaled) - 1.0) < 1e-8);

    Tensor y = gaussian(20, 4, rng);
    CHECK(std::abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12);
    const double v = linear_cka(x, y);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
}

TEST_CASE("linear CKA agrees with the Gram-matrix HSIC oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 5 + static_cast<int>(rng.uniform_int(8));
        Tensor x = gaussian(n, 3, rng);
        Tensor y = gaussian(n, 2, rng);
        CHECK(std::abs(linear_cka(x, y) - hsic_cka_oracle(x, y)) < 1e-10);
    }
}

TEST_CASE("linear CKA rejects degenerate inputs") {
    Rng rng(7);
    Tensor x = gaussian(6, 3, rng);
    Tensor flat({6, 2});
    for (long i = 0; i < flat.size(); ++i) flat.at(i) = 0.7;
    CHECK_THROWS_AS(linear_cka(x, flat), NumericalError);
    CHECK_THROWS_AS(linear_cka(x, gaussian(5, 3, rng)), DimensionError);
    CHECK_THROWS_AS(linear_cka(gaussian(1, 3, rng), gaussian(1, 3, rng)), ContractError);

    Tensor poisoned = gaussian(6, 3, rng);
    poisoned.at(2, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(linear_cka(x, poisoned), ContractError);

    ActivationMatrix bad{poisoned, "m", 0, "d", "train"};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    ActivationMatrix ok{x, "m", 0, "d", "train"};
    ok.validate();
    CHECK(ok.count() == 6);
}

TEST_CASE("cka_stage_grid: diagonals, duplicate models, replay equality") {
    Dataset data = generate_domain(small_domain(3, 40, 0, 3));
    ModelState a = tiny_model(3, 1);
    ModelState b = tiny_model(3, 2);

    CkaGrids solo = cka_stage_grid({{"a", &a}}, data);
    REQUIRE(solo.within.size() == 1);
    CHECK(solo.stages == 2);
    for (int s = 0; s < 2; ++s) CHECK(std::abs(solo.within[0].at(s, s) - 1.0) < 1e-10);

    CkaGrids dup = cka_stage_grid({{"a", &a}, {"also_a", &a}}, data);
    for (int s = 0; s < 2; ++s) {
        for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < 2; ++j) CHECK(std::abs(dup.across[s].at(i, j) - 1.0) < 1e-10);
        }
    }

    CkaGrids both = cka_stage_grid({{"a", &a}, {"b", &b}}, data);
    std::vector<TensorPtr> sa = a.forward_stages(nullptr, constant(data.images));
    std::vector<TensorPtr> sb = b.forward_stages(nullptr, constant(data.images));
    CHECK(both.within[0].at(0, 1) == linear_cka(*sa[0], *sa[1]));
    CHECK(both.across[1].at(0, 1) == linear_cka(*sa[1], *sb[1]));
    CHECK(both.model_ids == std::vector<std::string>{"a", "b"});

    ModelConfig deep_cfg;
    deep_cfg.encoder.input_dim = 64;
    deep_cfg.encoder.stage_widths = {16, 8, 8};
    deep_cfg.num_classes = 3;
    Rng rng(4);
    ModelState deep(deep_cfg, rng);
    CHECK_THROWS_AS(cka_stage_grid({{"a", &a}, {"deep", &deep}}, data), ConfigError);
}

TEST_CASE("calibration hits the degenerate extremes") {
    const int n = 40;
    Tensor right({n, 3});
    Tensor wrong({n, 3});
    std::vector<int> labels;
    for (int r = 0; r < n; ++r) {
        const int y = r % 3;
        labels.push_back(y);
        for (int c = 0; c < 3; ++c) {
            right.at(r, c) = c == y ? 40.0 : 0.0;
            wrong.at(r, c) = c == (y + 1) % 3 ? 40.0 : 0.0;
        }
    }
    CalibrationResult good = calibration(right, labels);
    CHECK(good.ece < 1e-6);
    CHECK(good.nll < 1e-6);
    CHECK(std::accumulate(good.bins.count.begin(), good.bins.count.end(), 0) == n);
    CHECK(good.bins.count[14] == n);

    CalibrationResult bad = calibration(wrong, labels);
    CHECK(bad.ece > 0.999);
    CHECK(bad.nll > 10.0);
}

TEST_CASE("calibration matches a manual 10-sample spreadsheet") {
    // Two-class logits (z, 0): confidence of the argmax is 1/(1+exp(-|z|)).
    const std::vector<double> z = {2.0, -1.5, 0.3, 4.0, -0.2, 1.1, -2.8, 0.9, 3.3, -0.6};
    const std::vector<int> labels = {0, 1, 1, 0, 0, 0, 0, 1, 0, 1};
    Tensor logits({10, 2});
    for (int r = 0; r < 10; ++r) {
        logits.at(r, 0) = z[r];
        logits.at(r, 1) = 0.0;
    }
    CalibrationResult res = calibration(logits, labels);

    double nll = 0.0, ece = 0.0;
    std::vector<int> count(15, 0);
    std::vector<double> conf_sum(15, 0.0), acc_sum(15, 0.0);
    for (int r = 0; r < 10; ++r) {
        const double p0 = 1.0 / (1.0 + std::exp(-z[r]));
        nll -= std::log(labels[r] == 0 ? p0 : 1.0 - p0);
        const int pred = z[r] > 0.0 ? 0 : 1;
        const double conf = std::max(p0, 1.0 - p0);
        const int bin = std::min(14, static_cast<int>(std::ceil(conf * 15.0)) - 1);
        ++count[bin];
        conf_sum[bin] += conf;
        acc_sum[bin] += pred == labels[r] ? 1.0 : 0.0;
    }
    nll /= 10;
    for (int b = 0; b < 15; ++b) {
        if (count[b] == 0) {
            CHECK(res.bins.count[b] == 0);
            continue;
        }
        CHECK(res.bins.count[b] == count[b]);
        CHECK(std::abs(res.bins.mean_confidence[b] - conf_sum[b] / count[b]) < 1e-10);
        CHECK(std::abs(res.bins.accuracy[b] - acc_sum[b] / count[b]) < 1e-10);
        CHECK(res.bins.mean_confidence[b] > (b) / 15.0);
        CHECK(res.bins.mean_confidence[b] <= (b + 1) / 15.0);
        ece += (count[b] / 10.0) * std::abs(acc_sum[b] / count[b] - conf_sum[b] / count[b]);
    }
    CHECK(std::abs(res.ece - ece) < 1e-10);
    CHECK(std::abs(res.nll - nll) < 1e-10);
}

TEST_CASE("ECE of a self-consistent predictor vanishes at n = 1e5") {
    const int n = 100000;
    const int k = 4;
    Rng rng(17);
    Tensor logits({n, k});
    std::vector<int> labels(n);
    for (int r = 0; r < n; ++r) {
        double mx = -1e300;
        for (int c = 0; c < k; ++c) {
            logits.at(r, c) = 1.5 * rng.normal();
            mx = std::max(mx, logits.at(r, c));
        }
        double denom = 0.0;
        std::vector<double> p(k);
        for (int c = 0; c < k; ++c) {
            p[c] = std::exp(logits.at(r, c) - mx);
            denom += p[c];
        }
        double u = rng.uniform() * denom;
        int drawn = k - 1;
        double acc = 0.0;
        for (int c = 0; c < k; ++c) {
            acc += p[c];
            if (u <= acc) {
                drawn = c;
                break;
            }
        }
        labels[r] = drawn;
    }
    CalibrationResult res = calibration(logits, labels);
    CHECK(res.ece < 0.01);
    CHECK(std::accumulate(res.bins.count.begin(), res.bins.count.end(), 0) == n);
}

TEST_CASE("class separation analytic cases and brute-force oracle") {
    // Identical vectors within each class, orthogonal across classes.
    Tensor axes({6, 3});
    std::vector<int> axis_labels = {0, 0, 0, 1, 1, 1};
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 3; ++c) axes.at(r, c) = 0.0;
        axes.at(r, r < 3 ? 0 : 1) = r < 3 ? 2.0 : 0.5;
    }
    SeparationResult ortho = class_separation(axes, axis_labels);
    CHECK(std::abs(ortho.r_intra) < 1e-12);
    CHECK(std::abs(ortho.r_inter - 1.0) < 1e-12);

    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor f = gaussian(12, 4, rng);
        std::vector<int> y;
        for (int i = 0; i < 12; ++i) y.push_back(i % 3);
        SeparationResult res = class_separation(f, y);

        // Quadruple loop straight off the formula.
        auto cosine = [&](int i, int j) {
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (int c = 0; c < 4; ++c) {
                dot += f.at(i, c) * f.at(j, c);
                ni += f.at(i, c) * f.at(i, c);
                nj += f.at(j, c) * f.at(j, c);
            }
            return dot / (std::sqrt(ni) * std::sqrt(nj));
        };
        double intra = 0.0;
        for (int k = 0; k < 3; ++k) {
            double sum = 0.0;
            int nk = 0;
            for (int i = 0; i < 12; ++i) {
                if (y[i] != k) continue;
                ++nk;
                for (int j = 0; j < 12; ++j) {
                    if (y[j] == k) sum += 1.0 - cosine(i, j);
                }
            }
            intra += sum / (static_cast<double>(nk) * nk);
        }
        intra /= 3.0;
        double inter = 0.0;
        for (int k = 0; k < 3; ++k) {
            for (int m = 0; m < 3; ++m) {
                if (m == k) continue;
                double sum = 0.0;
                int nk = 0, nm = 0;
                for (int i = 0; i < 12; ++i) {
                    if (y[i] == k) ++nk;
                    if (y[i] == m) ++nm;
                }
                for (int i = 0; i < 12; ++i) {
                    if (y[i] != k) continue;
                    for (int j = 0; j < 12; ++j) {
                        if (y[j] == m) sum += 1.0 - cosine(i, j);
                    }
                }
                inter += sum / (static_cast<double>(nk) * nm);
            }
        }
        inter /= 6.0;
        CHECK(std::abs(res.r_intra - intra) < 1e-10);
        CHECK(std::abs(res.r_inter - inter) < 1e-10);
        CHECK(res.r_intra >= 0.0);
        CHECK(res.r_intra <= 2.0);
        CHECK(res.r_inter >= 0.0);
        CHECK(res.r_inter <= 2.0);
    }
}

TEST_CASE("class separation: permutation invariance, literal flag, degenerate input") {
    Rng rng(31);
    Tensor f = gaussian(9, 5, rng);
    std::vector<int> y = {0, 1, 1, 2, 2, 2, 0, 1, 2};
    SeparationResult base = class_separation(f, y);

    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor fp({9, 5});
    std::vector<int> yp(9);
    for (int i = 0; i < 9; ++i) {
        yp[i] = y[perm[i]];
        for (int c = 0; c < 5; ++c) fp.at(i, c) = f.at(perm[i], c);
    }
    SeparationResult shuffled = class_separation(fp, yp);
    CHECK(std::abs(base.r_intra - shuffled.r_intra) < 1e-10);
    CHECK(std::abs(base.r_inter - shuffled.r_inter) < 1e-10);

    SeparationResult literal = class_separation(f, y, true);
    CHECK(literal.r_intra == base.r_intra);
    CHECK(literal.r_inter != base.r_inter);

    Tensor with_zero = f;
    for (int c = 0; c < 5; ++c) with_zero.at(4, c) = 0.0;
    CHECK_THROWS_AS(class_separation(with_zero, y), NumericalError);
    CHECK_THROWS_AS(class_separation(f, std::vector<int>{0, 2, 2, 2, 2, 2, 0, 2, 2}),
                    ContractError);
}

TEST_CASE("corruption sweep: aggregation identity, cell layout, determinism") {
    Dataset data = generate_domain(small_domain(2, 40, 24, 13));
    ModelState model = tiny_model(2, 8);
    Tensor w;
    std::vector<double> b;
    trained_raw_head(model, data, w, b);
    Dataset test = data.subset(Split::Test);

    const std::vector<CorruptionType> types = {CorruptionType::GaussianNoise,
                                               CorruptionType::Contrast};
    CorruptionSweepResult res = corruption_sweep(model, w, b, test, types);
    REQUIRE(res.cells.size() == 10);
    for (int i = 0; i < 5; ++i) {
        CHECK(res.cells[i].type == CorruptionType::GaussianNoise);
        CHECK(res.cells[i].severity == i + 1);
        CHECK(res.cells[5 + i].type == CorruptionType::Contrast);
    }
    double mean = 0.0;
    for (const CorruptionCell& cell : res.cells) mean += cell.error;
    mean /= res.cells.size();
    CHECK(res.mce == mean);
    CHECK(res.clean_error == top1_error(model, w, b, test));
    CHECK(res.cells[0].error == top1_error(model, w, b, corrupt(test, {types[0], 1})));

    CorruptionSweepResult replay = corruption_sweep(model, w, b, test, types);
    for (std::size_t i = 0; i < res.cells.size(); ++i) {
        CHECK(res.cells[i].error == replay.cells[i].error);
    }

    CHECK_THROWS_AS(corruption_sweep(model, Tensor(), b, test, types), ContractError);
    CHECK_THROWS_AS(corruption_sweep(model, w, b, test, {}), ContractError);
}

TEST_CASE("pgd: zero epsilon is exact, accuracy decays, ball and range hold") {
    Dataset data = generate_domain(small_domain(2, 60, 30, 19));
    ModelState model = tiny_model(2, 8);
    Tensor w;
    std::vector<double> b;
    trained_raw_head(model, data, w, b);
    Dataset test = data.subset(Split::Test);

    PgdResult res = pgd_attack(model, w, b, test.images, test.labels,
                               {0.0, 0.02, 0.05, 0.1, 0.2});
    REQUIRE(res.accuracies.size() == 5);
    CHECK(res.accuracies[0] == manual_accuracy(model, w, b, test.images, test.labels));
    for (int i = 1; i < 5; ++i) CHECK(res.accuracies[i] <= res.accuracies[i - 1] + 1e-12);

    const double eps = 0.07;
    Tensor adv = detail::pgd_perturb(model, w, b, test.images, test.labels, eps, 20);
    for (long i = 0; i < adv.size(); ++i) {
        CHECK(std::abs(adv.at(i) - test.images.at(i)) <= eps + 1e-12);
        CHECK(adv.at(i) >= 0.0);
        CHECK(adv.at(i) <= 1.0);
    }

    CHECK_THROWS_AS(pgd_attack(model, w, b, test.images, test.labels, {-0.1}), ConfigError);
    CHECK_THROWS_AS(pgd_attack(model, w, b, test.images, test.labels, {0.1}, 0), ConfigError);
}

TEST_CASE("one-step pgd on a linear network matches the FGSM formula") {
    ModelConfig cfg;
    cfg.encoder.input_dim = 16;
    cfg.encoder.stage_widths = {16, 16};
    cfg.num_classes = 3;
    cfg.proj_hidden = 4;
    cfg.embed_dim = 2;
    cfg.queue_capacity = 8;
    Rng rng(41);
    ModelState model(cfg, rng);
    for (int s = 0; s < 2; ++s) {
        std::fill(model.encoder_q().w[s]->vec().begin(), model.encoder_q().w[s]->vec().end(), 0.0);
        std::fill(model.encoder_q().b[s]->vec().begin(), model.encoder_q().b[s]->vec().end(), 0.0);
        for (int i = 0; i < 16; ++i) model.encoder_q().w[s]->at(i, i) = 1.0;
    }

    Tensor x({3, 16});
    for (long i = 0; i < x.size(); ++i) x.at(i) = 0.2 + 0.6 * rng.uniform();
    CHECK(std::memcmp(model.features(nullptr, constant(x))->data(), x.data(),
                      sizeof(double) * x.size()) == 0);

    Tensor w = gaussian(3, 16, rng);
    std::vector<double> b = {0.1, -0.2, 0.05};
    std::vector<int> labels = {0, 2, 1};
    const double eps = 0.05;
    Tensor adv = detail::pgd_perturb(model, w, b, x, labels, eps, 1);

    const double eta = 2.5 * eps;
    for (int r = 0; r < 3; ++r) {
        double mx = -1e300;
        std::vector<double> z(3);
        for (int k = 0; k < 3; ++k) {
            z[k] = b[k];
            for (int c = 0; c < 16; ++c) z[k] += w.at(k, c) * x.at(r, c);
            mx = std::max(mx, z[k]);
        }
        double denom = 0.0;
        for (int k = 0; k < 3; ++k) {
            z[k] = std::exp(z[k] - mx);
            denom += z[k];
        }
        for (int k = 0; k < 3; ++k) z[k] /= denom;
        for (int c = 0; c < 16; ++c) {
            double g = 0.0;
            for (int k = 0; k < 3; ++k) {
                g += w.at(k, c) * (z[k] - (labels[r] == k ? 1.0 : 0.0));
            }
            const double sgn = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
            double v = x.at(r, c) + eta * sgn;
            v = std::max(x.at(r, c) - eps, std::min(x.at(r, c) + eps, v));
            v = std::max(0.0, std::min(1.0, v));
            CHECK(std::abs(adv.at(r, c) - v) < 1e-9);
        }
    }
}

TEST_CASE("embedding export round-trips bit-exactly and replays after reload") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "lab_embed_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Dataset data = generate_domain(small_domain(3, 20, 10, 29));
    ModelState model = tiny_model(3, 37);
    const std::string base = (dir / "embed").string();
    export_embeddings(model, data, base);

    EmbeddingFile file = import_embeddings(base);
    CHECK(file.x.rows() == data.count());
    CHECK(file.labels == data.labels);
    CHECK(file.splits == data.splits);
    CHECK(file.domain == "small");
    Tensor feats = *model.features(nullptr, constant(data.images));
    CHECK(std::memcmp(file.x.data(), feats.data(), sizeof(double) * feats.size()) == 0);

    save_checkpoint(model, CheckpointMeta{0, {}, {}}, (dir / "ckpt.json").string());
    LoadedCheckpoint reloaded = load_checkpoint((dir / "ckpt.json").string());
    const std::string base2 = (dir / "embed2").string();
    export_embeddings(reloaded.state, data, base2);
    auto slurp = [](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    CHECK(slurp(base + ".bin") == slurp(base2 + ".bin"));
    CHECK(slurp(base + ".csv") == slurp(base2 + ".csv"));

    CHECK_THROWS_AS(import_embeddings((dir / "nope").string()), LoadError);
    std::ofstream(dir / "junk.bin") << "LABIMG01xxxxxxxxxxxx";
    CHECK_THROWS_AS(import_embeddings((dir / "junk").string()), LoadError);

    fs::remove_all(dir);
}
