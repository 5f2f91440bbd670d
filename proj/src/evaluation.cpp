#include "lab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "lab/checkpoint.hpp"
#include "lab/errors.hpp"
#include "lab/optim.hpp"
#include "lab/tape.hpp"

namespace lab {

namespace {

constexpr int kMaxSplitResamples = 20;

Tensor rows_of(const Tensor& x, const std::vector<int>& idx) {
    const int d = x.cols();
    Tensor out({static_cast<int>(idx.size()), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (int c = 0; c < d; ++c) out.at(static_cast<int>(r), c) = x.at(idx[r], c);
    }
    return out;
}

std::vector<int> pick(const std::vector<int>& y, const std::vector<int>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
    return out;
}

int distinct_labels(const std::vector<int>& y, const std::vector<int>& idx) {
    std::set<int> seen;
    for (int i : idx) seen.insert(y[i]);
    return static_cast<int>(seen.size());
}

int argmax_row(const Tensor& logits, int row) {
    int best = 0;
    for (int k = 1; k < logits.cols(); ++k) {
        if (logits.at(row, k) > logits.at(row, best)) best = k;
    }
    return best;
}

struct TrainValSplit {
    std::vector<int> train;  // pool-local indices
    std::vector<int> val;
    int resamples = 0;
};

// Shuffled split with the requested val fraction. A train part that collapses
// to a single class is reshuffled; after kMaxSplitResamples the split falls
// back to a deterministic per-class round-robin.
TrainValSplit split_train_val(const std::vector<int>& labels, double val_fraction, Rng& rng) {
    const int n = static_cast<int>(labels.size());
    int n_val = static_cast<int>(std::lround(val_fraction * n));
    n_val = std::max(1, std::min(n - 1, n_val));

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    TrainValSplit split;
    const int want = std::min(2, distinct_labels(labels, order));
    for (int attempt = 0;; ++attempt) {
        rng.shuffle(order);
        split.train.assign(order.begin(), order.end() - n_val);
        split.val.assign(order.end() - n_val, order.end());
        if (distinct_labels(labels, split.train) >= want) break;
        if (attempt == kMaxSplitResamples) {
            std::vector<int> by_class(order);
            std::stable_sort(by_class.begin(), by_class.end(),
                             [&](int a, int b) { return labels[a] < labels[b]; });
            split.train.clear();
            split.val.clear();
            for (int i = 0; i < n; ++i) {
                if (static_cast<int>(split.val.size()) < n_val && i % 3 == 2) {
                    split.val.push_back(by_class[i]);
                } else {
                    split.train.push_back(by_class[i]);
                }
            }
            while (static_cast<int>(split.val.size()) < n_val) {
                split.val.push_back(split.train.back());
                split.train.pop_back();
            }
            break;
        }
        ++split.resamples;
    }
    return split;
}

std::vector<GridCell> build_cells(const ProbeConfig& cfg, const std::vector<int>& batch_grid) {
    std::vector<GridCell> cells;
    cells.reserve(cfg.lr_grid.size() * batch_grid.size() * cfg.wd_grid.size());
    for (double lr : cfg.lr_grid) {
        for (int batch : batch_grid) {
            for (double wd : cfg.wd_grid) cells.push_back({lr, batch, wd});
        }
    }
    return cells;
}

int resolve_classes(const FeatureSet& fs) {
    int k = fs.num_classes;
    for (int label : fs.y) k = std::max(k, label + 1);
    return k;
}

}  // namespace

FeatureStandardizer FeatureStandardizer::fit(const Tensor& features) {
    if (features.rank() != 2 || features.rows() < 1) {
        throw ContractError("standardizer needs a non-empty [n x d] feature matrix, got " +
                            features.shape_str());
    }
    const int n = features.rows();
    const int d = features.cols();
    FeatureStandardizer s;
    s.mean.assign(d, 0.0);
    s.inv_std.assign(d, 0.0);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < d; ++c) s.mean[c] += features.at(r, c);
    }
    for (int c = 0; c < d; ++c) s.mean[c] /= n;
    std::vector<double> var(d, 0.0);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < d; ++c) {
            const double dev = features.at(r, c) - s.mean[c];
            var[c] += dev * dev;
        }
    }
    for (int c = 0; c < d; ++c) s.inv_std[c] = 1.0 / std::sqrt(var[c] / n + kVarianceFloor);
    return s;
}

Tensor FeatureStandardizer::apply(const Tensor& features) const {
    const int d = static_cast<int>(mean.size());
    if (features.rank() != 2 || features.cols() != d) {
        throw DimensionError("standardizer fitted on " + std::to_string(d) +
                             " dims cannot apply to " + features.shape_str());
    }
    Tensor out({features.rows(), d});
    for (int r = 0; r < features.rows(); ++r) {
        for (int c = 0; c < d; ++c) out.at(r, c) = (features.at(r, c) - mean[c]) * inv_std[c];
    }
    return out;
}

void ProbeConfig::validate() const {
    std::vector<std::string> bad;
    if (epochs < 1) bad.push_back("epochs must be >= 1");
    for (int m : milestones) {
        if (m < 0 || m >= epochs) {
            bad.push_back("milestone " + std::to_string(m) + " outside [0, epochs)");
        }
    }
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) bad.push_back("decay_factor outside (0, 1]");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad.push_back("momentum outside [0, 1)");
    if (lr_grid.empty()) bad.push_back("lr_grid is empty");
    for (double lr : lr_grid) {
        if (!(lr >= 0.0)) bad.push_back("negative learning rate in lr_grid");
    }
    if (batch_grid.empty()) bad.push_back("batch_grid is empty");
    for (int b : batch_grid) {
        if (b < 1) bad.push_back("batch size " + std::to_string(b) + " must be >= 1");
    }
    if (wd_grid.empty()) bad.push_back("wd_grid is empty");
    for (double wd : wd_grid) {
        if (!(wd >= 0.0)) bad.push_back("negative weight decay in wd_grid");
    }
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) bad.push_back("val_fraction outside (0, 1)");
    if (!bad.empty()) {
        std::string msg = "probe config invalid: ";
        for (std::size_t i = 0; i < bad.size(); ++i) {
            if (i) msg += "; ";
            msg += bad[i];
        }
        throw ConfigError(msg);
    }
}

std::vector<int> effective_batch_grid(const ProbeConfig& cfg, int train_count) {
    if (train_count < 512 && cfg.batch_grid == std::vector<int>{32, 128}) return {16, 64};
    return cfg.batch_grid;
}

FeatureSet extract_features(const ModelState& model, const Dataset& data) {
    const int want = model.config().encoder.input_dim;
    if (data.pixels() != want) {
        throw LoadError("dataset '" + data.domain_id + "' has " + std::to_string(data.pixels()) +
                        " pixels per image but the checkpoint encoder expects " +
                        std::to_string(want));
    }
    if (data.count() == 0) {
        throw ContractError("feature extraction on empty dataset '" + data.domain_id + "'");
    }
    FeatureSet fs;
    fs.x = *model.features(nullptr, constant(data.images));
    fs.y = data.labels;
    fs.num_classes = data.num_classes;
    return fs;
}

FeatureSet extract_features(const ModelState& model, const Dataset& data, Split split) {
    return extract_features(model, data.subset(split));
}

namespace detail {

LinearHead init_linear_head(int dim, int num_classes, Rng& rng) {
    Tensor w({num_classes, dim});
    const double s = std::sqrt(2.0 / dim);
    for (long i = 0; i < w.size(); ++i) w.at(i) = s * rng.normal();
    LinearHead head;
    head.w = param(std::move(w), "head.w");
    head.b = param(Tensor::zeros({num_classes}), "head.b");
    return head;
}

double head_accuracy(const LinearHead& head, const Tensor& x, const std::vector<int>& y) {
    if (x.rows() != static_cast<int>(y.size())) {
        throw DimensionError("head_accuracy: " + std::to_string(x.rows()) + " feature rows vs " +
                             std::to_string(y.size()) + " labels");
    }
    TensorPtr logits = ops::affine(nullptr, constant(x), head.w, head.b);
    int correct = 0;
    for (int r = 0; r < x.rows(); ++r) {
        if (argmax_row(*logits, r) == y[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(y.size());
}

LinearHead train_linear_head(const Tensor& x, const std::vector<int>& y, int num_classes,
                             const ProbeConfig& cfg, const GridCell& cell, Rng& rng) {
    const int n = x.rows();
    LinearHead head = init_linear_head(x.cols(), num_classes, rng);
    if (cell.lr == 0.0) return head;

    OptimizerState opt(cell.lr, cfg.momentum, cell.wd);
    Schedule sched = Schedule::step_decay(cell.lr, cfg.milestones, cfg.decay_factor);
    const std::vector<TensorPtr> params = {head.w, head.b};

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_learning_rate(sched.lr_at(epoch));
        rng.shuffle(order);
        for (int start = 0; start < n; start += cell.batch) {
            const int stop = std::min(n, start + cell.batch);
            std::vector<int> idx(order.begin() + start, order.begin() + stop);
            Tape tape;
            TensorPtr logits = ops::affine(&tape, constant(rows_of(x, idx)), head.w, head.b);
            TensorPtr loss = ops::softmax_cross_entropy(&tape, logits, pick(y, idx));
            for (const TensorPtr& p : params) p->zero_grad();
            tape.backward(loss);
            opt.sgd_step(params);
        }
    }
    return head;
}

LogRegFit fit_logistic_regression(const Tensor& x, const std::vector<int>& y, int num_classes) {
    const int n = x.rows();
    const int d = x.cols();
    if (n < 1 || n != static_cast<int>(y.size())) {
        throw ContractError("logistic regression needs matching non-empty features and labels");
    }
    for (int label : y) {
        if (label < 0 || label >= num_classes) {
            throw IndexError("logistic regression label " + std::to_string(label) +
                             " outside [0, " + std::to_string(num_classes) + ")");
        }
    }

    // Smoothness bound for mean multinomial CE: L <= lambda_max(X'^T X' / n)/2
    // over the bias-augmented X' = [X | 1], estimated by power iteration.
    std::vector<double> v(d + 1, 1.0 / std::sqrt(static_cast<double>(d + 1)));
    double lam = 0.0;
    for (int iter = 0; iter < 30; ++iter) {
        std::vector<double> u(n, 0.0);
        for (int r = 0; r < n; ++r) {
            double acc = v[d];
            for (int c = 0; c < d; ++c) acc += x.at(r, c) * v[c];
            u[r] = acc;
        }
        std::vector<double> w(d + 1, 0.0);
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < d; ++c) w[c] += x.at(r, c) * u[r];
            w[d] += u[r];
        }
        double norm = 0.0;
        for (double wv : w) norm += wv * wv;
        norm = std::sqrt(norm);
        if (norm < 1e-30) {
            lam = 0.0;
            break;
        }
        lam = norm / n;
        for (int c = 0; c <= d; ++c) v[c] = w[c] / norm;
    }
    const double smooth = 0.5 * std::max(lam, 1.0) * 1.1 + kLogRegLambda;
    const double step = 1.0 / smooth;

    LogRegFit fit;
    fit.w = Tensor::zeros({num_classes, d});
    fit.b.assign(num_classes, 0.0);

    std::vector<double> probs(static_cast<std::size_t>(n) * num_classes);
    std::vector<double> gw(static_cast<std::size_t>(num_classes) * d);
    std::vector<double> gb(num_classes);
    for (int iter = 0; iter < kLogRegMaxIters; ++iter) {
        for (int r = 0; r < n; ++r) {
            double mx = -1e300;
            for (int k = 0; k < num_classes; ++k) {
                double z = fit.b[k];
                for (int c = 0; c < d; ++c) z += fit.w.at(k, c) * x.at(r, c);
                probs[static_cast<std::size_t>(r) * num_classes + k] = z;
                mx = std::max(mx, z);
            }
            double denom = 0.0;
            for (int k = 0; k < num_classes; ++k) {
                double& p = probs[static_cast<std::size_t>(r) * num_classes + k];
                p = std::exp(p - mx);
                denom += p;
            }
            for (int k = 0; k < num_classes; ++k) {
                probs[static_cast<std::size_t>(r) * num_classes + k] /= denom;
            }
        }

        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (int r = 0; r < n; ++r) {
            for (int k = 0; k < num_classes; ++k) {
                const double delta =
                    probs[static_cast<std::size_t>(r) * num_classes + k] - (y[r] == k ? 1.0 : 0.0);
                gb[k] += delta;
                for (int c = 0; c < d; ++c) {
                    gw[static_cast<std::size_t>(k) * d + c] += delta * x.at(r, c);
                }
            }
        }
        double grad_sq = 0.0;
        for (int k = 0; k < num_classes; ++k) {
            gb[k] /= n;
            grad_sq += gb[k] * gb[k];
            for (int c = 0; c < d; ++c) {
                double& g = gw[static_cast<std::size_t>(k) * d + c];
                g = g / n + kLogRegLambda * fit.w.at(k, c);
                grad_sq += g * g;
            }
        }
        if (!std::isfinite(grad_sq)) {
            fit.finite = false;
            return fit;
        }
        fit.iterations = iter + 1;
        if (std::sqrt(grad_sq) < kLogRegGradTol) {
            fit.hit_tolerance = true;
            return fit;
        }
        for (int k = 0; k < num_classes; ++k) {
            fit.b[k] -= step * gb[k];
            for (int c = 0; c < d; ++c) {
                fit.w.at(k, c) -= step * gw[static_cast<std::size_t>(k) * d + c];
            }
        }
    }
    return fit;
}

std::vector<int> logreg_predict(const LogRegFit& fit, const Tensor& x) {
    const int k = fit.w.rows();
    std::vector<int> out(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
        int best = 0;
        double best_z = -1e300;
        for (int c = 0; c < k; ++c) {
            double z = fit.b[c];
            for (int j = 0; j < x.cols(); ++j) z += fit.w.at(c, j) * x.at(r, j);
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        out[r] = best;
    }
    return out;
}

std::uint64_t sweep_salt(int epoch, int domain_index) {
    return 0x5100 + static_cast<std::uint64_t>(epoch) * 1024 + domain_index;
}

std::vector<int> balanced_subsample(const Dataset& data, int sample_cap, Rng& rng) {
    const int num_classes = data.num_classes;
    if (sample_cap < num_classes) {
        throw ConfigError("finetune sample cap " + std::to_string(sample_cap) +
                          " is below the class count " + std::to_string(num_classes));
    }
    std::vector<std::vector<int>> per_class(num_classes);
    for (int i : data.indices_of(Split::Train)) per_class[data.labels[i]].push_back(i);
    std::vector<int> pool;
    const int base = sample_cap / num_classes;
    const int extra = sample_cap % num_classes;
    for (int c = 0; c < num_classes; ++c) {
        rng.shuffle(per_class[c]);
        const int want =
            std::min(base + (c < extra ? 1 : 0), static_cast<int>(per_class[c].size()));
        std::sort(per_class[c].begin(), per_class[c].begin() + want);
        pool.insert(pool.end(), per_class[c].begin(), per_class[c].begin() + want);
    }
    return pool;
}

}  // namespace detail

ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test, const ProbeConfig& cfg,
                         Rng& rng) {
    cfg.validate();
    if (train.count() < 2) throw ContractError("linear probe needs at least 2 train samples");
    if (test.count() < 1) throw ContractError("linear probe needs a non-empty test set");
    if (train.x.cols() != test.x.cols()) {
        throw DimensionError("probe train features " + train.x.shape_str() +
                             " vs test features " + test.x.shape_str());
    }
    const int num_classes = std::max(resolve_classes(train), resolve_classes(test));

    TrainValSplit split = split_train_val(train.y, cfg.val_fraction, rng);
    const Tensor x_tr = rows_of(train.x, split.train);
    const std::vector<int> y_tr = pick(train.y, split.train);
    const Tensor x_val = rows_of(train.x, split.val);
    const std::vector<int> y_val = pick(train.y, split.val);

    FeatureStandardizer sweep_std = FeatureStandardizer::fit(x_tr);
    const Tensor xs_tr = sweep_std.apply(x_tr);
    const Tensor xs_val = sweep_std.apply(x_val);

    ProbeResult result;
    result.split_resamples = split.resamples;
    const std::vector<GridCell> cells = build_cells(cfg, effective_batch_grid(cfg, train.count()));
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        Rng cell_rng = rng.fork(detail::kCellSaltBase + ci);
        detail::LinearHead head =
            detail::train_linear_head(xs_tr, y_tr, num_classes, cfg, cells[ci], cell_rng);
        const double val_acc = detail::head_accuracy(head, xs_val, y_val);
        result.sweep.push_back({cells[ci], val_acc});
        if (result.sweep.size() == 1 || val_acc > result.best_val_accuracy) {
            result.best_val_accuracy = val_acc;
            result.best = cells[ci];
        }
    }

    FeatureStandardizer final_std = FeatureStandardizer::fit(train.x);
    Rng retrain_rng = rng.fork(detail::kRetrainSalt);
    detail::LinearHead head = detail::train_linear_head(final_std.apply(train.x), train.y,
                                                        num_classes, cfg, result.best, retrain_rng);
    result.test_accuracy = detail::head_accuracy(head, final_std.apply(test.x), test.y);
    return result;
}

namespace {

std::vector<TensorPtr> finetune_params(ModelState& model, const detail::LinearHead& head) {
    std::vector<TensorPtr> params;
    for (const TensorPtr& w : model.encoder_q().w) params.push_back(w);
    for (const TensorPtr& b : model.encoder_q().b) params.push_back(b);
    params.push_back(head.w);
    params.push_back(head.b);
    return params;
}

struct FinetuneCellOutcome {
    ModelState model;
    detail::LinearHead head;
};

FinetuneCellOutcome run_finetune_cell(const ModelState& pretrained, const Tensor& x,
                                      const std::vector<int>& y, int num_classes,
                                      const ProbeConfig& cfg, const GridCell& cell, Rng& rng) {
    FinetuneCellOutcome out{pretrained.clone(),
                            detail::init_linear_head(pretrained.config().encoder.feature_dim(),
                                                     num_classes, rng)};
    if (cell.lr == 0.0) return out;

    OptimizerState opt(cell.lr, cfg.momentum, cell.wd);
    Schedule sched = Schedule::step_decay(cell.lr, cfg.milestones, cfg.decay_factor);
    const std::vector<TensorPtr> params = finetune_params(out.model, out.head);

    const int n = x.rows();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_learning_rate(sched.lr_at(epoch));
        rng.shuffle(order);
        for (int start = 0; start < n; start += cell.batch) {
            const int stop = std::min(n, start + cell.batch);
            std::vector<int> idx(order.begin() + start, order.begin() + stop);
            Tape tape;
            TensorPtr feats = out.model.features(&tape, constant(rows_of(x, idx)));
            TensorPtr logits = ops::affine(&tape, feats, out.head.w, out.head.b);
            TensorPtr loss = ops::softmax_cross_entropy(&tape, logits, pick(y, idx));
            for (const TensorPtr& p : params) p->zero_grad();
            tape.backward(loss);
            opt.sgd_step(params);
        }
    }
    return out;
}

double finetune_accuracy(const FinetuneCellOutcome& cell, const Tensor& x,
                         const std::vector<int>& y) {
    const Tensor feats = *cell.model.features(nullptr, constant(x));
    return detail::head_accuracy(cell.head, feats, y);
}

}  // namespace

ProbeResult finetune(const ModelState& pretrained, const Dataset& data, const ProbeConfig& cfg,
                     Rng& rng, int sample_cap) {
    cfg.validate();
    const int num_classes = data.num_classes;
    if (data.pixels() != pretrained.config().encoder.input_dim) {
        throw LoadError("dataset '" + data.domain_id + "' has " + std::to_string(data.pixels()) +
                        " pixels per image but the checkpoint encoder expects " +
                        std::to_string(pretrained.config().encoder.input_dim));
    }
    const std::vector<int> test_idx = data.indices_of(Split::Test);
    if (data.indices_of(Split::Train).empty() || test_idx.empty()) {
        throw ContractError("finetune needs non-empty train and test splits in '" +
                            data.domain_id + "'");
    }

    const std::vector<int> pool = detail::balanced_subsample(data, sample_cap, rng);
    if (pool.size() < 2) throw ContractError("finetune pool has fewer than 2 samples");

    const Tensor x_pool = rows_of(data.images, pool);
    const std::vector<int> y_pool = pick(data.labels, pool);
    const Tensor x_test = rows_of(data.images, test_idx);
    const std::vector<int> y_test = pick(data.labels, test_idx);

    TrainValSplit split = split_train_val(y_pool, cfg.val_fraction, rng);
    const Tensor x_tr = rows_of(x_pool, split.train);
    const std::vector<int> y_tr = pick(y_pool, split.train);
    const Tensor x_val = rows_of(x_pool, split.val);
    const std::vector<int> y_val = pick(y_pool, split.val);

    ProbeResult result;
    result.split_resamples = split.resamples;
    const std::vector<GridCell> cells =
        build_cells(cfg, effective_batch_grid(cfg, static_cast<int>(pool.size())));
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        Rng cell_rng = rng.fork(detail::kCellSaltBase + ci);
        FinetuneCellOutcome cell =
            run_finetune_cell(pretrained, x_tr, y_tr, num_classes, cfg, cells[ci], cell_rng);
        const double val_acc = finetune_accuracy(cell, x_val, y_val);
        result.sweep.push_back({cells[ci], val_acc});
        if (result.sweep.size() == 1 || val_acc > result.best_val_accuracy) {
            result.best_val_accuracy = val_acc;
            result.best = cells[ci];
        }
    }

    Rng retrain_rng = rng.fork(detail::kRetrainSalt);
    FinetuneCellOutcome best =
        run_finetune_cell(pretrained, x_pool, y_pool, num_classes, cfg, result.best, retrain_rng);
    result.test_accuracy = finetune_accuracy(best, x_test, y_test);
    return result;
}

FewShotResult fewshot_eval(const ModelState& model, const Dataset& data, const EpisodeSpec& spec,
                           Rng& rng) {
    if (data.pixels() != model.config().encoder.input_dim) {
        throw LoadError("dataset '" + data.domain_id + "' has " + std::to_string(data.pixels()) +
                        " pixels per image but the checkpoint encoder expects " +
                        std::to_string(model.config().encoder.input_dim));
    }
    if (spec.episodes < 1) throw ConfigError("few-shot evaluation needs at least 1 episode");

    FewShotResult result;
    for (int e = 0; e < spec.episodes; ++e) {
        Rng episode_rng = rng.fork(static_cast<std::uint64_t>(e) + 1);
        Episode ep = sample_episode(data, spec, episode_rng);

        const Tensor support = *model.features(nullptr, constant(ep.support_images));
        const Tensor query = *model.features(nullptr, constant(ep.query_images));
        FeatureStandardizer std_ep = FeatureStandardizer::fit(support);

        detail::LogRegFit fit = detail::fit_logistic_regression(std_ep.apply(support),
                                                                ep.support_labels, spec.ways);
        if (!fit.finite) {
            ++result.episodes_excluded;
            continue;
        }
        const std::vector<int> pred = detail::logreg_predict(fit, std_ep.apply(query));
        int correct = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] == ep.query_labels[i]) ++correct;
        }
        result.episode_accuracies.push_back(static_cast<double>(correct) /
                                            static_cast<double>(pred.size()));
    }

    if (result.episode_accuracies.empty()) {
        throw NumericalError("all " + std::to_string(spec.episodes) +
                             " few-shot episodes failed numerically");
    }
    const int n = static_cast<int>(result.episode_accuracies.size());
    double mean = 0.0;
    for (double a : result.episode_accuracies) mean += a;
    mean /= n;
    result.mean_accuracy = mean;
    if (n > 1) {
        double ss = 0.0;
        for (double a : result.episode_accuracies) ss += (a - mean) * (a - mean);
        result.ci95 = 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(static_cast<double>(n));
    }
    return result;
}

EvalProtocol parse_protocol(const std::string& name) {
    if (name == "probe") return EvalProtocol::Probe;
    if (name == "finetune") return EvalProtocol::Finetune;
    if (name == "fewshot") return EvalProtocol::FewShot;
    throw ConfigError("unknown protocol '" + name + "' (expected probe, finetune, or fewshot)");
}

std::string protocol_name(EvalProtocol p) {
    switch (p) {
        case EvalProtocol::Probe: return "probe";
        case EvalProtocol::Finetune: return "finetune";
        case EvalProtocol::FewShot: return "fewshot";
    }
    throw ContractError("unreachable protocol value");
}

SweepResult checkpoint_sweep_eval(const std::string& dir, EvalProtocol protocol,
                                  const std::vector<Dataset>& domains, const ProbeConfig& cfg,
                                  const EpisodeSpec& episodes, Rng& rng) {
    namespace fs = std::filesystem;
    if (domains.empty()) throw ContractError("checkpoint sweep needs at least one domain");
    if (!fs::is_directory(dir)) {
        throw IoError("checkpoint directory '" + dir + "' does not exist");
    }

    const std::string prefix = "checkpoint_epoch_";
    const std::string suffix = ".json";
    std::vector<std::pair<int, std::string>> found;
    for (const fs::directory_entry& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() <= prefix.size() + suffix.size()) continue;
        if (name.compare(0, prefix.size(), prefix) != 0) continue;
        if (name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
        const std::string digits =
            name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
        if (digits.empty() ||
            digits.find_first_not_of("0123456789") != std::string::npos) {
            continue;
        }
        found.emplace_back(std::stoi(digits), entry.path().string());
    }
    if (found.empty()) {
        throw ContractError("no checkpoint_epoch_*.json files under '" + dir + "'");
    }
    std::sort(found.begin(), found.end());

    SweepResult result;
    for (const auto& [epoch, path] : found) {
        std::optional<LoadedCheckpoint> ckpt;
        try {
            ckpt.emplace(load_checkpoint(path));
        } catch (const std::exception& e) {
            std::fprintf(stderr, "warning: skipping checkpoint %s: %s\n", path.c_str(), e.what());
            result.skipped.push_back(path);
            continue;
        }
        for (std::size_t di = 0; di < domains.size(); ++di) {
            const Dataset& dom = domains[di];
            Rng point_rng = rng.fork(detail::sweep_salt(epoch, static_cast<int>(di)));
            SweepPoint point;
            point.epoch = epoch;
            point.domain = dom.domain_id;
            point.checkpoint = path;
            switch (protocol) {
                case EvalProtocol::Probe: {
                    FeatureSet tr = extract_features(ckpt->state, dom, Split::Train);
                    FeatureSet te = extract_features(ckpt->state, dom, Split::Test);
                    point.value = linear_probe(tr, te, cfg, point_rng).test_accuracy;
                    break;
                }
                case EvalProtocol::Finetune:
                    point.value = finetune(ckpt->state, dom, cfg, point_rng).test_accuracy;
                    break;
                case EvalProtocol::FewShot: {
                    FewShotResult fsr = fewshot_eval(ckpt->state, dom, episodes, point_rng);
                    point.value = fsr.mean_accuracy;
                    point.ci95 = fsr.ci95;
                    break;
                }
            }
            result.points.push_back(std::move(point));
        }
    }
    return result;
}

}  // namespace lab
