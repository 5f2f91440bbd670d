#include "lab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lab/errors.hpp"
#include "lab/tape.hpp"

namespace lab {

namespace {

Tensor column_center(const Tensor& x) {
    const int n = x.rows();
    const int d = x.cols();
    Tensor out({n, d});
    for (int c = 0; c < d; ++c) {
        double mean = 0.0;
        for (int r = 0; r < n; ++r) mean += x.at(r, c);
        mean /= n;
        for (int r = 0; r < n; ++r) out.at(r, c) = x.at(r, c) - mean;
    }
    return out;
}

// ||A^T B||_F^2 without materializing the full Gram when shapes allow.
double cross_gram_norm_sq(const Tensor& a, const Tensor& b) {
    const int n = a.rows();
    double total = 0.0;
    for (int i = 0; i < a.cols(); ++i) {
        for (int j = 0; j < b.cols(); ++j) {
            double dot = 0.0;
            for (int r = 0; r < n; ++r) dot += a.at(r, i) * b.at(r, j);
            total += dot * dot;
        }
    }
    return total;
}

void require_2d(const Tensor& x, const char* who) {
    if (x.rank() != 2 || x.rows() < 2) {
        throw ContractError(std::string(who) + " needs an [n x d] matrix with n >= 2, got " +
                            x.shape_str());
    }
    if (!x.all_finite()) {
        throw ContractError(std::string(who) + " received non-finite activations");
    }
}

std::vector<double> softmax_row(const Tensor& logits, int row) {
    const int k = logits.cols();
    double mx = logits.at(row, 0);
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.at(row, c));
    std::vector<double> p(k);
    double denom = 0.0;
    for (int c = 0; c < k; ++c) {
        p[c] = std::exp(logits.at(row, c) - mx);
        denom += p[c];
    }
    for (int c = 0; c < k; ++c) p[c] /= denom;
    return p;
}

int argmax_row(const Tensor& logits, int row) {
    int best = 0;
    for (int c = 1; c < logits.cols(); ++c) {
        if (logits.at(row, c) > logits.at(row, best)) best = c;
    }
    return best;
}

Tensor head_logits(const ModelState& model, const Tensor& head_w,
                   const std::vector<double>& head_b, const Tensor& images) {
    const Tensor feats = *model.features(nullptr, constant(images));
    const int k = head_w.rows();
    Tensor logits({feats.rows(), k});
    for (int r = 0; r < feats.rows(); ++r) {
        for (int c = 0; c < k; ++c) {
            double z = head_b[c];
            for (int j = 0; j < feats.cols(); ++j) z += head_w.at(c, j) * feats.at(r, j);
            logits.at(r, c) = z;
        }
    }
    return logits;
}

void require_head(const Tensor& head_w, const std::vector<double>& head_b, const char* who) {
    if (head_w.rank() != 2 || head_w.size() == 0 ||
        head_w.rows() != static_cast<int>(head_b.size())) {
        throw ContractError(std::string(who) + " needs a trained [K x dim] head, got weights " +
                            head_w.shape_str() + " and " + std::to_string(head_b.size()) +
                            " biases");
    }
}

}  // namespace

void ActivationMatrix::validate() const {
    require_2d(x, "activation matrix");
}

double linear_cka(const Tensor& x, const Tensor& y) {
    require_2d(x, "linear_cka");
    require_2d(y, "linear_cka");
    if (x.rows() != y.rows()) {
        throw DimensionError("linear_cka sample counts differ: " + x.shape_str() + " vs " +
                             y.shape_str());
    }
    const Tensor xc = column_center(x);
    const Tensor yc = column_center(y);
    const double xx = std::sqrt(cross_gram_norm_sq(xc, xc));
    const double yy = std::sqrt(cross_gram_norm_sq(yc, yc));
    if (xx < 1e-30 || yy < 1e-30) {
        throw NumericalError("linear_cka is undefined for zero-variance activations");
    }
    return cross_gram_norm_sq(yc, xc) / (xx * yy);
}

double linear_cka(const ActivationMatrix& x, const ActivationMatrix& y) {
    x.validate();
    y.validate();
    return linear_cka(x.x, y.x);
}

CkaGrids cka_stage_grid(const std::vector<NamedModel>& models, const Dataset& data) {
    if (models.empty()) throw ContractError("cka_stage_grid needs at least one model");
    const int stages = models[0].state->config().encoder.num_stages();
    for (const NamedModel& m : models) {
        if (m.state->config().encoder.num_stages() != stages) {
            throw ConfigError("cka_stage_grid: model '" + m.id + "' has " +
                              std::to_string(m.state->config().encoder.num_stages()) +
                              " stages, expected " + std::to_string(stages));
        }
    }
    if (data.count() < 2) throw ContractError("cka_stage_grid needs at least 2 samples");

    std::vector<std::vector<Tensor>> acts(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
        std::vector<TensorPtr> stack =
            models[m].state->forward_stages(nullptr, constant(data.images));
        for (const TensorPtr& a : stack) acts[m].push_back(*a);
    }

    CkaGrids grids;
    grids.stages = stages;
    for (const NamedModel& m : models) grids.model_ids.push_back(m.id);
    for (std::size_t m = 0; m < models.size(); ++m) {
        Tensor grid({stages, stages});
        for (int i = 0; i < stages; ++i) {
            for (int j = 0; j < stages; ++j) grid.at(i, j) = linear_cka(acts[m][i], acts[m][j]);
        }
        grids.within.push_back(std::move(grid));
    }
    const int nm = static_cast<int>(models.size());
    for (int s = 0; s < stages; ++s) {
        Tensor grid({nm, nm});
        for (int i = 0; i < nm; ++i) {
            for (int j = 0; j < nm; ++j) grid.at(i, j) = linear_cka(acts[i][s], acts[j][s]);
        }
        grids.across.push_back(std::move(grid));
    }
    return grids;
}

CalibrationResult calibration(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.rows() < 1) {
        throw ContractError("calibration needs a non-empty [n x K] logit matrix, got " +
                            logits.shape_str());
    }
    const int n = logits.rows();
    if (n != static_cast<int>(labels.size())) {
        throw DimensionError("calibration: " + std::to_string(n) + " logit rows vs " +
                             std::to_string(labels.size()) + " labels");
    }
    for (int label : labels) {
        if (label < 0 || label >= logits.cols()) {
            throw IndexError("calibration label " + std::to_string(label) + " outside [0, " +
                             std::to_string(logits.cols()) + ")");
        }
    }

    CalibrationResult res;
    res.bins.count.assign(ReliabilityBins::kBins, 0);
    res.bins.mean_confidence.assign(ReliabilityBins::kBins, 0.0);
    res.bins.accuracy.assign(ReliabilityBins::kBins, 0.0);

    for (int r = 0; r < n; ++r) {
        const std::vector<double> p = softmax_row(logits, r);
        res.nll -= std::log(std::max(p[labels[r]], 1e-300));
        const int pred = argmax_row(logits, r);
        const double conf = p[pred];
        const int bin =
            std::min(ReliabilityBins::kBins - 1,
                     static_cast<int>(std::ceil(conf * ReliabilityBins::kBins)) - 1);
        ++res.bins.count[bin];
        res.bins.mean_confidence[bin] += conf;
        res.bins.accuracy[bin] += pred == labels[r] ? 1.0 : 0.0;
    }
    res.nll /= n;
    for (int b = 0; b < ReliabilityBins::kBins; ++b) {
        if (res.bins.count[b] == 0) continue;
        res.bins.mean_confidence[b] /= res.bins.count[b];
        res.bins.accuracy[b] /= res.bins.count[b];
        res.ece += (static_cast<double>(res.bins.count[b]) / n) *
                   std::abs(res.bins.accuracy[b] - res.bins.mean_confidence[b]);
    }
    return res;
}

SeparationResult class_separation(const Tensor& features, const std::vector<int>& labels,
                                  bool literal_denominator) {
    if (features.rank() != 2 || features.rows() < 1) {
        throw ContractError("class_separation needs a non-empty [n x d] feature matrix, got " +
                            features.shape_str());
    }
    const int n = features.rows();
    const int d = features.cols();
    if (n != static_cast<int>(labels.size())) {
        throw DimensionError("class_separation: " + std::to_string(n) + " feature rows vs " +
                             std::to_string(labels.size()) + " labels");
    }
    int num_classes = 0;
    for (int label : labels) {
        if (label < 0) throw IndexError("class_separation: negative label");
        num_classes = std::max(num_classes, label + 1);
    }

    Tensor unit({n, d});
    for (int r = 0; r < n; ++r) {
        double sq = 0.0;
        for (int c = 0; c < d; ++c) sq += features.at(r, c) * features.at(r, c);
        const double norm = std::sqrt(sq);
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw NumericalError("class_separation: feature row " + std::to_string(r) +
                                 " is degenerate (norm " + std::to_string(norm) + ")");
        }
        for (int c = 0; c < d; ++c) unit.at(r, c) = features.at(r, c) / norm;
    }

    std::vector<std::vector<int>> by_class(num_classes);
    for (int r = 0; r < n; ++r) by_class[labels[r]].push_back(r);
    for (int c = 0; c < num_classes; ++c) {
        if (by_class[c].empty()) {
            throw ContractError("class_separation: class " + std::to_string(c) + " has no samples");
        }
    }

    auto mean_distance = [&](const std::vector<int>& a, const std::vector<int>& b,
                             double denom) {
        double sum = 0.0;
        for (int i : a) {
            for (int j : b) {
                double dot = 0.0;
                for (int c = 0; c < d; ++c) dot += unit.at(i, c) * unit.at(j, c);
                sum += 1.0 - dot;
            }
        }
        return sum / denom;
    };

    SeparationResult res;
    for (int k = 0; k < num_classes; ++k) {
        const double nk = static_cast<double>(by_class[k].size());
        res.r_intra += mean_distance(by_class[k], by_class[k], nk * nk);
    }
    res.r_intra /= num_classes;

    if (num_classes > 1) {
        for (int k = 0; k < num_classes; ++k) {
            for (int m = 0; m < num_classes; ++m) {
                if (m == k) continue;
                const double nk = static_cast<double>(by_class[k].size());
                const double nm = static_cast<double>(by_class[m].size());
                res.r_inter += mean_distance(by_class[k], by_class[m],
                                             literal_denominator ? nk * nk : nk * nm);
            }
        }
        res.r_inter /= static_cast<double>(num_classes) * (num_classes - 1);
    }
    return res;
}

double top1_error(const ModelState& model, const Tensor& head_w, const std::vector<double>& head_b,
                  const Dataset& data) {
    require_head(head_w, head_b, "top1_error");
    if (data.count() == 0) throw ContractError("top1_error on empty dataset");
    const Tensor logits = head_logits(model, head_w, head_b, data.images);
    int wrong = 0;
    for (int r = 0; r < data.count(); ++r) {
        if (argmax_row(logits, r) != data.labels[r]) ++wrong;
    }
    return static_cast<double>(wrong) / data.count();
}

CorruptionSweepResult corruption_sweep(const ModelState& model, const Tensor& head_w,
                                       const std::vector<double>& head_b, const Dataset& clean_test,
                                       const std::vector<CorruptionType>& types) {
    require_head(head_w, head_b, "corruption_sweep");
    if (types.empty()) throw ContractError("corruption_sweep needs at least one corruption type");

    CorruptionSweepResult res;
    res.clean_error = top1_error(model, head_w, head_b, clean_test);
    for (CorruptionType type : types) {
        for (int severity = 1; severity <= kCorruptionSeverities; ++severity) {
            const Dataset corrupted = corrupt(clean_test, {type, severity});
            res.cells.push_back({type, severity, top1_error(model, head_w, head_b, corrupted)});
        }
    }
    for (const CorruptionCell& cell : res.cells) res.mce += cell.error;
    res.mce /= static_cast<double>(res.cells.size());
    return res;
}

namespace detail {

Tensor pgd_perturb(const ModelState& model, const Tensor& head_w,
                   const std::vector<double>& head_b, const Tensor& images,
                   const std::vector<int>& labels, double epsilon, int steps) {
    const int n = images.rows();
    const int pixels = images.cols();
    const double eta = 2.5 * epsilon / steps;

    Tensor adv = images;
    if (epsilon == 0.0) return adv;
    for (int step = 0; step < steps; ++step) {
        Tape tape;
        TensorPtr x = param(adv, "pgd.x");
        TensorPtr feats = model.features(&tape, x);
        Tensor wt = head_w;
        Tensor bt({static_cast<int>(head_b.size())});
        for (std::size_t i = 0; i < head_b.size(); ++i) bt.at(static_cast<long>(i)) = head_b[i];
        TensorPtr logits = ops::affine(&tape, feats, constant(wt), constant(bt));
        TensorPtr loss = ops::softmax_cross_entropy(&tape, logits, labels);
        x->zero_grad();
        tape.backward(loss);

        const std::vector<double>& g = x->grad();
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < pixels; ++c) {
                const double gv = g[static_cast<std::size_t>(r) * pixels + c];
                const double sgn = gv > 0.0 ? 1.0 : (gv < 0.0 ? -1.0 : 0.0);
                double v = adv.at(r, c) + eta * sgn;
                v = std::max(images.at(r, c) - epsilon, std::min(images.at(r, c) + epsilon, v));
                v = std::max(0.0, std::min(1.0, v));
                adv.at(r, c) = v;
            }
        }
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < pixels; ++c) {
                if (std::abs(adv.at(r, c) - images.at(r, c)) > epsilon + 1e-12 ||
                    adv.at(r, c) < 0.0 || adv.at(r, c) > 1.0) {
                    throw ContractError("pgd step left the feasible region");
                }
            }
        }
    }
    return adv;
}

}  // namespace detail

PgdResult pgd_attack(const ModelState& model, const Tensor& head_w,
                     const std::vector<double>& head_b, const Tensor& images,
                     const std::vector<int>& labels, const std::vector<double>& epsilons,
                     int steps) {
    require_head(head_w, head_b, "pgd_attack");
    if (images.rank() != 2 || images.rows() < 1) {
        throw ContractError("pgd_attack needs a non-empty [n x pixels] image batch, got " +
                            images.shape_str());
    }
    if (images.rows() != static_cast<int>(labels.size())) {
        throw DimensionError("pgd_attack: " + std::to_string(images.rows()) + " images vs " +
                             std::to_string(labels.size()) + " labels");
    }
    if (steps < 1) throw ConfigError("pgd_attack needs steps >= 1");
    for (double eps : epsilons) {
        if (!(eps >= 0.0)) throw ConfigError("pgd_attack epsilon must be >= 0");
    }

    PgdResult res;
    for (double eps : epsilons) {
        const Tensor adv = detail::pgd_perturb(model, head_w, head_b, images, labels, eps, steps);
        const Tensor logits = head_logits(model, head_w, head_b, adv);
        int correct = 0;
        for (int r = 0; r < images.rows(); ++r) {
            if (argmax_row(logits, r) == labels[r]) ++correct;
        }
        res.epsilons.push_back(eps);
        res.accuracies.push_back(static_cast<double>(correct) / images.rows());
    }
    return res;
}

void export_embeddings(const ModelState& model, const Dataset& data, const std::string& basename) {
    const Tensor feats = *model.features(nullptr, constant(data.images));
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
    bin.write("LABEMB01", 8);
    const uint32_t count = static_cast<uint32_t>(feats.rows());
    const uint32_t dim = static_cast<uint32_t>(feats.cols());
    bin.write(reinterpret_cast<const char*>(&count), 4);
    bin.write(reinterpret_cast<const char*>(&dim), 4);
    bin.write(reinterpret_cast<const char*>(feats.data()),
              static_cast<std::streamsize>(sizeof(double)) * feats.size());
    if (!bin) throw IoError("write to '" + basename + ".bin' failed");
}

EmbeddingFile import_embeddings(const std::string& basename) {
    std::ifstream bin(basename + ".bin", std::ios::binary);
    if (!bin) throw LoadError("cannot open '" + basename + ".bin'");
    char magic[8];
    bin.read(magic, 8);
    if (!bin || std::memcmp(magic, "LABEMB01", 8) != 0) {
        throw LoadError("'" + basename + ".bin' is not a LABEMB01 embedding file");
    }
    uint32_t count = 0, dim = 0;
    bin.read(reinterpret_cast<char*>(&count), 4);
    bin.read(reinterpret_cast<char*>(&dim), 4);
    if (!bin) throw LoadError("'" + basename + ".bin' has a malformed header");

    EmbeddingFile out;
    out.x = Tensor({static_cast<int>(count), static_cast<int>(dim)});
    bin.read(reinterpret_cast<char*>(out.x.vec().data()),
             static_cast<std::streamsize>(sizeof(double)) * out.x.size());
    if (!bin) throw LoadError("'" + basename + ".bin' is truncated");

    std::ifstream csv(basename + ".csv");
    if (!csv) throw LoadError("cannot open '" + basename + ".csv'");
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::size_t p1 = line.find(',');
        std::size_t p2 = line.find(',', p1 + 1);
        std::size_t p3 = line.find(',', p2 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos) {
            throw LoadError("malformed manifest row '" + line + "' in '" + basename + ".csv'");
        }
        out.labels.push_back(std::stoi(line.substr(p1 + 1, p2 - p1 - 1)));
        out.splits.push_back(std::stoi(line.substr(p2 + 1, p3 - p2 - 1)));
        out.domain = line.substr(p3 + 1);
    }
    if (out.labels.size() != count) {
        throw LoadError("manifest lists " + std::to_string(out.labels.size()) +
                        " rows but '" + basename + ".bin' holds " + std::to_string(count));
    }
    return out;
}

}  // namespace lab
