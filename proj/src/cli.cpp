#include "lab/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "lab/analysis.hpp"
#include "lab/checkpoint.hpp"
#include "lab/errors.hpp"
#include "lab/objectives.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lab::cli {

namespace {

// RNG stream layout per experiment seed (documented in docs/formats.md).
// Eval protocol streams match what checkpoint_sweep_eval replays per domain.
constexpr std::uint64_t kInitSalt = 0x11;
constexpr std::uint64_t kTrainSalt = 0x22;
constexpr std::uint64_t kProbeSalt = 0x200;     // + domain index
constexpr std::uint64_t kFinetuneSalt = 0x300;  // + domain index
constexpr std::uint64_t kFewshotSalt = 0x400;   // + domain index
constexpr std::uint64_t kSweepSalt = 0x500;     // + protocol index
constexpr std::uint64_t kHeadSalt = 0x600;      // + method index

const std::vector<std::string> kAnalysisKinds = {"cka",        "calibration", "separation",
                                                 "corruption", "pgd",         "export"};
const std::vector<std::string> kAblateAxes = {"alpha", "queue_size", "augmentation", "epochs"};

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

std::string fmt_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Config parsing. Violations are collected, never thrown one at a time.

void check_keys(const json& j, const std::string& where, const std::vector<std::string>& allowed,
                std::vector<std::string>& issues) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            issues.push_back(where + " has unknown field '" + key + "'");
        }
    }
}

template <class T>
bool get_field(const json& j, const char* key, T& out, const std::string& where,
               std::vector<std::string>& issues) {
    if (!j.contains(key)) return false;
    try {
        out = j.at(key).get<T>();
        return true;
    } catch (const json::exception&) {
        issues.push_back(where + "." + key + " has the wrong type");
        return false;
    }
}

DomainSpec parse_domain(const json& v, const std::string& where, std::vector<std::string>& issues) {
    DomainSpec spec;
    std::string preset;
    if (v.is_string()) {
        preset = v.get<std::string>();
    } else if (v.is_object()) {
        check_keys(v, where, {"preset", "train_count", "val_count", "test_count", "seed"}, issues);
        if (!get_field(v, "preset", preset, where, issues)) {
            issues.push_back(where + " needs a 'preset' name");
            return spec;
        }
    } else {
        issues.push_back(where + " must be a preset name or an object");
        return spec;
    }
    try {
        spec = domain_preset(preset);
    } catch (const ConfigError& e) {
        issues.push_back(where + ": " + e.what());
        return spec;
    }
    if (v.is_object()) {
        get_field(v, "train_count", spec.train_count, where, issues);
        get_field(v, "val_count", spec.val_count, where, issues);
        get_field(v, "test_count", spec.test_count, where, issues);
        get_field(v, "seed", spec.seed, where, issues);
    }
    try {
        spec.validate();
    } catch (const ConfigError& e) {
        issues.push_back(where + ": " + e.what());
    }
    return spec;
}

bool valid_augmentation(const std::string& name) {
    return name == "weak" || name == "strong" || name == "identity";
}

AugmentationPolicy policy_by_name(const std::string& name) {
    if (name == "weak") return AugmentationPolicy::weak();
    if (name == "strong") return AugmentationPolicy::strong();
    if (name == "identity") return AugmentationPolicy::identity();
    throw ConfigError("unknown augmentation policy '" + name + "'");
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
    std::vector<std::string> issues;
    ExperimentConfig cfg;
    if (!j.is_object()) throw ConfigError("config invalid: top level must be an object");

    check_keys(j, "config",
               {"experiment", "seeds", "objectives", "model", "source", "targets", "protocols",
                "pretrain", "probe", "episodes", "analyses", "pgd", "eval", "ablate", "out"},
               issues);

    if (!get_field(j, "experiment", cfg.experiment, "config", issues) || cfg.experiment.empty()) {
        issues.push_back("config.experiment must be a non-empty string");
    }
    if (!get_field(j, "out", cfg.out_dir, "config", issues) || cfg.out_dir.empty()) {
        issues.push_back("config.out must be a non-empty directory path");
    }

    if (j.contains("seeds")) {
        const json& s = j.at("seeds");
        if (s.is_number_unsigned() || s.is_number_integer()) {
            long long v = s.get<long long>();
            if (v < 0) {
                issues.push_back("config.seeds must be non-negative");
            } else {
                cfg.seeds = {static_cast<std::uint64_t>(v)};
            }
        } else if (s.is_array()) {
            for (const json& e : s) {
                if (!e.is_number_integer() && !e.is_number_unsigned()) {
                    issues.push_back("config.seeds entries must be integers");
                    break;
                }
                long long v = e.get<long long>();
                if (v < 0) {
                    issues.push_back("config.seeds must be non-negative");
                    break;
                }
                cfg.seeds.push_back(static_cast<std::uint64_t>(v));
            }
        } else {
            issues.push_back("config.seeds must be an integer or an array of integers");
        }
    }
    if (cfg.seeds.empty()) issues.push_back("config.seeds must list at least one seed");
    if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) {
        issues.push_back("config.seeds contains duplicates");
    }

    if (j.contains("objectives")) {
        std::vector<std::string> names;
        const json& o = j.at("objectives");
        if (o.is_string()) {
            names.push_back(o.get<std::string>());
        } else if (o.is_array()) {
            for (const json& e : o) {
                if (!e.is_string()) {
                    issues.push_back("config.objectives entries must be strings");
                    break;
                }
                names.push_back(e.get<std::string>());
            }
        } else {
            issues.push_back("config.objectives must be a string or an array of strings");
        }
        for (const std::string& n : names) {
            try {
                cfg.objectives.push_back(parse_objective(n));
            } catch (const ConfigError& e) {
                issues.push_back(std::string("config.objectives: ") + e.what());
            }
        }
    }
    if (cfg.objectives.empty()) issues.push_back("config.objectives must list at least one objective");
    {
        std::set<Objective> uniq(cfg.objectives.begin(), cfg.objectives.end());
        if (uniq.size() != cfg.objectives.size()) {
            issues.push_back("config.objectives contains duplicates");
        }
    }

    cfg.source = j.contains("source") ? parse_domain(j.at("source"), "config.source", issues)
                                      : domain_preset("source");
    if (j.contains("targets")) {
        const json& t = j.at("targets");
        if (!t.is_array()) {
            issues.push_back("config.targets must be an array");
        } else {
            int i = 0;
            for (const json& e : t) {
                cfg.targets.push_back(
                    parse_domain(e, "config.targets[" + std::to_string(i) + "]", issues));
                ++i;
            }
        }
    }

    if (j.contains("model")) {
        const json& m = j.at("model");
        const std::string where = "config.model";
        if (!m.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(m, where,
                       {"tau", "momentum", "alpha", "queue_capacity", "proj_hidden", "embed_dim",
                        "supcon_sum_mode", "supcon_batch_keys", "encoder"},
                       issues);
            get_field(m, "tau", cfg.model.tau, where, issues);
            get_field(m, "momentum", cfg.model.momentum, where, issues);
            get_field(m, "alpha", cfg.model.alpha, where, issues);
            get_field(m, "queue_capacity", cfg.model.queue_capacity, where, issues);
            get_field(m, "proj_hidden", cfg.model.proj_hidden, where, issues);
            get_field(m, "embed_dim", cfg.model.embed_dim, where, issues);
            get_field(m, "supcon_batch_keys", cfg.model.supcon_batch_keys, where, issues);
            std::string mode;
            if (get_field(m, "supcon_sum_mode", mode, where, issues)) {
                if (mode == "mean") {
                    cfg.model.supcon_sum_mode = SupConSumMode::Mean;
                } else if (mode == "sum") {
                    cfg.model.supcon_sum_mode = SupConSumMode::Sum;
                } else {
                    issues.push_back(where + ".supcon_sum_mode must be 'mean' or 'sum'");
                }
            }
            if (m.contains("encoder")) {
                const json& enc = m.at("encoder");
                if (!enc.is_object()) {
                    issues.push_back(where + ".encoder must be an object");
                } else {
                    check_keys(enc, where + ".encoder", {"input_dim", "stage_widths"}, issues);
                    get_field(enc, "input_dim", cfg.model.encoder.input_dim, where + ".encoder",
                              issues);
                    get_field(enc, "stage_widths", cfg.model.encoder.stage_widths,
                              where + ".encoder", issues);
                }
            }
        }
    }
    cfg.model.num_classes = cfg.source.num_classes;
    try {
        cfg.model.validate();
    } catch (const ConfigError& e) {
        issues.push_back(std::string("config.model: ") + e.what());
    }
    const int pixels = cfg.source.image_size * cfg.source.image_size;
    if (cfg.model.encoder.input_dim != pixels) {
        issues.push_back("config.model.encoder.input_dim (" +
                         std::to_string(cfg.model.encoder.input_dim) + ") must equal source pixels (" +
                         std::to_string(pixels) + ")");
    }

    cfg.protocols = {EvalProtocol::Probe};
    if (j.contains("protocols")) {
        cfg.protocols.clear();
        const json& p = j.at("protocols");
        if (!p.is_array()) {
            issues.push_back("config.protocols must be an array");
        } else {
            for (const json& e : p) {
                if (!e.is_string()) {
                    issues.push_back("config.protocols entries must be strings");
                    continue;
                }
                try {
                    cfg.protocols.push_back(parse_protocol(e.get<std::string>()));
                } catch (const ConfigError& err) {
                    issues.push_back(std::string("config.protocols: ") + err.what());
                }
            }
        }
        if (cfg.protocols.empty()) issues.push_back("config.protocols must list at least one protocol");
    }

    if (j.contains("pretrain")) {
        const json& p = j.at("pretrain");
        const std::string where = "config.pretrain";
        if (!p.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(p, where,
                       {"epochs", "lr", "warmup_epochs", "batch_size", "momentum", "weight_decay",
                        "checkpoint_interval", "augmentation"},
                       issues);
            get_field(p, "epochs", cfg.pretrain.epochs, where, issues);
            get_field(p, "lr", cfg.pretrain.lr, where, issues);
            get_field(p, "warmup_epochs", cfg.pretrain.warmup_epochs, where, issues);
            get_field(p, "batch_size", cfg.pretrain.batch_size, where, issues);
            get_field(p, "momentum", cfg.pretrain.momentum, where, issues);
            get_field(p, "weight_decay", cfg.pretrain.weight_decay, where, issues);
            get_field(p, "checkpoint_interval", cfg.pretrain.checkpoint_interval, where, issues);
            get_field(p, "augmentation", cfg.pretrain.augmentation, where, issues);
        }
    }
    if (cfg.pretrain.epochs < 0) issues.push_back("config.pretrain.epochs must be >= 0");
    if (!(cfg.pretrain.lr > 0.0)) issues.push_back("config.pretrain.lr must be > 0");
    if (cfg.pretrain.warmup_epochs < 0) issues.push_back("config.pretrain.warmup_epochs must be >= 0");
    if (cfg.pretrain.batch_size < 1) issues.push_back("config.pretrain.batch_size must be >= 1");
    if (!(cfg.pretrain.momentum >= 0.0 && cfg.pretrain.momentum < 1.0)) {
        issues.push_back("config.pretrain.momentum must be in [0, 1)");
    }
    if (cfg.pretrain.weight_decay < 0.0) issues.push_back("config.pretrain.weight_decay must be >= 0");
    if (cfg.pretrain.checkpoint_interval < 0) {
        issues.push_back("config.pretrain.checkpoint_interval must be >= 0");
    }
    if (!valid_augmentation(cfg.pretrain.augmentation)) {
        issues.push_back("config.pretrain.augmentation must be weak, strong, or identity");
    }

    if (j.contains("probe")) {
        const json& p = j.at("probe");
        const std::string where = "config.probe";
        if (!p.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(p, where,
                       {"epochs", "milestones", "decay_factor", "momentum", "lr_grid", "batch_grid",
                        "wd_grid", "val_fraction"},
                       issues);
            get_field(p, "epochs", cfg.probe.epochs, where, issues);
            get_field(p, "milestones", cfg.probe.milestones, where, issues);
            get_field(p, "decay_factor", cfg.probe.decay_factor, where, issues);
            get_field(p, "momentum", cfg.probe.momentum, where, issues);
            get_field(p, "lr_grid", cfg.probe.lr_grid, where, issues);
            get_field(p, "batch_grid", cfg.probe.batch_grid, where, issues);
            get_field(p, "wd_grid", cfg.probe.wd_grid, where, issues);
            get_field(p, "val_fraction", cfg.probe.val_fraction, where, issues);
        }
    }
    try {
        cfg.probe.validate();
    } catch (const ConfigError& e) {
        issues.push_back(std::string("config.probe: ") + e.what());
    }

    if (j.contains("episodes")) {
        const json& e = j.at("episodes");
        const std::string where = "config.episodes";
        if (!e.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(e, where, {"ways", "shots", "queries", "episodes"}, issues);
            get_field(e, "ways", cfg.episodes.ways, where, issues);
            get_field(e, "shots", cfg.episodes.shots, where, issues);
            get_field(e, "queries", cfg.episodes.queries, where, issues);
            get_field(e, "episodes", cfg.episodes.episodes, where, issues);
        }
    }
    try {
        cfg.episodes.validate();
    } catch (const ConfigError& e) {
        issues.push_back(std::string("config.episodes: ") + e.what());
    }
    if (std::find(cfg.protocols.begin(), cfg.protocols.end(), EvalProtocol::FewShot) !=
        cfg.protocols.end()) {
        for (const DomainSpec& t : cfg.targets) {
            if (t.num_classes < cfg.episodes.ways) {
                issues.push_back("config.targets: domain '" + t.id + "' has " +
                                 std::to_string(t.num_classes) + " classes, fewer than " +
                                 std::to_string(cfg.episodes.ways) + "-way episodes need");
            }
        }
    }

    cfg.analyses = kAnalysisKinds;
    if (j.contains("analyses")) {
        cfg.analyses.clear();
        const json& a = j.at("analyses");
        if (!a.is_array()) {
            issues.push_back("config.analyses must be an array");
        } else {
            for (const json& e : a) {
                const std::string name = e.is_string() ? e.get<std::string>() : "";
                if (std::find(kAnalysisKinds.begin(), kAnalysisKinds.end(), name) ==
                    kAnalysisKinds.end()) {
                    issues.push_back("config.analyses: unknown analysis '" + name + "'");
                } else {
                    cfg.analyses.push_back(name);
                }
            }
        }
        if (cfg.analyses.empty()) issues.push_back("config.analyses must list at least one analysis");
    }

    if (j.contains("pgd")) {
        const json& p = j.at("pgd");
        const std::string where = "config.pgd";
        if (!p.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(p, where, {"epsilons", "steps"}, issues);
            get_field(p, "epsilons", cfg.pgd_epsilons, where, issues);
            get_field(p, "steps", cfg.pgd_steps, where, issues);
        }
    }
    for (double e : cfg.pgd_epsilons) {
        if (e < 0.0) {
            issues.push_back("config.pgd.epsilons must all be >= 0");
            break;
        }
    }
    if (cfg.pgd_epsilons.empty()) issues.push_back("config.pgd.epsilons must be non-empty");
    if (cfg.pgd_steps < 1) issues.push_back("config.pgd.steps must be >= 1");

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        const std::string where = "config.eval";
        if (!e.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(e, where, {"epoch", "sweep"}, issues);
            get_field(e, "epoch", cfg.eval_epoch, where, issues);
            get_field(e, "sweep", cfg.eval_sweep, where, issues);
        }
    }
    if (cfg.eval_epoch < -1) issues.push_back("config.eval.epoch must be >= -1");

    if (j.contains("ablate")) {
        const json& a = j.at("ablate");
        const std::string where = "config.ablate";
        if (!a.is_object()) {
            issues.push_back(where + " must be an object");
        } else {
            check_keys(a, where, {"alpha", "queue_size", "augmentation", "epochs"}, issues);
            get_field(a, "alpha", cfg.ablate.alpha, where, issues);
            get_field(a, "queue_size", cfg.ablate.queue_size, where, issues);
            get_field(a, "augmentation", cfg.ablate.augmentation, where, issues);
            get_field(a, "epochs", cfg.ablate.epochs, where, issues);
        }
        for (double v : cfg.ablate.alpha) {
            if (v < 0.0) issues.push_back(where + ".alpha values must be >= 0");
        }
        for (int v : cfg.ablate.queue_size) {
            if (v < 1) issues.push_back(where + ".queue_size values must be >= 1");
        }
        for (const std::string& v : cfg.ablate.augmentation) {
            if (!valid_augmentation(v)) {
                issues.push_back(where + ".augmentation: unknown policy '" + v + "'");
            }
        }
        for (int v : cfg.ablate.epochs) {
            if (v < 0) issues.push_back(where + ".epochs values must be >= 0");
        }
    }

    if (!issues.empty()) {
        std::string msg = "config invalid: ";
        for (std::size_t i = 0; i < issues.size(); ++i) {
            if (i) msg += "; ";
            msg += issues[i];
        }
        throw ConfigError(msg);
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_config(j);
}

namespace {

json domain_to_json(const DomainSpec& spec) {
    return json{{"preset", spec.id},
                {"train_count", spec.train_count},
                {"val_count", spec.val_count},
                {"test_count", spec.test_count},
                {"seed", spec.seed}};
}

}  // namespace

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["experiment"] = cfg.experiment;
    j["seeds"] = cfg.seeds;
    json objs = json::array();
    for (Objective o : cfg.objectives) objs.push_back(objective_name(o));
    j["objectives"] = objs;
    j["model"] = {
        {"tau", cfg.model.tau},
        {"momentum", cfg.model.momentum},
        {"alpha", cfg.model.alpha},
        {"queue_capacity", cfg.model.queue_capacity},
        {"proj_hidden", cfg.model.proj_hidden},
        {"embed_dim", cfg.model.embed_dim},
        {"supcon_sum_mode", cfg.model.supcon_sum_mode == SupConSumMode::Mean ? "mean" : "sum"},
        {"supcon_batch_keys", cfg.model.supcon_batch_keys},
        {"encoder",
         {{"input_dim", cfg.model.encoder.input_dim}, {"stage_widths", cfg.model.encoder.stage_widths}}},
    };
    j["source"] = domain_to_json(cfg.source);
    json targets = json::array();
    for (const DomainSpec& t : cfg.targets) targets.push_back(domain_to_json(t));
    j["targets"] = targets;
    json protos = json::array();
    for (EvalProtocol p : cfg.protocols) protos.push_back(protocol_name(p));
    j["protocols"] = protos;
    j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                     {"lr", cfg.pretrain.lr},
                     {"warmup_epochs", cfg.pretrain.warmup_epochs},
                     {"batch_size", cfg.pretrain.batch_size},
                     {"momentum", cfg.pretrain.momentum},
                     {"weight_decay", cfg.pretrain.weight_decay},
                     {"checkpoint_interval", cfg.pretrain.checkpoint_interval},
                     {"augmentation", cfg.pretrain.augmentation}};
    j["probe"] = {{"epochs", cfg.probe.epochs},
                  {"milestones", cfg.probe.milestones},
                  {"decay_factor", cfg.probe.decay_factor},
                  {"momentum", cfg.probe.momentum},
                  {"lr_grid", cfg.probe.lr_grid},
                  {"batch_grid", cfg.probe.batch_grid},
                  {"wd_grid", cfg.probe.wd_grid},
                  {"val_fraction", cfg.probe.val_fraction}};
    j["episodes"] = {{"ways", cfg.episodes.ways},
                     {"shots", cfg.episodes.shots},
                     {"queries", cfg.episodes.queries},
                     {"episodes", cfg.episodes.episodes}};
    j["analyses"] = cfg.analyses;
    j["pgd"] = {{"epsilons", cfg.pgd_epsilons}, {"steps", cfg.pgd_steps}};
    j["eval"] = {{"epoch", cfg.eval_epoch}, {"sweep", cfg.eval_sweep}};
    j["ablate"] = {{"alpha", cfg.ablate.alpha},
                   {"queue_size", cfg.ablate.queue_size},
                   {"augmentation", cfg.ablate.augmentation},
                   {"epochs", cfg.ablate.epochs}};
    j["out"] = cfg.out_dir;
    return j;
}

std::string ExperimentConfig::records_path() const { return out_dir + "/records.jsonl"; }

std::string ExperimentConfig::checkpoints_dir(const std::string& method, std::uint64_t seed) const {
    return out_dir + "/checkpoints/" + method + "/seed" + std::to_string(seed);
}

std::string ExperimentConfig::report_dir() const { return out_dir + "/report"; }

std::string ExperimentConfig::analysis_dir() const { return out_dir + "/analysis"; }

int thread_cap() {
    const char* env = std::getenv("LAB_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) return 1;
    return static_cast<int>(std::min<long>(v, 64));
}

namespace {

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out.is_open()) throw IoError("cannot open '" + path + "' for writing");
    out << content;
    if (!out.good()) throw IoError("write to '" + path + "' failed");
}

void prepare_out(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    write_text_file(cfg.out_dir + "/config.json", config_to_json(cfg).dump(2) + "\n");
}

// Runs fn(0..n-1), fanning out up to LAB_THREADS workers. The lowest-index
// failure wins so reruns surface the same error.
void parallel_tasks(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const int cap = static_cast<int>(std::min<std::size_t>(thread_cap(), n));
    if (cap <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t err_index = n;
    std::exception_ptr err;
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (i < err_index) {
                    err_index = i;
                    err = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(cap));
    for (int t = 0; t < cap; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Pretraining core, shared by cmd_pretrain and cmd_ablate.

struct PretrainRun {
    std::string method;
    ModelConfig model;
    PretrainConfig pre;
    std::uint64_t seed;
};

void run_pretrain_one(const ExperimentConfig& cfg, const PretrainRun& run, RecordStore& store) {
    const Dataset source = generate_domain(cfg.source);
    const Dataset train = source.subset(Split::Train);
    Rng root(run.seed);
    Rng init = root.fork(kInitSalt);
    ModelState state(run.model, init);
    OptimizerState opt(run.pre.lr, run.pre.momentum, run.pre.weight_decay);
    TrainLoopConfig loop;
    loop.batch_size = run.pre.batch_size;
    loop.policy = policy_by_name(run.pre.augmentation);
    Rng train_rng = root.fork(kTrainSalt);

    const std::string dir = cfg.checkpoints_dir(run.method, run.seed);
    fs::create_directories(dir);
    auto save = [&](int epoch) {
        CheckpointMeta meta;
        meta.epoch = epoch;
        meta.rng_states["train"] = train_rng.state();
        const std::vector<Tensor>& vel = opt.velocities();
        for (std::size_t i = 0; i < vel.size(); ++i) {
            meta.velocities["p" + std::to_string(i)] = vel[i];
        }
        save_checkpoint(state, meta, dir + "/checkpoint_epoch_" + std::to_string(epoch) + ".json");
    };

    if (run.pre.epochs == 0) {
        save(0);
        return;
    }
    const int warmup = std::min(run.pre.warmup_epochs, run.pre.epochs);
    const Schedule sched = Schedule::cosine_with_warmup(run.pre.lr, run.pre.epochs, warmup);
    const Objective obj = run.model.objective;
    for (int e = 0; e < run.pre.epochs; ++e) {
        const EpochMetrics m = train_epoch(state, train, opt, sched, e, loop, train_rng);
        auto rec = [&](const char* metric, double v) {
            store.upsert({cfg.experiment, run.method, "pretrain", cfg.source.id, run.seed, e + 1,
                          metric, v, 0});
        };
        rec("loss_total", m.mean_total);
        if (obj == Objective::CE || obj == Objective::CESelfSupCon) rec("loss_ce", m.mean_ce);
        if (obj == Objective::SelfSupCon || objective_is_joint(obj)) {
            rec("loss_selfsup", m.mean_selfsup);
        }
        if (obj == Objective::SupCon || obj == Objective::SupConSelfSupCon) {
            rec("loss_supcon", m.mean_supcon);
        }
        const bool last = e + 1 == run.pre.epochs;
        if (last || (run.pre.checkpoint_interval > 0 && (e + 1) % run.pre.checkpoint_interval == 0)) {
            save(e + 1);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint selection.

int checkpoint_epoch_of(const std::string& filename) {
    const std::string prefix = "checkpoint_epoch_";
    const std::string suffix = ".json";
    if (filename.size() <= prefix.size() + suffix.size()) return -1;
    if (filename.compare(0, prefix.size(), prefix) != 0) return -1;
    if (filename.compare(filename.size() - suffix.size(), suffix.size(), suffix) != 0) return -1;
    const std::string digits =
        filename.substr(prefix.size(), filename.size() - prefix.size() - suffix.size());
    if (digits.empty()) return -1;
    for (char c : digits) {
        if (c < '0' || c > '9') return -1;
    }
    return std::stoi(digits);
}

std::string locate_checkpoint(const ExperimentConfig& cfg, const std::string& method,
                              std::uint64_t seed) {
    const std::string dir = cfg.checkpoints_dir(method, seed);
    if (!fs::is_directory(dir)) {
        throw IoError("checkpoint directory '" + dir + "' does not exist; run pretrain first");
    }
    if (cfg.eval_epoch >= 0) {
        const std::string path =
            dir + "/checkpoint_epoch_" + std::to_string(cfg.eval_epoch) + ".json";
        if (!fs::exists(path)) throw IoError("missing checkpoint '" + path + "'");
        return path;
    }
    int best = -1;
    for (const fs::directory_entry& entry : fs::directory_iterator(dir)) {
        best = std::max(best, checkpoint_epoch_of(entry.path().filename().string()));
    }
    if (best < 0) throw IoError("no checkpoints under '" + dir + "'");
    return dir + "/checkpoint_epoch_" + std::to_string(best) + ".json";
}

std::vector<Dataset> eval_domains(const ExperimentConfig& cfg) {
    std::vector<Dataset> doms;
    doms.push_back(generate_domain(cfg.source));
    for (const DomainSpec& t : cfg.targets) doms.push_back(generate_domain(t));
    return doms;
}

std::uint64_t protocol_salt(EvalProtocol p) {
    switch (p) {
        case EvalProtocol::Probe: return kProbeSalt;
        case EvalProtocol::Finetune: return kFinetuneSalt;
        case EvalProtocol::FewShot: return kFewshotSalt;
    }
    throw ContractError("unknown protocol");
}

// ---------------------------------------------------------------------------
// Probe heads for the analysis commands: trained on standardized features at
// the paper's safe cell, then folded into raw feature space so pixel-space
// attacks see one affine map.

struct FoldedHead {
    Tensor w;
    std::vector<double> b;
};

FoldedHead probe_head_folded(const ModelState& state, const Dataset& domain,
                             const ProbeConfig& probe, Rng rng) {
    FeatureSet train = extract_features(state, domain, Split::Train);
    const FeatureStandardizer st = FeatureStandardizer::fit(train.x);
    const detail::LinearHead head = detail::train_linear_head(
        st.apply(train.x), train.y, train.num_classes, probe, {0.01, 128, 0.0}, rng);
    const int k = head.w->rows();
    const int d = head.w->cols();
    FoldedHead out;
    out.w = Tensor({k, d});
    out.b.assign(static_cast<std::size_t>(k), 0.0);
    for (int r = 0; r < k; ++r) {
        double shift = 0.0;
        for (int c = 0; c < d; ++c) {
            out.w.at(r, c) = head.w->at(r, c) * st.inv_std[static_cast<std::size_t>(c)];
            shift += out.w.at(r, c) * st.mean[static_cast<std::size_t>(c)];
        }
        out.b[static_cast<std::size_t>(r)] = head.b->at(r) - shift;
    }
    return out;
}

Tensor head_logits_raw(const ModelState& state, const FoldedHead& head, const Tensor& images) {
    const Tensor feats = *state.features(nullptr, constant(images));
    Tensor logits({feats.rows(), head.w.rows()});
    for (int r = 0; r < feats.rows(); ++r) {
        for (int k = 0; k < head.w.rows(); ++k) {
            double z = head.b[static_cast<std::size_t>(k)];
            for (int c = 0; c < head.w.cols(); ++c) z += head.w.at(k, c) * feats.at(r, c);
            logits.at(r, k) = z;
        }
    }
    return logits;
}

// ---------------------------------------------------------------------------
// Minimal SVG line charts. Fixed geometry, %.2f coordinates, no timestamps.

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') {
            out += "&amp;";
        } else if (c == '<') {
            out += "&lt;";
        } else if (c == '>') {
            out += "&gt;";
        } else {
            out += c;
        }
    }
    return out;
}

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;  // x ascending
};

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series) {
    const double W = 640, H = 400;
    const double L = 64, R = 620, T = 40, B = 352;
    double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
    for (const Series& s : series) {
        for (const auto& [x, y] : s.points) {
            x_min = std::min(x_min, x);
            x_max = std::max(x_max, x);
            y_min = std::min(y_min, y);
            y_max = std::max(y_max, y);
        }
    }
    if (x_min > x_max) {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min < 1e-12) {
        x_min -= 0.5;
        x_max += 0.5;
    }
    const double y_pad = std::max(1e-3, (y_max - y_min) * 0.08);
    y_min -= y_pad;
    y_max += y_pad;
    auto px = [&](double x) { return L + (x - x_min) / (x_max - x_min) * (R - L); };
    auto py = [&](double y) { return B - (y - y_min) / (y_max - y_min) * (B - T); };

    static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                     "#8c564b", "#17becf", "#7f7f7f"};
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << (W / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
        << xml_escape(title) << "</text>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << B << "\" x2=\"" << R << "\" y2=\"" << B
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << B
        << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double fx = x_min + (x_max - x_min) * t / 4.0;
        const double fy = y_min + (y_max - y_min) * t / 4.0;
        svg << "<line x1=\"" << fmt_fixed(px(fx), 2) << "\" y1=\"" << B << "\" x2=\""
            << fmt_fixed(px(fx), 2) << "\" y2=\"" << (B + 5) << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << fmt_fixed(px(fx), 2) << "\" y=\"" << (B + 18)
            << "\" text-anchor=\"middle\">" << fmt_g(fx) << "</text>\n";
        svg << "<line x1=\"" << (L - 5) << "\" y1=\"" << fmt_fixed(py(fy), 2) << "\" x2=\"" << L
            << "\" y2=\"" << fmt_fixed(py(fy), 2) << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << (L - 8) << "\" y=\"" << fmt_fixed(py(fy) + 4, 2)
            << "\" text-anchor=\"end\">" << fmt_g(fy) << "</text>\n";
    }
    svg << "<text x=\"" << ((L + R) / 2) << "\" y=\"" << (H - 8) << "\" text-anchor=\"middle\">"
        << xml_escape(x_label) << "</text>\n";
    svg << "<text x=\"16\" y=\"" << ((T + B) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << ((T + B) / 2) << ")\">" << xml_escape(y_label) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kPalette[i % 8];
        std::ostringstream pts;
        for (const auto& [x, y] : series[i].points) {
            pts << fmt_fixed(px(x), 2) << "," << fmt_fixed(py(y), 2) << " ";
        }
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
            << pts.str() << "\"/>\n";
        for (const auto& [x, y] : series[i].points) {
            svg << "<circle cx=\"" << fmt_fixed(px(x), 2) << "\" cy=\"" << fmt_fixed(py(y), 2)
                << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        svg << "<text x=\"" << (R - 4) << "\" y=\"" << (T + 14 + 16 * static_cast<double>(i))
            << "\" text-anchor=\"end\" fill=\"" << color << "\">" << xml_escape(series[i].name)
            << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace

// ---------------------------------------------------------------------------

void cmd_pretrain(const ExperimentConfig& cfg) {
    prepare_out(cfg);
    RecordStore store(cfg.records_path());
    std::vector<PretrainRun> runs;
    for (Objective o : cfg.objectives) {
        for (std::uint64_t seed : cfg.seeds) {
            PretrainRun run;
            run.method = objective_name(o);
            run.model = cfg.model;
            run.model.objective = o;
            run.pre = cfg.pretrain;
            run.seed = seed;
            runs.push_back(run);
        }
    }
    parallel_tasks(runs.size(), [&](std::size_t i) {
        run_pretrain_one(cfg, runs[i], store);
        std::ostringstream line;
        line << "[pretrain] method=" << runs[i].method << " seed=" << runs[i].seed
             << " epochs=" << runs[i].pre.epochs << " done\n";
        std::cerr << line.str();
    });
    store.flush();
}

void cmd_eval(const ExperimentConfig& cfg, const std::vector<EvalProtocol>& protocols) {
    if (protocols.empty()) throw ConfigError("eval needs at least one protocol");
    prepare_out(cfg);
    RecordStore store(cfg.records_path());
    const std::vector<Dataset> doms = eval_domains(cfg);
    const int rec_epoch = cfg.eval_epoch >= 0 ? cfg.eval_epoch : -1;

    struct EvalTask {
        std::string method;
        std::uint64_t seed;
    };
    std::vector<EvalTask> tasks;
    for (Objective o : cfg.objectives) {
        for (std::uint64_t seed : cfg.seeds) tasks.push_back({objective_name(o), seed});
    }

    parallel_tasks(tasks.size(), [&](std::size_t ti) {
        const EvalTask& task = tasks[ti];
        const std::string path = locate_checkpoint(cfg, task.method, task.seed);
        const LoadedCheckpoint ckpt = load_checkpoint(path);
        const Rng root(task.seed);
        auto rec = [&](const std::string& protocol, const std::string& domain, int epoch,
                       const std::string& metric, double value) {
            store.upsert({cfg.experiment, task.method, protocol, domain, task.seed, epoch, metric,
                          value, 0});
        };
        for (EvalProtocol proto : protocols) {
            for (std::size_t di = 0; di < doms.size(); ++di) {
                const Dataset& dom = doms[di];
                Rng rng = root.fork(protocol_salt(proto) + di);
                if (proto == EvalProtocol::Probe) {
                    const FeatureSet train = extract_features(ckpt.state, dom, Split::Train);
                    const FeatureSet test = extract_features(ckpt.state, dom, Split::Test);
                    const ProbeResult pr = linear_probe(train, test, cfg.probe, rng);
                    rec("probe", dom.domain_id, rec_epoch, "accuracy", pr.test_accuracy);
                    rec("probe", dom.domain_id, rec_epoch, "val_accuracy", pr.best_val_accuracy);
                } else if (proto == EvalProtocol::Finetune) {
                    const ProbeResult fr = finetune(ckpt.state, dom, cfg.probe, rng);
                    rec("finetune", dom.domain_id, rec_epoch, "accuracy", fr.test_accuracy);
                    rec("finetune", dom.domain_id, rec_epoch, "val_accuracy", fr.best_val_accuracy);
                } else {
                    const FewShotResult fsr =
                        fewshot_eval(ckpt.state, dom.subset(Split::Test), cfg.episodes, rng);
                    rec("fewshot", dom.domain_id, rec_epoch, "accuracy", fsr.mean_accuracy);
                    rec("fewshot", dom.domain_id, rec_epoch, "ci95", fsr.ci95);
                }
            }
            if (cfg.eval_sweep) {
                Rng sweep_rng = root.fork(kSweepSalt + static_cast<std::uint64_t>(proto));
                const SweepResult sw =
                    checkpoint_sweep_eval(cfg.checkpoints_dir(task.method, task.seed), proto, doms,
                                          cfg.probe, cfg.episodes, sweep_rng);
                for (const SweepPoint& pt : sw.points) {
                    rec(protocol_name(proto), pt.domain, pt.epoch, "accuracy", pt.value);
                    if (proto == EvalProtocol::FewShot) {
                        rec(protocol_name(proto), pt.domain, pt.epoch, "ci95", pt.ci95);
                    }
                }
            }
        }
        std::ostringstream line;
        line << "[eval] method=" << task.method << " seed=" << task.seed << " done\n";
        std::cerr << line.str();
    });
    store.flush();
}

void cmd_analyze(const ExperimentConfig& cfg, const std::vector<std::string>& analyses) {
    if (analyses.empty()) throw ConfigError("analyze needs at least one analysis");
    for (const std::string& a : analyses) {
        if (std::find(kAnalysisKinds.begin(), kAnalysisKinds.end(), a) == kAnalysisKinds.end()) {
            throw ConfigError("unknown analysis '" + a + "'");
        }
    }
    prepare_out(cfg);
    fs::create_directories(cfg.analysis_dir());
    RecordStore store(cfg.records_path());
    const std::uint64_t seed = cfg.seeds.front();
    const Rng root(seed);
    const Dataset source = generate_domain(cfg.source);
    const Dataset test = source.subset(Split::Test);

    std::vector<std::string> methods;
    std::vector<LoadedCheckpoint> models;
    for (Objective o : cfg.objectives) {
        methods.push_back(objective_name(o));
        models.push_back(load_checkpoint(locate_checkpoint(cfg, methods.back(), seed)));
    }
    auto rec = [&](const std::string& method, const std::string& protocol,
                   const std::string& metric, double value) {
        store.upsert({cfg.experiment, method, protocol, source.domain_id, seed, -1, metric, value, 0});
    };
    auto folded = [&](std::size_t mi) {
        return probe_head_folded(models[mi].state, source, cfg.probe, root.fork(kHeadSalt + mi));
    };

    for (const std::string& kind : analyses) {
        if (kind == "cka") {
            if (models.size() < 2) {
                throw ConfigError("across-model CKA requires >= 2 method checkpoints; config lists " +
                                  std::to_string(models.size()));
            }
            std::vector<NamedModel> named;
            for (std::size_t i = 0; i < models.size(); ++i) {
                named.push_back({methods[i], &models[i].state});
            }
            const CkaGrids grids = cka_stage_grid(named, test);
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                std::ostringstream csv;
                csv << "stage";
                for (int s = 0; s < grids.stages; ++s) csv << ",s" << s;
                csv << "\n";
                for (int a = 0; a < grids.stages; ++a) {
                    csv << "s" << a;
                    for (int b = 0; b < grids.stages; ++b) {
                        csv << "," << fmt_full(grids.within[mi].at(a, b));
                    }
                    csv << "\n";
                }
                write_text_file(cfg.analysis_dir() + "/cka_within_" + methods[mi] + ".csv",
                                csv.str());
            }
            for (int s = 0; s < grids.stages; ++s) {
                std::ostringstream csv;
                csv << "model";
                for (const std::string& m : methods) csv << "," << m;
                csv << "\n";
                for (std::size_t a = 0; a < methods.size(); ++a) {
                    csv << methods[a];
                    for (std::size_t b = 0; b < methods.size(); ++b) {
                        csv << ","
                            << fmt_full(grids.across[static_cast<std::size_t>(s)].at(
                                   static_cast<int>(a), static_cast<int>(b)));
                    }
                    csv << "\n";
                }
                write_text_file(cfg.analysis_dir() + "/cka_across_stage" + std::to_string(s) +
                                    ".csv",
                                csv.str());
            }
            for (std::size_t a = 0; a < methods.size(); ++a) {
                for (std::size_t b = a + 1; b < methods.size(); ++b) {
                    rec(methods[a], "cka", "cka_final_vs_" + methods[b],
                        grids.across.back().at(static_cast<int>(a), static_cast<int>(b)));
                }
            }
        } else if (kind == "calibration") {
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                const FoldedHead head = folded(mi);
                const Tensor logits = head_logits_raw(models[mi].state, head, test.images);
                const CalibrationResult cal = calibration(logits, test.labels);
                rec(methods[mi], "calibration", "ece", cal.ece);
                rec(methods[mi], "calibration", "nll", cal.nll);
                std::ostringstream csv;
                csv << "bin,count,mean_confidence,accuracy\n";
                for (int b = 0; b < ReliabilityBins::kBins; ++b) {
                    csv << b << "," << cal.bins.count[static_cast<std::size_t>(b)] << ","
                        << fmt_full(cal.bins.mean_confidence[static_cast<std::size_t>(b)]) << ","
                        << fmt_full(cal.bins.accuracy[static_cast<std::size_t>(b)]) << "\n";
                }
                write_text_file(cfg.analysis_dir() + "/calibration_" + methods[mi] + ".csv",
                                csv.str());
            }
        } else if (kind == "separation") {
            std::ostringstream csv;
            csv << "method,r_intra,r_inter\n";
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                const Tensor feats =
                    *models[mi].state.features(nullptr, constant(test.images));
                const SeparationResult sep = class_separation(feats, test.labels);
                rec(methods[mi], "separation", "r_intra", sep.r_intra);
                rec(methods[mi], "separation", "r_inter", sep.r_inter);
                csv << methods[mi] << "," << fmt_full(sep.r_intra) << "," << fmt_full(sep.r_inter)
                    << "\n";
            }
            write_text_file(cfg.analysis_dir() + "/separation.csv", csv.str());
        } else if (kind == "corruption") {
            const std::vector<CorruptionType> types = {
                CorruptionType::GaussianNoise, CorruptionType::Blur, CorruptionType::Contrast,
                CorruptionType::Pixelate};
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                const FoldedHead head = folded(mi);
                const CorruptionSweepResult sweep =
                    corruption_sweep(models[mi].state, head.w, head.b, test, types);
                rec(methods[mi], "corruption", "mce", sweep.mce);
                rec(methods[mi], "corruption", "clean_error", sweep.clean_error);
                std::ostringstream csv;
                csv << "type,severity,error\n";
                for (const CorruptionCell& cell : sweep.cells) {
                    csv << corruption_type_name(cell.type) << "," << cell.severity << ","
                        << fmt_full(cell.error) << "\n";
                }
                write_text_file(cfg.analysis_dir() + "/corruption_" + methods[mi] + ".csv",
                                csv.str());
            }
        } else if (kind == "pgd") {
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                const FoldedHead head = folded(mi);
                const PgdResult res = pgd_attack(models[mi].state, head.w, head.b, test.images,
                                                 test.labels, cfg.pgd_epsilons, cfg.pgd_steps);
                std::ostringstream csv;
                csv << "epsilon,accuracy\n";
                for (std::size_t i = 0; i < res.epsilons.size(); ++i) {
                    csv << fmt_full(res.epsilons[i]) << "," << fmt_full(res.accuracies[i]) << "\n";
                    rec(methods[mi], "pgd", "pgd_accuracy@" + fmt_g(res.epsilons[i]),
                        res.accuracies[i]);
                }
                write_text_file(cfg.analysis_dir() + "/pgd_" + methods[mi] + ".csv", csv.str());
            }
        } else if (kind == "export") {
            std::vector<Dataset> doms = eval_domains(cfg);
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                for (const Dataset& dom : doms) {
                    export_embeddings(models[mi].state, dom,
                                      cfg.analysis_dir() + "/embeddings_" + methods[mi] + "_" +
                                          dom.domain_id);
                }
            }
        }
        std::cerr << "[analyze] " << kind << " done\n";
    }
    store.flush();
}

namespace {

// ---------------------------------------------------------------------------
// Report helpers.

int method_rank(const std::string& method) {
    static const std::vector<std::string> kOrder = {"CE", "SelfSupCon", "SupCon", "CE+SelfSupCon",
                                                    "SupCon+SelfSupCon"};
    for (std::size_t i = 0; i < kOrder.size(); ++i) {
        if (method == kOrder[i]) return static_cast<int>(i);
    }
    return static_cast<int>(kOrder.size());
}

struct MeanStd {
    int n = 0;
    double mean = 0.0;
    double stdev = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
    MeanStd out;
    out.n = static_cast<int>(v.size());
    if (v.empty()) return out;
    for (double x : v) out.mean += x;
    out.mean /= out.n;
    if (out.n > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - out.mean) * (x - out.mean);
        out.stdev = std::sqrt(ss / (out.n - 1));
    }
    return out;
}

std::vector<std::string> ordered_domains(const ExperimentConfig& cfg,
                                         const std::set<std::string>& present) {
    std::vector<std::string> out;
    if (present.count(cfg.source.id)) out.push_back(cfg.source.id);
    for (const DomainSpec& t : cfg.targets) {
        if (present.count(t.id) && std::find(out.begin(), out.end(), t.id) == out.end()) {
            out.push_back(t.id);
        }
    }
    for (const std::string& d : present) {
        if (std::find(out.begin(), out.end(), d) == out.end()) out.push_back(d);
    }
    return out;
}

std::vector<std::string> ordered_methods(const std::set<std::string>& present) {
    std::vector<std::string> out(present.begin(), present.end());
    std::sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) {
        const int ra = method_rank(a), rb = method_rank(b);
        return ra != rb ? ra < rb : a < b;
    });
    return out;
}

// Mean over seeds, then over transfer domains (every domain except the
// source; all domains when nothing else exists), per curve x-value.
std::map<double, MeanStd> curve_points(const std::vector<MetricRecord>& recs,
                                       const std::string& source_id,
                                       const std::function<double(const MetricRecord&)>& x_of) {
    std::set<std::string> domains;
    for (const MetricRecord& r : recs) domains.insert(r.domain);
    const bool drop_source = domains.size() > 1 && domains.count(source_id) > 0;
    std::map<double, std::vector<double>> by_x;
    for (const MetricRecord& r : recs) {
        if (drop_source && r.domain == source_id) continue;
        by_x[x_of(r)].push_back(r.value);
    }
    std::map<double, MeanStd> out;
    for (const auto& [x, values] : by_x) out[x] = mean_std(values);
    return out;
}

void write_curve(const std::string& csv_path, const std::string& svg_path,
                 const std::string& title, const std::string& x_label,
                 const std::map<double, MeanStd>& points) {
    std::ostringstream csv;
    csv << x_label << ",n,mean,std\n";
    Series series;
    series.name = "mean accuracy";
    for (const auto& [x, ms] : points) {
        csv << fmt_g(x) << "," << ms.n << "," << fmt_full(ms.mean) << "," << fmt_full(ms.stdev)
            << "\n";
        series.points.push_back({x, ms.mean});
    }
    write_text_file(csv_path, csv.str());
    write_text_file(svg_path, line_chart_svg(title, x_label, "accuracy", {series}));
}

// The value of "@axis=value" inside a method tag, NaN when absent.
double tag_value(const std::string& method, const std::string& axis) {
    const std::string needle = "@" + axis + "=";
    const std::size_t pos = method.find(needle);
    if (pos == std::string::npos) return std::numeric_limits<double>::quiet_NaN();
    return std::strtod(method.c_str() + pos + needle.size(), nullptr);
}

}  // namespace

void cmd_report(const ExperimentConfig& cfg) {
    const RecordStore store(cfg.records_path());
    if (store.size() == 0) {
        throw IoError("record store '" + cfg.records_path() + "' is empty; run eval first");
    }
    prepare_out(cfg);
    fs::create_directories(cfg.report_dir());
    const std::vector<MetricRecord> recs = store.all();

    std::ostringstream txt;
    std::ostringstream csv;
    txt << "experiment: " << cfg.experiment << "\n";
    csv << "protocol,method,domain,n_seeds,mean,std\n";
    for (const std::string proto : {"probe", "finetune", "fewshot"}) {
        std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
        std::set<std::string> methods, domains;
        for (const MetricRecord& r : recs) {
            if (r.protocol != proto || r.metric != "accuracy" || r.epoch != -1) continue;
            if (r.method.find('@') != std::string::npos) continue;
            cells[{r.method, r.domain}].push_back(r.value);
            methods.insert(r.method);
            domains.insert(r.domain);
        }
        if (cells.empty()) continue;
        const std::vector<std::string> mrows = ordered_methods(methods);
        const std::vector<std::string> dcols = ordered_domains(cfg, domains);

        txt << "\n== " << proto << " accuracy (mean +/- std over seeds) ==\n";
        std::size_t name_w = 6;
        for (const std::string& m : mrows) name_w = std::max(name_w, m.size());
        auto col_w = [](const std::string& d) { return std::max<std::size_t>(d.size(), 17) + 2; };
        txt << std::string(name_w + 2, ' ');
        for (const std::string& d : dcols) txt << d << std::string(col_w(d) - d.size(), ' ');
        txt << "| grand\n";
        for (const std::string& m : mrows) {
            txt << m << std::string(name_w + 2 - m.size(), ' ');
            double grand = 0.0;
            int grand_n = 0;
            for (const std::string& d : dcols) {
                const auto it = cells.find({m, d});
                std::string cell = "-";
                if (it != cells.end()) {
                    const MeanStd ms = mean_std(it->second);
                    cell = fmt_fixed(ms.mean, 4) + " +/- " + fmt_fixed(ms.stdev, 4);
                    grand += ms.mean;
                    ++grand_n;
                    csv << proto << "," << m << "," << d << "," << ms.n << "," << fmt_full(ms.mean)
                        << "," << fmt_full(ms.stdev) << "\n";
                }
                txt << cell << std::string(col_w(d) - cell.size(), ' ');
            }
            txt << "| " << (grand_n > 0 ? fmt_fixed(grand / grand_n, 4) : "-") << "\n";
        }
    }
    write_text_file(cfg.report_dir() + "/summary.txt", txt.str());
    write_text_file(cfg.report_dir() + "/summary.csv", csv.str());

    const std::vector<MetricRecord> alpha_recs = store.where([](const MetricRecord& r) {
        return r.protocol == "probe" && r.metric == "accuracy" && r.epoch == -1 &&
               r.method.find("@alpha=") != std::string::npos;
    });
    if (!alpha_recs.empty()) {
        const auto points = curve_points(alpha_recs, cfg.source.id, [](const MetricRecord& r) {
            return tag_value(r.method, "alpha");
        });
        write_curve(cfg.report_dir() + "/alpha_curve.csv", cfg.report_dir() + "/alpha_curve.svg",
                    "transfer accuracy vs alpha", "alpha", points);
    }

    std::vector<MetricRecord> epoch_recs = store.where([](const MetricRecord& r) {
        return r.protocol == "probe" && r.metric == "accuracy" && r.epoch != -1 &&
               r.method.find('@') == std::string::npos;
    });
    bool from_tags = false;
    if (epoch_recs.empty()) {
        epoch_recs = store.where([](const MetricRecord& r) {
            return r.protocol == "probe" && r.metric == "accuracy" && r.epoch == -1 &&
                   r.method.find("@epochs=") != std::string::npos;
        });
        from_tags = true;
    }
    if (!epoch_recs.empty()) {
        const auto points =
            curve_points(epoch_recs, cfg.source.id, [from_tags](const MetricRecord& r) {
                return from_tags ? tag_value(r.method, "epochs") : static_cast<double>(r.epoch);
            });
        write_curve(cfg.report_dir() + "/epoch_curve.csv", cfg.report_dir() + "/epoch_curve.svg",
                    "transfer accuracy vs pretraining epochs", "epoch", points);
    }
    std::cerr << "[report] " << recs.size() << " records -> " << cfg.report_dir() << "\n";
}

void cmd_ablate(const ExperimentConfig& cfg, const std::vector<std::string>& axes) {
    if (axes.empty()) throw ConfigError("ablate needs at least one axis");
    for (const std::string& axis : axes) {
        if (std::find(kAblateAxes.begin(), kAblateAxes.end(), axis) == kAblateAxes.end()) {
            throw ConfigError("unknown ablation axis '" + axis + "'");
        }
    }
    prepare_out(cfg);
    RecordStore store(cfg.records_path());
    const std::vector<Dataset> doms = eval_domains(cfg);

    struct AblateTask {
        PretrainRun run;
    };
    std::vector<AblateTask> tasks;
    for (const std::string& axis : axes) {
        std::vector<std::string> values;
        if (axis == "alpha") {
            for (double v : cfg.ablate.alpha) values.push_back(fmt_g(v));
        } else if (axis == "queue_size") {
            for (int v : cfg.ablate.queue_size) values.push_back(std::to_string(v));
        } else if (axis == "augmentation") {
            values = cfg.ablate.augmentation;
        } else {
            for (int v : cfg.ablate.epochs) values.push_back(std::to_string(v));
        }
        if (values.empty()) {
            throw ConfigError("ablation axis '" + axis + "' has an empty grid in the config");
        }
        std::vector<Objective> objectives;
        for (Objective o : cfg.objectives) {
            if (axis == "alpha" && !objective_is_joint(o)) continue;
            if (axis == "queue_size" && !objective_uses_queue(o)) continue;
            objectives.push_back(o);
        }
        if (objectives.empty()) {
            throw ConfigError("ablation axis '" + axis +
                              "' applies to none of the configured objectives");
        }
        for (const std::string& value : values) {
            for (Objective o : objectives) {
                for (std::uint64_t seed : cfg.seeds) {
                    PretrainRun run;
                    run.method = objective_name(o) + "@" + axis + "=" + value;
                    run.model = cfg.model;
                    run.model.objective = o;
                    run.pre = cfg.pretrain;
                    run.seed = seed;
                    if (axis == "alpha") {
                        run.model.alpha = std::strtod(value.c_str(), nullptr);
                    } else if (axis == "queue_size") {
                        run.model.queue_capacity = std::stoi(value);
                    } else if (axis == "augmentation") {
                        run.pre.augmentation = value;
                    } else {
                        run.pre.epochs = std::stoi(value);
                    }
                    tasks.push_back({run});
                }
            }
        }
    }

    parallel_tasks(tasks.size(), [&](std::size_t ti) {
        const PretrainRun& run = tasks[ti].run;
        run_pretrain_one(cfg, run, store);
        const LoadedCheckpoint ckpt =
            load_checkpoint(locate_checkpoint(cfg, run.method, run.seed));
        const Rng root(run.seed);
        for (std::size_t di = 0; di < doms.size(); ++di) {
            Rng rng = root.fork(kProbeSalt + di);
            const FeatureSet train = extract_features(ckpt.state, doms[di], Split::Train);
            const FeatureSet test = extract_features(ckpt.state, doms[di], Split::Test);
            const ProbeResult pr = linear_probe(train, test, cfg.probe, rng);
            store.upsert({cfg.experiment, run.method, "probe", doms[di].domain_id, run.seed, -1,
                          "accuracy", pr.test_accuracy, 0});
        }
        std::ostringstream line;
        line << "[ablate] " << run.method << " seed=" << run.seed << " done\n";
        std::cerr << line.str();
    });
    store.flush();

    fs::create_directories(cfg.report_dir());
    for (const std::string& axis : axes) {
        const std::vector<MetricRecord> recs = store.where([&](const MetricRecord& r) {
            return r.protocol == "probe" && r.metric == "accuracy" && r.epoch == -1 &&
                   r.method.find("@" + axis + "=") != std::string::npos;
        });
        std::map<double, MeanStd> points;
        if (axis == "augmentation") {
            // Categorical axis: index positions in config order stand in for x.
            std::map<double, std::vector<double>> by_x;
            for (const MetricRecord& r : recs) {
                for (std::size_t i = 0; i < cfg.ablate.augmentation.size(); ++i) {
                    if (r.method.find("@augmentation=" + cfg.ablate.augmentation[i]) !=
                        std::string::npos) {
                        if (doms.size() == 1 || r.domain != cfg.source.id) {
                            by_x[static_cast<double>(i)].push_back(r.value);
                        }
                    }
                }
            }
            for (const auto& [x, v] : by_x) points[x] = mean_std(v);
        } else {
            points = curve_points(recs, cfg.source.id,
                                  [&](const MetricRecord& r) { return tag_value(r.method, axis); });
        }
        write_curve(cfg.report_dir() + "/ablate_" + axis + ".csv",
                    cfg.report_dir() + "/ablate_" + axis + ".svg",
                    "transfer accuracy vs " + axis, axis, points);
    }
}

int run(int argc, const char* const* argv) {
    CLI::App app{"contrastive representation transfer lab"};
    app.require_subcommand(1);
    std::string config_path;
    std::string out_override;
    std::string protocol_opt;
    std::string axis_opt;
    long long seed_override = -1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option("--seed", seed_override, "restrict the run to one seed");
        sub->add_option("--out", out_override, "output directory override");
    };
    CLI::App* sub_pretrain = app.add_subcommand("pretrain", "train source models");
    CLI::App* sub_eval = app.add_subcommand("eval", "run transfer protocols");
    sub_eval->add_option("--protocol", protocol_opt, "probe|finetune|fewshot (default: config)");
    CLI::App* sub_analyze = app.add_subcommand("analyze", "representation analyses");
    CLI::App* sub_ablate = app.add_subcommand("ablate", "axis sweeps");
    sub_ablate->add_option("--axis", axis_opt,
                           "alpha|queue_size|augmentation|epochs (default: configured grids)");
    CLI::App* sub_report = app.add_subcommand("report", "tables and curves");
    for (CLI::App* sub : {sub_pretrain, sub_eval, sub_analyze, sub_ablate, sub_report}) {
        add_common(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = load_config(config_path);
        if (seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(seed_override)};
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (sub_pretrain->parsed()) {
            cmd_pretrain(cfg);
        } else if (sub_eval->parsed()) {
            std::vector<EvalProtocol> protos = cfg.protocols;
            if (!protocol_opt.empty()) protos = {parse_protocol(protocol_opt)};
            cmd_eval(cfg, protos);
        } else if (sub_analyze->parsed()) {
            cmd_analyze(cfg, cfg.analyses);
        } else if (sub_ablate->parsed()) {
            std::vector<std::string> axes;
            if (!axis_opt.empty()) {
                axes = {axis_opt};
            } else {
                if (!cfg.ablate.alpha.empty()) axes.push_back("alpha");
                if (!cfg.ablate.queue_size.empty()) axes.push_back("queue_size");
                if (!cfg.ablate.augmentation.empty()) axes.push_back("augmentation");
                if (!cfg.ablate.epochs.empty()) axes.push_back("epochs");
                if (axes.empty()) throw ConfigError("no ablation grids configured");
            }
            cmd_ablate(cfg, axes);
        } else {
            cmd_report(cfg);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const LoadError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace lab::cli
