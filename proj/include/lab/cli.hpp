#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lab/data.hpp"
#include "lab/evaluation.hpp"
#include "lab/model.hpp"
#include "lab/records.hpp"

namespace lab::cli {

// Appendix-recipe pretraining surface. checkpoint_interval 0 keeps only the
// final checkpoint (plus epoch 0 when epochs == 0).
struct PretrainConfig {
    int epochs = 100;
    double lr = 0.01;
    int warmup_epochs = 5;
    int batch_size = 64;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int checkpoint_interval = 0;
    std::string augmentation = "weak";  // weak | strong | identity
};

struct AblateGrids {
    std::vector<double> alpha;
    std::vector<int> queue_size;
    std::vector<std::string> augmentation;
    std::vector<int> epochs;
};

struct ExperimentConfig {
    std::string experiment;
    std::vector<std::uint64_t> seeds;
    std::vector<Objective> objectives;  // method tag = objective_name
    ModelConfig model;                  // objective field is overwritten per run
    DomainSpec source;
    std::vector<DomainSpec> targets;
    std::vector<EvalProtocol> protocols;
    PretrainConfig pretrain;
    ProbeConfig probe;
    EpisodeSpec episodes;
    std::vector<std::string> analyses;  // subset of cmd_analyze kinds
    std::vector<double> pgd_epsilons = {0.0, 0.01, 0.02, 0.05, 0.1};
    int pgd_steps = 20;
    int eval_epoch = -1;     // -1 = highest checkpoint on disk
    bool eval_sweep = false;  // per-epoch probe/fewshot curve records
    AblateGrids ablate;
    std::string out_dir;

    std::string records_path() const;
    std::string checkpoints_dir(const std::string& method, std::uint64_t seed) const;
    std::string report_dir() const;
    std::string analysis_dir() const;
};

// Parse + validate. Unknown keys anywhere are violations; all violations are
// reported in a single ConfigError message.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Worker cap from LAB_THREADS (default 1; values < 1 and garbage read as 1).
int thread_cap();

// Subcommand bodies. Each throws the taxonomy errors; `run` maps them to
// process exit codes (0 ok, 2 config, 3 missing artifact, 4 numerical).
void cmd_pretrain(const ExperimentConfig& cfg);
void cmd_eval(const ExperimentConfig& cfg, const std::vector<EvalProtocol>& protocols);
void cmd_analyze(const ExperimentConfig& cfg, const std::vector<std::string>& analyses);
void cmd_ablate(const ExperimentConfig& cfg, const std::vector<std::string>& axes);
void cmd_report(const ExperimentConfig& cfg);

int run(int argc, const char* const* argv);

}  // namespace lab::cli
