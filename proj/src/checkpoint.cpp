#include "lab/checkpoint.hpp"

#include <fstream>

#include "lab/errors.hpp"

namespace lab {

using nlohmann::json;

json model_config_to_json(const ModelConfig& cfg) {
    return json{
        {"encoder",
         {{"input_dim", cfg.encoder.input_dim}, {"stage_widths", cfg.encoder.stage_widths}}},
        {"num_classes", cfg.num_classes},
        {"proj_hidden", cfg.proj_hidden},
        {"embed_dim", cfg.embed_dim},
        {"tau", cfg.tau},
        {"momentum", cfg.momentum},
        {"alpha", cfg.alpha},
        {"queue_capacity", cfg.queue_capacity},
        {"objective", objective_name(cfg.objective)},
        {"supcon_sum_mode", cfg.supcon_sum_mode == SupConSumMode::Mean ? "mean" : "sum"},
        {"supcon_batch_keys", cfg.supcon_batch_keys},
    };
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.encoder.input_dim = j.at("encoder").at("input_dim").get<int>();
    cfg.encoder.stage_widths = j.at("encoder").at("stage_widths").get<std::vector<int>>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.proj_hidden = j.at("proj_hidden").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.tau = j.at("tau").get<double>();
    cfg.momentum = j.at("momentum").get<double>();
    cfg.alpha = j.at("alpha").get<double>();
    cfg.queue_capacity = j.at("queue_capacity").get<int>();
    cfg.objective = parse_objective(j.at("objective").get<std::string>());
    const std::string mode = j.at("supcon_sum_mode").get<std::string>();
    if (mode == "mean") {
        cfg.supcon_sum_mode = SupConSumMode::Mean;
    } else if (mode == "sum") {
        cfg.supcon_sum_mode = SupConSumMode::Sum;
    } else {
        throw ConfigError("supcon_sum_mode must be 'mean' or 'sum', got '" + mode + "'");
    }
    cfg.supcon_batch_keys = j.at("supcon_batch_keys").get<bool>();
    return cfg;
}

namespace {

json tensor_to_json(const Tensor& t) {
    return json{{"shape", t.shape()}, {"data", t.vec()}};
}

std::string shape_text(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void fill_param_from_json(const json& params, const TensorPtr& p) {
    auto it = params.find(p->name);
    if (it == params.end()) {
        throw LoadError("checkpoint is missing parameter '" + p->name + "'");
    }
    const auto shape = it->at("shape").get<std::vector<int>>();
    if (shape != p->shape()) {
        throw LoadError("checkpoint shape mismatch for '" + p->name + "': file has " +
                        shape_text(shape) + ", model needs " + p->shape_str());
    }
    auto data = it->at("data").get<std::vector<double>>();
    if (static_cast<long>(data.size()) != p->size()) {
        throw LoadError("checkpoint data length mismatch for '" + p->name + "'");
    }
    p->vec() = std::move(data);
}

}  // namespace

void save_checkpoint(const ModelState& state, const CheckpointMeta& meta,
                     const std::string& path) {
    json params = json::object();
    for (const auto& p : state.all_query_params()) params[p->name] = tensor_to_json(*p);
    for (const auto& p : state.key_params()) params[p->name] = tensor_to_json(*p);

    const KeyQueue& q = state.queue();
    json queue = {
        {"capacity", q.capacity()},
        {"embed_dim", q.embed_dim()},
        {"store_labels", q.stores_labels()},
        {"write_ptr", q.write_ptr()},
        {"filled", q.filled()},
        {"embeddings", q.raw_embeddings().vec()},
        {"labels", q.raw_labels()},
    };

    json rng = json::object();
    for (const auto& [name, s] : meta.rng_states) rng[name] = s;

    json velocities = json::object();
    for (const auto& [name, v] : meta.velocities) velocities[name] = tensor_to_json(v);

    json doc = {
        {"schema_version", kCheckpointSchemaVersion},
        {"epoch", meta.epoch},
        {"config", model_config_to_json(state.config())},
        {"params", params},
        {"queue", queue},
        {"rng", rng},
        {"optimizer", {{"velocities", velocities}}},
    };

    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << doc.dump(1) << "\n";
    if (!out) throw IoError("write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw LoadError("checkpoint '" + path + "' is truncated or corrupt: " + e.what());
    }

    try {
        const int version = doc.at("schema_version").get<int>();
        if (version != kCheckpointSchemaVersion) {
            throw LoadError("checkpoint schema version " + std::to_string(version) +
                            " is not supported (expected " +
                            std::to_string(kCheckpointSchemaVersion) + ")");
        }
        ModelConfig cfg = model_config_from_json(doc.at("config"));

        Rng scratch(0);
        ModelState state(cfg, scratch);
        const json& params = doc.at("params");
        for (const auto& p : state.all_query_params()) fill_param_from_json(params, p);
        for (const auto& p : state.key_params()) fill_param_from_json(params, p);

        const json& jq = doc.at("queue");
        if (jq.at("capacity").get<int>() != cfg.queue_capacity ||
            jq.at("embed_dim").get<int>() != cfg.embed_dim) {
            throw LoadError("checkpoint queue dimensions disagree with its config echo");
        }
        auto emb = jq.at("embeddings").get<std::vector<double>>();
        if (static_cast<int>(emb.size()) != cfg.queue_capacity * cfg.embed_dim) {
            throw LoadError("checkpoint queue embedding buffer has wrong length");
        }
        state.queue().restore(Tensor({cfg.queue_capacity, cfg.embed_dim}, std::move(emb)),
                              jq.at("labels").get<std::vector<int>>(),
                              jq.at("write_ptr").get<int>(), jq.at("filled").get<int>());

        CheckpointMeta meta;
        meta.epoch = doc.at("epoch").get<int>();
        for (const auto& [name, s] : doc.at("rng").items()) {
            meta.rng_states[name] = s.get<uint64_t>();
        }
        if (doc.contains("optimizer")) {
            for (const auto& [name, jv] : doc.at("optimizer").at("velocities").items()) {
                meta.velocities.emplace(
                    name, Tensor(jv.at("shape").get<std::vector<int>>(),
                                 jv.at("data").get<std::vector<double>>()));
            }
        }
        return LoadedCheckpoint{std::move(state), std::move(meta)};
    } catch (const json::exception& e) {
        throw LoadError("checkpoint '" + path + "' has malformed fields: " + e.what());
    } catch (const ConfigError& e) {
        throw LoadError("checkpoint '" + path + "' carries an invalid config echo: " + e.what());
    }
}

}  // namespace lab
