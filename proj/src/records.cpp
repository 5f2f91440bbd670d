#include "lab/records.hpp"

#include <filesystem>
#include <fstream>
#include <utility>

#include <json.hpp>

#include "lab/errors.hpp"

namespace lab {

using nlohmann::json;

namespace {

json to_json(const MetricRecord& r, long ts) {
    return json{{"experiment", r.experiment}, {"method", r.method}, {"protocol", r.protocol},
                {"domain", r.domain},         {"seed", r.seed},     {"epoch", r.epoch},
                {"metric", r.metric},         {"value", r.value},   {"ts", ts}};
}

MetricRecord from_json(const json& j) {
    static const char* kFields[] = {"experiment", "method", "protocol", "domain",
                                    "seed",       "epoch",  "metric",   "value",
                                    "ts"};
    for (const char* f : kFields) {
        if (!j.contains(f)) throw LoadError(std::string("record is missing field '") + f + "'");
    }
    for (const auto& [key, _] : j.items()) {
        bool known = false;
        for (const char* f : kFields) known = known || key == f;
        if (!known) throw LoadError("record has unknown field '" + key + "'");
    }
    MetricRecord r;
    r.experiment = j.at("experiment").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.protocol = j.at("protocol").get<std::string>();
    r.domain = j.at("domain").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.epoch = j.at("epoch").get<int>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.ts = j.at("ts").get<long>();
    return r;
}

}  // namespace

RecordStore::RecordStore(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (!in.is_open()) return;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw LoadError("record store '" + path_ + "' line " + std::to_string(line_no) +
                            ": " + e.what());
        }
        MetricRecord r = from_json(j);
        records_[r.key()] = r;
    }
}

void RecordStore::upsert(const MetricRecord& r) {
    std::lock_guard<std::mutex> lock(mu_);
    records_[r.key()] = r;
}

void RecordStore::flush() {
    if (path_.empty()) return;
    std::lock_guard<std::mutex> lock(mu_);
    const std::filesystem::path target(path_);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::filesystem::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out.is_open()) {
            throw IoError("cannot open '" + tmp.string() + "' for writing");
        }
        long ts = 0;
        for (const auto& [_, r] : records_) out << to_json(r, ts++).dump() << "\n";
        if (!out.good()) throw IoError("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, target);
}

std::size_t RecordStore::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return records_.size();
}

std::vector<MetricRecord> RecordStore::all() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<MetricRecord> out;
    out.reserve(records_.size());
    long ts = 0;
    for (const auto& [_, r] : records_) {
        out.push_back(r);
        out.back().ts = ts++;
    }
    return out;
}

std::vector<MetricRecord> RecordStore::where(
    const std::function<bool(const MetricRecord&)>& pred) const {
    std::vector<MetricRecord> out;
    for (const MetricRecord& r : all()) {
        if (pred(r)) out.push_back(r);
    }
    return out;
}

}  // namespace lab
