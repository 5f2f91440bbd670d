#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

namespace lab {

// One evaluation result. `epoch` of -1 means the final model; `ts` is the
// record's position in canonical store order, assigned when the store is
// enumerated, never wall-clock (record files must be byte-stable across
// reruns).
struct MetricRecord {
    std::string experiment;
    std::string method;
    std::string protocol;
    std::string domain;
    std::uint64_t seed = 0;
    int epoch = -1;
    std::string metric;
    double value = 0.0;
    long ts = 0;

    using Key = std::tuple<std::string, std::string, std::string, std::string, std::uint64_t, int,
                           std::string>;
    Key key() const { return {experiment, method, protocol, domain, seed, epoch, metric}; }
};

// JSONL-backed record store with unique-key upsert. Records are kept and
// written in key order; `flush` rewrites the file atomically (temp + rename),
// so a re-run that produces the same records leaves identical bytes. Upserts
// are serialized internally; the store is the single writer for its file.
class RecordStore {
public:
    RecordStore() = default;
    explicit RecordStore(std::string path);

    void upsert(const MetricRecord& r);
    void flush();

    std::size_t size() const;
    std::vector<MetricRecord> all() const;
    std::vector<MetricRecord> where(const std::function<bool(const MetricRecord&)>& pred) const;

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::map<MetricRecord::Key, MetricRecord> records_;
    mutable std::mutex mu_;
};

}  // namespace lab
