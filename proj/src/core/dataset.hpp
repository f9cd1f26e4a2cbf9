#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "schema.hpp"

namespace d2k {

// One interaction. values has one slot per schema field (flat order); single
// fields hold exactly one value ID, multi fields one or more.
struct Sample {
  std::vector<std::vector<uint32_t>> values;
  uint8_t label = 0;
  int64_t timestamp = 0;
};

// Per-field token <-> dense ID maps. ID 0 is reserved for out-of-vocabulary
// tokens in every field and never assigned to a real token.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(size_t n_fields) : map_(n_fields), rev_(n_fields, {""}) {}

  size_t fields() const { return map_.size(); }
  uint32_t size(size_t field) const { return static_cast<uint32_t>(rev_[field].size()); }

  uint32_t encode(size_t field, std::string_view token) const;
  uint32_t encode_or_add(size_t field, std::string_view token);
  const std::string& decode(size_t field, uint32_t id) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path, size_t n_fields);

 private:
  std::vector<std::unordered_map<std::string, uint32_t>> map_;
  std::vector<std::vector<std::string>> rev_;
};

struct LogData {
  std::vector<Sample> samples;
  Vocabulary vocab;
};

// TSV logs: a header line "timestamp<TAB>label<TAB>field..." covering every
// schema field, then one sample per line. Multi-value cells join tokens with
// '|'. Multi lists keep the most recent max_multi entries; an empty multi cell
// becomes a single OOV entry.
LogData parse_logs(const std::string& text, const FeatureSchema& schema,
                   size_t max_multi = 16);
LogData load_logs(const std::string& path, const FeatureSchema& schema,
                  size_t max_multi = 16);

// Same format but against a frozen vocabulary: unseen tokens map to ID 0.
std::vector<Sample> parse_logs_frozen(const std::string& text, const FeatureSchema& schema,
                                      const Vocabulary& vocab, size_t max_multi = 16);
std::vector<Sample> load_logs_frozen(const std::string& path, const FeatureSchema& schema,
                                     const Vocabulary& vocab, size_t max_multi = 16);

void save_logs(const std::string& path, const FeatureSchema& schema, const Vocabulary& vocab,
               const std::vector<Sample>& samples);

// Chronological split into fixed windows D_1..D_T. The first p1 windows are
// the old block, the next gap windows are dropped, training runs through
// window p2, and everything after is test. Windows are half-open
// [start, start + window_seconds), so boundary timestamps go to the later one.
struct DatasetPartition {
  std::vector<std::vector<Sample>> blocks;
  size_t p1 = 0, p2 = 0, gap = 0;

  size_t windows() const { return blocks.size(); }
  std::vector<Sample> old_data() const;
  std::vector<Sample> train_data() const;
  std::vector<Sample> test_data() const;
};

DatasetPartition partition(const std::vector<Sample>& samples, int64_t window_seconds,
                           size_t p1, size_t p2, size_t gap);

}  // namespace d2k
