#include "dataset.hpp"

#include <algorithm>
#include <charconv>

namespace d2k {

uint32_t Vocabulary::encode(size_t field, std::string_view token) const {
  const auto& m = map_[field];
  auto it = m.find(std::string(token));
  return it == m.end() ? 0u : it->second;
}

uint32_t Vocabulary::encode_or_add(size_t field, std::string_view token) {
  auto& m = map_[field];
  auto it = m.find(std::string(token));
  if (it != m.end()) return it->second;
  uint32_t id = static_cast<uint32_t>(rev_[field].size());
  m.emplace(std::string(token), id);
  rev_[field].emplace_back(token);
  return id;
}

const std::string& Vocabulary::decode(size_t field, uint32_t id) const {
  if (id >= rev_[field].size())
    throw DataError("vocabulary: id " + std::to_string(id) + " out of range for field " +
                    std::to_string(field));
  return rev_[field][id];
}

void Vocabulary::save(const std::string& path) const {
  std::string out;
  for (size_t f = 0; f < rev_.size(); ++f)
    for (uint32_t id = 1; id < rev_[f].size(); ++id)
      out += std::to_string(f) + "\t" + std::to_string(id) + "\t" + rev_[f][id] + "\n";
  write_file(path, out);
}

Vocabulary Vocabulary::load(const std::string& path, size_t n_fields) {
  Vocabulary v(n_fields);
  std::string text = read_file(path);
  size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    size_t t1 = line.find('\t');
    size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw FormatError("vocabulary line " + std::to_string(line_no) + ": expected 3 columns");
    size_t field = std::stoul(line.substr(0, t1));
    uint32_t id = static_cast<uint32_t>(std::stoul(line.substr(t1 + 1, t2 - t1 - 1)));
    if (field >= n_fields)
      throw FormatError("vocabulary line " + std::to_string(line_no) + ": field out of range");
    uint32_t got = v.encode_or_add(field, line.substr(t2 + 1));
    if (got != id)
      throw FormatError("vocabulary line " + std::to_string(line_no) +
                        ": ids must be dense and in order");
  }
  return v;
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  size_t pos = 0;
  while (true) {
    size_t tab = line.find('\t', pos);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(pos));
      return out;
    }
    out.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
}

int64_t parse_int(std::string_view s, int line_no, const char* what) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError("log line " + std::to_string(line_no) + ": bad " + what + " '" +
                    std::string(s) + "'");
  return v;
}

// Shared log parser; grow == nullptr keeps the vocabulary frozen (OOV -> 0).
std::vector<Sample> parse_impl(const std::string& text, const FeatureSchema& schema,
                               const Vocabulary& vocab, Vocabulary* grow, size_t max_multi) {
  schema.validate();
  if (max_multi == 0) throw ConfigError("max_multi must be positive");
  size_t F = schema.field_count();

  std::vector<Sample> samples;
  std::vector<size_t> col_of_field;  // column index per flat field
  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    bool last = nl == std::string::npos;
    std::string_view line(text.data() + pos, (last ? text.size() : nl) - pos);
    pos = last ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto cells = split_tabs(line);

    if (line_no == 1) {
      if (cells.size() != F + 2 || cells[0] != "timestamp" || cells[1] != "label")
        throw DataError("log line 1: header must be timestamp, label, then all fields");
      col_of_field.assign(F, SIZE_MAX);
      for (size_t c = 2; c < cells.size(); ++c) {
        size_t flat = schema.index_of(std::string(cells[c]));
        if (col_of_field[flat] != SIZE_MAX)
          throw DataError("log line 1: duplicate field column '" + std::string(cells[c]) +
                          "'");
        col_of_field[flat] = c;
      }
      continue;
    }

    if (cells.size() != F + 2)
      throw DataError("log line " + std::to_string(line_no) + ": expected " +
                      std::to_string(F + 2) + " columns, got " + std::to_string(cells.size()));
    Sample s;
    s.timestamp = parse_int(cells[0], line_no, "timestamp");
    int64_t label = parse_int(cells[1], line_no, "label");
    if (label != 0 && label != 1)
      throw DataError("log line " + std::to_string(line_no) + ": label must be 0 or 1");
    s.label = static_cast<uint8_t>(label);
    s.values.resize(F);
    for (size_t flat = 0; flat < F; ++flat) {
      std::string_view cell = cells[col_of_field[flat]];
      std::vector<uint32_t>& vals = s.values[flat];
      if (schema.field(flat).kind == FieldKind::Single) {
        if (cell.empty())
          throw DataError("log line " + std::to_string(line_no) + ": empty value for field '" +
                          schema.field(flat).name + "'");
        vals.push_back(grow ? grow->encode_or_add(flat, cell) : vocab.encode(flat, cell));
      } else {
        size_t p = 0;
        while (p <= cell.size()) {
          size_t bar = cell.find('|', p);
          if (bar == std::string_view::npos) bar = cell.size();
          std::string_view tok = cell.substr(p, bar - p);
          if (!tok.empty())
            vals.push_back(grow ? grow->encode_or_add(flat, tok) : vocab.encode(flat, tok));
          p = bar + 1;
        }
        if (vals.empty()) vals.push_back(0);  // padded OOV entry
        if (vals.size() > max_multi)
          vals.erase(vals.begin(), vals.end() - static_cast<ptrdiff_t>(max_multi));
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace

LogData parse_logs(const std::string& text, const FeatureSchema& schema, size_t max_multi) {
  LogData out;
  out.vocab = Vocabulary(schema.field_count());
  out.samples = parse_impl(text, schema, out.vocab, &out.vocab, max_multi);
  return out;
}

LogData load_logs(const std::string& path, const FeatureSchema& schema, size_t max_multi) {
  return parse_logs(read_file(path), schema, max_multi);
}

std::vector<Sample> parse_logs_frozen(const std::string& text, const FeatureSchema& schema,
                                      const Vocabulary& vocab, size_t max_multi) {
  return parse_impl(text, schema, vocab, nullptr, max_multi);
}

std::vector<Sample> load_logs_frozen(const std::string& path, const FeatureSchema& schema,
                                     const Vocabulary& vocab, size_t max_multi) {
  return parse_logs_frozen(read_file(path), schema, vocab, max_multi);
}

void save_logs(const std::string& path, const FeatureSchema& schema, const Vocabulary& vocab,
               const std::vector<Sample>& samples) {
  std::string out = "timestamp\tlabel";
  size_t F = schema.field_count();
  for (size_t f = 0; f < F; ++f) out += "\t" + schema.field(f).name;
  out += "\n";
  for (const Sample& s : samples) {
    out += std::to_string(s.timestamp) + "\t" + std::to_string(int(s.label));
    for (size_t f = 0; f < F; ++f) {
      out += "\t";
      for (size_t i = 0; i < s.values[f].size(); ++i) {
        if (i) out += "|";
        out += vocab.decode(f, s.values[f][i]);
      }
    }
    out += "\n";
  }
  write_file(path, out);
}

std::vector<Sample> DatasetPartition::old_data() const {
  std::vector<Sample> out;
  for (size_t b = 0; b < p1; ++b) out.insert(out.end(), blocks[b].begin(), blocks[b].end());
  return out;
}

std::vector<Sample> DatasetPartition::train_data() const {
  std::vector<Sample> out;
  for (size_t b = p1 + gap; b < p2; ++b)
    out.insert(out.end(), blocks[b].begin(), blocks[b].end());
  return out;
}

std::vector<Sample> DatasetPartition::test_data() const {
  std::vector<Sample> out;
  for (size_t b = p2; b < blocks.size(); ++b)
    out.insert(out.end(), blocks[b].begin(), blocks[b].end());
  return out;
}

DatasetPartition partition(const std::vector<Sample>& samples, int64_t window_seconds,
                           size_t p1, size_t p2, size_t gap) {
  if (samples.empty()) throw ConfigError("partition: no samples");
  if (window_seconds <= 0) throw ConfigError("partition: window_seconds must be positive");
  if (p1 < 1 || p2 <= p1) throw ConfigError("partition: need 1 <= p1 < p2");
  if (p2 <= p1 + gap) throw ConfigError("partition: gap leaves no training windows");

  int64_t t0 = samples[0].timestamp;
  int64_t t1 = t0;
  for (const Sample& s : samples) {
    t0 = std::min(t0, s.timestamp);
    t1 = std::max(t1, s.timestamp);
  }
  size_t T = static_cast<size_t>((t1 - t0) / window_seconds) + 1;
  if (p2 >= T)
    throw ConfigError("partition: p2 = " + std::to_string(p2) + " leaves no test windows (T = " +
                      std::to_string(T) + ")");

  DatasetPartition part;
  part.blocks.resize(T);
  part.p1 = p1;
  part.p2 = p2;
  part.gap = gap;
  for (const Sample& s : samples)
    part.blocks[static_cast<size_t>((s.timestamp - t0) / window_seconds)].push_back(s);

  auto count = [&](size_t b, size_t e) {
    size_t n = 0;
    for (size_t i = b; i < e; ++i) n += part.blocks[i].size();
    return n;
  };
  if (count(0, p1) == 0) throw ConfigError("partition: old split is empty");
  if (count(p1 + gap, p2) == 0) throw ConfigError("partition: train split is empty");
  if (count(p2, T) == 0) throw ConfigError("partition: test split is empty");
  return part;
}

}  // namespace d2k
