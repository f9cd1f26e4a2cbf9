#include "schema.hpp"

#include <algorithm>
#include <unordered_set>

namespace d2k {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    std::string item = trim(s.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
  }
  return out;
}

std::vector<FieldDef> parse_field_list(const std::string& value, const std::string& key) {
  std::vector<FieldDef> out;
  for (const std::string& item : split_list(value)) {
    size_t colon = item.find(':');
    FieldDef def;
    if (colon == std::string::npos) {
      def.name = trim(item);
    } else {
      def.name = trim(item.substr(0, colon));
      std::string kind = trim(item.substr(colon + 1));
      if (kind == "single")
        def.kind = FieldKind::Single;
      else if (kind == "multi")
        def.kind = FieldKind::Multi;
      else
        throw ConfigError("schema: unknown field kind '" + kind + "' in " + key);
    }
    if (def.name.empty()) throw ConfigError("schema: empty field name in " + key);
    out.push_back(std::move(def));
  }
  return out;
}

}  // namespace

const FieldDef& FeatureSchema::field(size_t flat) const {
  if (flat < user_fields.size()) return user_fields[flat];
  flat -= user_fields.size();
  if (flat < item_fields.size()) return item_fields[flat];
  flat -= item_fields.size();
  if (flat < context_fields.size()) return context_fields[flat];
  throw ConfigError("schema: field index out of range");
}

size_t FeatureSchema::index_of(const std::string& name) const {
  for (size_t i = 0; i < field_count(); ++i)
    if (field(i).name == name) return i;
  throw ConfigError("schema: unknown field '" + name + "'");
}

namespace {

std::vector<uint16_t> subset_side(const FeatureSchema& s, size_t begin, size_t count) {
  std::vector<uint16_t> out;
  for (size_t i = begin; i < begin + count; ++i) {
    if (s.kb_subset.empty() ||
        std::find(s.kb_subset.begin(), s.kb_subset.end(), s.field(i).name) !=
            s.kb_subset.end())
      out.push_back(static_cast<uint16_t>(i));
  }
  return out;
}

}  // namespace

std::vector<uint16_t> FeatureSchema::kb_user_fields() const {
  return subset_side(*this, 0, user_fields.size());
}
std::vector<uint16_t> FeatureSchema::kb_item_fields() const {
  return subset_side(*this, item_offset(), item_fields.size());
}
std::vector<uint16_t> FeatureSchema::kb_context_fields() const {
  return subset_side(*this, context_offset(), context_fields.size());
}

void FeatureSchema::validate() const {
  if (user_fields.empty() || item_fields.empty() || context_fields.empty())
    throw ConfigError("schema: each of user/item/context needs at least one field");
  std::unordered_set<std::string> seen;
  for (size_t i = 0; i < field_count(); ++i)
    if (!seen.insert(field(i).name).second)
      throw ConfigError("schema: duplicate field name '" + field(i).name + "'");
  for (const std::string& name : kb_subset)
    if (!seen.count(name))
      throw ConfigError("schema: kb_subset names unknown field '" + name + "'");
  if (!kb_subset.empty() &&
      (kb_user_fields().empty() || kb_item_fields().empty() || kb_context_fields().empty()))
    throw ConfigError("schema: kb_subset must keep at least one field per side");
}

FeatureSchema parse_schema(const std::string& text) {
  FeatureSchema s;
  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("schema line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "user_fields")
      s.user_fields = parse_field_list(value, key);
    else if (key == "item_fields")
      s.item_fields = parse_field_list(value, key);
    else if (key == "context_fields")
      s.context_fields = parse_field_list(value, key);
    else if (key == "kb_subset")
      s.kb_subset = split_list(value);
    else
      throw ConfigError("schema line " + std::to_string(line_no) + ": unknown key '" + key +
                        "'");
  }
  s.validate();
  return s;
}

FeatureSchema load_schema(const std::string& path) { return parse_schema(read_file(path)); }

std::string serialize_schema(const FeatureSchema& schema) {
  auto emit = [](const std::vector<FieldDef>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ", ";
      out += fields[i].name;
      out += fields[i].kind == FieldKind::Multi ? ":multi" : ":single";
    }
    return out;
  };
  std::string out;
  out += "user_fields = " + emit(schema.user_fields) + "\n";
  out += "item_fields = " + emit(schema.item_fields) + "\n";
  out += "context_fields = " + emit(schema.context_fields) + "\n";
  if (!schema.kb_subset.empty()) {
    out += "kb_subset = ";
    for (size_t i = 0; i < schema.kb_subset.size(); ++i) {
      if (i) out += ", ";
      out += schema.kb_subset[i];
    }
    out += "\n";
  }
  return out;
}

Hash256 schema_fingerprint(const FeatureSchema& schema) {
  return fingerprint256(serialize_schema(schema));
}

}  // namespace d2k
