#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"

namespace d2k {

enum class FieldKind { Single, Multi };

struct FieldDef {
  std::string name;
  FieldKind kind = FieldKind::Single;
};

// Declares the feature layout of a dataset: user fields, item fields and
// context fields, in that order. Flat field indices run user, item, context.
// kb_subset optionally restricts which fields participate in knowledge keys
// and queries; empty means all fields.
struct FeatureSchema {
  std::vector<FieldDef> user_fields;
  std::vector<FieldDef> item_fields;
  std::vector<FieldDef> context_fields;
  std::vector<std::string> kb_subset;

  size_t user_count() const { return user_fields.size(); }
  size_t item_count() const { return item_fields.size(); }
  size_t context_count() const { return context_fields.size(); }
  size_t field_count() const {
    return user_fields.size() + item_fields.size() + context_fields.size();
  }

  // Flat indexing across the three sides.
  const FieldDef& field(size_t flat) const;
  size_t item_offset() const { return user_fields.size(); }
  size_t context_offset() const { return user_fields.size() + item_fields.size(); }

  // Flat index by name; throws ConfigError when absent.
  size_t index_of(const std::string& name) const;

  // Flat indices of the fields participating in knowledge keys, per side.
  // Respects kb_subset; with an empty subset every field participates.
  std::vector<uint16_t> kb_user_fields() const;
  std::vector<uint16_t> kb_item_fields() const;
  std::vector<uint16_t> kb_context_fields() const;

  void validate() const;
};

// Line-based "key = value" schema text. Recognized keys: user_fields,
// item_fields, context_fields (comma-separated name:kind entries where kind is
// single or multi, default single) and kb_subset (comma-separated names).
// '#' starts a comment.
FeatureSchema parse_schema(const std::string& text);
FeatureSchema load_schema(const std::string& path);
std::string serialize_schema(const FeatureSchema& schema);

// Stable digest of the canonical serialization; embedded in binary artifacts
// so mismatched schema/artifact pairs are rejected on load.
Hash256 schema_fingerprint(const FeatureSchema& schema);

}  // namespace d2k
