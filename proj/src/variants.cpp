#include "iflame/variants.hpp"

namespace iflame {

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::kFull;
  if (name == "linear") return Variant::kLinear;
  if (name == "I") return Variant::kInterleaved;
  if (name == "I+S") return Variant::kInterleavedSimplified;
  if (name == "I+S+H") return Variant::kHourglass;
  fail(ErrorCode::kInvalidArgument,
       "unknown variant '" + std::string(name) + "' (expected full, linear, I, I+S or I+S+H)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kLinear:
      return "linear";
    case Variant::kInterleaved:
      return "I";
    case Variant::kInterleavedSimplified:
      return "I+S";
    case Variant::kHourglass:
      return "I+S+H";
  }
  return "?";
}

ModelConfig variant_config(Variant v, const ModelConfig& base) {
  ModelConfig c = base;
  c.hourglass = false;
  c.linear_variant = LinearVariant::kSimplified;
  switch (v) {
    case Variant::kFull:
      c.pattern = AttentionPattern::kAllFull;
      break;
    case Variant::kLinear:
      c.pattern = AttentionPattern::kAllLinear;
      break;
    case Variant::kInterleaved:
      c.pattern = AttentionPattern::kInterleaved;
      c.linear_variant = LinearVariant::kGated;
      break;
    case Variant::kInterleavedSimplified:
      c.pattern = AttentionPattern::kInterleaved;
      break;
    case Variant::kHourglass:
      c.pattern = AttentionPattern::kInterleaved;
      c.hourglass = true;
      break;
  }
  c.validate();
  return c;
}

}  // namespace iflame
