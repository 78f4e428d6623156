#pragma once

#include <array>
#include <string>
#include <string_view>

#include "iflame/hourglass.hpp"

namespace iflame {

/// The ablation ladder from pure softmax attention to the hourglass model.
enum class Variant { kFull, kLinear, kInterleaved, kInterleavedSimplified, kHourglass };

inline constexpr std::array<Variant, 5> kAllVariants{Variant::kFull, Variant::kLinear, Variant::kInterleaved,
                                                     Variant::kInterleavedSimplified, Variant::kHourglass};

/// Accepts "full", "linear", "I", "I+S", "I+S+H".
Variant parse_variant(std::string_view name);
std::string to_string(Variant v);

/// Applies a variant's architecture choices on top of base (width, heads,
/// vocabulary, context and depth settings are kept). Single-scale variants use
/// base.plain_depth layers; I+S+H uses base.depths.
ModelConfig variant_config(Variant v, const ModelConfig& base = {});

}  // namespace iflame
