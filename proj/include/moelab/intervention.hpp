#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/expert_classifier.hpp"

namespace moelab {

/// Inclusive layer range.
struct LayerWindow {
  std::string name = "custom";
  std::size_t start = 0;
  std::size_t end = 0;

  bool contains(std::size_t layer) const { return layer >= start && layer <= end; }
  /// Throws std::invalid_argument unless start <= end < num_layers.
  void check(std::size_t num_layers) const;
};

struct WindowPresets {
  LayerWindow early;
  LayerWindow middle;
  LayerWindow late;
};

/// Five-layer windows 0-4 / 22-26 / 43-47 for 48 layers. Other depths use a
/// width of ceil(5L/48) at the start, the end, and centred on (L-1)/2.
WindowPresets window_presets(std::size_t num_layers);

/// Middle band used for steering: 10-39 at 48 layers, scaled as
/// [floor(10L/48), floor(39L/48)] otherwise.
LayerWindow steer_mid_window(std::size_t num_layers);

/// "early", "middle", "late", "steer-mid" or "a:b".
LayerWindow parse_window(const std::string& text, std::size_t num_layers);

inline constexpr double kDefaultMaskValue = -1e9;

struct InterventionPlan {
  std::string language;
  double nu = kDefaultMaskValue;
  LayerWindow window;
  /// Masked expert ids per layer; only layers inside the window appear.
  std::map<std::size_t, std::vector<std::uint32_t>> masks;

  const std::vector<std::uint32_t>* mask_for(std::size_t layer) const;
};

/// Masks the target language's exclusive experts at every layer of `window`.
/// Rejects plans that would leave fewer than K selectable experts.
InterventionPlan build_mask_plan(const ExpertSets& sets, const std::string& language, const LayerWindow& window,
                                 double nu = kDefaultMaskValue);

/// Returns `logits` with masked entries replaced by nu.
std::vector<double> apply_mask(std::span<const double> logits, std::size_t layer, const InterventionPlan& plan);

nlohmann::json plan_to_json(const InterventionPlan& plan);
InterventionPlan plan_from_json(const nlohmann::json& j);

}  // namespace moelab
