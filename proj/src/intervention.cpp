#include "moelab/intervention.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

#include "moelab/error.hpp"

namespace moelab {

using nlohmann::json;

void LayerWindow::check(std::size_t num_layers) const {
  if (start > end || end >= num_layers)
    throw std::invalid_argument("window " + std::to_string(start) + ":" + std::to_string(end) +
                                " out of range for " + std::to_string(num_layers) + " layers");
}

WindowPresets window_presets(std::size_t num_layers) {
  if (num_layers < 3) throw std::invalid_argument("need >= 3 layers for disjoint windows");
  if (num_layers == 48) return {{"early", 0, 4}, {"middle", 22, 26}, {"late", 43, 47}};

  const std::size_t width = (5 * num_layers + 47) / 48;
  const std::size_t center = (num_layers - 1) / 2;
  std::size_t mid_start = center - std::min(center, (width - 1) / 2);
  // Keep the middle window clear of the other two.
  mid_start = std::clamp(mid_start, width, num_layers - 2 * width);
  return {{"early", 0, width - 1},
          {"middle", mid_start, mid_start + width - 1},
          {"late", num_layers - width, num_layers - 1}};
}

LayerWindow steer_mid_window(std::size_t num_layers) {
  if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
  return {"steer-mid", 10 * num_layers / 48, 39 * num_layers / 48};
}

LayerWindow parse_window(const std::string& text, std::size_t num_layers) {
  LayerWindow w;
  if (text == "early" || text == "middle" || text == "late") {
    const auto presets = window_presets(num_layers);
    w = text == "early" ? presets.early : text == "middle" ? presets.middle : presets.late;
  } else if (text == "steer-mid") {
    w = steer_mid_window(num_layers);
  } else {
    const auto colon = text.find(':');
    auto parse_index = [&](std::string_view part) {
      std::size_t v = 0;
      auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
      if (ec != std::errc() || ptr != part.data() + part.size() || part.empty())
        throw std::invalid_argument("window must be early|middle|late|steer-mid|a:b, got " + text);
      return v;
    };
    if (colon == std::string::npos) parse_index({});
    const std::string_view view(text);
    w.start = parse_index(view.substr(0, colon));
    w.end = parse_index(view.substr(colon + 1));
  }
  w.check(num_layers);
  return w;
}

const std::vector<std::uint32_t>* InterventionPlan::mask_for(std::size_t layer) const {
  if (!window.contains(layer)) return nullptr;
  auto it = masks.find(layer);
  return it == masks.end() ? nullptr : &it->second;
}

InterventionPlan build_mask_plan(const ExpertSets& sets, const std::string& language, const LayerWindow& window,
                                 double nu) {
  const auto& topo = sets.topology;
  window.check(topo.num_layers);
  const std::size_t j = sets.language_index(language);

  InterventionPlan plan;
  plan.language = language;
  plan.nu = nu;
  plan.window = window;
  for (std::size_t l = window.start; l <= window.end; ++l) {
    const auto& mask = sets.layers.at(l).exclusive.at(j);
    if (mask.size() > topo.num_experts - topo.top_k)
      throw std::invalid_argument("mask at layer " + std::to_string(l) + " leaves fewer than top_k experts");
    plan.masks[l] = mask;
  }
  return plan;
}

std::vector<double> apply_mask(std::span<const double> logits, std::size_t layer, const InterventionPlan& plan) {
  std::vector<double> out(logits.begin(), logits.end());
  if (const auto* mask = plan.mask_for(layer)) {
    for (auto e : *mask) {
      if (e >= out.size()) throw std::invalid_argument("dimension mismatch: masked expert beyond logit vector");
      out[e] = plan.nu;
    }
  }
  return out;
}

json plan_to_json(const InterventionPlan& plan) {
  json masks = json::object();
  for (const auto& [layer, ids] : plan.masks) masks[std::to_string(layer)] = ids;
  return {{"language", plan.language},
          {"nu", plan.nu},
          {"window", {{"name", plan.window.name}, {"start", plan.window.start}, {"end", plan.window.end}}},
          {"masks", std::move(masks)}};
}

InterventionPlan plan_from_json(const json& j) {
  try {
    InterventionPlan plan;
    plan.language = j.at("language").get<std::string>();
    plan.nu = j.at("nu").get<double>();
    const auto& w = j.at("window");
    plan.window.name = w.value("name", std::string("custom"));
    plan.window.start = w.at("start").get<std::size_t>();
    plan.window.end = w.at("end").get<std::size_t>();
    if (plan.window.start > plan.window.end) throw ParseError("window start after end");
    for (const auto& [key, ids] : j.at("masks").items()) {
      const std::size_t layer = std::stoul(key);
      if (!plan.window.contains(layer)) throw ParseError("mask at layer " + key + " lies outside the window");
      plan.masks[layer] = ids.get<std::vector<std::uint32_t>>();
    }
    return plan;
  } catch (const json::exception& e) {
    throw ParseError(std::string("intervention plan: ") + e.what());
  } catch (const std::logic_error& e) {
    throw ParseError(std::string("intervention plan: ") + e.what());
  }
}

}  // namespace moelab
