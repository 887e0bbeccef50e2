#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/intervention.hpp"
#include "moelab/moe_sim.hpp"
#include "moelab/routing_stats.hpp"

namespace moelab {

struct SteeringTarget {
  std::uint32_t expert = 0;
  double weight = 0.0;  // W of the expert for the source language
};

struct SteeringProfile {
  std::string source;
  std::vector<std::string> dominant;
  double lambda = 0.0;
  LayerWindow layers;
  /// Shared experts of the dominant languages, for layers inside `layers`.
  std::map<std::size_t, std::vector<SteeringTarget>> targets;
  /// Selection parameters, recorded for manifests.
  std::size_t related_k = 0;
  double theta = 0.0;

  const std::vector<SteeringTarget>* targets_for(std::size_t layer) const;
};

inline constexpr std::size_t kSteeringRelatedK = 20;
inline constexpr double kSteeringTheta = 0.7;

/// `dominant_dists` fixes the dominant language set. Targets at each steered
/// layer are the candidates whose largest W across dominant languages is <= theta.
SteeringProfile build_steering_profile(std::span<const RoutingDistribution> dominant_dists, std::size_t related_k,
                                       double theta, const std::string& source, double lambda,
                                       const LayerWindow& layers);

/// g_i + lambda * W_i * |g_i| on target experts inside the window; every other
/// entry is copied unchanged.
std::vector<double> apply_steering(std::span<const double> logits, std::size_t layer, const SteeringProfile& profile);

nlohmann::json profile_to_json(const SteeringProfile& profile);
SteeringProfile profile_from_json(const nlohmann::json& j);

struct SweepPoint {
  double lambda = 0.0;
  /// Share of all Top-K selections at steered layers that hit a target expert.
  double target_selection_rate = 0.0;
  /// Mean over languages and steered layers of JSD(steered, baseline).
  double shift_jsd = 0.0;
};

/// Runs the corpus once unsteered, then once per lambda with `profile_template`'s
/// targets and the lambda substituted.
std::vector<SweepPoint> sweep_lambda(const sim::SimModel& model, const sim::Corpus& corpus,
                                     const SteeringProfile& profile_template, std::span<const double> lambda_grid);

void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> curve);

}  // namespace moelab
