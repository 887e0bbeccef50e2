#include "moelab/steering.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <ostream>
#include <stdexcept>

#include "moelab/error.hpp"
#include "moelab/expert_classifier.hpp"

namespace moelab {

using nlohmann::json;

const std::vector<SteeringTarget>* SteeringProfile::targets_for(std::size_t layer) const {
  if (!layers.contains(layer)) return nullptr;
  auto it = targets.find(layer);
  return it == targets.end() ? nullptr : &it->second;
}

SteeringProfile build_steering_profile(std::span<const RoutingDistribution> dominant_dists, std::size_t related_k,
                                       double theta, const std::string& source, double lambda,
                                       const LayerWindow& layers) {
  if (dominant_dists.empty()) throw std::invalid_argument("empty dominant language set");
  if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("theta must be in (0, 1)");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  layers.check(dominant_dists.front().topology.num_layers);

  const AffinityTable table = affinity_table_any(dominant_dists, related_k);
  const auto it = std::find(table.languages.begin(), table.languages.end(), source);
  if (it == table.languages.end()) throw std::invalid_argument("source language is not dominant: " + source);
  const auto src = static_cast<std::size_t>(it - table.languages.begin());

  SteeringProfile profile;
  profile.source = source;
  profile.dominant = table.languages;
  profile.lambda = lambda;
  profile.layers = layers;
  profile.related_k = related_k;
  profile.theta = theta;
  for (std::size_t l = layers.start; l <= layers.end; ++l) {
    const auto& layer = table.layers[l];
    auto& targets = profile.targets[l];
    for (std::size_t c = 0; c < layer.candidates.size(); ++c) {
      const auto& w = layer.weights[c];
      if (*std::max_element(w.begin(), w.end()) <= theta) targets.push_back({layer.candidates[c], w[src]});
    }
  }
  return profile;
}

std::vector<double> apply_steering(std::span<const double> logits, std::size_t layer, const SteeringProfile& profile) {
  std::vector<double> out(logits.begin(), logits.end());
  if (const auto* targets = profile.targets_for(layer)) {
    for (const auto& t : *targets) {
      if (t.expert >= out.size()) throw std::invalid_argument("dimension mismatch: target expert beyond logit vector");
      const double bias = profile.lambda * t.weight * std::abs(out[t.expert]);
      // A zero bias leaves the entry untouched (g + 0 would turn -0 into +0).
      if (bias != 0.0) out[t.expert] += bias;
    }
  }
  return out;
}

json profile_to_json(const SteeringProfile& profile) {
  json targets = json::object();
  for (const auto& [layer, list] : profile.targets) {
    json arr = json::array();
    for (const auto& t : list) arr.push_back({{"expert", t.expert}, {"weight", t.weight}});
    targets[std::to_string(layer)] = std::move(arr);
  }
  return {{"source", profile.source},
          {"dominant", profile.dominant},
          {"lambda", profile.lambda},
          {"layers", {{"start", profile.layers.start}, {"end", profile.layers.end}}},
          {"targets", std::move(targets)}};
}

SteeringProfile profile_from_json(const json& j) {
  try {
    SteeringProfile p;
    p.source = j.at("source").get<std::string>();
    p.dominant = j.at("dominant").get<std::vector<std::string>>();
    p.lambda = j.at("lambda").get<double>();
    if (!(p.lambda >= 0.0)) throw ParseError("lambda must be >= 0");
    p.layers.name = "steer";
    p.layers.start = j.at("layers").at("start").get<std::size_t>();
    p.layers.end = j.at("layers").at("end").get<std::size_t>();
    if (p.layers.start > p.layers.end) throw ParseError("layers start after end");
    for (const auto& [key, list] : j.at("targets").items()) {
      const std::size_t layer = std::stoul(key);
      auto& out = p.targets[layer];
      for (const auto& t : list) {
        const double w = t.at("weight").get<double>();
        if (!(w >= 0.0 && w <= 1.0)) throw ParseError("target weight outside [0, 1]");
        out.push_back({t.at("expert").get<std::uint32_t>(), w});
      }
    }
    return p;
  } catch (const json::exception& e) {
    throw ParseError(std::string("steering profile: ") + e.what());
  } catch (const std::logic_error& e) {
    throw ParseError(std::string("steering profile: ") + e.what());
  }
}

namespace {

SweepPoint measure(const std::vector<RoutingTrace>& steered, const std::vector<RoutingDistribution>& baseline,
                   const SteeringProfile& profile) {
  SweepPoint point;
  point.lambda = profile.lambda;
  std::uint64_t hits = 0, selections = 0;
  double shift = 0.0;
  std::size_t shift_terms = 0;
  for (std::size_t s = 0; s < steered.size(); ++s) {
    for (const auto& ev : steered[s].events) {
      if (!profile.layers.contains(ev.layer)) continue;
      const auto* targets = profile.targets_for(ev.layer);
      for (const auto& c : ev.selected) {
        ++selections;
        if (targets && std::any_of(targets->begin(), targets->end(),
                                   [&](const SteeringTarget& t) { return t.expert == c.expert; }))
          ++hits;
      }
    }
    const RoutingDistribution dist = routing_distribution(steered[s]);
    for (std::size_t l = profile.layers.start; l <= profile.layers.end; ++l) {
      shift += jsd(dist.normalized(l), baseline[s].normalized(l));
      ++shift_terms;
    }
  }
  point.target_selection_rate = selections ? static_cast<double>(hits) / static_cast<double>(selections) : 0.0;
  point.shift_jsd = shift_terms ? shift / static_cast<double>(shift_terms) : 0.0;
  return point;
}

}  // namespace

std::vector<SweepPoint> sweep_lambda(const sim::SimModel& model, const sim::Corpus& corpus,
                                     const SteeringProfile& profile_template, std::span<const double> lambda_grid) {
  if (lambda_grid.empty()) throw std::invalid_argument("empty lambda grid");
  for (double lambda : lambda_grid)
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  profile_template.layers.check(model.topology().num_layers);

  std::vector<RoutingDistribution> baseline;
  for (const auto& trace : sim::forward_corpus(model, corpus)) baseline.push_back(routing_distribution(trace));

  // Grid points are independent; results are collected in grid order.
  std::vector<std::future<SweepPoint>> jobs;
  for (double lambda : lambda_grid) {
    jobs.push_back(std::async(std::launch::async, [&, lambda] {
      SteeringProfile profile = profile_template;
      profile.lambda = lambda;
      const sim::LogitTransform steer = [&profile](std::size_t layer, std::span<const double> logits) {
        return apply_steering(logits, layer, profile);
      };
      return measure(sim::forward_corpus(model, corpus, steer), baseline, profile);
    }));
  }
  std::vector<SweepPoint> curve;
  for (auto& job : jobs) curve.push_back(job.get());
  return curve;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> curve) {
  out << "lambda,target_selection_rate,shift_jsd\n";
  for (const auto& p : curve)
    out << format_double(p.lambda) << ',' << format_double(p.target_selection_rate) << ','
        << format_double(p.shift_jsd) << '\n';
}

}  // namespace moelab
