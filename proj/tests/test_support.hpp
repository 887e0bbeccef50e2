#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "moelab/moe_sim.hpp"
#include "moelab/routing_stats.hpp"
#include "moelab/trace.hpp"

namespace moelab::testing {

inline MoETopology topology(std::size_t layers, std::size_t experts, std::size_t k) {
  MoETopology t;
  t.num_layers = layers;
  t.num_experts = experts;
  t.top_k = k;
  t.model_id = "test";
  return t;
}

/// Trace whose selections are uniformly random K-subsets, with softmax gates.
inline RoutingTrace random_trace(const MoETopology& topo, std::size_t tokens, std::uint64_t seed,
                                 const std::string& language = "xx") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RoutingTrace trace;
  trace.topology = topo;
  trace.language = language;
  std::vector<std::uint32_t> ids(topo.num_experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t l = 0; l < topo.num_layers; ++l) {
      std::iota(ids.begin(), ids.end(), 0u);
      std::shuffle(ids.begin(), ids.end(), rng);
      RoutingEvent ev;
      ev.token = t;
      ev.layer = static_cast<std::uint32_t>(l);
      std::vector<double> logits(topo.top_k);
      for (double& g : logits) g = normal(rng);
      std::sort(logits.rbegin(), logits.rend());
      double denom = 0.0;
      for (double g : logits) denom += std::exp(g - logits[0]);
      for (std::size_t j = 0; j < topo.top_k; ++j)
        ev.selected.push_back({ids[j], logits[j], std::exp(logits[j] - logits[0]) / denom});
      trace.events.push_back(std::move(ev));
    }
  }
  trace.token_count = tokens;
  return trace;
}

/// Every token selects `experts` at every layer.
inline RoutingTrace constant_trace(const MoETopology& topo, std::size_t tokens, const std::vector<std::uint32_t>& experts,
                                   const std::string& language = "xx") {
  RoutingTrace trace;
  trace.topology = topo;
  trace.language = language;
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t l = 0; l < topo.num_layers; ++l) {
      RoutingEvent ev;
      ev.token = t;
      ev.layer = static_cast<std::uint32_t>(l);
      for (auto e : experts) ev.selected.push_back({e, 0.0, 1.0 / static_cast<double>(experts.size())});
      trace.events.push_back(std::move(ev));
    }
  }
  trace.token_count = tokens;
  return trace;
}

inline RoutingDistribution make_dist(const std::string& language, std::vector<std::vector<double>> rows, std::size_t k) {
  RoutingDistribution d;
  d.topology = topology(rows.size(), rows.front().size(), k);
  d.language = language;
  d.token_count = 1;
  d.per_layer = std::move(rows);
  return d;
}

/// Random probability vector with a few exact zeros.
inline std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
  std::exponential_distribution<double> expo(1.0);
  std::bernoulli_distribution zero(0.2);
  std::vector<double> v(n);
  double sum = 0.0;
  for (double& x : v) {
    x = zero(rng) ? 0.0 : expo(rng);
    sum += x;
  }
  if (sum == 0.0) {
    v[0] = 1.0;
    return v;
  }
  for (double& x : v) x /= sum;
  return v;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("moelab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline sim::LanguageSpec lang(const std::string& tag, const std::string& family, std::optional<double> noise = {}) {
  return {tag, family, noise};
}

/// Four languages in one family with strong identity axes; routing outside
/// planted layers is language-agnostic.
inline sim::SimConfig single_family_config(std::uint64_t seed, std::size_t layers = 8, std::size_t experts = 16,
                                           std::size_t k = 2) {
  sim::SimConfig c;
  c.topology = topology(layers, experts, k);
  c.topology.model_id = "moelab-sim";
  c.hidden_dim = 24;
  c.languages = {lang("en", "a", 1.0), lang("zh", "a", 1.0), lang("sw", "a", 1.0), lang("bn", "a", 1.0)};
  c.family_scale = 0.0;
  c.language_scale = 10.0;
  c.seed = seed;
  return c;
}

}  // namespace moelab::testing
