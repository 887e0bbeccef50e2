#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/trace.hpp"

namespace moelab::sim {

struct LanguageSpec {
  std::string tag;
  std::string family;
  /// Per-dimension standard deviation of token noise; defaults to 0.1 * |centroid|.
  std::optional<double> noise_scale;
};

/// Makes `experts` dominate `language`'s routing at `layer`: their router
/// columns gain `boost` logits at the language centroid.
struct Plant {
  std::size_t layer = 0;
  std::string language;
  std::vector<std::uint32_t> experts;
  double boost = 0.0;
};

/// Toy model geometry. The hidden space splits into a router-visible block of
/// hidden_dim - |languages| dimensions, which carries the family centroids and
/// the token-level variation, and one language-identity axis per language.
/// The base router reads only the visible block, so unplanted routing depends
/// on family and token noise; plants are the only reader of identity axes.
struct SimConfig {
  MoETopology topology;
  std::size_t hidden_dim = 0;
  std::vector<LanguageSpec> languages;
  std::vector<Plant> plants;
  std::uint64_t seed = 0;

  double family_scale = 4.0;    // norm of a family centroid
  double language_scale = 1.0;  // offset along the language axis, before the ratio cap
  double family_ratio = 4.0;    // minimum inter-family / intra-family centroid distance
  double expert_scale = 0.05;   // deviation of expert maps from the identity

  /// Throws std::invalid_argument on inconsistent settings.
  void check() const;
  std::size_t language_index(const std::string& tag) const;
  std::size_t visible_dim() const { return hidden_dim - languages.size(); }
};

SimConfig sim_config_from_json(const nlohmann::json& j);
nlohmann::json sim_config_to_json(const SimConfig& config);
SimConfig read_sim_config(const std::filesystem::path& path);

/// Language-axis offset after enforcing family_ratio.
double effective_language_scale(const SimConfig& config);

/// One centroid per language, in config order.
std::vector<std::vector<double>> language_centroids(const SimConfig& config);

/// f(h) = A h + b.
struct SimExpert {
  std::vector<double> matrix;  // row-major d x d
  std::vector<double> bias;

  void apply(std::span<const double> h, std::span<double> out) const;
};

struct SimModel {
  SimConfig config;
  /// router[l][i] is column i of W_l (length d): logit_i = router[l][i] . h.
  std::vector<std::vector<std::vector<double>>> router;
  std::vector<std::vector<SimExpert>> experts;

  const MoETopology& topology() const { return config.topology; }
};

/// Rewrites a layer's full logit vector between the router projection and
/// Top-K selection. An empty function means no rewrite.
using LogitTransform = std::function<std::vector<double>(std::size_t layer, std::span<const double> logits)>;

LogitTransform identity_transform();

SimModel build_model(const SimConfig& config);

struct RouteResult {
  std::vector<std::uint32_t> selected;  // by descending logit, ties to the lower index
  std::vector<double> gates;            // softmax over the selected logits
  std::vector<double> logits;           // full transformed logit vector
};

/// Indices of the k largest values, ties to the lowest index.
std::vector<std::uint32_t> top_k_indices(std::span<const double> values, std::size_t k);

RouteResult route_token(std::span<const double> hidden, std::size_t layer, const SimModel& model,
                        const LogitTransform& transform = {});

struct LanguageCorpus {
  std::string language;
  std::vector<std::vector<double>> tokens;
};
using Corpus = std::vector<LanguageCorpus>;

/// Token i of each language: centroid + N(0, noise_scale^2) per dimension.
Corpus generate_corpus(const SimConfig& config, std::size_t tokens_per_language, std::uint64_t seed);

/// Runs every token through all layers and returns one trace per language
/// (in corpus order) with full logits recorded.
std::vector<RoutingTrace> forward_corpus(const SimModel& model, const Corpus& corpus,
                                         const LogitTransform& transform = {});

}  // namespace moelab::sim
