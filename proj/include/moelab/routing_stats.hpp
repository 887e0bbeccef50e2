#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/trace.hpp"

namespace moelab {

/// Per-layer expert selection frequencies of one language. Row l holds
/// p_{l,i} = (#tokens selecting i at layer l) / N, so each row sums to K.
struct RoutingDistribution {
  MoETopology topology;
  std::string language;
  std::size_t token_count = 0;
  std::vector<std::vector<double>> per_layer;

  /// Row l divided by K: a probability vector over experts.
  std::vector<double> normalized(std::size_t layer) const;
};

RoutingDistribution routing_distribution(const RoutingTrace& trace);

/// Jensen-Shannon divergence in bits between two probability vectors.
/// Symmetric bit-for-bit in its arguments and clamped to [0, 1].
double jsd(std::span<const double> p, std::span<const double> q);

/// 1 - JSD of the K-normalized distributions at `layer`.
double routing_similarity(const RoutingDistribution& a, const RoutingDistribution& b, std::size_t layer);

/// Similarity at every layer.
std::vector<double> similarity_curve(const RoutingDistribution& a, const RoutingDistribution& b);

struct LayerScope {
  enum class Kind { kFinal, kLayer, kCurve };
  Kind kind = Kind::kFinal;
  std::size_t layer = 0;

  static LayerScope final_layer() { return {Kind::kFinal, 0}; }
  static LayerScope at(std::size_t layer) { return {Kind::kLayer, layer}; }
  static LayerScope curve() { return {Kind::kCurve, 0}; }

  /// "final", "curve" or a layer index.
  static LayerScope parse(const std::string& text);
};

struct SimilarityMatrix {
  std::vector<std::string> languages;
  std::size_t layer = 0;
  std::vector<std::vector<double>> values;
};

/// Pairwise similarities at one layer. A kFinal scope resolves to L-1.
/// Use similarity_matrices() for kCurve.
SimilarityMatrix similarity_matrix(std::span<const RoutingDistribution> dists, LayerScope scope);

/// One matrix per layer.
std::vector<SimilarityMatrix> similarity_matrices(std::span<const RoutingDistribution> dists);

struct EntropyProfile {
  std::string language;
  std::vector<double> per_layer;
  double mean = 0.0;
};

/// Entropy in bits of each layer's K-normalized distribution.
EntropyProfile routing_entropy(const RoutingDistribution& dist);

// CSV emitters.
void write_similarity_matrix_csv(std::ostream& out, const SimilarityMatrix& m);
void write_similarity_curve_csv(std::ostream& out, std::span<const double> curve);
void write_entropy_csv(std::ostream& out, const EntropyProfile& profile);

}  // namespace moelab
