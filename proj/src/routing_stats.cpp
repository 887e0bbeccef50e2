#include "moelab/routing_stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace moelab {

namespace {

constexpr double kProbabilitySumTolerance = 1e-6;

void check_probability_vector(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) {
    if (!(x >= 0.0)) throw std::invalid_argument("negative entry in distribution");
    sum += x;
  }
  if (std::abs(sum - 1.0) > kProbabilitySumTolerance)
    throw std::invalid_argument("distribution does not sum to 1");
}

// x * log2(x / m), with 0 * log(0 / m) = 0.
double kl_term(double x, double m) { return x > 0.0 ? x * std::log2(x / m) : 0.0; }

void check_same_topology(std::span<const RoutingDistribution> dists) {
  for (const auto& d : dists)
    if (!d.topology.same_shape(dists.front().topology)) throw std::invalid_argument("topology mismatch");
}

}  // namespace

std::vector<double> RoutingDistribution::normalized(std::size_t layer) const {
  std::vector<double> out = per_layer.at(layer);
  const double k = static_cast<double>(topology.top_k);
  for (double& x : out) x /= k;
  return out;
}

RoutingDistribution routing_distribution(const RoutingTrace& trace) {
  if (trace.token_count == 0 || trace.events.empty()) throw std::invalid_argument("empty trace");
  const auto& topo = trace.topology;
  std::vector<std::vector<std::uint64_t>> counts(topo.num_layers, std::vector<std::uint64_t>(topo.num_experts, 0));
  for (const auto& ev : trace.events) {
    if (ev.layer >= topo.num_layers) throw std::invalid_argument("event layer out of range");
    for (const auto& c : ev.selected) {
      if (c.expert >= topo.num_experts) throw std::invalid_argument("expert id out of range");
      ++counts[ev.layer][c.expert];
    }
  }

  RoutingDistribution dist;
  dist.topology = topo;
  dist.language = trace.language;
  dist.token_count = trace.token_count;
  dist.per_layer.assign(topo.num_layers, std::vector<double>(topo.num_experts, 0.0));
  const double n = static_cast<double>(trace.token_count);
  for (std::size_t l = 0; l < topo.num_layers; ++l)
    for (std::size_t i = 0; i < topo.num_experts; ++i)
      dist.per_layer[l][i] = static_cast<double>(counts[l][i]) / n;
  return dist;
}

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("dimension mismatch");
  check_probability_vector(p);
  check_probability_vector(q);
  // Each summand is built as term(p) + term(q) from m = (p + q) / 2, all of
  // which commute, so swapping p and q gives the identical bit pattern.
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    acc += kl_term(p[i], m) + kl_term(q[i], m);
  }
  return std::clamp(0.5 * acc, 0.0, 1.0);
}

double routing_similarity(const RoutingDistribution& a, const RoutingDistribution& b, std::size_t layer) {
  if (!a.topology.same_shape(b.topology)) throw std::invalid_argument("topology mismatch");
  if (layer >= a.topology.num_layers) throw std::invalid_argument("layer out of range");
  return 1.0 - jsd(a.normalized(layer), b.normalized(layer));
}

std::vector<double> similarity_curve(const RoutingDistribution& a, const RoutingDistribution& b) {
  if (!a.topology.same_shape(b.topology)) throw std::invalid_argument("topology mismatch");
  std::vector<double> curve(a.topology.num_layers);
  for (std::size_t l = 0; l < curve.size(); ++l) curve[l] = routing_similarity(a, b, l);
  return curve;
}

LayerScope LayerScope::parse(const std::string& text) {
  if (text == "final") return final_layer();
  if (text == "curve") return curve();
  std::size_t layer = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), layer);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw std::invalid_argument("layer scope must be 'final', 'curve' or a layer index: " + text);
  return at(layer);
}

SimilarityMatrix similarity_matrix(std::span<const RoutingDistribution> dists, LayerScope scope) {
  if (dists.size() < 2) throw std::invalid_argument("need >= 2 languages");
  check_same_topology(dists);
  const std::size_t num_layers = dists.front().topology.num_layers;

  SimilarityMatrix m;
  switch (scope.kind) {
    case LayerScope::Kind::kFinal: m.layer = num_layers - 1; break;
    case LayerScope::Kind::kLayer: m.layer = scope.layer; break;
    case LayerScope::Kind::kCurve: throw std::invalid_argument("curve scope yields one matrix per layer");
  }
  if (m.layer >= num_layers) throw std::invalid_argument("layer out of range");

  const std::size_t n = dists.size();
  m.values.assign(n, std::vector<double>(n, 1.0));
  for (const auto& d : dists) m.languages.push_back(d.language);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double sim = routing_similarity(dists[a], dists[b], m.layer);
      m.values[a][b] = sim;
      m.values[b][a] = sim;
    }
  }
  return m;
}

std::vector<SimilarityMatrix> similarity_matrices(std::span<const RoutingDistribution> dists) {
  if (dists.size() < 2) throw std::invalid_argument("need >= 2 languages");
  check_same_topology(dists);
  std::vector<SimilarityMatrix> out;
  for (std::size_t l = 0; l < dists.front().topology.num_layers; ++l)
    out.push_back(similarity_matrix(dists, LayerScope::at(l)));
  return out;
}

EntropyProfile routing_entropy(const RoutingDistribution& dist) {
  EntropyProfile profile;
  profile.language = dist.language;
  const double k = static_cast<double>(dist.topology.top_k);
  for (const auto& row : dist.per_layer) {
    double h = 0.0;
    for (double p : row) {
      const double q = p / k;
      if (q > 0.0) h -= q * std::log2(q);
    }
    // Rounding can push a point mass to -0 or a uniform row past log2(E).
    h = std::clamp(h, 0.0, std::log2(static_cast<double>(row.size())));
    profile.per_layer.push_back(h);
  }
  profile.mean = profile.per_layer.empty()
                     ? 0.0
                     : std::accumulate(profile.per_layer.begin(), profile.per_layer.end(), 0.0) /
                           static_cast<double>(profile.per_layer.size());
  return profile;
}

void write_similarity_matrix_csv(std::ostream& out, const SimilarityMatrix& m) {
  out << "language";
  for (const auto& lang : m.languages) out << ',' << lang;
  out << '\n';
  for (std::size_t a = 0; a < m.languages.size(); ++a) {
    out << m.languages[a];
    for (double v : m.values[a]) out << ',' << format_double(v);
    out << '\n';
  }
}

void write_similarity_curve_csv(std::ostream& out, std::span<const double> curve) {
  out << "layer,sim\n";
  for (std::size_t l = 0; l < curve.size(); ++l) out << l << ',' << format_double(curve[l]) << '\n';
}

void write_entropy_csv(std::ostream& out, const EntropyProfile& profile) {
  out << "layer,entropy\n";
  for (std::size_t l = 0; l < profile.per_layer.size(); ++l)
    out << l << ',' << format_double(profile.per_layer[l]) << '\n';
}

}  // namespace moelab
