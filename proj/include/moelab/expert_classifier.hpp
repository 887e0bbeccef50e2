#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/routing_stats.hpp"

namespace moelab {

using ExpertIds = std::vector<std::uint32_t>;

/// Top-`related_k` experts of every layer by routing frequency, ties to the
/// lowest index. Each set is returned in ascending id order.
std::vector<ExpertIds> language_related(const RoutingDistribution& dist, std::size_t related_k);

struct AffinityLayer {
  /// related[j] is the related set of language j.
  std::vector<ExpertIds> related;
  /// Union of the related sets, minus zero-frequency experts, ascending.
  ExpertIds candidates;
  /// weights[c][j]: share of candidate c's total frequency owned by language j.
  std::vector<std::vector<double>> weights;
  /// Candidates no analysed language ever selects; W is undefined for them.
  ExpertIds dropped;
};

struct AffinityTable {
  MoETopology topology;
  std::vector<std::string> languages;
  std::size_t related_k = 0;
  std::vector<AffinityLayer> layers;

  std::size_t language_index(const std::string& language) const;
};

/// Requires at least two languages.
AffinityTable affinity_table(std::span<const RoutingDistribution> dists, std::size_t related_k);

/// Same computation without the two-language minimum (steering profiles may be
/// built from a single dominant language).
AffinityTable affinity_table_any(std::span<const RoutingDistribution> dists, std::size_t related_k);

struct ExpertSetsLayer {
  std::vector<ExpertIds> related;
  std::vector<ExpertIds> exclusive;
  ExpertIds shared;
  /// Experts exclusive for more than one language (only possible for theta < 0.5).
  ExpertIds overlaps;
  ExpertIds dropped;
  ExpertIds candidates;
  std::vector<std::vector<double>> weights;
};

struct ExpertSets {
  MoETopology topology;
  std::vector<std::string> languages;
  std::size_t related_k = 0;
  double theta = 0.0;
  std::vector<ExpertSetsLayer> layers;

  std::size_t language_index(const std::string& language) const;
  const ExpertIds& exclusive(std::size_t layer, const std::string& language) const;
};

ExpertSets classify(const AffinityTable& table, double theta);

using GroupAssignment = std::map<std::string, std::string>;

/// Dominant / high / low resource grouping of the ten analysed languages.
GroupAssignment default_groups();

struct ExclusivityProfile {
  std::vector<std::string> languages;
  /// counts[l][j] = number of experts exclusive for language j at layer l.
  std::vector<std::vector<std::size_t>> counts;
  std::vector<std::string> groups;
  /// group_means[l][g]: mean count over members of group g.
  std::vector<std::vector<double>> group_means;

  std::size_t total(std::size_t language) const;
};

/// Throws std::invalid_argument if `groups` is given and misses a language.
ExclusivityProfile exclusivity_profile(const ExpertSets& sets, const std::optional<GroupAssignment>& groups = {});

nlohmann::json expert_sets_to_json(const ExpertSets& sets);
ExpertSets expert_sets_from_json(const nlohmann::json& j);

void write_exclusivity_csv(std::ostream& out, const ExclusivityProfile& profile);
void write_group_csv(std::ostream& out, const ExclusivityProfile& profile);

}  // namespace moelab
