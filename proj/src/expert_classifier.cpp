#include "moelab/expert_classifier.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "moelab/error.hpp"

namespace moelab {

using nlohmann::json;

std::vector<ExpertIds> language_related(const RoutingDistribution& dist, std::size_t related_k) {
  const std::size_t num_experts = dist.topology.num_experts;
  if (related_k < 1 || related_k > num_experts) throw std::invalid_argument("related_k must be in [1, num_experts]");

  std::vector<ExpertIds> out;
  out.reserve(dist.per_layer.size());
  std::vector<std::uint32_t> order(num_experts);
  for (const auto& row : dist.per_layer) {
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(related_k), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return row[a] != row[b] ? row[a] > row[b] : a < b; });
    ExpertIds top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(related_k));
    std::sort(top.begin(), top.end());
    out.push_back(std::move(top));
  }
  return out;
}

std::size_t AffinityTable::language_index(const std::string& language) const {
  auto it = std::find(languages.begin(), languages.end(), language);
  if (it == languages.end()) throw std::invalid_argument("unknown language: " + language);
  return static_cast<std::size_t>(it - languages.begin());
}

AffinityTable affinity_table_any(std::span<const RoutingDistribution> dists, std::size_t related_k) {
  if (dists.empty()) throw std::invalid_argument("no languages given");
  AffinityTable table;
  table.topology = dists.front().topology;
  table.related_k = related_k;
  std::set<std::string> unique;
  for (const auto& d : dists) {
    if (!d.topology.same_shape(table.topology)) throw std::invalid_argument("topology mismatch");
    if (!unique.insert(d.language).second) throw std::invalid_argument("duplicate language: " + d.language);
    table.languages.push_back(d.language);
  }

  std::vector<std::vector<ExpertIds>> related;  // [language][layer]
  for (const auto& d : dists) related.push_back(language_related(d, related_k));

  const std::size_t num_langs = dists.size();
  for (std::size_t l = 0; l < table.topology.num_layers; ++l) {
    AffinityLayer layer;
    std::set<std::uint32_t> pool;
    for (std::size_t j = 0; j < num_langs; ++j) {
      layer.related.push_back(related[j][l]);
      pool.insert(related[j][l].begin(), related[j][l].end());
    }
    for (std::uint32_t i : pool) {
      double total = 0.0;
      for (const auto& d : dists) total += d.per_layer[l][i];
      if (total == 0.0) {
        layer.dropped.push_back(i);
        continue;
      }
      std::vector<double> w(num_langs);
      for (std::size_t j = 0; j < num_langs; ++j) w[j] = dists[j].per_layer[l][i] / total;
      layer.candidates.push_back(i);
      layer.weights.push_back(std::move(w));
    }
    table.layers.push_back(std::move(layer));
  }
  return table;
}

AffinityTable affinity_table(std::span<const RoutingDistribution> dists, std::size_t related_k) {
  if (dists.size() < 2) throw std::invalid_argument("need >= 2 languages");
  return affinity_table_any(dists, related_k);
}

std::size_t ExpertSets::language_index(const std::string& language) const {
  auto it = std::find(languages.begin(), languages.end(), language);
  if (it == languages.end()) throw std::invalid_argument("unknown language: " + language);
  return static_cast<std::size_t>(it - languages.begin());
}

const ExpertIds& ExpertSets::exclusive(std::size_t layer, const std::string& language) const {
  return layers.at(layer).exclusive.at(language_index(language));
}

ExpertSets classify(const AffinityTable& table, double theta) {
  if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("theta must be in (0, 1)");
  ExpertSets sets;
  sets.topology = table.topology;
  sets.languages = table.languages;
  sets.related_k = table.related_k;
  sets.theta = theta;

  const std::size_t num_langs = table.languages.size();
  for (const auto& layer : table.layers) {
    ExpertSetsLayer out;
    out.related = layer.related;
    out.dropped = layer.dropped;
    out.candidates = layer.candidates;
    out.weights = layer.weights;
    out.exclusive.assign(num_langs, {});
    for (std::size_t c = 0; c < layer.candidates.size(); ++c) {
      const auto& w = layer.weights[c];
      std::size_t owners = 0;
      for (std::size_t j = 0; j < num_langs; ++j) {
        if (w[j] > theta) {
          out.exclusive[j].push_back(layer.candidates[c]);
          ++owners;
        }
      }
      if (owners == 0) out.shared.push_back(layer.candidates[c]);
      if (owners > 1) out.overlaps.push_back(layer.candidates[c]);
    }
    sets.layers.push_back(std::move(out));
  }
  return sets;
}

GroupAssignment default_groups() {
  return {{"en", "dominant"}, {"zh", "dominant"}, {"de", "high"}, {"es", "high"}, {"fr", "high"},
          {"ja", "high"},     {"ko", "high"},     {"ar", "high"}, {"sw", "low"},  {"bn", "low"}};
}

std::size_t ExclusivityProfile::total(std::size_t language) const {
  std::size_t sum = 0;
  for (const auto& row : counts) sum += row.at(language);
  return sum;
}

ExclusivityProfile exclusivity_profile(const ExpertSets& sets, const std::optional<GroupAssignment>& groups) {
  ExclusivityProfile profile;
  profile.languages = sets.languages;
  for (const auto& layer : sets.layers) {
    std::vector<std::size_t> row;
    for (const auto& excl : layer.exclusive) row.push_back(excl.size());
    profile.counts.push_back(std::move(row));
  }
  if (!groups) return profile;

  std::vector<std::size_t> member_group;
  for (const auto& lang : sets.languages) {
    auto it = groups->find(lang);
    if (it == groups->end()) throw std::invalid_argument("unknown group assignment for language: " + lang);
    auto g = std::find(profile.groups.begin(), profile.groups.end(), it->second);
    if (g == profile.groups.end()) {
      profile.groups.push_back(it->second);
      g = profile.groups.end() - 1;
    }
    member_group.push_back(static_cast<std::size_t>(g - profile.groups.begin()));
  }
  for (const auto& row : profile.counts) {
    std::vector<double> sums(profile.groups.size(), 0.0), members(profile.groups.size(), 0.0);
    for (std::size_t j = 0; j < row.size(); ++j) {
      sums[member_group[j]] += static_cast<double>(row[j]);
      members[member_group[j]] += 1.0;
    }
    for (std::size_t g = 0; g < sums.size(); ++g) sums[g] /= members[g];
    profile.group_means.push_back(std::move(sums));
  }
  return profile;
}

json expert_sets_to_json(const ExpertSets& sets) {
  json j;
  j["topology"] = {{"model_id", sets.topology.model_id},
                   {"num_layers", sets.topology.num_layers},
                   {"num_experts", sets.topology.num_experts},
                   {"top_k", sets.topology.top_k}};
  j["languages"] = sets.languages;
  j["related_k"] = sets.related_k;
  j["theta"] = sets.theta;
  json layers = json::array();
  for (std::size_t l = 0; l < sets.layers.size(); ++l) {
    const auto& layer = sets.layers[l];
    json related = json::object(), exclusive = json::object(), weights = json::object();
    for (std::size_t k = 0; k < sets.languages.size(); ++k) {
      related[sets.languages[k]] = layer.related[k];
      exclusive[sets.languages[k]] = layer.exclusive[k];
    }
    for (std::size_t c = 0; c < layer.candidates.size(); ++c) {
      json row = json::object();
      for (std::size_t k = 0; k < sets.languages.size(); ++k) row[sets.languages[k]] = layer.weights[c][k];
      weights[std::to_string(layer.candidates[c])] = std::move(row);
    }
    layers.push_back({{"layer", l},
                      {"related", std::move(related)},
                      {"exclusive", std::move(exclusive)},
                      {"shared", layer.shared},
                      {"overlaps", layer.overlaps},
                      {"dropped", layer.dropped},
                      {"W", std::move(weights)}});
  }
  j["layers"] = std::move(layers);
  return j;
}

ExpertSets expert_sets_from_json(const json& j) {
  try {
    ExpertSets sets;
    const auto& topo = j.at("topology");
    sets.topology.model_id = topo.at("model_id").get<std::string>();
    sets.topology.num_layers = topo.at("num_layers").get<std::size_t>();
    sets.topology.num_experts = topo.at("num_experts").get<std::size_t>();
    sets.topology.top_k = topo.at("top_k").get<std::size_t>();
    sets.topology.check();
    sets.languages = j.at("languages").get<std::vector<std::string>>();
    sets.related_k = j.at("related_k").get<std::size_t>();
    sets.theta = j.at("theta").get<double>();
    for (const auto& layer : j.at("layers")) {
      ExpertSetsLayer out;
      for (const auto& lang : sets.languages) {
        out.related.push_back(layer.at("related").at(lang).get<ExpertIds>());
        out.exclusive.push_back(layer.at("exclusive").at(lang).get<ExpertIds>());
      }
      out.shared = layer.at("shared").get<ExpertIds>();
      out.overlaps = layer.value("overlaps", ExpertIds{});
      out.dropped = layer.value("dropped", ExpertIds{});
      std::vector<std::pair<std::uint32_t, std::vector<double>>> rows;
      for (const auto& [key, row] : layer.at("W").items()) {
        std::vector<double> w;
        for (const auto& lang : sets.languages) w.push_back(row.at(lang).get<double>());
        rows.emplace_back(static_cast<std::uint32_t>(std::stoul(key)), std::move(w));
      }
      std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      for (auto& [id, w] : rows) {
        out.candidates.push_back(id);
        out.weights.push_back(std::move(w));
      }
      sets.layers.push_back(std::move(out));
    }
    if (sets.layers.size() != sets.topology.num_layers) throw ParseError("layer count does not match topology");
    return sets;
  } catch (const json::exception& e) {
    throw ParseError(std::string("expert sets report: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("expert sets report: ") + e.what());
  }
}

void write_exclusivity_csv(std::ostream& out, const ExclusivityProfile& profile) {
  out << "layer,language,exclusive_count\n";
  for (std::size_t l = 0; l < profile.counts.size(); ++l)
    for (std::size_t j = 0; j < profile.languages.size(); ++j)
      out << l << ',' << profile.languages[j] << ',' << profile.counts[l][j] << '\n';
}

void write_group_csv(std::ostream& out, const ExclusivityProfile& profile) {
  out << "layer,group,mean_exclusive_count\n";
  for (std::size_t l = 0; l < profile.group_means.size(); ++l)
    for (std::size_t g = 0; g < profile.groups.size(); ++g)
      out << l << ',' << profile.groups[g] << ',' << format_double(profile.group_means[l][g]) << '\n';
}

}  // namespace moelab
