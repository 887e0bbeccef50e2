#include "moelab/moe_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "moelab/error.hpp"

namespace moelab::sim {

using nlohmann::json;

namespace {

// Separate streams so adding languages to a corpus does not perturb the model.
constexpr std::uint64_t kCentroidStream = 0x9e3779b97f4a7c15ULL;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<std::string> family_order(const SimConfig& config) {
  std::vector<std::string> families;
  for (const auto& lang : config.languages)
    if (std::find(families.begin(), families.end(), lang.family) == families.end()) families.push_back(lang.family);
  return families;
}

}  // namespace

void SimConfig::check() const {
  topology.check();
  if (hidden_dim < 1) throw std::invalid_argument("hidden_dim must be >= 1");
  if (languages.empty()) throw std::invalid_argument("at least one language is required");
  std::set<std::string> tags;
  for (const auto& lang : languages) {
    if (!tags.insert(lang.tag).second) throw std::invalid_argument("duplicate language tag: " + lang.tag);
    if (lang.noise_scale && !(*lang.noise_scale >= 0.0)) throw std::invalid_argument("noise scale must be >= 0");
  }
  if (hidden_dim <= languages.size() || visible_dim() < family_order(*this).size())
    throw std::invalid_argument("hidden_dim must exceed the number of languages plus families");
  if (!(family_scale >= 0.0) || !(language_scale >= 0.0) || !(expert_scale >= 0.0))
    throw std::invalid_argument("scales must be >= 0");
  for (const auto& plant : plants) {
    if (plant.layer >= topology.num_layers) throw std::invalid_argument("invalid plant: layer out of range");
    if (!tags.count(plant.language)) throw std::invalid_argument("invalid plant: unknown language " + plant.language);
    for (auto e : plant.experts)
      if (e >= topology.num_experts) throw std::invalid_argument("invalid plant: expert id out of range");
  }
}

std::size_t SimConfig::language_index(const std::string& tag) const {
  for (std::size_t i = 0; i < languages.size(); ++i)
    if (languages[i].tag == tag) return i;
  throw std::invalid_argument("unknown language: " + tag);
}

SimConfig sim_config_from_json(const json& j) {
  try {
    SimConfig c;
    const auto& topo = j.at("topology");
    c.topology.num_layers = topo.at("num_layers").get<std::size_t>();
    c.topology.num_experts = topo.at("num_experts").get<std::size_t>();
    c.topology.top_k = topo.at("top_k").get<std::size_t>();
    c.topology.model_id = j.value("model_id", std::string("moelab-sim"));
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    for (const auto& lang : j.at("languages")) {
      LanguageSpec spec;
      spec.tag = lang.at("tag").get<std::string>();
      const auto& family = lang.at("family");
      spec.family = family.is_string() ? family.get<std::string>() : family.dump();
      if (lang.contains("noise_scale")) spec.noise_scale = lang.at("noise_scale").get<double>();
      c.languages.push_back(std::move(spec));
    }
    if (j.contains("plant")) {
      for (const auto& p : j.at("plant")) {
        Plant plant;
        plant.layer = p.at("layer").get<std::size_t>();
        plant.language = p.at("language").get<std::string>();
        plant.experts = p.at("experts").get<std::vector<std::uint32_t>>();
        plant.boost = p.at("boost").get<double>();
        c.plants.push_back(std::move(plant));
      }
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.family_scale = j.value("family_scale", c.family_scale);
    c.language_scale = j.value("language_scale", c.language_scale);
    c.family_ratio = j.value("family_ratio", c.family_ratio);
    c.expert_scale = j.value("expert_scale", c.expert_scale);
    c.check();
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("simulator config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("simulator config: ") + e.what());
  }
}

json sim_config_to_json(const SimConfig& c) {
  json languages = json::array();
  for (const auto& lang : c.languages) {
    json l = {{"tag", lang.tag}, {"family", lang.family}};
    if (lang.noise_scale) l["noise_scale"] = *lang.noise_scale;
    languages.push_back(std::move(l));
  }
  json plants = json::array();
  for (const auto& p : c.plants)
    plants.push_back({{"layer", p.layer}, {"language", p.language}, {"experts", p.experts}, {"boost", p.boost}});
  return {{"model_id", c.topology.model_id},
          {"topology",
           {{"num_layers", c.topology.num_layers}, {"num_experts", c.topology.num_experts}, {"top_k", c.topology.top_k}}},
          {"hidden_dim", c.hidden_dim},
          {"languages", std::move(languages)},
          {"plant", std::move(plants)},
          {"seed", c.seed},
          {"family_scale", c.family_scale},
          {"language_scale", c.language_scale},
          {"family_ratio", c.family_ratio},
          {"expert_scale", c.expert_scale}};
}

SimConfig read_sim_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open simulator config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return sim_config_from_json(j);
}

double effective_language_scale(const SimConfig& config) {
  // Language centroids are R*q_f + r*e_j with orthonormal q and e, so
  // intra-family distance is r*sqrt(2) and inter-family distance is
  // sqrt(2R^2 + 2r^2). The ratio holds iff r <= R / sqrt(ratio^2 - 1).
  const double r = config.language_scale;
  if (family_order(config).size() < 2 || config.family_ratio <= 1.0) return r;
  return std::min(r, config.family_scale / std::sqrt(config.family_ratio * config.family_ratio - 1.0));
}

std::vector<std::vector<double>> language_centroids(const SimConfig& config) {
  config.check();
  const std::size_t d = config.hidden_dim;
  const std::size_t visible = config.visible_dim();
  const auto families = family_order(config);

  std::mt19937_64 rng(config.seed ^ kCentroidStream);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> directions;  // orthonormal, inside the visible block
  while (directions.size() < families.size()) {
    std::vector<double> v(visible);
    for (double& x : v) x = normal(rng);
    for (const auto& q : directions) {
      const double proj = dot(v, q);
      for (std::size_t k = 0; k < visible; ++k) v[k] -= proj * q[k];
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    directions.push_back(std::move(v));
  }

  const double r = effective_language_scale(config);
  std::vector<std::vector<double>> centroids;
  for (std::size_t j = 0; j < config.languages.size(); ++j) {
    const auto f = static_cast<std::size_t>(
        std::find(families.begin(), families.end(), config.languages[j].family) - families.begin());
    std::vector<double> c(d, 0.0);
    for (std::size_t k = 0; k < visible; ++k) c[k] = config.family_scale * directions[f][k];
    c[visible + j] = r;
    centroids.push_back(std::move(c));
  }
  return centroids;
}

void SimExpert::apply(std::span<const double> h, std::span<double> out) const {
  const std::size_t d = h.size();
  for (std::size_t r = 0; r < d; ++r) {
    double s = bias[r];
    const double* row = matrix.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) s += row[c] * h[c];
    out[r] = s;
  }
}

LogitTransform identity_transform() {
  return [](std::size_t, std::span<const double> logits) { return std::vector<double>(logits.begin(), logits.end()); };
}

SimModel build_model(const SimConfig& config) {
  config.check();
  const auto& topo = config.topology;
  const std::size_t d = config.hidden_dim;
  const std::size_t visible = config.visible_dim();
  const double r = effective_language_scale(config);
  if (!config.plants.empty() && r <= 0.0)
    throw std::invalid_argument("invalid plant: language axes have zero scale");

  SimModel model;
  model.config = config;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double spread = config.expert_scale / std::sqrt(static_cast<double>(visible));

  model.router.resize(topo.num_layers);
  model.experts.resize(topo.num_layers);
  for (std::size_t l = 0; l < topo.num_layers; ++l) {
    auto& columns = model.router[l];
    columns.assign(topo.num_experts, std::vector<double>(d, 0.0));
    for (auto& col : columns) {
      double norm = 0.0;
      for (std::size_t k = 0; k < visible; ++k) {
        col[k] = normal(rng);
        norm += col[k] * col[k];
      }
      norm = std::sqrt(norm);
      for (std::size_t k = 0; k < visible; ++k) col[k] /= norm;
    }

    for (std::size_t i = 0; i < topo.num_experts; ++i) {
      SimExpert ex;
      ex.matrix.assign(d * d, 0.0);
      ex.bias.assign(d, 0.0);
      for (std::size_t row = 0; row < d; ++row) ex.matrix[row * d + row] = 1.0;
      for (std::size_t row = 0; row < visible; ++row) {
        for (std::size_t c = 0; c < visible; ++c) ex.matrix[row * d + c] += spread * normal(rng);
        ex.bias[row] = spread * normal(rng);
      }
      model.experts[l].push_back(std::move(ex));
    }
  }

  // The language axis holds r at the centroid, so boost/r there adds `boost`.
  for (const auto& plant : config.plants) {
    const std::size_t axis = visible + config.language_index(plant.language);
    for (auto e : plant.experts) model.router[plant.layer][e][axis] += plant.boost / r;
  }
  return model;
}

std::vector<std::uint32_t> top_k_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::uint32_t> order(values.size());
  std::iota(order.begin(), order.end(), 0u);
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return values[a] != values[b] ? values[a] > values[b] : a < b; });
  order.resize(k);
  return order;
}

RouteResult route_token(std::span<const double> hidden, std::size_t layer, const SimModel& model,
                        const LogitTransform& transform) {
  if (hidden.size() != model.config.hidden_dim) throw std::invalid_argument("dimension mismatch");
  if (layer >= model.router.size()) throw std::invalid_argument("layer out of range");
  const auto& columns = model.router[layer];

  RouteResult out;
  out.logits.resize(columns.size());
  for (std::size_t i = 0; i < columns.size(); ++i) out.logits[i] = dot(columns[i], hidden);
  if (transform) {
    out.logits = transform(layer, out.logits);
    if (out.logits.size() != columns.size()) throw std::invalid_argument("transform changed the logit count");
  }

  out.selected = top_k_indices(out.logits, model.topology().top_k);
  const double top = out.logits[out.selected.front()];
  double denom = 0.0;
  for (auto i : out.selected) {
    out.gates.push_back(std::exp(out.logits[i] - top));
    denom += out.gates.back();
  }
  for (double& g : out.gates) g /= denom;
  return out;
}

Corpus generate_corpus(const SimConfig& config, std::size_t tokens_per_language, std::uint64_t seed) {
  if (tokens_per_language < 1) throw std::invalid_argument("tokens_per_language must be >= 1");
  const auto centroids = language_centroids(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Corpus corpus;
  for (std::size_t j = 0; j < config.languages.size(); ++j) {
    const auto& c = centroids[j];
    const double sigma = config.languages[j].noise_scale.value_or(0.1 * std::sqrt(dot(c, c)));
    LanguageCorpus lc;
    lc.language = config.languages[j].tag;
    lc.tokens.reserve(tokens_per_language);
    for (std::size_t t = 0; t < tokens_per_language; ++t) {
      std::vector<double> h(c);
      for (double& x : h) x += sigma * normal(rng);
      lc.tokens.push_back(std::move(h));
    }
    corpus.push_back(std::move(lc));
  }
  return corpus;
}

std::vector<RoutingTrace> forward_corpus(const SimModel& model, const Corpus& corpus, const LogitTransform& transform) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus");
  const auto& topo = model.topology();
  const std::size_t d = model.config.hidden_dim;

  std::vector<RoutingTrace> traces;
  std::vector<double> h, next, scratch(d);
  for (const auto& lc : corpus) {
    RoutingTrace trace;
    trace.topology = topo;
    trace.language = lc.language;
    trace.events.reserve(lc.tokens.size() * topo.num_layers);
    for (std::size_t t = 0; t < lc.tokens.size(); ++t) {
      if (lc.tokens[t].size() != d) throw std::invalid_argument("dimension mismatch");
      h = lc.tokens[t];
      for (std::size_t l = 0; l < topo.num_layers; ++l) {
        RouteResult routed = route_token(h, l, model, transform);
        next.assign(d, 0.0);
        RoutingEvent ev;
        ev.token = t;
        ev.layer = static_cast<std::uint32_t>(l);
        for (std::size_t j = 0; j < routed.selected.size(); ++j) {
          const auto e = routed.selected[j];
          model.experts[l][e].apply(h, scratch);
          for (std::size_t k = 0; k < d; ++k) next[k] += routed.gates[j] * scratch[k];
          ev.selected.push_back({e, routed.logits[e], routed.gates[j]});
        }
        ev.full_logits = std::move(routed.logits);
        trace.events.push_back(std::move(ev));
        std::swap(h, next);
      }
    }
    trace.token_count = lc.tokens.size();
    traces.push_back(std::move(trace));
  }
  return traces;
}

}  // namespace moelab::sim
