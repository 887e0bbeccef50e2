#include "moelab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "moelab/error.hpp"
#include "moelab/expert_classifier.hpp"
#include "moelab/intervention.hpp"
#include "moelab/manifest.hpp"
#include "moelab/moe_sim.hpp"
#include "moelab/routing_stats.hpp"
#include "moelab/steering.hpp"
#include "moelab/trace.hpp"

namespace moelab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Input data that parsed but cannot be used (invalid traces, mixed topologies).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- inputs and outputs ---------------------------------------------------

std::vector<fs::path> expand_paths(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& arg : args) {
    const fs::path p(arg);
    std::error_code ec;
    if (fs::is_directory(p, ec)) {
      std::vector<fs::path> found;
      for (const auto& entry : fs::directory_iterator(p))
        if (entry.is_regular_file() && entry.path().extension() == ".jsonl") found.push_back(entry.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(p, ec)) {
      out.push_back(p);
    } else {
      throw IoError("no such file or directory: " + arg);
    }
  }
  return out;
}

void require_valid(const RoutingTrace& trace, const fs::path& path) {
  const auto report = validate_trace(trace);
  if (!report.pass()) {
    const auto& v = report.violations.front();
    throw DataError(path.string() + ": " + std::to_string(report.violations.size()) +
                    " violation(s), first at token " + std::to_string(v.token) + " layer " +
                    std::to_string(v.layer) + ": " + v.rule);
  }
}

/// Reads, validates and merges trace files into one trace per language,
/// ordered by first appearance.
std::vector<RoutingTrace> load_languages(const std::vector<fs::path>& paths) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<RoutingTrace>> by_language;
  for (const auto& p : paths) {
    RoutingTrace t = read_trace_file(p);
    require_valid(t, p);
    if (!by_language.count(t.language)) order.push_back(t.language);
    by_language[t.language].push_back(std::move(t));
  }
  std::vector<RoutingTrace> out;
  for (const auto& lang : order) {
    auto& list = by_language[lang];
    for (const auto& t : list)
      if (!t.topology.same_shape(list.front().topology)) throw DataError("mixed topologies for language " + lang);
    out.push_back(list.size() == 1 ? std::move(list.front()) : merge_traces(list));
  }
  for (const auto& t : out)
    if (!t.topology.same_shape(out.front().topology)) throw DataError("mixed topologies across trace files");
  return out;
}

std::vector<RoutingDistribution> distributions(const std::vector<RoutingTrace>& traces) {
  std::vector<RoutingDistribution> out;
  for (const auto& t : traces) {
    if (t.token_count == 0) throw DataError("trace for " + t.language + " has no tokens");
    out.push_back(routing_distribution(t));
  }
  return out;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_json_file(const fs::path& path, const json& j) { open_output(path) << j.dump(2) << '\n'; }

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> paths_as_strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(p.string());
  return out;
}

/// MOELAB_SEED overrides configured seeds.
std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("MOELAB_SEED");
  if (!raw || !*raw) return std::nullopt;
  std::uint64_t v = 0;
  const std::string_view s(raw);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw UsageError("MOELAB_SEED must be an unsigned integer");
  return v;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      grid.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError("bad lambda grid value: " + item);
    }
  }
  if (grid.empty()) throw UsageError("empty lambda grid");
  return grid;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct SimRun {
  sim::SimConfig config;
  std::uint64_t corpus_seed = 0;
};

SimRun load_sim(const fs::path& path) {
  SimRun run;
  run.config = sim::read_sim_config(path);
  if (auto seed = env_seed()) run.config.seed = *seed;
  run.corpus_seed = run.config.seed + 1;
  return run;
}

// ---- commands ---------------------------------------------------------------

struct ValidateOptions {
  std::vector<std::string> traces;
  std::string report;
  std::string manifest;
};

int cmd_validate(const ValidateOptions& o, std::ostream& out, std::ostream& err) {
  const auto paths = expand_paths(o.traces);
  if (paths.empty()) throw UsageError("no trace files found");
  bool all_pass = true;
  json files = json::array();
  for (const auto& p : paths) {
    json entry = {{"path", p.string()}};
    try {
      const RoutingTrace t = read_trace_file(p);
      const auto report = validate_trace(t);
      entry["events"] = report.event_count;
      entry["pass"] = report.pass();
      json violations = json::array();
      for (const auto& v : report.violations) {
        out << p.string() << ": token " << v.token << " layer " << v.layer << ": " << v.rule << " (" << v.detail << ")\n";
        violations.push_back({{"token", v.token}, {"layer", v.layer}, {"rule", v.rule}, {"detail", v.detail}});
      }
      entry["violations"] = std::move(violations);
      if (report.pass()) out << p.string() << ": ok (" << report.event_count << " events, " << t.token_count << " tokens)\n";
      all_pass = all_pass && report.pass();
    } catch (const ParseError& e) {
      err << "parse error: " << e.what() << '\n';
      entry["pass"] = false;
      entry["error"] = e.what();
      all_pass = false;
    }
    files.push_back(std::move(entry));
  }

  RunManifest manifest{"validate", {{"traces", paths_as_strings(paths)}, {"report", o.report}}, paths, {}};
  if (!o.report.empty()) {
    write_json_file(o.report, {{"pass", all_pass}, {"files", files}});
    manifest.outputs.push_back(o.report);
  }
  const std::string manifest_path = !o.manifest.empty() ? o.manifest : !o.report.empty() ? o.report + ".manifest.json" : "";
  if (!manifest_path.empty()) manifest.write(manifest_path);
  return all_pass ? kSuccess : kValidationFailure;
}

struct SimilarityOptions {
  std::vector<std::string> traces;
  std::string layer = "final";
  std::string out_path;
};

int cmd_similarity(const SimilarityOptions& o, std::ostream& out, std::ostream&) {
  const LayerScope scope = [&] {
    try {
      return LayerScope::parse(o.layer);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }();
  const auto paths = expand_paths(o.traces);
  const auto traces = load_languages(paths);
  if (traces.size() < 2) throw UsageError("need >= 2 languages");
  const auto dists = distributions(traces);

  RunManifest manifest{"similarity", {{"traces", paths_as_strings(paths)}, {"layer", o.layer}, {"out", o.out_path}}, paths, {}};
  fs::path manifest_path;
  if (scope.kind == LayerScope::Kind::kCurve) {
    const fs::path dir(o.out_path);
    make_dir(dir);
    for (std::size_t a = 0; a < dists.size(); ++a) {
      for (std::size_t b = a + 1; b < dists.size(); ++b) {
        const fs::path file = dir / ("sim_" + dists[a].language + "_" + dists[b].language + ".csv");
        auto stream = open_output(file);
        write_similarity_curve_csv(stream, similarity_curve(dists[a], dists[b]));
        manifest.outputs.push_back(file);
      }
    }
    manifest_path = dir / "manifest.json";
  } else {
    const auto matrix = similarity_matrix(dists, scope);
    auto stream = open_output(o.out_path);
    write_similarity_matrix_csv(stream, matrix);
    manifest.parameters["resolved_layer"] = matrix.layer;
    manifest.outputs.push_back(o.out_path);
    manifest_path = o.out_path + ".manifest.json";
  }
  manifest.write(manifest_path);
  out << "wrote " << manifest.outputs.size() << " file(s)\n";
  return kSuccess;
}

struct ClassifyOptions {
  std::vector<std::string> traces;
  std::size_t related_k = 15;
  double theta = 0.4;
  std::string groups;
  std::string out_dir;
};

int cmd_classify(const ClassifyOptions& o, std::ostream& out, std::ostream& err) {
  if (!(o.theta > 0.0 && o.theta < 1.0)) throw UsageError("--theta must be in (0, 1)");
  const auto paths = expand_paths(o.traces);
  const auto traces = load_languages(paths);
  if (traces.size() < 2) throw UsageError("need >= 2 languages");
  const auto dists = distributions(traces);
  if (o.related_k < 1 || o.related_k > dists.front().topology.num_experts)
    throw UsageError("--related-k must be in [1, num_experts]");

  const AffinityTable table = affinity_table(dists, o.related_k);
  const ExpertSets sets = classify(table, o.theta);
  for (std::size_t l = 0; l < sets.layers.size(); ++l) {
    if (!sets.layers[l].dropped.empty())
      err << "note: layer " << l << ": " << sets.layers[l].dropped.size()
          << " candidate(s) with zero total frequency excluded from W\n";
    if (!sets.layers[l].overlaps.empty())
      err << "note: layer " << l << ": " << sets.layers[l].overlaps.size()
          << " expert(s) exclusive for more than one language\n";
  }

  // An explicit groups file must cover every language; the built-in
  // assignment is used only when it does.
  std::optional<GroupAssignment> groups;
  std::vector<fs::path> inputs = paths;
  if (!o.groups.empty()) {
    const json j = read_json_file(o.groups);
    try {
      groups = j.get<GroupAssignment>();
    } catch (const json::exception& e) {
      throw ParseError(o.groups + ": groups file must map language tags to group names");
    }
    inputs.push_back(o.groups);
  } else {
    const auto defaults = default_groups();
    if (std::all_of(sets.languages.begin(), sets.languages.end(), [&](const auto& l) { return defaults.count(l); }))
      groups = defaults;
    else
      err << "note: default language groups do not cover all languages; group averages skipped\n";
  }
  ExclusivityProfile profile;
  try {
    profile = exclusivity_profile(sets, groups);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const fs::path dir(o.out_dir);
  make_dir(dir);
  RunManifest manifest{"classify",
                       {{"traces", paths_as_strings(paths)},
                        {"related_k", o.related_k},
                        {"theta", o.theta},
                        {"groups", o.groups.empty() ? json("default") : json(o.groups)},
                        {"out", o.out_dir}},
                       inputs,
                       {}};
  write_json_file(dir / "expert_sets.json", expert_sets_to_json(sets));
  manifest.outputs.push_back(dir / "expert_sets.json");
  {
    auto stream = open_output(dir / "exclusivity.csv");
    write_exclusivity_csv(stream, profile);
    manifest.outputs.push_back(dir / "exclusivity.csv");
  }
  if (!profile.groups.empty()) {
    auto stream = open_output(dir / "exclusivity_groups.csv");
    write_group_csv(stream, profile);
    manifest.outputs.push_back(dir / "exclusivity_groups.csv");
  }
  manifest.write(dir / "manifest.json");
  out << "related_k=" << o.related_k << " theta=" << format_double(o.theta) << " languages=" << sets.languages.size()
      << '\n';
  return kSuccess;
}

struct SimulateOptions {
  std::string config;
  std::size_t tokens = 500;
  std::string transform = "none";
  std::string plan;
  std::string profile;
  std::string out_dir;
};

int cmd_simulate(const SimulateOptions& o, std::ostream& out, std::ostream&) {
  const SimRun run = load_sim(o.config);
  const auto& topo = run.config.topology;
  std::vector<fs::path> inputs{o.config};

  sim::LogitTransform transform;
  std::optional<InterventionPlan> plan;
  std::optional<SteeringProfile> profile;
  if (o.transform == "mask-plan") {
    if (o.plan.empty()) throw UsageError("--transform mask-plan requires --plan");
    plan = plan_from_json(read_json_file(o.plan));
    try {
      plan->window.check(topo.num_layers);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    for (const auto& [layer, ids] : plan->masks) {
      if (ids.size() > topo.num_experts - topo.top_k) throw UsageError("mask plan leaves fewer than top_k experts");
      for (auto e : ids)
        if (e >= topo.num_experts) throw UsageError("mask plan names an expert beyond num_experts");
    }
    inputs.push_back(o.plan);
    transform = [&p = *plan](std::size_t layer, std::span<const double> g) { return apply_mask(g, layer, p); };
  } else if (o.transform == "steer-profile") {
    if (o.profile.empty()) throw UsageError("--transform steer-profile requires --profile");
    profile = profile_from_json(read_json_file(o.profile));
    try {
      profile->layers.check(topo.num_layers);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    inputs.push_back(o.profile);
    transform = [&p = *profile](std::size_t layer, std::span<const double> g) { return apply_steering(g, layer, p); };
  } else if (o.transform != "none") {
    throw UsageError("--transform must be none, mask-plan or steer-profile");
  }

  const sim::SimModel model = sim::build_model(run.config);
  const sim::Corpus corpus = sim::generate_corpus(run.config, o.tokens, run.corpus_seed);
  const auto traces = sim::forward_corpus(model, corpus, transform);

  const fs::path dir(o.out_dir);
  make_dir(dir);
  RunManifest manifest{"simulate",
                       {{"config", o.config},
                        {"resolved_config", sim::sim_config_to_json(run.config)},
                        {"seed", run.config.seed},
                        {"corpus_seed", run.corpus_seed},
                        {"tokens", o.tokens},
                        {"transform", o.transform},
                        {"plan", o.plan},
                        {"profile", o.profile},
                        {"out", o.out_dir}},
                       inputs,
                       {}};
  for (const auto& t : traces) {
    const fs::path file = dir / (t.language + ".jsonl");
    write_trace_file(file, t);
    manifest.outputs.push_back(file);
  }
  manifest.write(dir / "manifest.json");
  out << "wrote " << traces.size() << " trace(s) of " << o.tokens << " tokens\n";
  return kSuccess;
}

struct InterveneOptions {
  std::string sets;
  std::string language;
  std::string window;
  double nu = kDefaultMaskValue;
  std::string out_path;
};

int cmd_intervene(const InterveneOptions& o, std::ostream& out, std::ostream&) {
  const ExpertSets sets = expert_sets_from_json(read_json_file(o.sets));
  InterventionPlan plan;
  try {
    const LayerWindow window = parse_window(o.window, sets.topology.num_layers);
    plan = build_mask_plan(sets, o.language, window, o.nu);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  write_json_file(o.out_path, plan_to_json(plan));
  RunManifest manifest{"intervene",
                       {{"sets", o.sets},
                        {"language", o.language},
                        {"window", o.window},
                        {"resolved_window", {{"name", plan.window.name}, {"start", plan.window.start}, {"end", plan.window.end}}},
                        {"nu", o.nu},
                        {"out", o.out_path}},
                       {o.sets},
                       {o.out_path}};
  manifest.write(o.out_path + ".manifest.json");
  std::size_t masked = 0;
  for (const auto& [layer, ids] : plan.masks) masked += ids.size();
  out << "window " << plan.window.name << " [" << plan.window.start << ", " << plan.window.end << "], " << masked
      << " masked expert slot(s)\n";
  return kSuccess;
}

struct SteerOptions {
  std::vector<std::string> traces;
  std::string source = "en";
  std::string dominant = "en,zh";
  double lambda = 0.0;
  std::string layers = "steer-mid";
  std::size_t related_k = kSteeringRelatedK;
  double theta = kSteeringTheta;
  std::string sweep;
  std::string config;
  std::size_t tokens = 500;
  std::string out_dir;
};

int cmd_steer(const SteerOptions& o, std::ostream& out, std::ostream&) {
  if (!(o.theta > 0.0 && o.theta < 1.0)) throw UsageError("--theta must be in (0, 1)");
  if (!(o.lambda >= 0.0)) throw UsageError("--lambda must be >= 0");
  const auto dominant = split_list(o.dominant);
  if (dominant.empty()) throw UsageError("empty dominant language set");

  std::optional<SimRun> run;
  if (!o.config.empty()) run = load_sim(o.config);
  if (!o.sweep.empty() && !run) throw UsageError("--sweep requires --config");

  std::vector<fs::path> inputs;
  std::vector<RoutingTrace> traces;
  if (!o.traces.empty()) {
    inputs = expand_paths(o.traces);
    traces = load_languages(inputs);
  } else if (run) {
    const auto model = sim::build_model(run->config);
    traces = sim::forward_corpus(model, sim::generate_corpus(run->config, o.tokens, run->corpus_seed));
  } else {
    throw UsageError("steer needs dominant-language traces or --config");
  }
  if (run) inputs.push_back(o.config);

  std::vector<RoutingDistribution> dom_dists;
  for (const auto& lang : dominant) {
    auto it = std::find_if(traces.begin(), traces.end(), [&](const auto& t) { return t.language == lang; });
    if (it == traces.end()) throw UsageError("no trace for dominant language " + lang);
    dom_dists.push_back(routing_distribution(*it));
  }
  const auto& topo = dom_dists.front().topology;
  if (o.related_k < 1 || o.related_k > topo.num_experts) throw UsageError("--related-k must be in [1, num_experts]");

  SteeringProfile profile;
  try {
    const LayerWindow layers = parse_window(o.layers, topo.num_layers);
    profile = build_steering_profile(dom_dists, o.related_k, o.theta, o.source, o.lambda, layers);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const fs::path dir(o.out_dir);
  make_dir(dir);
  RunManifest manifest{"steer",
                       {{"traces", paths_as_strings(expand_paths(o.traces))},
                        {"source", o.source},
                        {"dominant", dominant},
                        {"lambda", o.lambda},
                        {"layers", o.layers},
                        {"resolved_layers", {{"start", profile.layers.start}, {"end", profile.layers.end}}},
                        {"related_k", o.related_k},
                        {"theta", o.theta},
                        {"sweep", o.sweep},
                        {"config", o.config},
                        {"tokens", o.tokens},
                        {"out", o.out_dir}},
                       inputs,
                       {}};
  if (run) {
    manifest.parameters["seed"] = run->config.seed;
    manifest.parameters["corpus_seed"] = run->corpus_seed;
  }
  write_json_file(dir / "profile.json", profile_to_json(profile));
  manifest.outputs.push_back(dir / "profile.json");

  if (!o.sweep.empty()) {
    const auto grid = parse_grid(o.sweep);
    for (double lambda : grid)
      if (!(lambda >= 0.0)) throw UsageError("lambda grid values must be >= 0");
    if (!topo.same_shape(run->config.topology)) throw DataError("traces and simulator config disagree on topology");
    const auto model = sim::build_model(run->config);
    const auto corpus = sim::generate_corpus(run->config, o.tokens, run->corpus_seed);
    const auto curve = sweep_lambda(model, corpus, profile, grid);
    auto stream = open_output(dir / "sweep.csv");
    write_sweep_csv(stream, curve);
    manifest.outputs.push_back(dir / "sweep.csv");
  }
  manifest.write(dir / "manifest.json");

  std::size_t targets = 0;
  for (const auto& [layer, list] : profile.targets) targets += list.size();
  out << "related_k=" << o.related_k << " theta=" << format_double(o.theta) << " layers=[" << profile.layers.start
      << ", " << profile.layers.end << "] targets=" << targets << '\n';
  return kSuccess;
}

struct EntropyOptions {
  std::vector<std::string> traces;
  std::string out_dir;
};

int cmd_entropy(const EntropyOptions& o, std::ostream& out, std::ostream&) {
  const auto paths = expand_paths(o.traces);
  const auto traces = load_languages(paths);
  if (traces.empty()) throw UsageError("no traces given");
  const auto dists = distributions(traces);

  const fs::path dir(o.out_dir);
  make_dir(dir);
  RunManifest manifest{"entropy", {{"traces", paths_as_strings(paths)}, {"out", o.out_dir}}, paths, {}};
  auto summary = open_output(dir / "entropy_summary.csv");
  summary << "language,mean_entropy\n";
  for (const auto& d : dists) {
    const EntropyProfile profile = routing_entropy(d);
    const fs::path file = dir / ("entropy_" + d.language + ".csv");
    auto stream = open_output(file);
    write_entropy_csv(stream, profile);
    manifest.outputs.push_back(file);
    summary << d.language << ',' << format_double(profile.mean) << '\n';
    out << d.language << ": mean entropy " << format_double(profile.mean) << " bits\n";
  }
  summary.close();
  manifest.outputs.push_back(dir / "entropy_summary.csv");
  manifest.write(dir / "manifest.json");
  return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Routing analysis and interventions for Mixture-of-Experts models", "moelab"};
  app.set_version_flag("--version", tool_version());
  app.require_subcommand(1);

  std::function<int()> action;

  ValidateOptions validate;
  auto* v = app.add_subcommand("validate", "Check trace files against the routing invariants");
  v->add_option("traces", validate.traces, "Trace files or directories")->required();
  v->add_option("--report", validate.report, "Write a JSON report");
  v->add_option("--manifest", validate.manifest, "Manifest path");
  v->callback([&] { action = [&] { return cmd_validate(validate, out, err); }; });

  SimilarityOptions similarity;
  auto* s = app.add_subcommand("similarity", "Cross-language routing similarity (1 - JSD)");
  s->add_option("traces", similarity.traces, "Trace files or directories")->required();
  s->add_option("--layer", similarity.layer, "final | layer index | curve")->capture_default_str();
  s->add_option("--out", similarity.out_path, "Matrix CSV, or output directory in curve mode")->required();
  s->callback([&] { action = [&] { return cmd_similarity(similarity, out, err); }; });

  ClassifyOptions cls;
  auto* c = app.add_subcommand("classify", "Language-related, exclusive and shared experts");
  c->add_option("traces", cls.traces, "Trace files or directories")->required();
  c->add_option("--related-k", cls.related_k, "Language-related experts per layer")->capture_default_str();
  c->add_option("--theta", cls.theta, "Exclusivity threshold in (0, 1)")->capture_default_str();
  c->add_option("--groups", cls.groups, "JSON map of language -> group");
  c->add_option("--out", cls.out_dir, "Output directory")->required();
  c->callback([&] { action = [&] { return cmd_classify(cls, out, err); }; });

  SimulateOptions simulate;
  auto* m = app.add_subcommand("simulate", "Run the toy MoE over a synthetic corpus");
  m->add_option("--config", simulate.config, "Simulator config JSON")->required();
  m->add_option("--tokens", simulate.tokens, "Tokens per language")->capture_default_str()->check(CLI::PositiveNumber);
  m->add_option("--transform", simulate.transform, "none | mask-plan | steer-profile")->capture_default_str();
  m->add_option("--plan", simulate.plan, "Intervention plan JSON");
  m->add_option("--profile", simulate.profile, "Steering profile JSON");
  m->add_option("--out", simulate.out_dir, "Output directory")->required();
  m->callback([&] { action = [&] { return cmd_simulate(simulate, out, err); }; });

  InterveneOptions intervene;
  auto* i = app.add_subcommand("intervene", "Build an expert masking plan");
  i->add_option("--sets", intervene.sets, "expert_sets.json from classify")->required();
  i->add_option("--language", intervene.language, "Target language")->required();
  i->add_option("--window", intervene.window, "early | middle | late | a:b")->required();
  i->add_option("--nu", intervene.nu, "Masking constant")->capture_default_str();
  i->add_option("--out", intervene.out_path, "Plan JSON path")->required();
  i->callback([&] { action = [&] { return cmd_intervene(intervene, out, err); }; });

  SteerOptions steer;
  auto* t = app.add_subcommand("steer", "Build a steering profile and optionally sweep lambda");
  t->add_option("traces", steer.traces, "Dominant-language trace files or directories");
  t->add_option("--source", steer.source, "Steering source language")->capture_default_str();
  t->add_option("--dominant", steer.dominant, "Comma-separated dominant languages")->capture_default_str();
  t->add_option("--lambda", steer.lambda, "Steering strength")->capture_default_str();
  t->add_option("--layers", steer.layers, "steer-mid | a:b")->capture_default_str();
  t->add_option("--related-k", steer.related_k, "Language-related experts per layer")->capture_default_str();
  t->add_option("--theta", steer.theta, "Shared-expert threshold in (0, 1)")->capture_default_str();
  t->add_option("--sweep", steer.sweep, "Comma-separated lambda grid");
  t->add_option("--config", steer.config, "Simulator config for sweeps");
  t->add_option("--tokens", steer.tokens, "Tokens per language when simulating")->capture_default_str()->check(CLI::PositiveNumber);
  t->add_option("--out", steer.out_dir, "Output directory")->required();
  t->callback([&] { action = [&] { return cmd_steer(steer, out, err); }; });

  EntropyOptions entropy;
  auto* e = app.add_subcommand("entropy", "Per-layer routing entropy curves");
  e->add_option("traces", entropy.traces, "Trace files or directories")->required();
  e->add_option("--out", entropy.out_dir, "Output directory")->required();
  e->callback([&] { action = [&] { return cmd_entropy(entropy, out, err); }; });

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& ex) {
    app.exit(ex, out, err);
    return kSuccess;
  } catch (const CLI::CallForAllHelp& ex) {
    app.exit(ex, out, err);
    return kSuccess;
  } catch (const CLI::CallForVersion& ex) {
    app.exit(ex, out, err);
    return kSuccess;
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kUsageError;
  }

  try {
    return action();
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << '\n';
    return kUsageError;
  } catch (const IoError& ex) {
    err << "I/O error: " << ex.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& ex) {
    err << "I/O error: " << ex.what() << '\n';
    return kIoError;
  } catch (const ParseError& ex) {
    err << "invalid input: " << ex.what() << '\n';
    return kValidationFailure;
  } catch (const DataError& ex) {
    err << "invalid input: " << ex.what() << '\n';
    return kValidationFailure;
  } catch (const std::invalid_argument& ex) {
    err << "usage error: " << ex.what() << '\n';
    return kUsageError;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace moelab::cli
