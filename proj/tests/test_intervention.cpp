#include <doctest.h>

#include "moelab/error.hpp"
#include "moelab/intervention.hpp"
#include "moelab/moe_sim.hpp"
#include "test_support.hpp"

using namespace moelab;
using moelab::testing::make_dist;

namespace {

bool same_window(const LayerWindow& w, std::size_t start, std::size_t end) { return w.start == start && w.end == end; }

ExpertSets sets_from(std::vector<RoutingDistribution> dists, std::size_t related_k, double theta) {
  return classify(affinity_table(dists, related_k), theta);
}

// Classifies a simulated corpus with every language planted on its own pair of experts.
struct PlantedSetup {
  sim::SimConfig config;
  sim::SimModel model;
  sim::Corpus corpus;
  ExpertSets sets;
};

PlantedSetup planted_setup(std::size_t layers, std::vector<std::size_t> planted_layers) {
  PlantedSetup s;
  s.config = moelab::testing::single_family_config(5, layers, 16, 2);
  for (auto l : planted_layers)
    for (std::uint32_t j = 0; j < 4; ++j)
      s.config.plants.push_back({l, s.config.languages[j].tag, {2 * j, 2 * j + 1}, 10.0});
  s.model = sim::build_model(s.config);
  s.corpus = sim::generate_corpus(s.config, 200, 6);
  std::vector<RoutingDistribution> dists;
  for (const auto& t : sim::forward_corpus(s.model, s.corpus)) dists.push_back(routing_distribution(t));
  s.sets = sets_from(dists, 15, 0.4);
  return s;
}

sim::LogitTransform mask_transform(const InterventionPlan& plan) {
  return [plan](std::size_t layer, std::span<const double> logits) { return apply_mask(logits, layer, plan); };
}

}  // namespace

TEST_CASE("window presets") {
  const auto p48 = window_presets(48);
  CHECK(same_window(p48.early, 0, 4));
  CHECK(same_window(p48.middle, 22, 26));
  CHECK(same_window(p48.late, 43, 47));
  CHECK(p48.late.name == "late");

  const auto p3 = window_presets(3);
  CHECK(same_window(p3.early, 0, 0));
  CHECK(same_window(p3.middle, 1, 1));
  CHECK(same_window(p3.late, 2, 2));

  const auto p8 = window_presets(8);
  CHECK(same_window(p8.early, 0, 0));
  CHECK(same_window(p8.middle, 3, 3));
  CHECK(same_window(p8.late, 7, 7));

  CHECK_THROWS_AS(window_presets(2), std::invalid_argument);

  for (std::size_t layers = 3; layers <= 200; ++layers) {
    CAPTURE(layers);
    const auto p = window_presets(layers);
    CHECK(p.early.start == 0);
    CHECK(p.late.end == layers - 1);
    CHECK(p.early.end < p.middle.start);
    CHECK(p.middle.end < p.late.start);
    CHECK(p.middle.end - p.middle.start == p.early.end - p.early.start);
  }

  CHECK(same_window(steer_mid_window(48), 10, 39));
  CHECK(same_window(steer_mid_window(24), 5, 19));
}

TEST_CASE("parse_window") {
  CHECK(same_window(parse_window("late", 48), 43, 47));
  CHECK(same_window(parse_window("steer-mid", 48), 10, 39));
  CHECK(same_window(parse_window("3:7", 8), 3, 7));
  CHECK(parse_window("3:7", 8).name == "custom");
  CHECK_THROWS_AS(parse_window("50:60", 48), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("7:3", 8), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("3", 8), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("a:b", 8), std::invalid_argument);
  CHECK_THROWS_AS(parse_window("middle", 2), std::invalid_argument);
}

TEST_CASE("apply_mask") {
  InterventionPlan plan;
  plan.language = "en";
  plan.window = {"custom", 0, 0};
  plan.masks[0] = {2};
  const std::vector<double> logits{5, 4, 3, 2};
  CHECK(apply_mask(logits, 0, plan) == std::vector<double>{5, 4, -1e9, 2});
  CHECK(apply_mask(apply_mask(logits, 0, plan), 0, plan) == apply_mask(logits, 0, plan));
  CHECK(apply_mask(logits, 1, plan) == logits);

  plan.masks[0] = {};
  CHECK(apply_mask(logits, 0, plan) == logits);

  plan.masks[0] = {7};
  CHECK_THROWS_AS(apply_mask(logits, 0, plan), std::invalid_argument);
}

TEST_CASE("build_mask_plan") {
  SUBCASE("language without exclusive experts gives a no-op plan") {
    const auto row = std::vector<double>{0.5, 0.5, 0.5, 0.5};
    const auto sets = sets_from({make_dist("en", {row, row}, 2), make_dist("zh", {row, row}, 2)}, 4, 0.6);
    const auto plan = build_mask_plan(sets, "en", {"custom", 0, 1});
    for (const auto& [layer, ids] : plan.masks) CHECK(ids.empty());
    const std::vector<double> logits{1, 2, 3, 4};
    CHECK(apply_mask(logits, 1, plan) == logits);
  }
  SUBCASE("masks follow the exclusive sets inside the window only") {
    const auto sets = sets_from({make_dist("en", {{1, 1, 0, 0}, {1, 1, 0, 0}, {1, 1, 0, 0}}, 2),
                                 make_dist("zh", {{0, 0, 1, 1}, {0, 0, 1, 1}, {0, 0, 1, 1}}, 2)},
                                2, 0.6);
    const auto plan = build_mask_plan(sets, "zh", {"custom", 1, 2});
    CHECK(plan.masks.size() == 2);
    CHECK(plan.masks.at(1) == std::vector<std::uint32_t>{2, 3});
    CHECK(plan.mask_for(0) == nullptr);
    CHECK(plan.nu == kDefaultMaskValue);
  }
  SUBCASE("errors") {
    // en owns three of four experts; masking them leaves one for K = 2.
    const auto sets = sets_from({make_dist("en", {{1, 0.7, 0.3, 0}}, 2), make_dist("zh", {{0, 0, 0, 2}}, 2)}, 3, 0.6);
    CHECK_THROWS_AS(build_mask_plan(sets, "en", {"custom", 0, 0}), std::invalid_argument);
    CHECK_NOTHROW(build_mask_plan(sets, "zh", {"custom", 0, 0}));
    CHECK_THROWS_AS(build_mask_plan(sets, "fr", {"custom", 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(build_mask_plan(sets, "zh", {"custom", 0, 1}), std::invalid_argument);
  }
}

TEST_CASE("masking a simulated model") {
  SUBCASE("masked experts are never selected inside the window") {
    auto s = planted_setup(16, {0, 1});
    const auto early = window_presets(16).early;
    REQUIRE(same_window(early, 0, 1));
    REQUIRE(s.sets.exclusive(0, "sw") == ExpertIds{4, 5});
    const auto plan = build_mask_plan(s.sets, "sw", early);
    const auto traces = sim::forward_corpus(s.model, s.corpus, mask_transform(plan));
    for (const auto& t : traces) {
      CHECK(validate_trace(t).pass());
      for (const auto& ev : t.events)
        if (const auto* mask = plan.mask_for(ev.layer))
          for (const auto& c : ev.selected) CHECK(std::find(mask->begin(), mask->end(), c.expert) == mask->end());
    }
  }
  SUBCASE("layers before the window are untouched") {
    auto s = planted_setup(8, {5, 6});
    const auto plan = build_mask_plan(s.sets, "en", {"custom", 5, 6});
    REQUIRE_FALSE(plan.masks.at(5).empty());
    const auto base = sim::forward_corpus(s.model, s.corpus);
    const auto masked = sim::forward_corpus(s.model, s.corpus, mask_transform(plan));
    for (std::size_t j = 0; j < base.size(); ++j) {
      for (std::size_t e = 0; e < base[j].events.size(); ++e) {
        const auto& a = base[j].events[e];
        const auto& b = masked[j].events[e];
        if (a.layer >= 5) continue;
        CHECK(a.full_logits == b.full_logits);
        for (std::size_t k = 0; k < a.selected.size(); ++k) {
          CHECK(a.selected[k].expert == b.selected[k].expert);
          CHECK(a.selected[k].gate == b.selected[k].gate);
        }
      }
    }
  }
}

TEST_CASE("plan json round trip") {
  InterventionPlan plan;
  plan.language = "sw";
  plan.nu = -1e9;
  plan.window = {"early", 0, 1};
  plan.masks[0] = {4, 5};
  plan.masks[1] = {};
  const auto back = plan_from_json(plan_to_json(plan));
  CHECK(back.language == "sw");
  CHECK(back.nu == -1e9);
  CHECK(back.window.name == "early");
  CHECK(back.masks == plan.masks);
  CHECK(plan_to_json(back) == plan_to_json(plan));

  auto bad = plan_to_json(plan);
  bad["masks"]["7"] = {1};
  CHECK_THROWS_AS(plan_from_json(bad), ParseError);
}
