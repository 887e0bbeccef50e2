#include <doctest.h>

#include <fstream>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/moe_sim.hpp"
#include "moelab/routing_stats.hpp"
#include "moelab/trace.hpp"
#include "test_support.hpp"

using namespace moelab;
using moelab::testing::topology;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RoutingTrace parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse_trace(in);
}

bool has_rule(const TraceValidationReport& r, const std::string& rule) {
  return std::any_of(r.violations.begin(), r.violations.end(), [&](const auto& v) { return v.rule == rule; });
}

const std::string kHeader =
    R"({"kind":"header","model_id":"m","num_layers":2,"num_experts":4,"top_k":2,"language":"en"})";

}  // namespace

TEST_CASE("parse minimal well-formed file") {
  const auto t = parse_string(kHeader + "\n" +
                              R"({"kind":"event","token":0,"layer":0,"experts":[0,1],"logits":[2,1],"gates":[0.75,0.25]})"
                              "\n" +
                              R"({"kind":"event","token":0,"layer":1,"experts":[2,3],"logits":[1,0],"gates":[0.5,0.5]})");
  CHECK(t.token_count == 1);
  CHECK(t.language == "en");
  CHECK(t.topology.num_layers == 2);
  CHECK(t.topology.num_experts == 4);
  CHECK(t.topology.top_k == 2);
  REQUIRE(t.events.size() == 2);
  CHECK(t.events[1].selected[1].expert == 3);
  CHECK(t.events[0].full_logits.empty());
}

TEST_CASE("parse errors carry line numbers") {
  SUBCASE("header missing") {
    try {
      parse_string(R"({"kind":"event","token":0,"layer":0,"experts":[0],"logits":[1],"gates":[1]})");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("topology header missing") != std::string::npos);
    }
  }
  SUBCASE("empty file") { CHECK_THROWS_WITH_AS(parse_string(""), "topology header missing", ParseError); }
  SUBCASE("malformed field") {
    try {
      parse_string(kHeader + "\n" + R"({"kind":"event","token":-1,"layer":0,"experts":[0],"logits":[1],"gates":[1]})");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
      CHECK(std::string(e.what()).find("token") != std::string::npos);
    }
  }
  SUBCASE("invalid json") {
    try {
      parse_string(kHeader + "\n\n{not json");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
  SUBCASE("unequal parallel arrays") {
    CHECK_THROWS_AS(
        parse_string(kHeader + "\n" + R"({"kind":"event","token":0,"layer":0,"experts":[0,1],"logits":[1],"gates":[1,0]})"),
        ParseError);
  }
  SUBCASE("duplicate token/layer pair") {
    const std::string ev = R"({"kind":"event","token":0,"layer":0,"experts":[0,1],"logits":[1,0],"gates":[0.5,0.5]})";
    try {
      parse_string(kHeader + "\n" + ev + "\n" + ev);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    }
  }
  SUBCASE("invalid topology") {
    CHECK_THROWS_AS(
        parse_string(R"({"kind":"header","model_id":"m","num_layers":2,"num_experts":4,"top_k":5,"language":"en"})"),
        ParseError);
  }
}

TEST_CASE("fixture files round-trip byte-identically") {
  const std::filesystem::path dir = MOELAB_FIXTURES;
  for (const char* name : {"minimal.jsonl", "full_logits.jsonl"}) {
    CAPTURE(name);
    const std::string text = slurp(dir / name);
    CHECK(serialize_trace(read_trace_file(dir / name)) == text);
  }
  // Whitespace, key order, event order and trailing zeros are canonicalized.
  CHECK(serialize_trace(read_trace_file(dir / "canonicalize" / "noncanonical.jsonl")) == slurp(dir / "minimal.jsonl"));
}

TEST_CASE("1000-token 48-layer simulated trace round-trips") {
  sim::SimConfig c;
  c.topology = topology(48, 8, 2);
  c.hidden_dim = 6;
  c.languages = {{"en", "a", {}}};
  c.seed = 17;
  const auto model = sim::build_model(c);
  const auto traces = sim::forward_corpus(model, sim::generate_corpus(c, 1000, 18));
  const std::string text = serialize_trace(traces.front());
  const auto parsed = parse_string(text);
  CHECK(parsed.token_count == 1000);
  CHECK(parsed.events.size() == 48000);
  CHECK(serialize_trace(parsed) == text);
}

TEST_CASE("format_double is shortest round-trip") {
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(-1e9) == "-1e+09");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng) / 7.0;
    CHECK(std::stod(format_double(x)) == x);
  }
  CHECK_THROWS_AS(format_double(NAN), std::invalid_argument);
}

TEST_CASE("validate_trace") {
  const MoETopology topo = topology(2, 4, 2);

  SUBCASE("random trace passes") { CHECK(validate_trace(moelab::testing::random_trace(topo, 20, 1)).pass()); }

  SUBCASE("gate sum") {
    auto t = moelab::testing::random_trace(topo, 3, 1);
    t.events[2].selected[0].gate = 0.6;
    t.events[2].selected[1].gate = 0.6;
    const auto r = validate_trace(t);
    CHECK_FALSE(r.pass());
    REQUIRE(r.violations.size() == 1);
    CHECK(r.violations[0].rule == "gate sum");
    CHECK(r.violations[0].token == 1);
    CHECK(r.violations[0].layer == 0);
  }

  SUBCASE("duplicate expert") {
    auto t = moelab::testing::random_trace(topo, 2, 1);
    t.events[0].selected[1].expert = t.events[0].selected[0].expert;
    CHECK(has_rule(validate_trace(t), "duplicate expert"));
  }

  SUBCASE("range, arity and coverage") {
    auto t = moelab::testing::random_trace(topo, 3, 1);
    t.events[0].selected[0].expert = 9;
    t.events[1].selected.pop_back();
    t.events[1].selected[0].gate = 1.0;
    t.events.pop_back();  // token 2 loses layer 1
    const auto r = validate_trace(t);
    CHECK(has_rule(r, "expert range"));
    CHECK(has_rule(r, "arity"));
    CHECK(has_rule(r, "missing layer"));
    CHECK(r.event_count == 5);
  }

  SUBCASE("gate outside (0, 1]") {
    auto t = moelab::testing::random_trace(topo, 1, 1);
    t.events[0].selected[0].gate = 1.0;
    t.events[0].selected[1].gate = 0.0;
    CHECK(has_rule(validate_trace(t), "gate range"));
  }

  SUBCASE("full logits must agree with the selection") {
    auto t = moelab::testing::random_trace(topo, 1, 1);
    auto& ev = t.events[0];
    ev.full_logits.assign(4, -5.0);
    for (const auto& c : ev.selected) ev.full_logits[c.expert] = c.logit;
    CHECK(validate_trace(t).pass());

    std::uint32_t other = 0;
    while (other == ev.selected[0].expert || other == ev.selected[1].expert) ++other;
    ev.full_logits[other] = 100.0;
    CHECK(has_rule(validate_trace(t), "topk mismatch"));
    ev.full_logits[other] = -5.0;
    ev.full_logits[ev.selected[0].expert] += 1.0;
    CHECK(has_rule(validate_trace(t), "logit mismatch"));
    ev.full_logits.resize(3);
    CHECK(has_rule(validate_trace(t), "full_logits length"));
  }

  SUBCASE("violations are ordered by token then layer") {
    auto t = moelab::testing::random_trace(topo, 4, 1);
    t.events[7].selected[0].gate = 2.0;  // token 3 layer 1
    t.events[0].selected[0].gate = 2.0;  // token 0 layer 0
    t.events[3].selected[0].gate = 2.0;  // token 1 layer 1
    std::reverse(t.events.begin(), t.events.end());
    const auto r = validate_trace(t);
    REQUIRE(r.violations.size() >= 3);
    for (std::size_t i = 1; i < r.violations.size(); ++i) {
      const auto& a = r.violations[i - 1];
      const auto& b = r.violations[i];
      CHECK((a.token < b.token || (a.token == b.token && a.layer <= b.layer)));
    }
  }
}

TEST_CASE("merge_traces") {
  const MoETopology topo = topology(3, 8, 2);
  const auto a = moelab::testing::random_trace(topo, 10, 1, "en");
  const auto b = moelab::testing::random_trace(topo, 10, 2, "en");
  const std::vector<RoutingTrace> ab{a, b};
  const auto merged = merge_traces(ab);
  CHECK(merged.token_count == 20);
  CHECK(merged.events.size() == 60);
  CHECK(validate_trace(merged).pass());
  CHECK(merged.events.back().token == 19);

  SUBCASE("order does not change routing frequencies") {
    const std::vector<RoutingTrace> ba{b, a};
    CHECK(routing_distribution(merge_traces(ba)).per_layer == routing_distribution(merged).per_layer);
  }
  SUBCASE("errors") {
    CHECK_THROWS_WITH_AS(merge_traces({}), "empty input", std::invalid_argument);
    auto other_lang = b;
    other_lang.language = "zh";
    CHECK_THROWS_WITH_AS(merge_traces(std::vector<RoutingTrace>{a, other_lang}), "language mismatch",
                         std::invalid_argument);
    const auto other_topo = moelab::testing::random_trace(topology(3, 6, 2), 2, 1, "en");
    CHECK_THROWS_WITH_AS(merge_traces(std::vector<RoutingTrace>{a, other_topo}), "topology mismatch",
                         std::invalid_argument);
  }
  SUBCASE("sparse token indices are renumbered densely") {
    auto sparse = a;
    for (auto& ev : sparse.events) ev.token = ev.token * 100 + 7;
    const auto m = merge_traces(std::vector<RoutingTrace>{sparse, b});
    CHECK(m.token_count == 20);
    CHECK(validate_trace(m).pass());
  }
}

TEST_CASE("routing frequencies of a valid trace sum to K per layer") {
  for (std::size_t k : {1u, 2u, 5u}) {
    const auto t = moelab::testing::random_trace(topology(4, 12, k), 37, k);
    REQUIRE(validate_trace(t).pass());
    const auto d = routing_distribution(t);
    for (const auto& row : d.per_layer) CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(k).epsilon(1e-12));
  }
}
