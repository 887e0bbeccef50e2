#include "moelab/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "moelab/error.hpp"

namespace moelab {

using nlohmann::json;

void MoETopology::check() const {
  if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
  if (num_experts < 2) throw std::invalid_argument("num_experts must be >= 2");
  if (top_k < 1 || top_k > num_experts)
    throw std::invalid_argument("top_k must be in [1, num_experts]");
}

std::string format_double(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("cannot serialize non-finite value");
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw std::runtime_error("to_chars failed");
  return std::string(buf, end);
}

namespace {

const json& require(const json& record, const char* key, std::size_t line) {
  auto it = record.find(key);
  if (it == record.end()) throw ParseError(std::string("missing field '") + key + "'", line);
  return *it;
}

std::uint64_t read_uint(const json& record, const char* key, std::size_t line) {
  const json& v = require(record, key, line);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  throw ParseError(std::string("field '") + key + "' must be a non-negative integer", line);
}

std::string read_string(const json& record, const char* key, std::size_t line) {
  const json& v = require(record, key, line);
  if (!v.is_string()) throw ParseError(std::string("field '") + key + "' must be a string", line);
  return v.get<std::string>();
}

std::vector<double> read_doubles(const json& v, const char* key, std::size_t line) {
  if (!v.is_array()) throw ParseError(std::string("field '") + key + "' must be an array", line);
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) throw ParseError(std::string("field '") + key + "' holds a non-number", line);
    out.push_back(x.get<double>());
  }
  return out;
}

MoETopology read_header(const json& record, std::string& language, std::size_t line) {
  MoETopology topo;
  topo.model_id = read_string(record, "model_id", line);
  topo.num_layers = read_uint(record, "num_layers", line);
  topo.num_experts = read_uint(record, "num_experts", line);
  topo.top_k = read_uint(record, "top_k", line);
  language = read_string(record, "language", line);
  try {
    topo.check();
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("header: ") + e.what(), line);
  }
  return topo;
}

RoutingEvent read_event(const json& record, std::size_t line) {
  RoutingEvent ev;
  ev.token = read_uint(record, "token", line);
  const std::uint64_t layer = read_uint(record, "layer", line);
  if (layer > UINT32_MAX) throw ParseError("field 'layer' out of range", line);
  ev.layer = static_cast<std::uint32_t>(layer);

  const json& experts = require(record, "experts", line);
  if (!experts.is_array()) throw ParseError("field 'experts' must be an array", line);
  std::vector<double> logits = read_doubles(require(record, "logits", line), "logits", line);
  std::vector<double> gates = read_doubles(require(record, "gates", line), "gates", line);
  if (logits.size() != experts.size() || gates.size() != experts.size())
    throw ParseError("fields 'experts', 'logits' and 'gates' must have equal length", line);

  ev.selected.reserve(experts.size());
  for (std::size_t j = 0; j < experts.size(); ++j) {
    const json& id = experts[j];
    if (!(id.is_number_unsigned() || (id.is_number_integer() && id.get<std::int64_t>() >= 0)) ||
        id.get<std::uint64_t>() > UINT32_MAX)
      throw ParseError("field 'experts' must hold non-negative integers", line);
    ev.selected.push_back({static_cast<std::uint32_t>(id.get<std::uint64_t>()), logits[j], gates[j]});
  }
  if (auto it = record.find("full_logits"); it != record.end())
    ev.full_logits = read_doubles(*it, "full_logits", line);
  return ev;
}

void append_double_array(std::string& out, const std::vector<double>& values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_double(values[i]);
  }
  out += ']';
}

}  // namespace

std::size_t count_tokens(std::span<const RoutingEvent> events) {
  std::unordered_set<std::uint64_t> tokens;
  for (const auto& ev : events) tokens.insert(ev.token);
  return tokens.size();
}

RoutingTrace parse_trace(std::istream& in) {
  RoutingTrace trace;
  bool have_header = false;
  std::set<std::pair<std::uint64_t, std::uint32_t>> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;

    json record;
    try {
      record = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!record.is_object()) throw ParseError("record is not a JSON object", line);
    const std::string kind = read_string(record, "kind", line);

    if (kind == "header") {
      if (have_header) throw ParseError("duplicate topology header", line);
      trace.topology = read_header(record, trace.language, line);
      have_header = true;
    } else if (kind == "event") {
      if (!have_header) throw ParseError("topology header missing", line);
      RoutingEvent ev = read_event(record, line);
      if (!seen.emplace(ev.token, ev.layer).second)
        throw ParseError("duplicate (token, layer) pair (" + std::to_string(ev.token) + ", " +
                             std::to_string(ev.layer) + ")",
                         line);
      trace.events.push_back(std::move(ev));
    } else {
      throw ParseError("field 'kind' must be \"header\" or \"event\"", line);
    }
  }
  if (!have_header) throw ParseError("topology header missing");

  std::stable_sort(trace.events.begin(), trace.events.end(), [](const auto& a, const auto& b) {
    return a.token != b.token ? a.token < b.token : a.layer < b.layer;
  });
  trace.token_count = count_tokens(trace.events);
  return trace;
}

RoutingTrace read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace file: " + path.string());
  try {
    return parse_trace(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_trace(std::ostream& out, const RoutingTrace& trace) {
  const auto& topo = trace.topology;
  out << R"({"kind":"header","model_id":)" << json(topo.model_id).dump()
      << ",\"num_layers\":" << topo.num_layers << ",\"num_experts\":" << topo.num_experts
      << ",\"top_k\":" << topo.top_k << ",\"language\":" << json(trace.language).dump() << "}\n";

  std::string line;
  std::vector<double> column;
  for (const auto& ev : trace.events) {
    line.clear();
    line += R"({"kind":"event","token":)";
    line += std::to_string(ev.token);
    line += ",\"layer\":";
    line += std::to_string(ev.layer);
    line += ",\"experts\":[";
    for (std::size_t j = 0; j < ev.selected.size(); ++j) {
      if (j) line += ',';
      line += std::to_string(ev.selected[j].expert);
    }
    line += "],\"logits\":";
    column.clear();
    for (const auto& c : ev.selected) column.push_back(c.logit);
    append_double_array(line, column);
    line += ",\"gates\":";
    column.clear();
    for (const auto& c : ev.selected) column.push_back(c.gate);
    append_double_array(line, column);
    if (!ev.full_logits.empty()) {
      line += ",\"full_logits\":";
      append_double_array(line, ev.full_logits);
    }
    line += "}\n";
    out << line;
  }
}

std::string serialize_trace(const RoutingTrace& trace) {
  std::ostringstream out;
  write_trace(out, trace);
  return out.str();
}

void write_trace_file(const std::filesystem::path& path, const RoutingTrace& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write trace file: " + path.string());
  write_trace(out, trace);
  if (!out) throw IoError("write failed: " + path.string());
}

TraceValidationReport validate_trace(const RoutingTrace& trace) {
  TraceValidationReport report;
  report.event_count = trace.events.size();
  const auto& topo = trace.topology;
  const std::size_t num_experts = topo.num_experts;

  // Events may not be sorted if the trace was assembled in memory.
  std::vector<const RoutingEvent*> order;
  order.reserve(trace.events.size());
  for (const auto& ev : trace.events) order.push_back(&ev);
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->token != b->token ? a->token < b->token : a->layer < b->layer;
  });

  auto flag = [&](const RoutingEvent& ev, std::string rule, std::string detail) {
    report.violations.push_back({ev.token, ev.layer, std::move(rule), std::move(detail)});
  };

  std::map<std::uint64_t, std::size_t> layers_per_token;
  for (const RoutingEvent* evp : order) {
    const RoutingEvent& ev = *evp;
    ++layers_per_token[ev.token];

    if (ev.layer >= topo.num_layers)
      flag(ev, "layer range", "layer " + std::to_string(ev.layer) + " >= " + std::to_string(topo.num_layers));
    if (ev.selected.size() != topo.top_k)
      flag(ev, "arity", std::to_string(ev.selected.size()) + " experts selected, expected " +
                            std::to_string(topo.top_k));

    std::set<std::uint32_t> ids;
    bool ids_in_range = true;
    for (const auto& c : ev.selected) {
      if (c.expert >= num_experts) {
        ids_in_range = false;
        flag(ev, "expert range", "expert " + std::to_string(c.expert));
      }
      if (!ids.insert(c.expert).second) flag(ev, "duplicate expert", "expert " + std::to_string(c.expert));
    }

    double gate_sum = 0.0;
    bool finite = true;
    for (const auto& c : ev.selected) {
      if (!std::isfinite(c.gate) || !std::isfinite(c.logit)) finite = false;
      if (!(c.gate > 0.0 && c.gate <= 1.0)) flag(ev, "gate range", "gate " + std::to_string(c.gate));
      gate_sum += c.gate;
    }
    if (!finite) flag(ev, "non-finite", "logit or gate is not finite");
    if (!ev.selected.empty() && !(std::abs(gate_sum - 1.0) <= kGateSumTolerance))
      flag(ev, "gate sum", "gates sum to " + format_double(gate_sum));

    if (!ev.full_logits.empty()) {
      if (ev.full_logits.size() != num_experts) {
        flag(ev, "full_logits length", std::to_string(ev.full_logits.size()) + " values, expected " +
                                           std::to_string(num_experts));
      } else if (ids_in_range) {
        for (const auto& c : ev.selected) {
          if (ev.full_logits[c.expert] != c.logit)
            flag(ev, "logit mismatch", "expert " + std::to_string(c.expert));
        }
        double min_selected = INFINITY;
        for (const auto& c : ev.selected) min_selected = std::min(min_selected, ev.full_logits[c.expert]);
        double max_other = -INFINITY;
        for (std::size_t i = 0; i < num_experts; ++i)
          if (!ids.count(static_cast<std::uint32_t>(i))) max_other = std::max(max_other, ev.full_logits[i]);
        if (!ev.selected.empty() && max_other > min_selected)
          flag(ev, "topk mismatch", "an unselected expert has a larger logit than a selected one");
      }
    }
  }

  // Coverage: every token needs exactly one event per layer. Appended after the
  // per-event checks, then everything is re-sorted by locator.
  for (const auto& [token, n] : layers_per_token) {
    if (n != topo.num_layers) {
      RoutingEvent locator;
      locator.token = token;
      flag(locator, "missing layer", std::to_string(n) + " of " + std::to_string(topo.num_layers) + " layers present");
    }
  }
  if (trace.token_count != layers_per_token.size())
    report.violations.push_back({0, 0, "token count",
                                 "header count " + std::to_string(trace.token_count) + " != " +
                                     std::to_string(layers_per_token.size()) + " distinct tokens"});

  std::stable_sort(report.violations.begin(), report.violations.end(), [](const auto& a, const auto& b) {
    return a.token != b.token ? a.token < b.token : a.layer < b.layer;
  });
  return report;
}

RoutingTrace merge_traces(std::span<const RoutingTrace> traces) {
  if (traces.empty()) throw std::invalid_argument("empty input");
  RoutingTrace merged;
  merged.topology = traces.front().topology;
  merged.language = traces.front().language;
  for (const auto& t : traces) {
    if (!t.topology.same_shape(merged.topology)) throw std::invalid_argument("topology mismatch");
    if (t.language != merged.language) throw std::invalid_argument("language mismatch");
  }

  std::uint64_t offset = 0;
  for (const auto& t : traces) {
    std::map<std::uint64_t, std::uint64_t> dense;
    for (const auto& ev : t.events) dense.emplace(ev.token, 0);
    std::uint64_t next = offset;
    for (auto& [token, index] : dense) index = next++;
    for (const auto& ev : t.events) {
      RoutingEvent copy = ev;
      copy.token = dense.at(ev.token);
      merged.events.push_back(std::move(copy));
    }
    offset = next;
  }
  std::stable_sort(merged.events.begin(), merged.events.end(), [](const auto& a, const auto& b) {
    return a.token != b.token ? a.token < b.token : a.layer < b.layer;
  });
  merged.token_count = static_cast<std::size_t>(offset);
  return merged;
}

}  // namespace moelab
