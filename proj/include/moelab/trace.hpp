#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace moelab {

/// Shape of the routed part of an MoE model: L layers of E experts, K chosen per token.
struct MoETopology {
  std::size_t num_layers = 0;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::string model_id;

  /// Throws std::invalid_argument unless L >= 1, E >= 2 and 1 <= K <= E.
  void check() const;

  /// Same shape (model_id is provenance only and not compared).
  bool same_shape(const MoETopology& other) const {
    return num_layers == other.num_layers && num_experts == other.num_experts &&
           top_k == other.top_k;
  }
};

struct ExpertChoice {
  std::uint32_t expert = 0;
  double logit = 0.0;
  double gate = 0.0;
};

/// Routing decision for one token at one layer. `selected` is ordered by
/// descending logit; `full_logits` is either empty or holds all E logits.
struct RoutingEvent {
  std::uint64_t token = 0;
  std::uint32_t layer = 0;
  std::vector<ExpertChoice> selected;
  std::vector<double> full_logits;
};

struct RoutingTrace {
  MoETopology topology;
  std::string language;
  /// Sorted by (token, layer).
  std::vector<RoutingEvent> events;
  /// Number of distinct token indices.
  std::size_t token_count = 0;
};

struct Violation {
  std::uint64_t token = 0;
  std::uint32_t layer = 0;
  std::string rule;
  std::string detail;
};

struct TraceValidationReport {
  std::size_t event_count = 0;
  std::vector<Violation> violations;
  bool pass() const { return violations.empty(); }
};

inline constexpr double kGateSumTolerance = 1e-6;

/// Parses a JSON-lines trace. Events are sorted by (token, layer) after reading.
/// Throws ParseError with the offending line number.
RoutingTrace parse_trace(std::istream& in);
RoutingTrace read_trace_file(const std::filesystem::path& path);

/// Canonical serialization: fixed key order, no whitespace, shortest
/// round-trip decimal for floats, one event per line.
void write_trace(std::ostream& out, const RoutingTrace& trace);
std::string serialize_trace(const RoutingTrace& trace);
void write_trace_file(const std::filesystem::path& path, const RoutingTrace& trace);

/// Shortest decimal string that parses back to the same double.
std::string format_double(double value);

TraceValidationReport validate_trace(const RoutingTrace& trace);

/// Concatenates traces of one language; token indices are renumbered densely
/// so that trace i's tokens follow those of trace i-1.
RoutingTrace merge_traces(std::span<const RoutingTrace> traces);

/// Recomputes token_count from the event list.
std::size_t count_tokens(std::span<const RoutingEvent> events);

}  // namespace moelab
