#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msr/tensor.hpp"

namespace msr {

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
};

void validate_geo(const GeoPoint& p);

enum class RequestStatus { pending, responded, cancelled, fulfilled };
enum class DriverState { empty, occupied, enroute_pickup };

struct PassengerRequest {
  std::string passenger_id;
  std::int64_t ts = 0;
  GeoPoint loc_current, loc_origin, loc_dest;
  RequestStatus status = RequestStatus::pending;
  void validate() const;
};

struct DriverStatus {
  std::string driver_id;
  std::int64_t ts = 0;
  GeoPoint loc;
  DriverState state = DriverState::empty;
  void validate() const;
};

/// One platform-proposed match; label 1 = both sides accepted.
struct PassengerDriverPair {
  std::string passenger_id;
  std::string driver_id;
  GeoPoint loc_origin, loc_dest;
  std::int64_t ts = 0;
  int label = 0;
  std::string city;
  void validate() const;
};

// ---- historical event store --------------------------------------------------

enum class EventType : std::uint8_t { request = 0, cancel = 1, finish = 2 };
constexpr std::size_t kEventTypes = 3;

struct Event {
  std::int64_t ts;
  EventType type;
};

constexpr std::int64_t kDaySecs = 86'400;
constexpr std::int64_t kWeekSecs = 7 * kDaySecs;
constexpr std::int64_t kMonthSecs = 30 * kDaySecs;

/// Event counts per type over the day/week/month windows ending at a pair's
/// timestamp, flattened type-major: [req_d, req_w, req_m, can_d, ..., fin_m].
using WindowCounts = std::array<double, 9>;

/// Per-entity event streams with an explicit coverage window. Windowed counts
/// outside coverage raise instead of silently returning zeros.
class EventLog {
 public:
  EventLog(std::int64_t coverage_begin, std::int64_t coverage_end);

  void add(const std::string& entity, std::int64_t ts, EventType type);
  /// Sorts streams; required before counting.
  void finalize();

  /// Counts over half-open windows (ts - W, ts]. Unknown entities count zero
  /// (a valid empty history), but a window escaping coverage is an error.
  WindowCounts counts(const std::string& entity, std::int64_t ts) const;

  std::int64_t coverage_begin() const { return begin_; }
  std::int64_t coverage_end() const { return end_; }
  std::size_t entity_count() const { return streams_.size(); }

 private:
  std::int64_t begin_, end_;
  bool finalized_ = false;
  std::unordered_map<std::string, std::vector<Event>> streams_;
};

struct ViewFeatures {
  WindowCounts passenger;
  WindowCounts driver;
};

/// Pure function of (pair, log): windowed behavioural counts for both sides.
ViewFeatures extract_features(const PassengerDriverPair& pair, const EventLog& log);

// ---- standardization -----------------------------------------------------------

/// Per-feature z-score transform; statistics come from the training split only.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at 1e-9

  static Standardizer fit(std::span<const std::vector<double>> rows);
  std::vector<double> apply(std::span<const double> x) const;

  Tensor to_tensor() const;             // [2, width] for checkpointing
  static Standardizer from_tensor(const Tensor& t);
};

// ---- embedding -------------------------------------------------------------------

struct OrderCodes {
  int start_poi = 0;
  int end_poi = 0;
  int product = 0;
};

/// Categorical vocabularies for the order view. Index 0 is reserved for
/// out-of-vocabulary codes so serving never crashes on unseen categories.
struct OrderVocab {
  std::size_t start_poi = 12;
  std::size_t end_poi = 12;
  std::size_t product = 5;
};

constexpr std::size_t kCatEmbedWidth = 8;

/// Dense projection of one view to the unified embedding width; the order
/// view additionally owns the categorical lookup tables.
struct ViewEncoder {
  Tensor dense_w;
  Tensor dense_b;
  std::vector<Tensor> tables;            // order view: start/end/product
  mutable std::uint64_t oov_tally = 0;   // diagnostics only, not persisted

  static ViewEncoder init_numeric(std::size_t in_width, std::size_t out_dim,
                                  std::uint64_t seed);
  static ViewEncoder init_order(const OrderVocab& vocab, std::size_t out_dim,
                                std::uint64_t seed);
  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor*>>& out);
};

/// e = dense(standardized numerics); differentiable through the dense layer.
Var embed_numeric(Tape& tape, ViewEncoder& enc, std::span<const double> standardized);

/// e = dense([lookup(start); lookup(end); lookup(product)]). Invalid codes map
/// to index 0 and bump the encoder's tally.
Var embed_order(Tape& tape, ViewEncoder& enc, const OrderCodes& codes);

}  // namespace msr
