#include "msr/features.hpp"

#include <algorithm>
#include <cmath>

#include "msr/rng.hpp"

namespace msr {

void validate_geo(const GeoPoint& p) {
  if (p.lat < -90.0 || p.lat > 90.0 || p.lon < -180.0 || p.lon > 180.0)
    throw ContractError("location (" + std::to_string(p.lat) + ", " +
                        std::to_string(p.lon) + ") outside valid ranges");
}

void PassengerRequest::validate() const {
  if (passenger_id.empty()) throw ContractError("passenger request without id");
  if (ts <= 0) throw ContractError("passenger request ts must be positive");
  validate_geo(loc_current);
  validate_geo(loc_origin);
  validate_geo(loc_dest);
}

void DriverStatus::validate() const {
  if (driver_id.empty()) throw ContractError("driver status without id");
  if (ts <= 0) throw ContractError("driver status ts must be positive");
  validate_geo(loc);
}

void PassengerDriverPair::validate() const {
  if (passenger_id.empty() || driver_id.empty())
    throw ContractError("pair must name both a passenger and a driver");
  if (ts <= 0) throw ContractError("pair ts must be positive");
  if (label != 0 && label != 1) throw ContractError("pair label must be 0 or 1");
  if (city.empty()) throw ContractError("pair city must be nonempty");
  validate_geo(loc_origin);
  validate_geo(loc_dest);
}

// ---- event log ---------------------------------------------------------------

EventLog::EventLog(std::int64_t coverage_begin, std::int64_t coverage_end)
    : begin_(coverage_begin), end_(coverage_end) {
  if (coverage_end <= coverage_begin)
    throw ContractError("event log coverage window is empty");
}

void EventLog::add(const std::string& entity, std::int64_t ts, EventType type) {
  if (ts < begin_ || ts > end_)
    throw ContractError("event at " + std::to_string(ts) + " outside coverage [" +
                        std::to_string(begin_) + ", " + std::to_string(end_) + "]");
  streams_[entity].push_back({ts, type});
  finalized_ = false;
}

void EventLog::finalize() {
  for (auto& [id, events] : streams_)
    std::sort(events.begin(), events.end(),
              [](const Event& a, const Event& b) { return a.ts < b.ts; });
  finalized_ = true;
}

WindowCounts EventLog::counts(const std::string& entity, std::int64_t ts) const {
  if (!finalized_) throw ContractError("event log not finalized");
  if (ts - kMonthSecs < begin_ || ts > end_)
    throw CoverageError("window (" + std::to_string(ts - kMonthSecs) + ", " +
                        std::to_string(ts) + "] escapes log coverage [" +
                        std::to_string(begin_) + ", " + std::to_string(end_) + "]");

  WindowCounts out{};
  auto it = streams_.find(entity);
  if (it == streams_.end()) return out;  // empty history: all zeros

  const auto& events = it->second;
  // first event inside the widest window (ts - month, ts]
  auto lo = std::upper_bound(events.begin(), events.end(), ts - kMonthSecs,
                             [](std::int64_t t, const Event& e) { return t < e.ts; });
  const std::int64_t windows[3] = {kDaySecs, kWeekSecs, kMonthSecs};
  for (auto e = lo; e != events.end() && e->ts <= ts; ++e) {
    const std::size_t type = static_cast<std::size_t>(e->type);
    for (std::size_t w = 0; w < 3; ++w)
      if (e->ts > ts - windows[w]) out[type * 3 + w] += 1.0;
  }
  return out;
}

ViewFeatures extract_features(const PassengerDriverPair& pair, const EventLog& log) {
  pair.validate();
  return ViewFeatures{log.counts(pair.passenger_id, pair.ts),
                      log.counts(pair.driver_id, pair.ts)};
}

// ---- standardization -----------------------------------------------------------

Standardizer Standardizer::fit(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw ContractError("standardizer fit on empty data");
  const std::size_t w = rows[0].size();
  Standardizer s;
  s.mean.assign(w, 0.0);
  s.stddev.assign(w, 0.0);
  for (const auto& r : rows) {
    if (r.size() != w) throw ShapeError("ragged rows in standardizer fit");
    for (std::size_t i = 0; i < w; ++i) s.mean[i] += r[i];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (std::size_t i = 0; i < w; ++i) {
      const double d = r[i] - s.mean[i];
      s.stddev[i] += d * d;
    }
  for (auto& v : s.stddev) v = std::max(std::sqrt(v / static_cast<double>(rows.size())), 1e-9);
  return s;
}

std::vector<double> Standardizer::apply(std::span<const double> x) const {
  if (x.size() != mean.size())
    throw ShapeError("standardizer width " + std::to_string(mean.size()) +
                     ", input width " + std::to_string(x.size()));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean[i]) / stddev[i];
  return out;
}

Tensor Standardizer::to_tensor() const {
  std::vector<double> d(mean);
  d.insert(d.end(), stddev.begin(), stddev.end());
  return Tensor({2, mean.size()}, std::move(d));
}

Standardizer Standardizer::from_tensor(const Tensor& t) {
  if (t.shape.size() != 2 || t.shape[0] != 2)
    throw ShapeError("standardizer tensor must be [2, width], got " + shape_str(t.shape));
  const std::size_t w = t.shape[1];
  Standardizer s;
  s.mean.assign(t.data.begin(), t.data.begin() + w);
  s.stddev.assign(t.data.begin() + w, t.data.end());
  return s;
}

// ---- embedding -------------------------------------------------------------------

ViewEncoder ViewEncoder::init_numeric(std::size_t in_width, std::size_t out_dim,
                                      std::uint64_t seed) {
  ViewEncoder e;
  const double lim = 1.0 / std::sqrt(static_cast<double>(in_width));
  e.dense_w = Tensor::uniform({out_dim, in_width}, lim, derive_seed(seed, "dense_w"));
  e.dense_b = Tensor::zeros({out_dim}, true);
  return e;
}

ViewEncoder ViewEncoder::init_order(const OrderVocab& vocab, std::size_t out_dim,
                                    std::uint64_t seed) {
  ViewEncoder e;
  const std::size_t vocabs[3] = {vocab.start_poi, vocab.end_poi, vocab.product};
  for (std::size_t i = 0; i < 3; ++i)
    e.tables.push_back(Tensor::uniform({vocabs[i], kCatEmbedWidth}, 0.1,
                                       derive_seed(seed, "table", i)));
  const std::size_t in = 3 * kCatEmbedWidth;
  e.dense_w = Tensor::uniform({out_dim, in}, 1.0 / std::sqrt(static_cast<double>(in)),
                              derive_seed(seed, "dense_w"));
  e.dense_b = Tensor::zeros({out_dim}, true);
  return e;
}

void ViewEncoder::collect(const std::string& prefix,
                          std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + ".dense_w", &dense_w);
  out.emplace_back(prefix + ".dense_b", &dense_b);
  for (std::size_t i = 0; i < tables.size(); ++i)
    out.emplace_back(prefix + ".table" + std::to_string(i), &tables[i]);
}

Var embed_numeric(Tape& tape, ViewEncoder& enc, std::span<const double> standardized) {
  Var x = tape.constant(std::vector<double>(standardized.begin(), standardized.end()),
                        {standardized.size()});
  return add(matvec(tape.param(enc.dense_w), x), tape.param(enc.dense_b));
}

Var embed_order(Tape& tape, ViewEncoder& enc, const OrderCodes& codes) {
  const int raw[3] = {codes.start_poi, codes.end_poi, codes.product};
  std::vector<Var> looked;
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t idx = 0;
    if (raw[i] >= 0 && static_cast<std::size_t>(raw[i]) < enc.tables[i].rows()) {
      idx = static_cast<std::size_t>(raw[i]);
    } else {
      ++enc.oov_tally;
    }
    looked.push_back(row(tape.param(enc.tables[i]), idx));
  }
  Var cat = concat(std::span<const Var>(looked.data(), looked.size()));
  return add(matvec(tape.param(enc.dense_w), cat), tape.param(enc.dense_b));
}

}  // namespace msr
