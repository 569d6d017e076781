#include "msr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "msr/rng.hpp"

namespace msr {

namespace {

using json = nlohmann::json;

constexpr std::int64_t kPeriodStart = 1'600'000'000;  // dataset observation window
constexpr std::int64_t kPeriodSecs = 2 * kDaySecs;
constexpr std::int64_t kHistorySecs = 40 * kDaySecs;

constexpr std::size_t kPhiDim = 18;

// Shared label structure across cities. The distance term is a tent: success
// falls with pick-up distance up to a knee, then recovers (riders wait when
// supply is short at long range).
constexpr double kThetaGlobal[kPhiDim] = {
    -1.35,  // distance tent
    -0.75,  // pick-up eta
    -0.70,  // peak period
    0.45,   // holiday
    0.55,   // hot spot
    0.85,   // supply-demand ratio (last slot)
    -1.35,  // recent cancellation rate at origin
    0.60,   // mean supply-demand over the window
    -0.75,  // cancellation trend over the window
    0.90,   // passenger reliability
    1.05,   // driver reliability
    -0.70,  // peak x eta
    -0.90,  // distance x scarce supply
    0.75,   // premium product
    -0.60,  // transit-hub origin
    0.80,   // passenger x driver reliability
    0.70,   // driver reliability x scarce supply
    -0.80,  // passenger reliability x long pick-up
};

double tent(double d) { return std::min(d, 4.0) - 0.4 * std::max(d - 4.0, 0.0); }

// Feature map feeding the ground-truth logit. Uses only quantities the model
// also sees (counts, order codes, context slots).
std::array<double, kPhiDim> phi(const SampleInput& s) {
  const auto& first = s.context.front();
  const auto& last = s.context.back();
  const double dist = last[0], eta = last[1], peak = last[2], holiday = last[3],
               hot = last[4], sdr = last[5], cancel = last[6];
  double sdr_mean = 0.0;
  for (const auto& slot : s.context) sdr_mean += slot[5];
  sdr_mean /= static_cast<double>(s.context.size());

  const double p_rel = std::log1p(s.passenger[8]) - std::log1p(s.passenger[5]);
  const double d_rel = std::log1p(s.driver[8]) - std::log1p(s.driver[5]);

  return {
      tent(dist) - 1.2,
      eta / 5.0 - 1.0,
      peak,
      holiday,
      hot,
      sdr - 1.0,
      cancel * 3.0 - 0.4,
      sdr_mean - 1.0,
      (cancel - first[6]) * 3.0,
      p_rel,
      d_rel,
      peak * (eta / 5.0),
      dist * std::max(0.0, 1.0 - sdr),
      s.order.product == 2 ? 1.0 : 0.0,
      s.order.start_poi == 3 ? 1.0 : 0.0,
      p_rel * d_rel,
      d_rel * std::max(0.0, 1.0 - sdr),
      p_rel * std::max(dist - 2.5, 0.0),
  };
}

struct EntityPool {
  std::vector<std::string> ids;
  std::vector<double> reliability;  // shifts the cancel/finish mix
};

EntityPool make_pool(const std::string& prefix, std::size_t n, std::uint64_t seed) {
  EntityPool pool;
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> rel(0.05, 0.95);
  for (std::size_t i = 0; i < n; ++i) {
    pool.ids.push_back(prefix + std::to_string(i));
    pool.reliability.push_back(rel(rng));
  }
  return pool;
}

void emit_events(EventLog& log, const EntityPool& pool, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> lograte(std::log(0.3), std::log(3.0));
  const double horizon_days =
      static_cast<double>(kHistorySecs + kPeriodSecs) / kDaySecs;
  std::uniform_int_distribution<std::int64_t> when(kPeriodStart - kHistorySecs,
                                                   kPeriodStart + kPeriodSecs);
  for (std::size_t i = 0; i < pool.ids.size(); ++i) {
    const double rate = std::exp(lograte(rng));
    std::poisson_distribution<int> count(rate * horizon_days);
    const int n = count(rng);
    for (int e = 0; e < n; ++e) {
      const double u = unit(rng);
      EventType type;
      if (u < 0.45)
        type = EventType::request;
      else
        type = unit(rng) < pool.reliability[i] ? EventType::finish : EventType::cancel;
      log.add(pool.ids[i], when(rng), type);
    }
  }
}

struct ContextParams {
  double dist_mean, sdr_mean, cancel_mean;
};

std::vector<std::vector<double>> make_context(const CityProfile& p,
                                              const ContextParams& cp, std::int64_t ts,
                                              std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, p.noise_scale);
  const double hour = static_cast<double>((ts / 3600) % 24);
  const double peak = (hour >= 7 && hour < 9) || (hour >= 17 && hour < 19) ? 1.0 : 0.0;
  const double holiday = ((ts / kDaySecs) % 7) >= 5 ? 1.0 : 0.0;
  const double hot = unit(rng) < 0.3 ? 1.0 : 0.0;

  double dist = std::max(0.1, cp.dist_mean + noise(rng));
  double sdr = std::max(0.05, cp.sdr_mean + 0.5 * noise(rng));
  double cancel = std::clamp(cp.cancel_mean + 0.15 * noise(rng), 0.0, 1.0);

  std::vector<std::vector<double>> ctx;
  ctx.reserve(p.ctx_len);
  for (std::size_t t = 0; t < p.ctx_len; ++t) {
    const double eta = std::max(0.5, dist * 2.2 + 0.5 * noise(rng));
    ctx.push_back({dist, eta, peak, holiday, hot, sdr, cancel});
    dist = std::max(0.1, cp.dist_mean + p.ar_coeff * (dist - cp.dist_mean) + noise(rng) * 0.5);
    sdr = std::max(0.05, cp.sdr_mean + p.ar_coeff * (sdr - cp.sdr_mean) + 0.3 * noise(rng));
    cancel = std::clamp(cp.cancel_mean + p.ar_coeff * (cancel - cp.cancel_mean) +
                            0.08 * noise(rng),
                        0.0, 1.0);
  }
  return ctx;
}

}  // namespace

GeneratedCity generate_city(const CityProfile& p) {
  if (p.n_samples < 1) throw ContractError("profile needs n_samples >= 1");
  if (p.negative_rate <= 0.0 || p.negative_rate >= 1.0)
    throw ContractError("negative rate must lie in (0,1)");
  if (p.divergence < 0.0) throw ContractError("divergence must be >= 0");
  if (p.ctx_len < 1) throw ContractError("context length must be >= 1");

  // city-specific drift away from the shared structure
  std::array<double, kPhiDim> theta;
  {
    auto rng = make_rng(derive_seed(p.seed, "theta_" + p.city));
    std::normal_distribution<double> unitn(0.0, 1.0);
    for (std::size_t i = 0; i < kPhiDim; ++i)
      theta[i] = kThetaGlobal[i] + p.divergence * 0.4 * unitn(rng);
  }

  const std::size_t n_passengers = std::max<std::size_t>(40, p.n_samples / 8);
  const std::size_t n_drivers = std::max<std::size_t>(25, p.n_samples / 12);
  EntityPool passengers =
      make_pool(p.city + "-p", n_passengers, derive_seed(p.seed, p.city + "/ppool"));
  EntityPool drivers =
      make_pool(p.city + "-d", n_drivers, derive_seed(p.seed, p.city + "/dpool"));

  EventLog log(kPeriodStart - kHistorySecs, kPeriodStart + kPeriodSecs);
  emit_events(log, passengers, derive_seed(p.seed, p.city + "/pevents"));
  emit_events(log, drivers, derive_seed(p.seed, p.city + "/devents"));
  log.finalize();

  auto rng = make_rng(derive_seed(p.seed, p.city + "/pairs"));
  std::uniform_int_distribution<std::size_t> pick_p(0, n_passengers - 1);
  std::uniform_int_distribution<std::size_t> pick_d(0, n_drivers - 1);
  std::uniform_int_distribution<std::int64_t> pick_ts(kPeriodStart,
                                                      kPeriodStart + kPeriodSecs - 1);
  std::uniform_int_distribution<int> poi(1, 11);
  std::uniform_int_distribution<int> product(1, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ContextParams cp{2.5, 1.0, 0.12};

  std::vector<std::int64_t> timestamps(p.n_samples);
  for (auto& t : timestamps) t = pick_ts(rng);
  std::sort(timestamps.begin(), timestamps.end());

  CityDataset ds;
  ds.city = p.city;
  ds.rows.reserve(p.n_samples);
  std::vector<double> logits(p.n_samples);
  for (std::size_t i = 0; i < p.n_samples; ++i) {
    DatasetRow row;
    row.pair_id = p.city + "-" + std::to_string(i);
    row.city = p.city;
    row.ts = timestamps[i];
    row.passenger_id = passengers.ids[pick_p(rng)];
    row.driver_id = drivers.ids[pick_d(rng)];
    row.features.order = OrderCodes{poi(rng), poi(rng), product(rng)};
    row.features.context = make_context(p, cp, row.ts, rng);
    const WindowCounts pc = log.counts(row.passenger_id, row.ts);
    const WindowCounts dc = log.counts(row.driver_id, row.ts);
    row.features.passenger = pc;
    row.features.driver = dc;

    const auto f = phi(row.features);
    double z = 0.0;
    for (std::size_t k = 0; k < kPhiDim; ++k) z += theta[k] * f[k];
    logits[i] = z;
    ds.rows.push_back(std::move(row));
  }

  // intercept search: expected negative rate is monotone decreasing in the bias
  const double target_pos = 1.0 - p.negative_rate;
  auto mean_pos = [&](double b) {
    double s = 0.0;
    for (double z : logits) s += 1.0 / (1.0 + std::exp(-(z + b)));
    return s / static_cast<double>(logits.size());
  };
  double lo = -30.0, hi = 30.0;
  if (mean_pos(lo) > target_pos || mean_pos(hi) < target_pos)
    throw ContractError("negative-rate target " + std::to_string(p.negative_rate) +
                        " unreachable for city " + p.city);
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_pos(mid) < target_pos ? lo : hi) = mid;
  }
  const double bias = 0.5 * (lo + hi);

  for (std::size_t i = 0; i < p.n_samples; ++i) {
    const double prob = 1.0 / (1.0 + std::exp(-(logits[i] + bias)));
    ds.rows[i].latent = prob;
    ds.rows[i].label =
        p.deterministic_labels ? (prob > 0.5 ? 1 : 0) : (unit(rng) < prob ? 1 : 0);
  }
  return GeneratedCity{std::move(ds), std::move(log)};
}

CityProfile benchmark_profile(const BenchmarkConfig& cfg, const std::string& city,
                              bool is_target) {
  CityProfile p;
  p.city = city;
  p.n_samples = is_target ? cfg.target_rows : cfg.source_rows;
  // negative rates in the 8-14% band, varying per city
  p.negative_rate = 0.11 + 0.01 * static_cast<double>(fnv1a(city) % 4);
  p.divergence = cfg.divergence;
  p.ctx_len = cfg.ctx_len;
  p.seed = derive_seed(cfg.seed, "city_" + city);
  return p;
}

Benchmark make_benchmark(const BenchmarkConfig& cfg) {
  Benchmark b;
  for (const auto& c : kSourceCities)
    b.sources.push_back(generate_city(benchmark_profile(cfg, c, false)).dataset);
  for (const auto& c : kTargetCities)
    b.targets.push_back(generate_city(benchmark_profile(cfg, c, true)).dataset);
  return b;
}

// ---- dataset files ----------------------------------------------------------

namespace {

const char* kCountKeys[9] = {"request_day",  "request_week",  "request_month",
                             "cancel_day",   "cancel_week",   "cancel_month",
                             "finish_day",   "finish_week",   "finish_month"};

json counts_to_json(const WindowCounts& c) {
  json j;
  for (std::size_t i = 0; i < 9; ++i) j[kCountKeys[i]] = c[i];
  return j;
}

WindowCounts counts_from_json(const json& j) {
  WindowCounts c{};
  for (std::size_t i = 0; i < 9; ++i) c[i] = j.at(kCountKeys[i]).get<double>();
  return c;
}

}  // namespace

nlohmann::json row_to_json(const DatasetRow& r) {
  json j;
  j["pair_id"] = r.pair_id;
  j["city"] = r.city;
  j["ts"] = r.ts;
  j["label"] = r.label;
  j["latent"] = r.latent;
  j["passenger"] = counts_to_json(r.features.passenger);
  j["driver"] = counts_to_json(r.features.driver);
  j["order"] = {{"start_poi", r.features.order.start_poi},
                {"end_poi", r.features.order.end_poi},
                {"product", r.features.order.product}};
  j["context"] = r.features.context;
  return j;
}

DatasetRow row_from_json(const nlohmann::json& j, bool require_label) {
  DatasetRow r;
  r.pair_id = j.at("pair_id").get<std::string>();
  r.city = j.value("city", "");
  r.ts = j.value("ts", std::int64_t{0});
  if (require_label) {
    r.label = j.at("label").get<int>();
    r.latent = j.value("latent", 0.0);
  }
  r.features.passenger = counts_from_json(j.at("passenger"));
  r.features.driver = counts_from_json(j.at("driver"));
  const auto& o = j.at("order");
  r.features.order = OrderCodes{o.at("start_poi").get<int>(), o.at("end_poi").get<int>(),
                                o.at("product").get<int>()};
  r.features.context = j.at("context").get<std::vector<std::vector<double>>>();
  if (r.features.context.empty()) throw Error("empty context sequence");
  for (const auto& slot : r.features.context)
    if (slot.size() != r.features.context.front().size())
      throw Error("ragged context sequence");
  return r;
}

void write_jsonl(const CityDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& r : ds.rows) out << row_to_json(r).dump() << '\n';
}

CityDataset read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  CityDataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    DatasetRow r = row_from_json(json::parse(line));
    if (ds.city.empty()) ds.city = r.city;
    ds.rows.push_back(std::move(r));
  }
  return ds;
}

}  // namespace msr
