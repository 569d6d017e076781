#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "msr/datagen.hpp"
#include "msr/training.hpp"

using namespace msr;

TEST_CASE("generator is a pure function of its profile") {
  CityProfile p;
  p.city = "detcity";
  p.n_samples = 300;
  p.ctx_len = 4;
  p.seed = 77;
  auto g1 = generate_city(p);
  auto g2 = generate_city(p);
  REQUIRE(g1.dataset.rows.size() == g2.dataset.rows.size());
  for (std::size_t i = 0; i < g1.dataset.rows.size(); ++i) {
    const auto &a = g1.dataset.rows[i], &b = g2.dataset.rows[i];
    CHECK(a.pair_id == b.pair_id);
    CHECK(a.label == b.label);
    CHECK(a.latent == b.latent);
    CHECK(a.features.context == b.features.context);
  }

  // a different seed changes the data
  p.seed = 78;
  auto g3 = generate_city(p);
  bool differs = false;
  for (std::size_t i = 0; i < g1.dataset.rows.size() && !differs; ++i)
    differs = g1.dataset.rows[i].latent != g3.dataset.rows[i].latent;
  CHECK(differs);
}

TEST_CASE("realized negative rate lands near the target") {
  CityProfile p;
  p.city = "ratecity";
  p.n_samples = 20'000;
  p.negative_rate = 0.12;
  p.seed = 5;
  auto g = generate_city(p);
  std::size_t neg = 0;
  for (const auto& r : g.dataset.rows) neg += r.label == 0;
  const double frac = static_cast<double>(neg) / static_cast<double>(g.dataset.rows.size());
  CHECK(frac > 0.10);
  CHECK(frac < 0.14);
}

TEST_CASE("infeasible negative-rate target raises") {
  CityProfile p;
  p.city = "bad";
  p.n_samples = 10;
  p.negative_rate = 1.5;
  CHECK_THROWS_AS(generate_city(p), ContractError);
}

TEST_CASE("stored counts equal a brute-force replay of the raw event log") {
  CityProfile p;
  p.city = "replay";
  p.n_samples = 200;
  p.ctx_len = 3;
  p.seed = 13;
  auto g = generate_city(p);
  for (std::size_t i = 0; i < g.dataset.rows.size(); i += 17) {
    const auto& r = g.dataset.rows[i];
    CHECK(r.features.passenger == g.log.counts(r.passenger_id, r.ts));
    CHECK(r.features.driver == g.log.counts(r.driver_id, r.ts));
  }
}

TEST_CASE("rows are time-ordered and splits are disjoint and exhaustive") {
  CityProfile p;
  p.city = "split";
  p.n_samples = 1000;
  p.seed = 3;
  auto ds = generate_city(p).dataset;
  for (std::size_t i = 1; i < ds.rows.size(); ++i) CHECK(ds.rows[i - 1].ts <= ds.rows[i].ts);

  CHECK(ds.fit().size() == 810);
  CHECK(ds.val().size() == 90);
  CHECK(ds.test().size() == 100);

  std::set<std::string> seen;
  for (const auto& r : ds.fit()) seen.insert(r.pair_id);
  for (const auto& r : ds.val()) CHECK(seen.insert(r.pair_id).second);
  for (const auto& r : ds.test()) CHECK(seen.insert(r.pair_id).second);
  CHECK(seen.size() == ds.rows.size());
}

TEST_CASE("latent probabilities score near-ceiling AUC") {
  CityProfile p;
  p.city = "ceiling";
  p.n_samples = 20'000;
  p.seed = 9;
  auto ds = generate_city(p).dataset;
  std::vector<double> latents;
  std::vector<int> labels;
  for (const auto& r : ds.rows) {
    latents.push_back(r.latent);
    labels.push_back(r.label);
  }
  auto m = evaluate(latents, labels);
  CHECK(m.auc.value() > 0.80);
}

TEST_CASE("zero divergence means cities share one label process") {
  BenchmarkConfig cfg;
  cfg.source_rows = 400;
  cfg.target_rows = 100;
  cfg.divergence = 0.0;
  cfg.ctx_len = 3;
  cfg.seed = 21;
  // with delta = 0 the effective coefficients are identical across cities, so
  // identical features map to identical latents; verify via two profiles that
  // differ only in city name (entities/context still differ by seed)
  CityProfile a = benchmark_profile(cfg, "BJ", false);
  CityProfile b = benchmark_profile(cfg, "DZ", true);
  a.seed = b.seed = 42;
  a.n_samples = b.n_samples = 200;
  a.negative_rate = b.negative_rate = 0.12;
  a.divergence = b.divergence = 0.0;
  auto ga = generate_city(a);
  auto gb = generate_city(b);
  // same seed and same coefficients: the generated feature streams coincide,
  // so latents must coincide row by row
  for (std::size_t i = 0; i < 50; ++i) {
    if (ga.dataset.rows[i].features.context == gb.dataset.rows[i].features.context &&
        ga.dataset.rows[i].features.passenger == gb.dataset.rows[i].features.passenger &&
        ga.dataset.rows[i].features.driver == gb.dataset.rows[i].features.driver &&
        ga.dataset.rows[i].features.order.start_poi == gb.dataset.rows[i].features.order.start_poi &&
        ga.dataset.rows[i].features.order.product == gb.dataset.rows[i].features.order.product)
      CHECK(ga.dataset.rows[i].latent == doctest::Approx(gb.dataset.rows[i].latent).epsilon(1e-9));
  }
}

TEST_CASE("benchmark respects the source/target imbalance") {
  BenchmarkConfig cfg;
  cfg.source_rows = 2000;
  cfg.target_rows = 100;
  cfg.ctx_len = 3;
  cfg.seed = 31;
  auto b = make_benchmark(cfg);
  REQUIRE(b.sources.size() == 4);
  REQUIRE(b.targets.size() == 2);
  for (const auto& t : b.targets)
    for (const auto& s : b.sources)
      CHECK(static_cast<double>(t.rows.size()) / static_cast<double>(s.rows.size()) <=
            1.0 / 20.0);
}

TEST_CASE("jsonl round trip preserves every field the schema carries") {
  CityProfile p;
  p.city = "io";
  p.n_samples = 120;
  p.ctx_len = 3;
  p.seed = 17;
  auto ds = generate_city(p).dataset;

  auto path = std::filesystem::temp_directory_path() / "msr_io.jsonl";
  write_jsonl(ds, path.string());
  auto rt = read_jsonl(path.string());
  REQUIRE(rt.rows.size() == ds.rows.size());
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    const auto &a = ds.rows[i], &b = rt.rows[i];
    CHECK(a.pair_id == b.pair_id);
    CHECK(a.ts == b.ts);
    CHECK(a.label == b.label);
    CHECK(a.latent == b.latent);
    CHECK(a.features.passenger == b.features.passenger);
    CHECK(a.features.driver == b.features.driver);
    CHECK(a.features.order.product == b.features.order.product);
    CHECK(a.features.context == b.features.context);
  }

  // rewriting produces byte-identical files
  auto path2 = std::filesystem::temp_directory_path() / "msr_io2.jsonl";
  write_jsonl(rt, path2.string());
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}
