#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "msr/datagen.hpp"
#include "msr/kd.hpp"
#include "msr/rng.hpp"
#include "msr/serve.hpp"
#include "msr/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace msr;

namespace {

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("MSR_LOG");
  if (!env) return LogLevel::info;
  std::string v(env);
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log_line(LogLevel lvl, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(log_level())) std::cerr << msg << "\n";
}

struct ModelOpts {
  std::size_t embed_dim = 64;
  std::size_t mem_rows = 16;
  std::size_t mem_cols = 16;
  std::size_t read_heads = 2;
  std::size_t ctx_len = 8;
  std::string ablate;
  std::string model = "mv";
};

struct TrainOpts {
  std::size_t epochs = 20;
  std::size_t batch = 256;
  std::size_t patience = 3;
  double lr = 1e-3;
};

void add_model_flags(CLI::App* cmd, ModelOpts& m) {
  cmd->add_option("--embed-dim", m.embed_dim, "unified embedding width");
  cmd->add_option("--mem-rows", m.mem_rows, "memory locations");
  cmd->add_option("--mem-cols", m.mem_cols, "memory word width");
  cmd->add_option("--read-heads", m.read_heads, "number of read heads");
  cmd->add_option("--ctx-len", m.ctx_len, "context slots per pair");
  cmd->add_option("--ablate", m.ablate, "model variant: s1|s2|s3|s4")
      ->check(CLI::IsMember({"s1", "s2", "s3", "s4"}));
}

void add_train_flags(CLI::App* cmd, TrainOpts& t) {
  cmd->add_option("--epochs", t.epochs, "max training epochs");
  cmd->add_option("--batch", t.batch, "batch size");
  cmd->add_option("--patience", t.patience, "early-stop patience on validation AUC");
  cmd->add_option("--lr", t.lr, "learning rate");
}

MVConfig build_config(const ModelOpts& m, std::size_t data_ctx_len) {
  MVConfig cfg;
  cfg.embed_dim = m.embed_dim;
  cfg.mem_rows = m.mem_rows;
  cfg.mem_cols = m.mem_cols;
  cfg.read_heads = m.read_heads;
  cfg.ctx_len = data_ctx_len > 0 ? data_ctx_len : m.ctx_len;
  if (!m.ablate.empty()) cfg.ablation = *ablation_from_name(m.ablate);
  cfg.student = m.model == "student";
  return cfg;
}

json model_opts_json(const ModelOpts& m) {
  return {{"embed_dim", m.embed_dim}, {"mem_rows", m.mem_rows},
          {"mem_cols", m.mem_cols},   {"read_heads", m.read_heads},
          {"ctx_len", m.ctx_len},     {"ablate", m.ablate.empty() ? "none" : m.ablate},
          {"model", m.model}};
}

void print_run_config(const std::string& command, const json& cfg, std::uint64_t seed) {
  json j{{"command", command}, {"config", cfg}, {"seed", seed}};
  std::cerr << j.dump() << "\n";
}

CityDataset load_city(const std::string& data_dir, const std::string& city) {
  const fs::path path = fs::path(data_dir) / (city + ".jsonl");
  if (!fs::exists(path)) throw Error("dataset file not found: " + path.string());
  CityDataset ds = read_jsonl(path.string());
  if (ds.rows.empty()) throw Error("dataset " + path.string() + " is empty");
  return ds;
}

json train_meta(const std::string& city, std::uint64_t seed, const TrainOpts& t) {
  return {{"city", city},
          {"seed", seed},
          {"train", {{"epochs", t.epochs}, {"batch", t.batch}, {"patience", t.patience},
                     {"lr", t.lr}}}};
}

void write_kd_history(const std::vector<KdEpochStats>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& e : history) {
    json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["teacher_val_auc"] = e.teacher_val_auc;
    j["teacher_val_rmse"] = e.teacher_val_rmse;
    j["student_val_auc"] = e.student_val_auc;
    j["student_val_rmse"] = e.student_val_rmse;
    j["mean_cos"] = e.mean_cos;
    j["alpha"] = e.alpha;
    j["beta"] = e.beta;
    j["gamma"] = e.gamma;
    j["secs"] = e.secs;
    out << j.dump() << '\n';
  }
}

// ---- gen-data -----------------------------------------------------------------

int run_gen_data(const std::string& out_dir, std::uint64_t seed, std::size_t source_rows,
                 std::size_t target_rows, double divergence, std::size_t ctx_len) {
  BenchmarkConfig cfg;
  cfg.source_rows = source_rows;
  cfg.target_rows = target_rows;
  cfg.divergence = divergence;
  cfg.ctx_len = ctx_len;
  cfg.seed = seed;
  print_run_config("gen-data",
                   {{"out", out_dir}, {"source_rows", source_rows},
                    {"target_rows", target_rows}, {"divergence", divergence},
                    {"ctx_len", ctx_len}},
                   seed);

  fs::create_directories(out_dir);
  json manifest;
  manifest["seed"] = seed;
  manifest["config"] = {{"source_rows", source_rows}, {"target_rows", target_rows},
                        {"divergence", divergence}, {"ctx_len", ctx_len}};
  json cities = json::array();

  auto emit = [&](const std::string& city, bool is_target) {
    auto profile = benchmark_profile(cfg, city, is_target);
    auto ds = generate_city(profile).dataset;
    const std::string file = city + ".jsonl";
    write_jsonl(ds, (fs::path(out_dir) / file).string());
    std::size_t neg = 0;
    for (const auto& r : ds.rows) neg += r.label == 0;
    cities.push_back({{"city", city},
                      {"role", is_target ? "target" : "source"},
                      {"rows", ds.rows.size()},
                      {"negative_rate_target", profile.negative_rate},
                      {"negative_fraction",
                       static_cast<double>(neg) / static_cast<double>(ds.rows.size())},
                      {"file", file}});
    log_line(LogLevel::info, "wrote " + file + " (" + std::to_string(ds.rows.size()) +
                                 " rows)");
  };
  for (const auto& c : kSourceCities) emit(c, false);
  for (const auto& c : kTargetCities) emit(c, true);

  manifest["cities"] = cities;
  std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::binary);
  mf << manifest.dump(2) << "\n";
  return 0;
}

// ---- train-mv -----------------------------------------------------------------

int run_train_mv(const std::string& data_dir, const std::string& ckpt_dir,
                 const std::string& city, std::uint64_t seed, const ModelOpts& mopts,
                 const TrainOpts& topts, bool sweep) {
  print_run_config("train-mv",
                   {{"data", data_dir}, {"ckpt", ckpt_dir}, {"city", city},
                    {"model", model_opts_json(mopts)},
                    {"epochs", topts.epochs}, {"batch", topts.batch},
                    {"patience", topts.patience}, {"lr", topts.lr}, {"sweep", sweep}},
                   seed);
  if (mopts.model == "teacher")
    throw Error("train-mv trains mv or student models; use train-kd for the teacher");

  CityDataset ds = load_city(data_dir, city);
  const std::size_t data_ctx = ds.rows.front().features.context.size();
  fs::create_directories(ckpt_dir);

  TrainConfig tc;
  tc.batch_size = topts.batch;
  tc.max_epochs = topts.epochs;
  tc.patience = topts.patience;
  tc.lr = topts.lr;
  tc.seed = seed;

  if (sweep) {
    for (std::size_t dim : {16, 32, 64, 128}) {
      for (std::size_t mem : {8, 16, 32}) {
        ModelOpts m = mopts;
        m.embed_dim = dim;
        m.mem_rows = mem;
        m.mem_cols = 16;
        MVParams params = MVParams::init(build_config(m, data_ctx),
                                         derive_seed(seed, "sweep", dim * 100 + mem));
        TrainResult r = train_mv(ds, params, tc);
        const std::string name = city + ".sweep.d" + std::to_string(dim) + ".m" +
                                 std::to_string(mem) + ".history.jsonl";
        write_history_jsonl(r.history, (fs::path(ckpt_dir) / name).string());
        log_line(LogLevel::info, name + " best val AUC " + std::to_string(r.best_val_auc));
      }
    }
    return 0;
  }

  MVParams params = MVParams::init(build_config(mopts, data_ctx), seed);
  TrainResult r = train_mv(ds, params, tc);

  json meta = train_meta(city, seed, topts);
  meta["kind"] = mopts.model == "student" ? "student" : "mv";
  meta["best_epoch"] = r.best_epoch;
  meta["best_val_auc"] = r.best_val_auc;
  save_checkpoint((fs::path(ckpt_dir) / (city + ".ckpt")).string(),
                  mv_to_checkpoint(params, meta));
  write_history_jsonl(r.history, (fs::path(ckpt_dir) / (city + ".history.jsonl")).string());
  log_line(LogLevel::info,
           "trained " + city + ": best val AUC " + std::to_string(r.best_val_auc) +
               " at epoch " + std::to_string(r.best_epoch));
  return 0;
}

// ---- export-memory --------------------------------------------------------------

int run_export_memory(const std::string& ckpt_dir, const std::string& city,
                      std::uint64_t seed) {
  print_run_config("export-memory", {{"ckpt", ckpt_dir}, {"city", city}}, seed);
  const fs::path src = fs::path(ckpt_dir) / (city + ".ckpt");
  Checkpoint ck = load_checkpoint(src.string());
  const Tensor& memory = ck.require("memory");
  save_memory_file((fs::path(ckpt_dir) / (city + ".mem")).string(), city, memory);
  log_line(LogLevel::info, "exported memory for " + city);
  return 0;
}

// ---- train-kd --------------------------------------------------------------------

int run_train_kd(const std::string& data_dir, const std::string& ckpt_dir,
                 const std::string& city, const std::string& sources_csv,
                 std::uint64_t seed, const ModelOpts& mopts, const TrainOpts& topts,
                 std::size_t pretrain_epochs) {
  print_run_config("train-kd",
                   {{"data", data_dir}, {"ckpt", ckpt_dir}, {"city", city},
                    {"sources", sources_csv}, {"model", model_opts_json(mopts)},
                    {"epochs", topts.epochs}, {"batch", topts.batch},
                    {"pretrain_epochs", pretrain_epochs}},
                   seed);

  std::vector<std::string> sources;
  {
    std::string item;
    std::istringstream ss(sources_csv);
    while (std::getline(ss, item, ','))
      if (!item.empty()) sources.push_back(item);
  }
  if (sources.empty()) throw Error("train-kd needs at least one source city");

  CityMemoryBank bank;
  for (const auto& s : sources) {
    const fs::path mem = fs::path(ckpt_dir) / (s + ".mem");
    if (!fs::exists(mem))
      throw Error("missing memory snapshot " + mem.string() +
                  " (run train-mv and export-memory for " + s + ")");
    bank.memories.push_back(load_memory_file(mem.string()));
  }

  CityDataset ds = load_city(data_dir, city);
  const std::size_t data_ctx = ds.rows.front().features.context.size();

  ModelOpts teacher_opts = mopts;
  teacher_opts.model = "mv";
  MVConfig tcfg = build_config(teacher_opts, data_ctx);
  ModelOpts student_opts = mopts;
  student_opts.model = "student";
  MVConfig scfg = build_config(student_opts, data_ctx);

  TrainConfig tc;
  tc.batch_size = topts.batch;
  tc.max_epochs = topts.epochs;
  tc.patience = topts.patience;
  tc.lr = topts.lr;
  tc.seed = seed;

  TeacherParams teacher = TeacherParams::init(tcfg, seed);
  teacher.mv.memory = pretrain_target_memory(ds, tcfg, tc, pretrain_epochs);
  MVParams student = MVParams::init(scfg, derive_seed(seed, "student"));
  LossWeights weights = LossWeights::init();

  KdTrainResult r = train_kd(ds, bank, teacher, student, weights, tc);

  json meta = train_meta(city, seed, topts);
  meta["sources"] = sources;
  meta["best_epoch"] = r.best_epoch;
  meta["best_student_val_auc"] = r.best_student_val_auc;
  save_checkpoint((fs::path(ckpt_dir) / (city + ".teacher.ckpt")).string(),
                  teacher_to_checkpoint(teacher, meta));
  save_checkpoint((fs::path(ckpt_dir) / (city + ".student.ckpt")).string(),
                  student_to_checkpoint(student, teacher, meta));
  write_kd_history(r.history,
                   (fs::path(ckpt_dir) / (city + ".kd_history.jsonl")).string());
  log_line(LogLevel::info, "kd-trained " + city + ": best student val AUC " +
                               std::to_string(r.best_student_val_auc));
  return 0;
}

// ---- eval -----------------------------------------------------------------------

fs::path resolve_ckpt(const std::string& ckpt, const std::string& city) {
  fs::path p(ckpt);
  if (fs::is_regular_file(p)) return p;
  if (fs::is_regular_file(p.string() + ".ckpt")) return p.string() + ".ckpt";
  if (fs::is_directory(p) && !city.empty()) {
    for (const std::string cand :
         {city + ".ckpt", city + ".student.ckpt", city + ".teacher.ckpt"})
      if (fs::is_regular_file(p / cand)) return p / cand;
  }
  throw Error("cannot resolve checkpoint from '" + ckpt + "'");
}

int run_eval(const std::string& ckpt, const std::string& data_dir,
             const std::string& city_flag, const std::string& split, std::uint64_t seed) {
  print_run_config("eval", {{"ckpt", ckpt}, {"data", data_dir}, {"split", split}}, seed);
  const fs::path path = resolve_ckpt(ckpt, city_flag);
  Checkpoint ck = load_checkpoint(path.string());
  const std::string kind = ck.meta.value("kind", "mv");
  MVParams model = mv_from_checkpoint(ck);
  const std::string city = ck.meta.value("city", city_flag);
  if (city.empty()) throw Error("checkpoint has no city and --city not given");

  CityDataset ds = load_city(data_dir, city);
  std::span<const DatasetRow> rows = split == "train" ? ds.fit()
                                     : split == "val" ? ds.val()
                                                      : ds.test();
  auto scores = score_rows(model, rows);
  auto labels = labels_of(rows);
  Metrics m = evaluate(scores, labels);

  json out;
  out["city"] = city;
  out["split"] = split;
  out["model"] = kind;
  out["ablation"] = ck.meta.at("model").value("ablation", "none");
  out["n"] = rows.size();
  if (m.auc)
    out["auc"] = *m.auc;
  else
    out["auc"] = nullptr;
  out["rmse"] = m.rmse;
  std::cout << out.dump() << "\n";
  return 0;
}

// ---- bench ----------------------------------------------------------------------

int run_bench_train_scaling(const std::string& data_dir, const std::string& city,
                            std::uint64_t seed, const ModelOpts& mopts,
                            const TrainOpts& topts, std::size_t base_rows) {
  print_run_config("bench",
                   {{"kind", "train-scaling"}, {"data", data_dir}, {"city", city},
                    {"base_rows", base_rows}},
                   seed);
  CityDataset full = load_city(data_dir, city);
  const std::size_t data_ctx = full.rows.front().features.context.size();
  if (base_rows == 0) base_rows = full.fit().size() / 2;

  const double factors[4] = {0.25, 0.5, 1.0, 2.0};
  json points = json::array();
  std::vector<double> xs, ys;
  for (double f : factors) {
    const std::size_t want = static_cast<std::size_t>(static_cast<double>(base_rows) * f);
    const std::size_t n = std::min(want, full.fit().size());
    // sub-dataset: first n fit rows plus the original validation slice
    CityDataset sub;
    sub.city = full.city;
    sub.rows.assign(full.rows.begin(), full.rows.begin() + static_cast<std::ptrdiff_t>(n));
    // pad so the split arithmetic yields val/test slices
    const std::size_t pad = std::max<std::size_t>(n / 9 + 2, 10);
    for (std::size_t i = 0; i < pad && i < full.val().size(); ++i)
      sub.rows.push_back(full.val()[i]);
    for (std::size_t i = 0; i < pad && i < full.test().size(); ++i)
      sub.rows.push_back(full.test()[i]);

    MVParams params = MVParams::init(build_config(mopts, data_ctx),
                                     derive_seed(seed, "bench", static_cast<std::uint64_t>(f * 100)));
    TrainConfig tc;
    tc.batch_size = topts.batch;
    tc.max_epochs = 1;
    tc.patience = 2;
    tc.lr = topts.lr;
    tc.seed = seed;
    TrainResult r = train_mv(sub, params, tc);
    const double secs = r.history.front().secs;
    const double rows_trained = static_cast<double>(sub.fit().size());
    points.push_back({{"rows", rows_trained}, {"secs", secs}});
    xs.push_back(rows_trained);
    ys.push_back(secs);
  }

  // least-squares line and its R^2
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double e = ys[i] - (slope * xs[i] + intercept);
    ss_res += e * e;
  }
  const double r2 = syy > 0 ? 1.0 - ss_res / syy : 1.0;

  json out{{"kind", "train-scaling"}, {"points", points}, {"slope", slope},
           {"intercept", intercept}, {"r2", r2}};
  std::cout << out.dump() << "\n";
  return 0;
}

json latency_stats(std::vector<std::int64_t>& micros) {
  std::sort(micros.begin(), micros.end());
  auto pct = [&](double p) {
    const std::size_t idx = std::min(
        micros.size() - 1, static_cast<std::size_t>(p * static_cast<double>(micros.size())));
    return micros[idx];
  };
  const double total =
      static_cast<double>(std::accumulate(micros.begin(), micros.end(), std::int64_t{0}));
  return {{"p50", pct(0.50)}, {"p90", pct(0.90)}, {"p99", pct(0.99)},
          {"total_micros", total}, {"requests", micros.size()}};
}

int run_bench_infer(const std::string& data_dir, const std::string& ckpt_dir,
                    const std::string& city, std::uint64_t seed, std::size_t requests) {
  print_run_config("bench",
                   {{"kind", "infer-latency"}, {"data", data_dir}, {"ckpt", ckpt_dir},
                    {"city", city}, {"requests", requests}},
                   seed);
  CityDataset ds = load_city(data_dir, city);
  MVParams teacher = mv_from_checkpoint(
      load_checkpoint((fs::path(ckpt_dir) / (city + ".teacher.ckpt")).string()));
  MVParams student = mv_from_checkpoint(
      load_checkpoint((fs::path(ckpt_dir) / (city + ".student.ckpt")).string()));

  auto run = [&](MVParams& model) {
    std::vector<std::int64_t> micros;
    micros.reserve(requests);
    const auto rows = ds.test();
    for (std::size_t i = 0; i < requests; ++i) {
      std::int64_t us = 0;
      serve_predict(model, rows[i % rows.size()].features, &us);
      micros.push_back(us);
    }
    return latency_stats(micros);
  };
  json t = run(teacher);
  json s = run(student);
  json out{{"kind", "infer-latency"}, {"teacher", t}, {"student", s},
           {"student_faster_p50",
            s.at("p50").get<std::int64_t>() < t.at("p50").get<std::int64_t>()}};
  std::cout << out.dump() << "\n";
  return 0;
}

// ---- serve ---------------------------------------------------------------------

int run_serve(const std::string& ckpt, const std::string& city,
              const std::string& transport, const std::string& model_kind,
              std::uint64_t seed, std::uint64_t max_connections) {
  print_run_config("serve",
                   {{"ckpt", ckpt}, {"transport", transport}, {"model", model_kind}},
                   seed);
  fs::path path(ckpt);
  if (fs::is_directory(path)) {
    if (city.empty()) throw Error("serve from a directory needs --city");
    const std::string suffix = model_kind == "teacher"   ? ".teacher.ckpt"
                               : model_kind == "student" ? ".student.ckpt"
                                                         : ".ckpt";
    path /= city + suffix;
  }
  MVParams model = mv_from_checkpoint(load_checkpoint(path.string()));
  log_line(LogLevel::info, "serving " + path.string());

  if (transport == "stdio") {
    ServeStats stats = serve_loop(model, std::cin, std::cout);
    log_line(LogLevel::info, "served " + std::to_string(stats.served) + " requests, " +
                                 std::to_string(stats.errors) + " errors");
    return 0;
  }
  if (transport.rfind("tcp:", 0) == 0) {
    const int port = std::stoi(transport.substr(4));
    serve_tcp(model, port, max_connections);
    return 0;
  }
  throw Error("unknown transport '" + transport + "' (use stdio or tcp:PORT)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"matching-success-rate prediction toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 7;
  app.add_option("--seed", seed, "root seed for all randomness")->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-city benchmark");
  std::string gen_out;
  std::size_t source_rows = 200'000, target_rows = 5'000, gen_ctx = 8;
  double divergence = 0.15;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--source-rows", source_rows, "rows per source city");
  gen->add_option("--target-rows", target_rows, "rows per target city");
  gen->add_option("--divergence", divergence, "cross-city divergence knob");
  gen->add_option("--ctx-len", gen_ctx, "context slots per pair");

  // train-mv
  auto* tmv = app.add_subcommand("train-mv", "train a model on one city");
  std::string tmv_data, tmv_ckpt, tmv_city;
  ModelOpts tmv_model;
  TrainOpts tmv_train;
  bool tmv_sweep = false;
  tmv->add_option("--data", tmv_data, "dataset directory")->required();
  tmv->add_option("--ckpt", tmv_ckpt, "checkpoint directory")->required();
  tmv->add_option("--city", tmv_city, "city name")->required();
  tmv->add_option("--model", tmv_model.model, "mv|student")
      ->check(CLI::IsMember({"mv", "student"}));
  add_model_flags(tmv, tmv_model);
  add_train_flags(tmv, tmv_train);
  tmv->add_flag("--sweep", tmv_sweep, "grid over embedding and memory sizes");

  // export-memory
  auto* exm = app.add_subcommand("export-memory", "write a city's memory snapshot");
  std::string exm_ckpt, exm_city;
  exm->add_option("--ckpt", exm_ckpt, "checkpoint directory")->required();
  exm->add_option("--city", exm_city, "city name")->required();

  // train-kd
  auto* tkd = app.add_subcommand("train-kd", "distill a student for a target city");
  std::string tkd_data, tkd_ckpt, tkd_city, tkd_sources = "BJ,SZ,SH,CD";
  ModelOpts tkd_model;
  TrainOpts tkd_train;
  std::size_t pretrain_epochs = 1;
  tkd->add_option("--data", tkd_data, "dataset directory")->required();
  tkd->add_option("--ckpt", tkd_ckpt, "checkpoint directory")->required();
  tkd->add_option("--city", tkd_city, "target city")->required();
  tkd->add_option("--sources", tkd_sources, "comma-separated source cities");
  tkd->add_option("--pretrain-epochs", pretrain_epochs, "target-memory pretraining budget");
  add_model_flags(tkd, tkd_model);
  add_train_flags(tkd, tkd_train);

  // eval
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  std::string ev_ckpt, ev_data, ev_city, ev_split = "test";
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file or directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--city", ev_city, "city (when --ckpt is a directory)");
  ev->add_option("--split", ev_split, "train|val|test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  // bench
  auto* bn = app.add_subcommand("bench", "timing reports");
  std::string bn_kind, bn_data, bn_ckpt, bn_city = "BJ";
  std::size_t bn_rows = 0, bn_requests = 10'000;
  ModelOpts bn_model;
  TrainOpts bn_train;
  bn->add_option("--kind", bn_kind, "train-scaling|infer-latency")
      ->required()
      ->check(CLI::IsMember({"train-scaling", "infer-latency"}));
  bn->add_option("--data", bn_data, "dataset directory")->required();
  bn->add_option("--ckpt", bn_ckpt, "checkpoint directory (infer-latency)");
  bn->add_option("--city", bn_city, "city name");
  bn->add_option("--rows", bn_rows, "base row count for train-scaling");
  bn->add_option("--requests", bn_requests, "request count for infer-latency");
  add_model_flags(bn, bn_model);
  add_train_flags(bn, bn_train);

  // serve
  auto* sv = app.add_subcommand("serve", "stream inference server");
  std::string sv_ckpt, sv_city, sv_transport = "stdio", sv_model = "student";
  std::uint64_t sv_max_conn = 0;
  sv->add_option("--ckpt", sv_ckpt, "checkpoint file or directory")->required();
  sv->add_option("--city", sv_city, "city (when --ckpt is a directory)");
  sv->add_option("--transport", sv_transport, "stdio|tcp:PORT");
  sv->add_option("--model", sv_model, "student|teacher|mv")
      ->check(CLI::IsMember({"student", "teacher", "mv"}));
  sv->add_option("--max-connections", sv_max_conn,
                 "stop after this many tcp connections (0 = forever)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed())
      return run_gen_data(gen_out, seed, source_rows, target_rows, divergence, gen_ctx);
    if (tmv->parsed())
      return run_train_mv(tmv_data, tmv_ckpt, tmv_city, seed, tmv_model, tmv_train,
                          tmv_sweep);
    if (exm->parsed()) return run_export_memory(exm_ckpt, exm_city, seed);
    if (tkd->parsed())
      return run_train_kd(tkd_data, tkd_ckpt, tkd_city, tkd_sources, seed, tkd_model,
                          tkd_train, pretrain_epochs);
    if (ev->parsed()) return run_eval(ev_ckpt, ev_data, ev_city, ev_split, seed);
    if (bn->parsed()) {
      if (bn_kind == "train-scaling")
        return run_bench_train_scaling(bn_data, bn_city, seed, bn_model, bn_train, bn_rows);
      return run_bench_infer(bn_data, bn_ckpt, bn_city, seed, bn_requests);
    }
    if (sv->parsed())
      return run_serve(sv_ckpt, sv_city, sv_transport, sv_model, seed, sv_max_conn);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
