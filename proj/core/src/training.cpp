#include "msr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "msr/rng.hpp"

namespace msr {

using json = nlohmann::json;

// ---- Adam -----------------------------------------------------------------------

Adam::Adam(ParamSet params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, t] : params_) {
    if (!t->requires_grad)
      throw ContractError("optimizer parameter '" + name + "' does not require grad");
    m_.emplace_back(t->size(), 0.0);
    v_.emplace_back(t->size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t->zero_grad();
}

double Adam::clip_global_norm(double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params_)
    for (double g : t->grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [name, t] : params_)
      for (double& g : t->grad) g *= s;
  }
  return norm;
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor* t = params_[p].second;
    if (!t->grad_live)
      throw ContractError("parameter '" + params_[p].first +
                          "' has no gradient for this step");
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < t->data.size(); ++i) {
      const double g = t->grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

// ---- metrics ---------------------------------------------------------------------

Metrics evaluate(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw ContractError("evaluate: need equal, nonzero score/label lengths");

  Metrics out;
  double se = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = scores[i] - static_cast<double>(labels[i]);
    se += d * d;
    pos += labels[i] ? 1 : 0;
  }
  out.rmse = std::sqrt(se / static_cast<double>(scores.size()));

  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) return out;  // AUC undefined

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks across ties, then the Mann-Whitney statistic
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double n1 = static_cast<double>(pos), n0 = static_cast<double>(neg);
  out.auc = (rank_sum_pos - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
  return out;
}

// ---- checkpoints -----------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'M', 'S', 'R', 'C', 'K', 'P', 'T', '1'};
constexpr int kVersion = 1;

void put_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8)
    throw CheckpointError(CheckpointError::Kind::truncated, "truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
}  // namespace

const Tensor& Checkpoint::require(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError(CheckpointError::Kind::corrupt, "missing tensor '" + name + "'");
}

void Checkpoint::put(const std::string& name, const Tensor& t) {
  tensors.emplace_back(name, t);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);

  json header;
  header["version"] = kVersion;
  header["meta"] = ck.meta;
  json tens = json::array();
  for (const auto& [name, t] : ck.tensors)
    tens.push_back({{"name", name}, {"shape", t.shape}});
  header["tensors"] = tens;
  const std::string hs = header.dump();

  out.write(kMagic, 8);
  put_u64(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ck.tensors) {
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * 8));
  }
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);

  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError(CheckpointError::Kind::bad_magic,
                          "bad checkpoint magic in " + path);
  const std::uint64_t hlen = get_u64(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::uint64_t>(in.gcount()) != hlen)
    throw CheckpointError(CheckpointError::Kind::truncated, "truncated header");

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          std::string("unparsable header: ") + e.what());
  }
  if (header.value("version", -1) != kVersion)
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version");

  Checkpoint ck;
  ck.meta = header.value("meta", json::object());
  for (const auto& td : header.at("tensors")) {
    const std::string name = td.at("name").get<std::string>();
    Shape shape = td.at("shape").get<Shape>();
    const std::size_t n = numel(shape);
    std::vector<double> data(n);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 8));
    if (static_cast<std::size_t>(in.gcount()) != n * 8)
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "payload truncated at tensor '" + name + "'");
    ck.tensors.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  // trailing bytes mean the header lied about the payload
  in.peek();
  if (!in.eof())
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          "payload longer than header declares");
  return ck;
}

// ---- MV <-> checkpoint ---------------------------------------------------------

namespace {

/// Every tensor of the model, active or not, in a stable order.
ParamSet persisted_tensors(MVParams& p) {
  ParamSet out;
  p.passenger_enc.collect("passenger_enc", out);
  p.driver_enc.collect("driver_enc", out);
  p.order_enc.collect("order_enc", out);
  p.encoder.collect("encoder", out);
  for (std::size_t f = 0; f < 6; ++f) {
    std::string base = std::string("att_") + kRepNames[f];
    out.emplace_back(base + ".q", &p.attention[f].query);
    out.emplace_back(base + ".k", &p.attention[f].key);
    out.emplace_back(base + ".v", &p.attention[f].value);
  }
  out.emplace_back("pred_w", &p.pred_w);
  out.emplace_back("pred_b", &p.pred_b);
  return out;
}

}  // namespace

Checkpoint mv_to_checkpoint(MVParams& p, json extra_meta) {
  Checkpoint ck;
  ck.meta = std::move(extra_meta);
  ck.meta["model"]["embed_dim"] = p.cfg.embed_dim;
  ck.meta["model"]["mem_rows"] = p.cfg.mem_rows;
  ck.meta["model"]["mem_cols"] = p.cfg.mem_cols;
  ck.meta["model"]["read_heads"] = p.cfg.read_heads;
  ck.meta["model"]["hidden"] = p.cfg.hidden;
  ck.meta["model"]["gru_layers"] = p.cfg.gru_layers;
  ck.meta["model"]["ctx_len"] = p.cfg.ctx_len;
  ck.meta["model"]["ctx_width"] = p.cfg.ctx_width;
  ck.meta["model"]["ablation"] = ablation_name(p.cfg.ablation);
  ck.meta["model"]["student"] = p.cfg.student;
  ck.meta["model"]["vocab"] = {{"start_poi", p.cfg.vocab.start_poi},
                               {"end_poi", p.cfg.vocab.end_poi},
                               {"product", p.cfg.vocab.product}};
  for (auto& [name, t] : persisted_tensors(p)) ck.put(name, *t);
  ck.put("std.passenger", p.passenger_std.to_tensor());
  ck.put("std.driver", p.driver_std.to_tensor());
  ck.put("std.ctx", p.ctx_std.to_tensor());
  if (p.memory.size() > 0) ck.put("memory", p.memory);
  return ck;
}

MVConfig mv_config_from_meta(const json& meta) {
  const json& m = meta.at("model");
  MVConfig cfg;
  cfg.embed_dim = m.at("embed_dim").get<std::size_t>();
  cfg.mem_rows = m.at("mem_rows").get<std::size_t>();
  cfg.mem_cols = m.at("mem_cols").get<std::size_t>();
  cfg.read_heads = m.at("read_heads").get<std::size_t>();
  cfg.hidden = m.at("hidden").get<std::size_t>();
  cfg.gru_layers = m.at("gru_layers").get<std::size_t>();
  cfg.ctx_len = m.at("ctx_len").get<std::size_t>();
  cfg.ctx_width = m.at("ctx_width").get<std::size_t>();
  auto ab = ablation_from_name(m.at("ablation").get<std::string>());
  if (!ab)
    throw CheckpointError(CheckpointError::Kind::corrupt, "unknown ablation in meta");
  cfg.ablation = *ab;
  cfg.student = m.at("student").get<bool>();
  cfg.vocab.start_poi = m.at("vocab").at("start_poi").get<std::size_t>();
  cfg.vocab.end_poi = m.at("vocab").at("end_poi").get<std::size_t>();
  cfg.vocab.product = m.at("vocab").at("product").get<std::size_t>();
  return cfg;
}

MVParams mv_from_checkpoint(const Checkpoint& ck) {
  MVParams p = MVParams::init(mv_config_from_meta(ck.meta), 0);
  for (auto& [name, t] : persisted_tensors(p)) {
    const Tensor& stored = ck.require(name);
    if (stored.shape != t->shape)
      throw CheckpointError(CheckpointError::Kind::corrupt,
                            "tensor '" + name + "' stored with shape " +
                                shape_str(stored.shape) + ", model expects " +
                                shape_str(t->shape));
    t->data = stored.data;
  }
  p.passenger_std = Standardizer::from_tensor(ck.require("std.passenger"));
  p.driver_std = Standardizer::from_tensor(ck.require("std.driver"));
  p.ctx_std = Standardizer::from_tensor(ck.require("std.ctx"));
  if (p.cfg.uses_memory()) p.memory = ck.require("memory");
  return p;
}

// ---- training --------------------------------------------------------------------

std::vector<int> labels_of(std::span<const DatasetRow> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.label);
  return out;
}

std::vector<double> score_rows(MVParams& params, std::span<const DatasetRow> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    Tape tape;
    out.push_back(mv_forward(tape, params, r.features).y_hat.scalar());
  }
  return out;
}

namespace {

void fit_standardizers(MVParams& p, std::span<const DatasetRow> fit_rows) {
  std::vector<std::vector<double>> pc, dc, ctx;
  pc.reserve(fit_rows.size());
  dc.reserve(fit_rows.size());
  for (const auto& r : fit_rows) {
    pc.emplace_back(r.features.passenger.begin(), r.features.passenger.end());
    dc.emplace_back(r.features.driver.begin(), r.features.driver.end());
    for (const auto& slot : r.features.context) ctx.push_back(slot);
  }
  p.passenger_std = Standardizer::fit(pc);
  p.driver_std = Standardizer::fit(dc);
  p.ctx_std = Standardizer::fit(ctx);
}

std::string divergence_diagnostic(MVParams& p, std::size_t epoch, std::size_t batch) {
  std::string msg = "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(batch) + "; parameter norms:";
  for (auto& [name, t] : p.trainable()) msg += " " + name + "=" + std::to_string(t->norm());
  return msg;
}

}  // namespace

TrainResult train_mv(const CityDataset& data, MVParams& params, const TrainConfig& cfg) {
  if (data.fit().empty() || data.val().empty())
    throw ContractError("train_mv: dataset too small to split");
  fit_standardizers(params, data.fit());

  Adam adam(params.trainable(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const bool with_memory = params.cfg.uses_memory();

  TrainResult result;
  std::vector<std::pair<std::string, std::vector<double>>> best_data;
  std::vector<double> best_memory;
  double best_auc = -1.0;
  std::size_t stale = 0;

  std::vector<std::size_t> order(data.fit().size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (with_memory)
      std::fill(params.memory.data.begin(), params.memory.data.end(), 0.0);

    auto shuffle_rng = make_rng(derive_seed(cfg.seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
      adam.zero_grad();
      std::vector<double> mem_accum;
      if (with_memory) mem_accum.assign(params.memory.size(), 0.0);

      double batch_loss = 0.0;
      for (std::size_t k = 0; k < bsz; ++k) {
        const DatasetRow& rowd = data.fit()[order[start + k]];
        Tape tape;
        auto out = mv_forward(tape, params, rowd.features);
        Var loss = mv_loss(out.logit, rowd.label);
        batch_loss += loss.scalar();
        tape.backward(loss, 1.0 / static_cast<double>(bsz));
        if (with_memory) {
          const auto& mf = out.memory_final.value();
          for (std::size_t i = 0; i < mf.size(); ++i) mem_accum[i] += mf[i];
        }
      }
      batch_loss /= static_cast<double>(bsz);
      if (!std::isfinite(batch_loss))
        throw DivergenceError(divergence_diagnostic(params, epoch, batch_index));

      adam.clip_global_norm(cfg.grad_clip);
      adam.step();
      if (with_memory)
        for (std::size_t i = 0; i < mem_accum.size(); ++i)
          params.memory.data[i] = mem_accum[i] / static_cast<double>(bsz);

      epoch_loss += batch_loss * static_cast<double>(bsz);
      seen += bsz;
      ++batch_index;
    }
    epoch_loss /= static_cast<double>(seen);

    auto val_scores = score_rows(params, data.val());
    auto val_labels = labels_of(data.val());
    Metrics m = evaluate(val_scores, val_labels);
    const double val_auc = m.auc.value_or(0.5);

    const auto t1 = std::chrono::steady_clock::now();
    EpochStats es;
    es.epoch = epoch;
    es.loss = epoch_loss;
    es.val_auc = val_auc;
    es.val_rmse = m.rmse;
    es.secs = std::chrono::duration<double>(t1 - t0).count();
    result.history.push_back(es);

    if (val_auc > best_auc) {
      best_auc = val_auc;
      result.best_epoch = epoch;
      stale = 0;
      best_data.clear();
      for (auto& [name, t] : params.trainable()) best_data.emplace_back(name, t->data);
      if (with_memory) best_memory = params.memory.data;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }

  // the model gets the best-validation weights and their matching memory; the
  // end-of-training snapshot travels separately in the result
  if (with_memory) {
    result.final_memory = params.memory;
    params.memory.data = best_memory;
  }
  for (auto& [name, saved] : best_data)
    for (auto& [pname, t] : params.trainable())
      if (pname == name) t->data = saved;
  result.best_val_auc = best_auc;
  return result;
}

void write_history_jsonl(const std::vector<EpochStats>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& e : history) {
    json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["val_auc"] = e.val_auc;
    j["val_rmse"] = e.val_rmse;
    j["secs"] = e.secs;
    out << j.dump() << '\n';
  }
}

}  // namespace msr
