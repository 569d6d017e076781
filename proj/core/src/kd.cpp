#include "msr/kd.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "msr/rng.hpp"

namespace msr {

void CityMemoryBank::validate(std::size_t rows, std::size_t cols) const {
  if (memories.empty()) throw ContractError("memory bank is empty");
  for (const auto& [city, m] : memories)
    if (m.shape != Shape{rows, cols})
      throw ShapeError("bank memory for " + city + " has shape " + shape_str(m.shape) +
                       ", expected " + shape_str({rows, cols}));
}

void save_memory_file(const std::string& path, const std::string& city,
                      const Tensor& memory) {
  Checkpoint ck;
  ck.meta = {{"kind", "memory"}, {"city", city}};
  ck.put("memory", memory);
  save_checkpoint(path, ck);
}

std::pair<std::string, Tensor> load_memory_file(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "memory")
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          path + " is not a memory snapshot file");
  return {ck.meta.value("city", ""), ck.require("memory")};
}

TeacherParams TeacherParams::init(const MVConfig& cfg, std::uint64_t seed) {
  if (cfg.student || cfg.ablation == Ablation::s3)
    throw ContractError("teacher model needs the memory-backed encoder");
  TeacherParams t;
  t.mv = MVParams::init(cfg, seed);
  const std::size_t m = cfg.mem_cols;
  const double lim = 1.0 / std::sqrt(static_cast<double>(m));
  t.agg_query = Tensor::uniform({m, m}, lim, derive_seed(seed, "agg_q"));
  t.agg_key = Tensor::uniform({m, m}, lim, derive_seed(seed, "agg_k"));
  t.agg_value = Tensor::uniform({m, m}, lim, derive_seed(seed, "agg_v"));
  return t;
}

std::vector<std::pair<std::string, Tensor*>> TeacherParams::trainable() {
  auto out = mv.trainable();
  out.emplace_back("agg.q", &agg_query);
  out.emplace_back("agg.k", &agg_key);
  out.emplace_back("agg.v", &agg_value);
  return out;
}

std::size_t TeacherParams::param_count() {
  std::size_t n = 0;
  for (auto& [name, t] : trainable()) n += t->size();
  return n;
}

Var aggregate_memories(Tape& tape, Var m_target, const CityMemoryBank& bank,
                       Tensor& w_query, Tensor& w_key, Tensor& w_value) {
  if (bank.memories.empty()) throw ContractError("aggregate_memories: empty bank");
  const auto n = m_target.shape()[0], m = m_target.shape()[1];
  bank.validate(n, m);

  Var q = matmul(m_target, tape.param(w_query));  // [n, m]
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));
  Var out = m_target;
  for (const auto& [city, source] : bank.memories) {
    Var src = tape.constant(source);  // frozen: no gradient path
    Var keys = matmul(src, tape.param(w_key));
    Var scores = scale(matmul(q, transpose(keys)), inv_sqrt_m);  // [n, n]
    Var attn = softmax_row(scores);
    out = add(out, matmul(attn, matmul(src, tape.param(w_value))));
  }
  return out;
}

MvForwardOut teacher_forward(Tape& tape, TeacherParams& teacher,
                             const CityMemoryBank& bank, const SampleInput& in) {
  Var m0 = tape.constant(teacher.mv.memory);
  Var aggregated =
      aggregate_memories(tape, m0, bank, teacher.agg_query, teacher.agg_key,
                         teacher.agg_value);
  return mv_forward(tape, teacher.mv, in, aggregated);
}

MvForwardOut student_forward(Tape& tape, MVParams& student, const SampleInput& in,
                             TeacherParams& teacher) {
  if (!student.cfg.student)
    throw ContractError("student_forward needs a student-configured model");
  return mv_forward(tape, student, in, Var(), &teacher.mv.pred_w, &teacher.mv.pred_b);
}

// ---- loss weights ------------------------------------------------------------

namespace {
// softplus(rho) = 1  =>  rho = log(e - 1)
const double kUnitRho = std::log(std::exp(1.0) - 1.0);
constexpr double kWeightFloor = 0.01;

Var weight_var(Tape& tape, Tensor& rho) {
  return clamp_min(softplus(tape.param(rho)), kWeightFloor);
}

double weight_value(const Tensor& rho) {
  const double x = rho.data[0];
  const double sp = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return std::max(sp, kWeightFloor);
}
}  // namespace

LossWeights LossWeights::init() {
  LossWeights w;
  w.rho_alpha = Tensor({1}, {kUnitRho}, true);
  w.rho_beta = Tensor({1}, {kUnitRho}, true);
  w.rho_gamma = Tensor({1}, {kUnitRho}, true);
  return w;
}

Var LossWeights::alpha(Tape& tape) { return weight_var(tape, rho_alpha); }
Var LossWeights::beta(Tape& tape) { return weight_var(tape, rho_beta); }
Var LossWeights::gamma(Tape& tape) { return weight_var(tape, rho_gamma); }
double LossWeights::alpha_value() const { return weight_value(rho_alpha); }
double LossWeights::beta_value() const { return weight_value(rho_beta); }
double LossWeights::gamma_value() const { return weight_value(rho_gamma); }

std::vector<std::pair<std::string, Tensor*>> LossWeights::trainable() {
  return {{"kd.rho_alpha", &rho_alpha},
          {"kd.rho_beta", &rho_beta},
          {"kd.rho_gamma", &rho_gamma}};
}

Var kd_loss(Tape& tape, const MvForwardOut& teacher_out, const MvForwardOut& student_out,
            int label, LossWeights& weights) {
  if (teacher_out.v.size() != student_out.v.size())
    throw ShapeError("kd_loss: teacher v " + shape_str(teacher_out.v.shape()) +
                     " vs student v " + shape_str(student_out.v.shape()));
  Var bce_t = bce_with_logit(teacher_out.logit, static_cast<double>(label));
  Var bce_s = bce_with_logit(student_out.logit, static_cast<double>(label));
  Var align = cosine(teacher_out.v, student_out.v);
  return sub(add(mul(weights.alpha(tape), bce_t), mul(weights.beta(tape), bce_s)),
             mul(weights.gamma(tape), align));
}

Tensor pretrain_target_memory(const CityDataset& target, const MVConfig& cfg,
                              const TrainConfig& train_cfg, std::size_t epochs) {
  if (target.rows.empty()) throw ContractError("pretraining on an empty dataset");
  MVConfig plain = cfg;
  plain.student = false;
  plain.ablation = Ablation::none;
  MVParams p = MVParams::init(plain, derive_seed(train_cfg.seed, "pretrain"));
  TrainConfig tc = train_cfg;
  tc.max_epochs = epochs;
  tc.patience = epochs + 1;  // no early stop inside the budget
  TrainResult r = train_mv(target, p, tc);
  return r.final_memory;
}

void pretrain_teacher(TeacherParams& teacher, const CityDataset& target,
                      const TrainConfig& train_cfg, std::size_t epochs) {
  if (target.rows.empty()) throw ContractError("pretraining on an empty dataset");
  TrainConfig tc = train_cfg;
  tc.max_epochs = epochs;
  tc.patience = epochs + 1;
  TrainResult r = train_mv(target, teacher.mv, tc);
  teacher.mv.memory = r.final_memory;
}

// ---- joint training ------------------------------------------------------------

KdTrainResult train_kd(const CityDataset& target, const CityMemoryBank& bank,
                       TeacherParams& teacher, MVParams& student, LossWeights& weights,
                       const TrainConfig& cfg) {
  if (target.fit().empty() || target.val().empty())
    throw ContractError("train_kd: dataset too small to split");
  if (!teacher.mv.cfg.uses_memory())
    throw ContractError("train_kd: teacher must use the memory encoder");
  bank.validate(teacher.mv.cfg.mem_rows, teacher.mv.cfg.mem_cols);
  if (teacher.mv.memory.norm() == 0.0)
    throw ContractError("train_kd: target memory not pretrained");

  // one set of statistics, fit on the target training split, for both branches
  {
    std::vector<std::vector<double>> pc, dc, ctx;
    for (const auto& r : target.fit()) {
      pc.emplace_back(r.features.passenger.begin(), r.features.passenger.end());
      dc.emplace_back(r.features.driver.begin(), r.features.driver.end());
      for (const auto& slot : r.features.context) ctx.push_back(slot);
    }
    teacher.mv.passenger_std = Standardizer::fit(pc);
    teacher.mv.driver_std = Standardizer::fit(dc);
    teacher.mv.ctx_std = Standardizer::fit(ctx);
    student.passenger_std = teacher.mv.passenger_std;
    student.driver_std = teacher.mv.driver_std;
    student.ctx_std = teacher.mv.ctx_std;
  }

  ParamSet params = teacher.trainable();
  for (auto& [name, t] : student.trainable()) {
    if (name == "pred_w" || name == "pred_b") continue;  // head is shared
    params.emplace_back("student." + name, t);
  }
  for (auto& [name, t] : weights.trainable()) params.emplace_back(name, t);
  Adam adam(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});

  const Tensor pretrained = teacher.mv.memory;
  std::vector<double> bank_before;
  for (const auto& [city, m] : bank.memories)
    bank_before.insert(bank_before.end(), m.data.begin(), m.data.end());

  KdTrainResult result;
  std::vector<std::pair<std::string, std::vector<double>>> best_data;
  std::vector<double> best_memory;
  double best_auc = -1.0;
  std::size_t stale = 0;

  std::vector<std::size_t> order(target.fit().size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    teacher.mv.memory = pretrained;  // per-epoch reset to the pretrained state

    auto shuffle_rng = make_rng(derive_seed(cfg.seed, "kd_shuffle", epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0, cos_sum = 0.0;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
      adam.zero_grad();
      std::vector<double> mem_accum(teacher.mv.memory.size(), 0.0);

      double batch_loss = 0.0;
      for (std::size_t k = 0; k < bsz; ++k) {
        const DatasetRow& rowd = target.fit()[order[start + k]];
        Tape tape;
        auto t_out = teacher_forward(tape, teacher, bank, rowd.features);
        auto s_out = student_forward(tape, student, rowd.features, teacher);
        cos_sum += cosine(t_out.v, s_out.v).scalar();
        Var loss = kd_loss(tape, t_out, s_out, rowd.label, weights);
        batch_loss += loss.scalar();
        tape.backward(loss, 1.0 / static_cast<double>(bsz));
        const auto& mf = t_out.memory_final.value();
        for (std::size_t i = 0; i < mf.size(); ++i) mem_accum[i] += mf[i];
      }
      batch_loss /= static_cast<double>(bsz);
      if (!std::isfinite(batch_loss))
        throw DivergenceError("kd loss non-finite at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch_index));

      adam.clip_global_norm(cfg.grad_clip);
      adam.step();
      for (std::size_t i = 0; i < mem_accum.size(); ++i)
        teacher.mv.memory.data[i] = mem_accum[i] / static_cast<double>(bsz);

      epoch_loss += batch_loss * static_cast<double>(bsz);
      seen += bsz;
      ++batch_index;
    }
    epoch_loss /= static_cast<double>(seen);

    // validation for both branches
    std::vector<double> t_scores, s_scores;
    t_scores.reserve(target.val().size());
    s_scores.reserve(target.val().size());
    for (const auto& r : target.val()) {
      Tape tape;
      t_scores.push_back(teacher_forward(tape, teacher, bank, r.features).y_hat.scalar());
      s_scores.push_back(
          student_forward(tape, student, r.features, teacher).y_hat.scalar());
    }
    auto vl = labels_of(target.val());
    Metrics tm = evaluate(t_scores, vl);
    Metrics sm = evaluate(s_scores, vl);

    const auto t1 = std::chrono::steady_clock::now();
    KdEpochStats es;
    es.epoch = epoch;
    es.loss = epoch_loss;
    es.teacher_val_auc = tm.auc.value_or(0.5);
    es.teacher_val_rmse = tm.rmse;
    es.student_val_auc = sm.auc.value_or(0.5);
    es.student_val_rmse = sm.rmse;
    es.mean_cos = cos_sum / static_cast<double>(seen);
    es.alpha = weights.alpha_value();
    es.beta = weights.beta_value();
    es.gamma = weights.gamma_value();
    es.secs = std::chrono::duration<double>(t1 - t0).count();
    result.history.push_back(es);

    if (es.alpha < kWeightFloor || es.beta < kWeightFloor || es.gamma < kWeightFloor)
      throw ContractError("loss weight fell below its floor");

    if (es.student_val_auc > best_auc) {
      best_auc = es.student_val_auc;
      result.best_epoch = epoch;
      stale = 0;
      best_data.clear();
      for (auto& [name, t] : params) best_data.emplace_back(name, t->data);
      best_memory = teacher.mv.memory.data;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }

  // frozen contract: the bank must be bit-identical after training
  std::vector<double> bank_after;
  for (const auto& [city, m] : bank.memories)
    bank_after.insert(bank_after.end(), m.data.begin(), m.data.end());
  if (bank_after != bank_before)
    throw ContractError("source memory bank changed during training");

  for (std::size_t i = 0; i < params.size(); ++i) params[i].second->data = best_data[i].second;
  teacher.mv.memory.data = best_memory;
  result.best_student_val_auc = best_auc;
  return result;
}

Checkpoint student_to_checkpoint(MVParams& student, TeacherParams& teacher,
                                 nlohmann::json extra_meta) {
  student.pred_w.data = teacher.mv.pred_w.data;
  student.pred_b.data = teacher.mv.pred_b.data;
  extra_meta["kind"] = "student";
  return mv_to_checkpoint(student, std::move(extra_meta));
}

Checkpoint teacher_to_checkpoint(TeacherParams& teacher, nlohmann::json extra_meta) {
  extra_meta["kind"] = "teacher";
  Checkpoint ck = mv_to_checkpoint(teacher.mv, std::move(extra_meta));
  ck.put("agg.q", teacher.agg_query);
  ck.put("agg.k", teacher.agg_key);
  ck.put("agg.v", teacher.agg_value);
  return ck;
}

TeacherParams teacher_from_checkpoint(const Checkpoint& ck) {
  TeacherParams t;
  t.mv = mv_from_checkpoint(ck);
  t.agg_query = ck.require("agg.q");
  t.agg_query.requires_grad = true;
  t.agg_query.grad.assign(t.agg_query.size(), 0.0);
  t.agg_key = ck.require("agg.k");
  t.agg_key.requires_grad = true;
  t.agg_key.grad.assign(t.agg_key.size(), 0.0);
  t.agg_value = ck.require("agg.v");
  t.agg_value.requires_grad = true;
  t.agg_value.grad.assign(t.agg_value.size(), 0.0);
  return t;
}

}  // namespace msr
