#include "ssr/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "ssr/error.hpp"
#include "ssr/rng.hpp"
#include "ssr/util.hpp"

namespace ssr {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

std::size_t masked_count(const std::vector<bool>& mask) {
  std::size_t c = 0;
  for (std::size_t t = 1; t < mask.size(); ++t)
    if (mask[t]) ++c;
  return c;
}

void validate_example(const TrainingExample& ex, std::size_t index) {
  const std::size_t n = ex.instruction_tokens.size() + ex.response_tokens.size();
  if (n == 0)
    throw input_error("training example " + std::to_string(index) + " has no tokens");
  if (ex.loss_mask.size() != n)
    throw input_error("training example " + std::to_string(index) +
                      ": loss_mask length does not match token count");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

std::string reduction_name(LossReduction r) {
  switch (r) {
    case LossReduction::sum: return "sum";
    case LossReduction::token_mean: return "token_mean";
  }
  throw config_error("reduction_name: invalid reduction value");
}

LossReduction parse_reduction(const std::string& name) {
  if (name == "sum") return LossReduction::sum;
  if (name == "token_mean") return LossReduction::token_mean;
  throw config_error("unknown loss reduction \"" + name + "\" (known: sum, token_mean)");
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw config_error("train config: epochs must be positive");
  if (batch_size <= 0) throw config_error("train config: batch_size must be positive");
  if (!(peak_lr > 0.0)) throw config_error("train config: peak_lr must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
    throw config_error("train config: warmup_ratio must satisfy 0 <= ratio < 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw config_error("train config: adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw config_error("train config: adam_eps must be positive");
  if (grad_accum <= 0) throw config_error("train config: grad_accum must be positive");
  if (clip_norm < 0.0) throw config_error("train config: clip_norm must be non-negative");
}

// ---------------------------------------------------------------------------
// Loss trace
// ---------------------------------------------------------------------------

std::string LossTrace::to_jsonl() const {
  std::ostringstream out;
  for (const LossStep& s : steps) {
    ordered_json j;
    j["step"] = s.step;
    j["lr"] = s.lr;
    j["loss"] = s.loss;
    out << j.dump() << "\n";
  }
  for (std::size_t e = 0; e < epoch_means.size(); ++e) {
    ordered_json j;
    j["epoch"] = e + 1;
    j["mean_loss"] = epoch_means[e];
    out << j.dump() << "\n";
  }
  return out.str();
}

LossTrace LossTrace::from_jsonl(const std::string& text) {
  LossTrace trace;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::int64_t last_step = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      if (j.contains("epoch")) {
        const std::size_t epoch = j.at("epoch").get<std::size_t>();
        trace.epoch_means.resize(std::max(trace.epoch_means.size(), epoch));
        trace.epoch_means[epoch - 1] = j.at("mean_loss").get<double>();
        continue;
      }
      LossStep s;
      s.step = j.at("step").get<std::int64_t>();
      s.lr = j.at("lr").get<double>();
      s.loss = j.at("loss").get<double>();
      if (s.step <= last_step)
        throw input_error("loss trace line " + std::to_string(line_no) +
                          ": steps must be strictly increasing");
      last_step = s.step;
      trace.steps.push_back(s);
    } catch (const json::exception& e) {
      throw input_error("loss trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) throw input_error("lr_at: total_steps must be positive");
  if (step < 0) throw input_error("lr_at: step must be non-negative");
  if (step > total_steps)
    throw input_error("lr_at: step " + std::to_string(step) + " exceeds total_steps " +
                      std::to_string(total_steps));
  // ceil with a tolerance so exact products like 0.1*230 do not round up.
  const std::int64_t warmup = static_cast<std::int64_t>(
      std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps) - 1e-9));
  if (warmup > 0 && step <= warmup)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (warmup >= total_steps) return cfg.peak_lr;  // degenerate: no decay segment
  return cfg.peak_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

double example_loss(const Mat& logits, const std::vector<TokenId>& tokens,
                    const std::vector<bool>& mask, Mat* dlogits) {
  const std::size_t n = tokens.size();
  if (n == 0) throw input_error("example_loss: empty example");
  if (mask.size() != n) throw input_error("example_loss: mask length does not match token count");
  if (logits.rows != n)
    throw input_error("example_loss: logits have " + std::to_string(logits.rows) +
                      " rows for " + std::to_string(n) + " tokens");
  if (mask[0])
    throw input_error("example_loss: position 0 is masked but has no preceding context");
  if (dlogits) *dlogits = Mat(logits.rows, logits.cols);

  double total = 0.0;
  for (std::size_t t = 1; t < n; ++t) {
    if (!mask[t]) continue;
    const TokenId target = tokens[t];
    if (target < 0 || static_cast<std::size_t>(target) >= logits.cols)
      throw input_error("example_loss: token id " + std::to_string(target) +
                        " outside vocabulary of size " + std::to_string(logits.cols));
    const double* row = logits.row(t - 1);
    double mx = row[0];
    for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
    double sumexp = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) sumexp += std::exp(row[j] - mx);
    total += std::log(sumexp) - (row[target] - mx);
    if (dlogits) {
      double* d = dlogits->row(t - 1);
      for (std::size_t j = 0; j < logits.cols; ++j) d[j] += std::exp(row[j] - mx) / sumexp;
      d[target] -= 1.0;
    }
  }
  return total;
}

namespace {

// Shared batch-loss math over any forward callable (read-only model).
template <typename ForwardFn>
LossResult compute_loss_impl(ForwardFn&& forward, const std::vector<TrainingExample>& batch,
                             LossReduction reduction) {
  if (batch.empty()) throw input_error("compute_loss: empty batch");
  std::size_t masked_total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    validate_example(batch[i], i);
    masked_total += masked_count(batch[i].loss_mask);
  }
  if (masked_total == 0) throw input_error("compute_loss: batch has zero masked tokens");

  LossResult result;
  result.masked_tokens = masked_total;
  result.per_example.assign(batch.size(), 0.0);

  std::exception_ptr first_error = nullptr;
  std::atomic<bool> failed{false};
  const std::int64_t n = static_cast<std::int64_t>(batch.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    if (failed.load(std::memory_order_relaxed)) continue;
    try {
      const TrainingExample& ex = batch[static_cast<std::size_t>(i)];
      const Mat logits = forward(ex);
      result.per_example[static_cast<std::size_t>(i)] =
          example_loss(logits, ex.full_tokens(), ex.loss_mask, nullptr);
    } catch (...) {
#pragma omp critical(ssr_compute_loss_error)
      {
        if (!first_error) {
          first_error = std::current_exception();
          failed.store(true, std::memory_order_relaxed);
        }
      }
    }
  }
  if (first_error) std::rethrow_exception(first_error);

  double sum = 0.0;
  for (double l : result.per_example) sum += l;
  result.loss = reduction == LossReduction::token_mean
                    ? sum / static_cast<double>(masked_total)
                    : sum;
  return result;
}

}  // namespace

LossResult compute_loss(const AdaptedModel& model, const std::vector<TrainingExample>& batch,
                        LossReduction reduction) {
  return compute_loss_impl(
      [&](const TrainingExample& ex) { return model.forward(ex.full_tokens(), ex.image); }, batch,
      reduction);
}

LossResult compute_loss(const ToyModel& model, const std::vector<TrainingExample>& batch,
                        LossReduction reduction) {
  return compute_loss_impl(
      [&](const TrainingExample& ex) { return model.forward(ex.full_tokens(), ex.image); }, batch,
      reduction);
}

TrainingExample with_eos(TrainingExample ex, TokenId eos_id) {
  ex.response_tokens.push_back(eos_id);
  ex.loss_mask.push_back(true);
  return ex;
}

// ---------------------------------------------------------------------------
// Training backends
// ---------------------------------------------------------------------------

namespace {

void adam_update(Mat& param, const Mat& grad, Mat& m, Mat& v, double lr, const TrainConfig& cfg,
                 double bias1, double bias2) {
  for (std::size_t i = 0; i < param.v.size(); ++i) {
    m.v[i] = cfg.adam_beta1 * m.v[i] + (1.0 - cfg.adam_beta1) * grad.v[i];
    v.v[i] = cfg.adam_beta2 * v.v[i] + (1.0 - cfg.adam_beta2) * grad.v[i] * grad.v[i];
    const double mhat = m.v[i] / bias1;
    const double vhat = v.v[i] / bias2;
    param.v[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

// One training target: forward/backward plumbing, gradient buffers,
// Adam state, and checkpointing, for either every base parameter or
// just the adapter factors.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const Tokenizer& tokenizer() const = 0;
  virtual Mat forward(const TrainingExample& ex, Tape* tape) const = 0;
  virtual void accumulate(const Mat& dlogits, const Tape& tape) = 0;
  virtual void zero_grads() = 0;
  virtual void for_each_grad(const std::function<void(Mat&)>& fn) = 0;
  virtual void adam_step(double lr, const TrainConfig& cfg, std::int64_t t) = 0;
  virtual std::string save_checkpoint(const std::string& dir, const std::string& stem) const = 0;

  void scale_and_clip(double scale, double clip_norm) {
    if (scale != 1.0)
      for_each_grad([&](Mat& g) {
        for (double& x : g.v) x *= scale;
      });
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for_each_grad([&](Mat& g) {
        for (double x : g.v) sq += x * x;
      });
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) {
        const double s = clip_norm / norm;
        for_each_grad([&](Mat& g) {
          for (double& x : g.v) x *= s;
        });
      }
    }
  }
};

class FullBackend : public Backend {
 public:
  explicit FullBackend(ToyModel& model)
      : model_(model),
        grads_(ParamStore::zeros_like(model.params())),
        m_(ParamStore::zeros_like(model.params())),
        v_(ParamStore::zeros_like(model.params())) {}

  const Tokenizer& tokenizer() const override { return model_.tokenizer(); }

  Mat forward(const TrainingExample& ex, Tape* tape) const override {
    return model_.forward(ex.full_tokens(), ex.image, tape);
  }

  void accumulate(const Mat& dlogits, const Tape& tape) override {
    model_.backward(dlogits, tape, &grads_);
  }

  void zero_grads() override { grads_.zero_all(); }

  void for_each_grad(const std::function<void(Mat&)>& fn) override {
    for (std::size_t i = 0; i < grads_.size(); ++i) fn(grads_[i]);
  }

  void adam_step(double lr, const TrainConfig& cfg, std::int64_t t) override {
    const double bias1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    ParamStore& params = model_.params();
    for (std::size_t i = 0; i < params.size(); ++i)
      adam_update(params[i], grads_[i], m_[i], v_[i], lr, cfg, bias1, bias2);
  }

  std::string save_checkpoint(const std::string& dir, const std::string& stem) const override {
    const std::filesystem::path path = std::filesystem::path(dir) / (stem + ".ckpt");
    model_.save(path);
    return path.string();
  }

 private:
  ToyModel& model_;
  ParamStore grads_, m_, v_;
};

class AdapterBackend : public Backend {
 public:
  explicit AdapterBackend(AdaptedModel& model)
      : model_(model), grads_(model.zero_grads()), m_(model.zero_grads()),
        v_(model.zero_grads()) {}

  const Tokenizer& tokenizer() const override { return model_.tokenizer(); }

  Mat forward(const TrainingExample& ex, Tape* tape) const override {
    return model_.forward(ex.full_tokens(), ex.image, tape);
  }

  void accumulate(const Mat& dlogits, const Tape& tape) override {
    model_.backward(dlogits, tape, grads_);
  }

  void zero_grads() override {
    for (AdapterPair& p : grads_) {
      p.a.zero();
      p.b.zero();
    }
  }

  void for_each_grad(const std::function<void(Mat&)>& fn) override {
    for (AdapterPair& p : grads_) {
      fn(p.a);
      fn(p.b);
    }
  }

  void adam_step(double lr, const TrainConfig& cfg, std::int64_t t) override {
    const double bias1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    std::vector<AdapterPair>& pairs = model_.pairs();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      adam_update(pairs[i].a, grads_[i].a, m_[i].a, v_[i].a, lr, cfg, bias1, bias2);
      adam_update(pairs[i].b, grads_[i].b, m_[i].b, v_[i].b, lr, cfg, bias1, bias2);
    }
  }

  std::string save_checkpoint(const std::string& dir, const std::string& stem) const override {
    const std::filesystem::path path = std::filesystem::path(dir) / (stem + ".ckpt");
    model_.save(path);
    return path.string();
  }

 private:
  AdaptedModel& model_;
  std::vector<AdapterPair> grads_, m_, v_;
};

TrainResult run_training(Backend& backend, const std::vector<TrainingExample>& examples_in,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (examples_in.empty()) throw input_error("train: empty training set");

  std::vector<TrainingExample> examples = examples_in;
  if (cfg.append_eos) {
    const TokenId eos = backend.tokenizer().eos_id();
    for (TrainingExample& ex : examples) ex = with_eos(std::move(ex), eos);
  }
  for (std::size_t i = 0; i < examples.size(); ++i) validate_example(examples[i], i);

  const std::int64_t n = static_cast<std::int64_t>(examples.size());
  const std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  TrainResult result;
  result.total_steps = total_steps;
  Rng rng(cfg.seed);
  std::int64_t step = 0;

  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = shuffled_indices(static_cast<std::size_t>(n), rng);
    double epoch_loss = 0.0;

    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      ++step;
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(static_cast<std::size_t>(n),
                                       begin + static_cast<std::size_t>(cfg.batch_size));
      backend.zero_grads();
      double loss_sum = 0.0;
      std::size_t masked_total = 0;

      for (std::size_t k = begin; k < end; ++k) {
        const TrainingExample& ex = examples[order[k]];
        Tape tape;
        const Mat logits = backend.forward(ex, &tape);
        Mat dlogits;
        loss_sum += example_loss(logits, ex.full_tokens(), ex.loss_mask, &dlogits);
        masked_total += masked_count(ex.loss_mask);
        backend.accumulate(dlogits, tape);
      }
      if (masked_total == 0)
        throw input_error("train: batch at step " + std::to_string(step) +
                          " has zero masked tokens");

      const bool mean = cfg.loss_reduction == LossReduction::token_mean;
      const double batch_loss =
          mean ? loss_sum / static_cast<double>(masked_total) : loss_sum;
      if (!std::isfinite(batch_loss))
        throw divergence_error("training diverged at step " + std::to_string(step) +
                               ": loss = " + std::to_string(batch_loss));

      backend.scale_and_clip(mean ? 1.0 / static_cast<double>(masked_total) : 1.0,
                             cfg.clip_norm);
      const double lr = lr_at(step, total_steps, cfg);
      backend.adam_step(lr, cfg, step);
      result.trace.steps.push_back({step, lr, batch_loss});
      epoch_loss += batch_loss;
    }

    result.trace.epoch_means.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    if (!cfg.checkpoint_dir.empty())
      result.epoch_checkpoints.push_back(
          backend.save_checkpoint(cfg.checkpoint_dir, "epoch-" + std::to_string(epoch + 1)));
  }

  if (!cfg.checkpoint_dir.empty())
    result.final_checkpoint = backend.save_checkpoint(cfg.checkpoint_dir, "final");

  std::string trace_path = cfg.trace_path;
  if (trace_path.empty() && !cfg.checkpoint_dir.empty())
    trace_path = (std::filesystem::path(cfg.checkpoint_dir) / "loss_trace.jsonl").string();
  if (!trace_path.empty()) write_file_atomic(trace_path, result.trace.to_jsonl());

  return result;
}

}  // namespace

TrainResult train(AdaptedModel& model, const std::vector<TrainingExample>& examples,
                  const TrainConfig& cfg) {
  AdapterBackend backend(model);
  return run_training(backend, examples, cfg);
}

TrainResult train_full(ToyModel& model, const std::vector<TrainingExample>& examples,
                       const TrainConfig& cfg) {
  FullBackend backend(model);
  return run_training(backend, examples, cfg);
}

}  // namespace ssr
