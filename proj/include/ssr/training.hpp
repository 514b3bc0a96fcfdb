#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssr/adapter.hpp"
#include "ssr/kernels.hpp"
#include "ssr/pipeline.hpp"
#include "ssr/toy_model.hpp"

namespace ssr {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// How the masked per-token losses of a batch are reduced: a plain sum,
// or the sum divided by the number of masked tokens. The two differ by
// exactly that count.
enum class LossReduction { sum, token_mean };

std::string reduction_name(LossReduction r);
LossReduction parse_reduction(const std::string& name);

struct TrainConfig {
  int epochs = 3;
  int batch_size = 32;
  double peak_lr = 1e-4;
  double warmup_ratio = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  LossReduction loss_reduction = LossReduction::token_mean;

  // Number of gradient-accumulation chunks per optimizer step. The
  // effective batch is still batch_size examples; accumulation only
  // splits the forward/backward work, and masked-token accounting is
  // exact, so results are identical for any value.
  int grad_accum = 1;

  // Global gradient-norm clip; 0 disables (the default).
  double clip_norm = 0.0;

  // Append the end-of-sequence token (mask=true) to every response so
  // the model learns to stop.
  bool append_eos = true;

  // Where epoch + final checkpoints are written; empty keeps training
  // in memory only.
  std::string checkpoint_dir;
  // Where the loss trace is written; empty falls back to
  // <checkpoint_dir>/loss_trace.jsonl when a checkpoint_dir is set.
  std::string trace_path;

  void validate() const;  // throws config_error
};

// ---------------------------------------------------------------------------
// Loss trace
// ---------------------------------------------------------------------------

struct LossStep {
  std::int64_t step = 0;  // 1-based optimizer step, strictly increasing
  double lr = 0.0;
  double loss = 0.0;
};

struct LossTrace {
  std::vector<LossStep> steps;
  std::vector<double> epoch_means;  // mean step loss per epoch, in order

  // Line-delimited JSON: one {"step","lr","loss"} record per step,
  // then one {"epoch","mean_loss"} record per epoch.
  std::string to_jsonl() const;
  // Throws input_error on malformed lines or non-increasing steps.
  static LossTrace from_jsonl(const std::string& text);
};

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

// Linear warmup from 0 to peak_lr over ceil(warmup_ratio*total_steps)
// steps, then linear decay back to 0 at total_steps. Continuous,
// piecewise linear, and maximal (= peak_lr) exactly at the warmup
// boundary. Throws input_error when step is negative, step >
// total_steps, or total_steps <= 0.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;                // reduced batch loss
  std::vector<double> per_example;  // unreduced masked-sum per example
  std::size_t masked_tokens = 0;    // total masked positions in batch
};

// Next-token negative log-likelihood of one example given its logits
// (one row per token position). A token at position t contributes
// -log p(token[t]) computed from logits row t-1, and only when
// mask[t] is true; every other logits row receives an exactly-zero
// gradient. When dlogits is non-null it is filled with the gradient
// of the (unreduced) sum. Throws input_error when the mask length or
// logits shape disagrees with tokens, or when position 0 is masked
// (nothing precedes it to condition on).
double example_loss(const Mat& logits, const std::vector<TokenId>& tokens,
                    const std::vector<bool>& mask, Mat* dlogits = nullptr);

// Batch loss for an adapter-tuned or a bare model. Examples are taken
// exactly as given (no end-of-sequence appending). Throws input_error
// on an empty batch or when no position in the whole batch is masked.
LossResult compute_loss(const AdaptedModel& model, const std::vector<TrainingExample>& batch,
                        LossReduction reduction = LossReduction::token_mean);
LossResult compute_loss(const ToyModel& model, const std::vector<TrainingExample>& batch,
                        LossReduction reduction = LossReduction::token_mean);

// Returns a copy of the example with the end-of-sequence token
// appended to the response (mask=true).
TrainingExample with_eos(TrainingExample ex, TokenId eos_id);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  LossTrace trace;
  std::vector<std::string> epoch_checkpoints;  // one per epoch when persisted
  std::string final_checkpoint;                // empty when not persisted
  std::int64_t total_steps = 0;
};

// Adam fine-tuning of the adapter factors (the base stays frozen).
// Runs cfg.epochs passes over the examples in seeded shuffled order,
// batch_size examples per optimizer step, recording (step, lr, loss)
// per step. Per-epoch and final checkpoints are written when
// checkpoint_dir is set, and reload to bit-identical behavior. Same
// seed/config/data give bit-identical weights. Throws input_error on
// an empty train set and divergence_error (naming the step) when the
// loss turns NaN/inf.
TrainResult train(AdaptedModel& model, const std::vector<TrainingExample>& examples,
                  const TrainConfig& cfg);

// Same loop with every base parameter trainable; used to pretrain the
// toy model before any adapter work.
TrainResult train_full(ToyModel& model, const std::vector<TrainingExample>& examples,
                       const TrainConfig& cfg);

}  // namespace ssr
