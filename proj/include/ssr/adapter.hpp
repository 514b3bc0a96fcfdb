#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ssr/toy_model.hpp"

namespace ssr {

struct AdapterConfig {
  int rank = 16;
  double alpha = 16.0;
  // '|'-separated substrings matched against the base model's linear
  // layer names; empty selects every attention/MLP projection (the
  // output head stays excluded unless named explicitly).
  std::string target_selector;

  void validate() const;  // throws config_error
  double scale() const { return alpha / static_cast<double>(rank); }
};

// Resolves a selector against the base model's linear layers. Throws
// config_error when nothing matches.
std::vector<std::string> resolve_adapter_targets(const ToyModel& base, const AdapterConfig& cfg);

// A frozen base model plus trainable low-rank factors on selected
// linears. Holds a non-owning pointer to the base, which must outlive
// the adapted model.
class AdaptedModel : public MultimodalModel {
 public:
  // Fresh factors: A random, B zero, so outputs start bit-identical to
  // the base model.
  AdaptedModel(const ToyModel& base, const AdapterConfig& cfg, std::uint64_t seed);

  const ToyModel& base() const { return *base_; }
  const AdapterConfig& config() const { return cfg_; }
  std::vector<AdapterPair>& pairs() { return pairs_; }
  const std::vector<AdapterPair>& pairs() const { return pairs_; }
  AdapterOverlay overlay() const { return {cfg_.scale(), &pairs_}; }

  // Number of trainable scalars across all low-rank factors.
  std::size_t trainable_count() const;

  const Tokenizer& tokenizer() const override { return base_->tokenizer(); }
  std::string fingerprint() const override;
  std::vector<TokenId> generate(const std::vector<TokenId>& prompt_tokens,
                                const std::string& image,
                                const DecodeConfig& cfg) const override;

  Mat forward(const std::vector<TokenId>& tokens, const std::string& image,
              Tape* tape = nullptr) const;
  // Adapter-only gradients; base parameters stay untouched.
  void backward(const Mat& dlogits, const Tape& tape, std::vector<AdapterPair>& grads) const;
  // Zero-valued factor pairs shaped like this adapter, for gradients.
  std::vector<AdapterPair> zero_grads() const;

  void save(const std::filesystem::path& path) const;
  // Throws provenance_error when the checkpoint was trained on a
  // different base model.
  static AdaptedModel load(const ToyModel& base, const std::filesystem::path& path);

 private:
  const ToyModel* base_;
  AdapterConfig cfg_;
  std::vector<AdapterPair> pairs_;  // sorted by target name
};

// Attaches a fresh adapter; spec-level convenience over the constructor.
AdaptedModel attach_adapter(const ToyModel& base, const AdapterConfig& cfg,
                            std::uint64_t seed = 0);

std::size_t count_trainable(const AdaptedModel& model);
// A bare base model has no trainable adapter: throws config_error.
std::size_t count_trainable(const ToyModel& model);

}  // namespace ssr
