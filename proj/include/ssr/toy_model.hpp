#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssr/kernels.hpp"
#include "ssr/model_iface.hpp"
#include "ssr/param_store.hpp"

namespace ssr {

struct ToyConfig {
  int layers = 2;
  int width = 64;
  int heads = 4;
  int vocab = 128;
  int max_seq = 256;
  int max_rows = 8;  // glyph grid bounds; max_rows * max_cols cells
  int max_cols = 8;

  int mlp_hidden() const { return 4 * width; }
  int head_dim() const { return width / heads; }
  void validate() const;  // throws config_error
  std::string to_json() const;
  static ToyConfig from_json(const std::string& text);
};

// One glyph-grid cell: the glyph byte plus its 2-D position.
struct GlyphCell {
  int row = 0;
  int col = 0;
  int glyph = 0;
};

// Parses a "glyph:<rows separated by \n>" image reference. An empty ref
// means no image. Throws input_error on other schemes, grids larger
// than the configured bounds, or glyph bytes outside the vocab.
std::vector<GlyphCell> parse_glyph_image(const std::string& image_ref, const ToyConfig& cfg);

// Low-rank factors for one linear layer: effective weight
// W + scale * (B A), scale = alpha / rank.
struct AdapterPair {
  std::string target;
  Mat a;  // [rank x fan_in]
  Mat b;  // [fan_out x rank]
};

// Read-only view over adapter factors, consulted per linear by name.
struct AdapterOverlay {
  double scale = 0.0;
  const std::vector<AdapterPair>* pairs = nullptr;  // sorted by target
  const AdapterPair* find(const std::string& target) const;
};

// Gradient sink mirroring an overlay's pairs.
struct AdapterGrads {
  std::vector<AdapterPair>* pairs = nullptr;  // sorted by target
  AdapterPair* find(const std::string& target) const;
};

// Per-row layernorm cache: normalized values and 1/sigma.
struct LnTape {
  Mat xhat;
  std::vector<double> inv_sigma;
};

struct LayerTape {
  Mat in;       // residual-stream input
  LnTape ln1;
  Mat ln1_out;
  Mat q, k, v;
  Mat uq, uk, uv;          // adapter intermediates x A^T (empty without adapter)
  std::vector<Mat> probs;  // per-head causal softmax [T x T]
  Mat concat;              // head outputs, pre-wo
  Mat uo;
  Mat mid;  // in + attention
  LnTape ln2;
  Mat ln2_out;
  Mat h_pre, h_act;  // MLP pre/post activation
  Mat u1, u2;
};

// Everything backward() needs from a forward pass.
struct Tape {
  std::size_t n_img = 0;  // image-cell rows preceding the token rows
  std::vector<TokenId> tokens;
  std::vector<GlyphCell> cells;
  Mat x0;
  std::vector<LayerTape> layers;
  LnTape lnf;
  Mat lnf_out;
  Mat ulm;
};

// Desk-scale decoder-only transformer over glyph-grid images and ASCII
// text. Pre-LN blocks, tanh-approximated GELU, bias-free projections.
// Image cells are embedded from a per-glyph table plus learned row and
// column offsets and occupy the sequence slots before the text tokens.
class ToyModel : public MultimodalModel {
 public:
  ToyModel(const ToyConfig& cfg, std::uint64_t seed);

  const ToyConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const override { return tok_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Linear layers an adapter may target. The default adapter selector
  // covers the attention and MLP projections; the output head is
  // selectable but excluded by default.
  std::vector<std::string> linear_layer_names() const;
  static bool is_default_adapter_target(const std::string& name);

  std::string fingerprint() const override;

  // Logits for each token slot: row t is the next-token distribution
  // after tokens[0..t] (image context included). Pass a tape to enable
  // backward(). Throws input_error on empty tokens or bad ids,
  // size_error when image cells + tokens exceed max_seq.
  Mat forward(const std::vector<TokenId>& tokens, const std::string& image, Tape* tape = nullptr,
              const AdapterOverlay* adapter = nullptr) const;

  // Accumulates d(loss)/d(params) into `grads` (and adapter gradients
  // into `adapter_grads` when given) for the pass recorded on `tape`.
  // Pass grads = nullptr for adapter-only training: input gradients
  // still flow, base parameter gradients are skipped.
  void backward(const Mat& dlogits, const Tape& tape, ParamStore* grads,
                const AdapterOverlay* adapter = nullptr,
                AdapterGrads* adapter_grads = nullptr) const;

  std::vector<TokenId> generate(const std::vector<TokenId>& prompt_tokens,
                                const std::string& image,
                                const DecodeConfig& cfg) const override;
  std::vector<TokenId> generate_adapted(const std::vector<TokenId>& prompt_tokens,
                                        const std::string& image, const DecodeConfig& cfg,
                                        const AdapterOverlay& adapter) const;

  void save(const std::filesystem::path& path) const;
  static ToyModel load(const std::filesystem::path& path);

 private:
  std::vector<TokenId> generate_impl(const std::vector<TokenId>& prompt_tokens,
                                     const std::string& image, const DecodeConfig& cfg,
                                     const AdapterOverlay* adapter) const;

  ToyConfig cfg_;
  Tokenizer tok_;
  ParamStore params_;
};

}  // namespace ssr
