#include "ssr/toy_model.hpp"

#include <algorithm>
#include <cmath>

#include "nlohmann/json.hpp"
#include "ssr/corpus.hpp"
#include "ssr/error.hpp"
#include "ssr/rng.hpp"
#include "ssr/util.hpp"

namespace ssr {

void ToyConfig::validate() const {
  if (layers < 1) throw config_error("toy model: layers must be >= 1");
  if (width < 1 || heads < 1 || width % heads != 0)
    throw config_error("toy model: width must be a positive multiple of heads");
  if (vocab < 1) throw config_error("toy model: vocab must be >= 1");
  if (max_seq < 2) throw config_error("toy model: max_seq must be >= 2");
  if (max_rows < 1 || max_cols < 1) throw config_error("toy model: glyph grid bounds must be >= 1");
}

std::string ToyConfig::to_json() const {
  nlohmann::ordered_json j;
  j["layers"] = layers;
  j["width"] = width;
  j["heads"] = heads;
  j["vocab"] = vocab;
  j["max_seq"] = max_seq;
  j["max_rows"] = max_rows;
  j["max_cols"] = max_cols;
  return j.dump();
}

ToyConfig ToyConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("toy model config: ") + e.what());
  }
  ToyConfig c;
  c.layers = j.value("layers", c.layers);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.vocab = j.value("vocab", c.vocab);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.max_rows = j.value("max_rows", c.max_rows);
  c.max_cols = j.value("max_cols", c.max_cols);
  c.validate();
  return c;
}

std::vector<GlyphCell> parse_glyph_image(const std::string& image_ref, const ToyConfig& cfg) {
  std::vector<GlyphCell> cells;
  if (image_ref.empty()) return cells;  // text-only sequence
  if (!is_glyph_image(image_ref))
    throw input_error("toy model only reads glyph grid images, got: " + image_ref);
  const std::string text = glyph_grid_text(image_ref);
  int row = 0, col = 0;
  for (const char ch : text) {
    if (ch == '\n') {
      ++row;
      col = 0;
      continue;
    }
    if (row >= cfg.max_rows)
      throw input_error("glyph grid exceeds " + std::to_string(cfg.max_rows) + " rows");
    if (col >= cfg.max_cols)
      throw input_error("glyph grid row exceeds " + std::to_string(cfg.max_cols) + " columns");
    const int g = static_cast<unsigned char>(ch);
    if (g >= cfg.vocab) throw input_error("glyph byte outside model vocab");
    cells.push_back({row, col, g});
    ++col;
  }
  return cells;
}

const AdapterPair* AdapterOverlay::find(const std::string& target) const {
  if (!pairs) return nullptr;
  const auto it = std::lower_bound(
      pairs->begin(), pairs->end(), target,
      [](const AdapterPair& p, const std::string& t) { return p.target < t; });
  return it != pairs->end() && it->target == target ? &*it : nullptr;
}

AdapterPair* AdapterGrads::find(const std::string& target) const {
  if (!pairs) return nullptr;
  const auto it = std::lower_bound(
      pairs->begin(), pairs->end(), target,
      [](const AdapterPair& p, const std::string& t) { return p.target < t; });
  return it != pairs->end() && it->target == target ? &*it : nullptr;
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluC = 0.044715;

double gelu(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat o(a.rows, b.cols);
  kernels::matmul(a, b, o);
  return o;
}

Mat mm_bt(const Mat& a, const Mat& b) {
  Mat o(a.rows, b.rows);
  kernels::matmul_bt(a, b, o);
  return o;
}

Mat mm_at(const Mat& a, const Mat& b) {
  Mat o(a.cols, b.cols);
  kernels::matmul_at(a, b, o);
  return o;
}

// y = x W^T (+ scale * (x A^T) B^T). `u_out` receives x A^T when the
// adapter covers this layer; backward needs it.
Mat apply_linear(const Mat& x, const Mat& w, const AdapterOverlay* adapter,
                 const std::string& name, Mat* u_out) {
  Mat y = mm_bt(x, w);
  if (adapter) {
    if (const AdapterPair* p = adapter->find(name)) {
      Mat u = mm_bt(x, p->a);
      Mat extra = mm_bt(u, p->b);
      for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += adapter->scale * extra.v[i];
      if (u_out) *u_out = std::move(u);
    }
  }
  return y;
}

// Returns dX; accumulates dW (when requested) and, when adapting, dA/dB.
Mat linear_backward(const Mat& dy, const Mat& x, const Mat& w, Mat* dw,
                    const AdapterOverlay* adapter, AdapterGrads* agrads, const std::string& name,
                    const Mat& u) {
  Mat dx = mm(dy, w);
  if (dw) kernels::matmul_at_acc(dy, x, *dw);
  if (adapter) {
    if (const AdapterPair* p = adapter->find(name)) {
      Mat du = mm(dy, p->b);  // [T x rank]
      for (double& val : du.v) val *= adapter->scale;
      kernels::add_inplace(dx, mm(du, p->a));
      if (agrads) {
        AdapterPair* g = agrads->find(name);
        if (g) {
          kernels::matmul_at_acc(du, x, g->a);  // dA += du^T x
          Mat db = mm_at(dy, u);                // [out x rank]
          for (std::size_t i = 0; i < db.v.size(); ++i) g->b.v[i] += adapter->scale * db.v[i];
        }
      }
    }
  }
  return dx;
}

Mat layernorm(const Mat& x, const Mat& gamma, const Mat& beta, LnTape& tape) {
  Mat y(x.rows, x.cols);
  tape.xhat = Mat(x.rows, x.cols);
  tape.inv_sigma.assign(x.rows, 0.0);
  const std::size_t C = x.cols;
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += x.at(r, c);
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = x.at(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    tape.inv_sigma[r] = inv;
    for (std::size_t c = 0; c < C; ++c) {
      const double xh = (x.at(r, c) - mean) * inv;
      tape.xhat.at(r, c) = xh;
      y.at(r, c) = gamma.v[c] * xh + beta.v[c];
    }
  }
  return y;
}

Mat layernorm_backward(const Mat& dy, const LnTape& tape, const Mat& gamma, Mat* dgamma,
                       Mat* dbeta) {
  Mat dx(dy.rows, dy.cols);
  const std::size_t C = dy.cols;
  for (std::size_t r = 0; r < dy.rows; ++r) {
    double mean_h = 0.0, mean_hx = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = gamma.v[c] * dy.at(r, c);
      mean_h += h;
      mean_hx += h * tape.xhat.at(r, c);
    }
    mean_h /= static_cast<double>(C);
    mean_hx /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) {
      const double h = gamma.v[c] * dy.at(r, c);
      dx.at(r, c) = (h - mean_h - tape.xhat.at(r, c) * mean_hx) * tape.inv_sigma[r];
      if (dgamma) dgamma->v[c] += dy.at(r, c) * tape.xhat.at(r, c);
      if (dbeta) dbeta->v[c] += dy.at(r, c);
    }
  }
  return dx;
}

Mat head_slice(const Mat& x, int h, int dh) {
  Mat o(x.rows, dh);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (int c = 0; c < dh; ++c) o.at(r, c) = x.at(r, h * dh + c);
  return o;
}

void head_place(Mat& x, const Mat& part, int h, int dh, bool add) {
  for (std::size_t r = 0; r < part.rows; ++r)
    for (int c = 0; c < dh; ++c) {
      double& dst = x.at(r, h * dh + c);
      dst = add ? dst + part.at(r, c) : part.at(r, c);
    }
}

Mat mat_sum(const Mat& a, const Mat& b) {
  Mat o = a;
  kernels::add_inplace(o, b);
  return o;
}

}  // namespace

ToyModel::ToyModel(const ToyConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), tok_(Tokenizer::ascii()) {
  cfg_.validate();
  if (cfg_.vocab < tok_.vocab_size())
    throw config_error("toy model vocab smaller than tokenizer vocab");
  const int d = cfg_.width, V = cfg_.vocab, F = cfg_.mlp_hidden();
  params_.add("tok_emb", V, d);
  params_.add("pos_emb", cfg_.max_seq, d);
  params_.add("glyph_emb", V, d);
  params_.add("glyph_row", cfg_.max_rows, d);
  params_.add("glyph_col", cfg_.max_cols, d);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    params_.add(p + "ln1.weight", 1, d);
    params_.add(p + "ln1.bias", 1, d);
    params_.add(p + "attn.wq", d, d);
    params_.add(p + "attn.wk", d, d);
    params_.add(p + "attn.wv", d, d);
    params_.add(p + "attn.wo", d, d);
    params_.add(p + "ln2.weight", 1, d);
    params_.add(p + "ln2.bias", 1, d);
    params_.add(p + "mlp.w1", F, d);
    params_.add(p + "mlp.w2", d, F);
  }
  params_.add("ln_f.weight", 1, d);
  params_.add("ln_f.bias", 1, d);
  params_.add("lm_head", V, d);

  Rng rng(seed);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& name = params_.name(i);
    Mat& m = params_[i];
    if (name.find(".weight") != std::string::npos) {
      std::fill(m.v.begin(), m.v.end(), 1.0);  // layernorm gain
    } else if (name.find(".bias") != std::string::npos) {
      m.zero();
    } else {
      for (double& x : m.v) x = 0.02 * normal(rng);
    }
  }
}

std::vector<std::string> ToyModel::linear_layer_names() const {
  std::vector<std::string> names;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* s : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"})
      names.push_back(p + s);
  }
  names.push_back("lm_head");
  return names;
}

bool ToyModel::is_default_adapter_target(const std::string& name) {
  return name.rfind("layers.", 0) == 0;  // projections only, not the head
}

std::string ToyModel::fingerprint() const {
  std::uint64_t h = fnv1a64(cfg_.to_json());
  h = fnv1a64(to_hex(tok_.digest()), h);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    h = fnv1a64(params_.name(i), h);
    const Mat& m = params_[i];
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.v.data()),
                                 m.v.size() * sizeof(double)),
                h);
  }
  return to_hex(h);
}

Mat ToyModel::forward(const std::vector<TokenId>& tokens, const std::string& image, Tape* tape,
                      const AdapterOverlay* adapter) const {
  if (tokens.empty()) throw input_error("forward: empty token sequence");
  const auto cells = parse_glyph_image(image, cfg_);
  const std::size_t n_img = cells.size(), n_tok = tokens.size(), T = n_img + n_tok;
  if (T > static_cast<std::size_t>(cfg_.max_seq))
    throw size_error("sequence of " + std::to_string(T) + " slots exceeds context " +
                     std::to_string(cfg_.max_seq));
  const int d = cfg_.width, H = cfg_.heads, dh = cfg_.head_dim(), V = cfg_.vocab;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tape local;
  Tape& tp = tape ? *tape : local;
  tp = Tape{};
  tp.n_img = n_img;
  tp.tokens = tokens;
  tp.cells = cells;

  const Mat& tok_emb = params_.at("tok_emb");
  const Mat& pos_emb = params_.at("pos_emb");
  const Mat& glyph_emb = params_.at("glyph_emb");
  const Mat& glyph_row = params_.at("glyph_row");
  const Mat& glyph_col = params_.at("glyph_col");

  Mat x(T, d);
  for (std::size_t i = 0; i < n_img; ++i) {
    const GlyphCell& cell = cells[i];
    for (int c = 0; c < d; ++c)
      x.at(i, c) = glyph_emb.at(cell.glyph, c) + glyph_row.at(cell.row, c) +
                   glyph_col.at(cell.col, c);
  }
  for (std::size_t t = 0; t < n_tok; ++t) {
    const TokenId id = tokens[t];
    if (id < 0 || id >= V) throw input_error("token id outside vocab: " + std::to_string(id));
    for (int c = 0; c < d; ++c) x.at(n_img + t, c) = tok_emb.at(id, c) + pos_emb.at(n_img + t, c);
  }
  tp.x0 = x;

  tp.layers.resize(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerTape& lt = tp.layers[l];
    lt.in = x;
    lt.ln1_out = layernorm(x, params_.at(p + "ln1.weight"), params_.at(p + "ln1.bias"), lt.ln1);
    lt.q = apply_linear(lt.ln1_out, params_.at(p + "attn.wq"), adapter, p + "attn.wq", &lt.uq);
    lt.k = apply_linear(lt.ln1_out, params_.at(p + "attn.wk"), adapter, p + "attn.wk", &lt.uk);
    lt.v = apply_linear(lt.ln1_out, params_.at(p + "attn.wv"), adapter, p + "attn.wv", &lt.uv);

    lt.concat = Mat(T, d);
    lt.probs.reserve(H);
    for (int h = 0; h < H; ++h) {
      const Mat qh = head_slice(lt.q, h, dh);
      const Mat kh = head_slice(lt.k, h, dh);
      const Mat vh = head_slice(lt.v, h, dh);
      Mat scores = mm_bt(qh, kh);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j)
          scores.at(i, j) = j > i ? -1e30 : scores.at(i, j) * inv_sqrt_dh;
      kernels::softmax_rows(scores);
      head_place(lt.concat, mm(scores, vh), h, dh, /*add=*/false);
      lt.probs.push_back(std::move(scores));
    }
    const Mat attn_out =
        apply_linear(lt.concat, params_.at(p + "attn.wo"), adapter, p + "attn.wo", &lt.uo);
    lt.mid = mat_sum(x, attn_out);
    lt.ln2_out =
        layernorm(lt.mid, params_.at(p + "ln2.weight"), params_.at(p + "ln2.bias"), lt.ln2);
    lt.h_pre = apply_linear(lt.ln2_out, params_.at(p + "mlp.w1"), adapter, p + "mlp.w1", &lt.u1);
    lt.h_act = lt.h_pre;
    for (double& val : lt.h_act.v) val = gelu(val);
    const Mat mlp_out =
        apply_linear(lt.h_act, params_.at(p + "mlp.w2"), adapter, p + "mlp.w2", &lt.u2);
    x = mat_sum(lt.mid, mlp_out);
  }

  tp.lnf_out = layernorm(x, params_.at("ln_f.weight"), params_.at("ln_f.bias"), tp.lnf);
  const Mat logits_full = apply_linear(tp.lnf_out, params_.at("lm_head"), adapter, "lm_head",
                                       &tp.ulm);

  Mat logits(n_tok, V);
  for (std::size_t t = 0; t < n_tok; ++t)
    for (int c = 0; c < V; ++c) logits.at(t, c) = logits_full.at(n_img + t, c);
  return logits;
}

void ToyModel::backward(const Mat& dlogits, const Tape& tape, ParamStore* grads,
                        const AdapterOverlay* adapter, AdapterGrads* adapter_grads) const {
  const std::size_t n_img = tape.n_img, n_tok = tape.tokens.size(), T = n_img + n_tok;
  const int d = cfg_.width, H = cfg_.heads, dh = cfg_.head_dim(), V = cfg_.vocab;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  if (dlogits.rows != n_tok || dlogits.cols != static_cast<std::size_t>(V))
    throw size_error("backward: dlogits shape does not match tape");
  auto g = [&](const std::string& name) -> Mat* { return grads ? &grads->at(name) : nullptr; };

  Mat dlogits_full(T, V);
  for (std::size_t t = 0; t < n_tok; ++t)
    for (int c = 0; c < V; ++c) dlogits_full.at(n_img + t, c) = dlogits.at(t, c);

  Mat dlnf_out = linear_backward(dlogits_full, tape.lnf_out, params_.at("lm_head"),
                                 g("lm_head"), adapter, adapter_grads, "lm_head", tape.ulm);
  Mat dx = layernorm_backward(dlnf_out, tape.lnf, params_.at("ln_f.weight"), g("ln_f.weight"),
                              g("ln_f.bias"));

  for (int l = cfg_.layers - 1; l >= 0; --l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const LayerTape& lt = tape.layers[l];

    // x_out = mid + w2(gelu(w1(ln2(mid))))
    Mat dh_act = linear_backward(dx, lt.h_act, params_.at(p + "mlp.w2"), g(p + "mlp.w2"),
                                 adapter, adapter_grads, p + "mlp.w2", lt.u2);
    for (std::size_t i = 0; i < dh_act.v.size(); ++i) dh_act.v[i] *= gelu_grad(lt.h_pre.v[i]);
    Mat dln2_out = linear_backward(dh_act, lt.ln2_out, params_.at(p + "mlp.w1"), g(p + "mlp.w1"),
                                   adapter, adapter_grads, p + "mlp.w1", lt.u1);
    Mat dmid = layernorm_backward(dln2_out, lt.ln2, params_.at(p + "ln2.weight"),
                                  g(p + "ln2.weight"), g(p + "ln2.bias"));
    kernels::add_inplace(dmid, dx);

    // mid = in + wo(heads(ln1(in)))
    Mat dconcat = linear_backward(dmid, lt.concat, params_.at(p + "attn.wo"), g(p + "attn.wo"),
                                  adapter, adapter_grads, p + "attn.wo", lt.uo);
    Mat dq(T, d), dk(T, d), dv(T, d);
    for (int h = 0; h < H; ++h) {
      const Mat dch = head_slice(dconcat, h, dh);
      const Mat qh = head_slice(lt.q, h, dh);
      const Mat kh = head_slice(lt.k, h, dh);
      const Mat vh = head_slice(lt.v, h, dh);
      const Mat& probs = lt.probs[h];
      Mat dprobs = mm_bt(dch, vh);
      const Mat dvh = mm_at(probs, dch);
      Mat dscores(T, T);
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) dot += dprobs.at(i, j) * probs.at(i, j);
        for (std::size_t j = 0; j < T; ++j)
          dscores.at(i, j) = probs.at(i, j) * (dprobs.at(i, j) - dot) * inv_sqrt_dh;
      }
      head_place(dq, mm(dscores, kh), h, dh, /*add=*/false);
      head_place(dk, mm_at(dscores, qh), h, dh, /*add=*/false);
      head_place(dv, dvh, h, dh, /*add=*/false);
    }
    Mat dln1_out = linear_backward(dq, lt.ln1_out, params_.at(p + "attn.wq"), g(p + "attn.wq"),
                                   adapter, adapter_grads, p + "attn.wq", lt.uq);
    kernels::add_inplace(dln1_out,
                         linear_backward(dk, lt.ln1_out, params_.at(p + "attn.wk"),
                                         g(p + "attn.wk"), adapter, adapter_grads, p + "attn.wk",
                                         lt.uk));
    kernels::add_inplace(dln1_out,
                         linear_backward(dv, lt.ln1_out, params_.at(p + "attn.wv"),
                                         g(p + "attn.wv"), adapter, adapter_grads, p + "attn.wv",
                                         lt.uv));
    Mat din = layernorm_backward(dln1_out, lt.ln1, params_.at(p + "ln1.weight"),
                                 g(p + "ln1.weight"), g(p + "ln1.bias"));
    kernels::add_inplace(din, dmid);
    dx = std::move(din);
  }

  if (!grads) return;
  Mat& dtok = grads->at("tok_emb");
  Mat& dpos = grads->at("pos_emb");
  Mat& dglyph = grads->at("glyph_emb");
  Mat& drow = grads->at("glyph_row");
  Mat& dcol = grads->at("glyph_col");
  for (std::size_t i = 0; i < n_img; ++i) {
    const GlyphCell& cell = tape.cells[i];
    for (int c = 0; c < d; ++c) {
      const double gg = dx.at(i, c);
      dglyph.at(cell.glyph, c) += gg;
      drow.at(cell.row, c) += gg;
      dcol.at(cell.col, c) += gg;
    }
  }
  for (std::size_t t = 0; t < n_tok; ++t) {
    const TokenId id = tape.tokens[t];
    for (int c = 0; c < d; ++c) {
      const double gg = dx.at(n_img + t, c);
      dtok.at(id, c) += gg;
      dpos.at(n_img + t, c) += gg;
    }
  }
}

namespace {

TokenId pick_greedy(const std::vector<double>& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;  // ties resolve to the lowest id
  return static_cast<TokenId>(best);
}

TokenId pick_sample(const std::vector<double>& logits, double temperature, Rng& rng) {
  double mx = logits[0];
  for (const double x : logits) mx = std::max(mx, x);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  const double r = uniform_real(rng) * z;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (r < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(p.size() - 1);
}

}  // namespace

std::vector<TokenId> ToyModel::generate_impl(const std::vector<TokenId>& prompt_tokens,
                                             const std::string& image, const DecodeConfig& cfg,
                                             const AdapterOverlay* adapter) const {
  cfg.validate();
  if (prompt_tokens.empty()) throw input_error("generate: empty prompt");
  const auto cells = parse_glyph_image(image, cfg_);
  const int L = cfg_.layers, d = cfg_.width, H = cfg_.heads, dh = cfg_.head_dim(), V = cfg_.vocab;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t prefix = cells.size() + prompt_tokens.size();
  if (prefix > static_cast<std::size_t>(cfg_.max_seq))
    throw size_error("prompt and image exceed context " + std::to_string(cfg_.max_seq));

  const Mat& tok_emb = params_.at("tok_emb");
  const Mat& pos_emb = params_.at("pos_emb");
  const Mat& glyph_emb = params_.at("glyph_emb");
  const Mat& glyph_row = params_.at("glyph_row");
  const Mat& glyph_col = params_.at("glyph_col");

  std::vector<Mat> kc(L, Mat(cfg_.max_seq, d)), vc(L, Mat(cfg_.max_seq, d));
  std::size_t len = 0;  // filled cache rows; also the next slot index
  Rng rng(cfg.seed);

  // Runs one sequence slot through the stack, appending to the KV cache.
  // Incremental rows reproduce the batched forward exactly: causal
  // attention only ever reads rows that are already final.
  auto step = [&](Mat x, bool want_logits) -> std::vector<double> {
    for (int l = 0; l < L; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LnTape ln_tape;
      const Mat ln1_out =
          layernorm(x, params_.at(p + "ln1.weight"), params_.at(p + "ln1.bias"), ln_tape);
      const Mat q = apply_linear(ln1_out, params_.at(p + "attn.wq"), adapter, p + "attn.wq", nullptr);
      const Mat k = apply_linear(ln1_out, params_.at(p + "attn.wk"), adapter, p + "attn.wk", nullptr);
      const Mat v = apply_linear(ln1_out, params_.at(p + "attn.wv"), adapter, p + "attn.wv", nullptr);
      for (int c = 0; c < d; ++c) {
        kc[l].at(len, c) = k.at(0, c);
        vc[l].at(len, c) = v.at(0, c);
      }
      Mat concat(1, d);
      const std::size_t ctx = len + 1;
      for (int h = 0; h < H; ++h) {
        std::vector<double> scores(ctx);
        for (std::size_t j = 0; j < ctx; ++j) {
          double dot = 0.0;
          for (int c = 0; c < dh; ++c) dot += q.at(0, h * dh + c) * kc[l].at(j, h * dh + c);
          scores[j] = dot * inv_sqrt_dh;
        }
        double mx = scores[0];
        for (const double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (int c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < ctx; ++j) acc += scores[j] * vc[l].at(j, h * dh + c);
          concat.at(0, h * dh + c) = acc / z;
        }
      }
      const Mat attn_out =
          apply_linear(concat, params_.at(p + "attn.wo"), adapter, p + "attn.wo", nullptr);
      Mat mid = mat_sum(x, attn_out);
      const Mat ln2_out =
          layernorm(mid, params_.at(p + "ln2.weight"), params_.at(p + "ln2.bias"), ln_tape);
      Mat h_act = apply_linear(ln2_out, params_.at(p + "mlp.w1"), adapter, p + "mlp.w1", nullptr);
      for (double& val : h_act.v) val = gelu(val);
      const Mat mlp_out =
          apply_linear(h_act, params_.at(p + "mlp.w2"), adapter, p + "mlp.w2", nullptr);
      x = mat_sum(mid, mlp_out);
    }
    ++len;
    if (!want_logits) return {};
    LnTape ln_tape;
    const Mat lnf_out = layernorm(x, params_.at("ln_f.weight"), params_.at("ln_f.bias"), ln_tape);
    const Mat logits = apply_linear(lnf_out, params_.at("lm_head"), adapter, "lm_head", nullptr);
    return std::vector<double>(logits.v.begin(), logits.v.end());
  };

  auto cell_embed = [&](const GlyphCell& cell) {
    Mat x(1, d);
    for (int c = 0; c < d; ++c)
      x.at(0, c) = glyph_emb.at(cell.glyph, c) + glyph_row.at(cell.row, c) +
                   glyph_col.at(cell.col, c);
    return x;
  };
  auto tok_embed = [&](TokenId id, std::size_t slot) {
    if (id < 0 || id >= V) throw input_error("token id outside vocab: " + std::to_string(id));
    Mat x(1, d);
    for (int c = 0; c < d; ++c) x.at(0, c) = tok_emb.at(id, c) + pos_emb.at(slot, c);
    return x;
  };

  for (const GlyphCell& cell : cells) step(cell_embed(cell), false);
  std::vector<double> logits;
  for (std::size_t t = 0; t < prompt_tokens.size(); ++t)
    logits = step(tok_embed(prompt_tokens[t], len), t + 1 == prompt_tokens.size());

  std::vector<TokenId> out;
  while (static_cast<int>(out.size()) < cfg.max_new_tokens) {
    const TokenId next = cfg.strategy == DecodeStrategy::greedy
                             ? pick_greedy(logits)
                             : pick_sample(logits, cfg.temperature, rng);
    if (cfg.stop_tokens.count(next)) break;
    out.push_back(next);
    if (static_cast<int>(out.size()) == cfg.max_new_tokens) break;
    if (len >= static_cast<std::size_t>(cfg_.max_seq)) break;  // context exhausted
    logits = step(tok_embed(next, len), true);
  }
  return out;
}

std::vector<TokenId> ToyModel::generate(const std::vector<TokenId>& prompt_tokens,
                                        const std::string& image,
                                        const DecodeConfig& cfg) const {
  return generate_impl(prompt_tokens, image, cfg, nullptr);
}

std::vector<TokenId> ToyModel::generate_adapted(const std::vector<TokenId>& prompt_tokens,
                                                const std::string& image, const DecodeConfig& cfg,
                                                const AdapterOverlay& adapter) const {
  return generate_impl(prompt_tokens, image, cfg, &adapter);
}

void ToyModel::save(const std::filesystem::path& path) const {
  std::vector<std::pair<std::string, const Mat*>> tensors;
  tensors.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    tensors.emplace_back(params_.name(i), &params_[i]);
  write_tensor_archive(path, "SSRTOYM1", cfg_.to_json(), tensors);
}

ToyModel ToyModel::load(const std::filesystem::path& path) {
  TensorArchive ar = read_tensor_archive(path, "SSRTOYM1");
  ToyModel model(ToyConfig::from_json(ar.meta_json), 0);
  if (ar.tensors.size() != model.params_.size())
    throw io_error("model archive holds " + std::to_string(ar.tensors.size()) +
                   " tensors, expected " + std::to_string(model.params_.size()));
  for (auto& [name, mat] : ar.tensors) {
    if (!model.params_.contains(name)) throw io_error("unexpected tensor in archive: " + name);
    Mat& dst = model.params_.at(name);
    if (dst.rows != mat.rows || dst.cols != mat.cols)
      throw io_error("tensor shape mismatch: " + name);
    dst = std::move(mat);
  }
  return model;
}

}  // namespace ssr
