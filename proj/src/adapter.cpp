#include "ssr/adapter.hpp"

#include <algorithm>

#include "nlohmann/json.hpp"
#include "ssr/error.hpp"
#include "ssr/rng.hpp"
#include "ssr/util.hpp"

namespace ssr {

void AdapterConfig::validate() const {
  if (rank < 1) throw config_error("adapter: rank must be >= 1");
  if (!(alpha > 0.0)) throw config_error("adapter: alpha must be > 0");
}

std::vector<std::string> resolve_adapter_targets(const ToyModel& base, const AdapterConfig& cfg) {
  const std::vector<std::string> universe = base.linear_layer_names();
  std::vector<std::string> picked;
  if (cfg.target_selector.empty()) {
    for (const auto& name : universe)
      if (ToyModel::is_default_adapter_target(name)) picked.push_back(name);
  } else {
    std::vector<std::string> needles;
    std::string cur;
    for (const char c : cfg.target_selector) {
      if (c == '|') {
        if (!cur.empty()) needles.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) needles.push_back(cur);
    for (const auto& name : universe) {
      for (const auto& needle : needles) {
        if (name.find(needle) != std::string::npos) {
          picked.push_back(name);
          break;
        }
      }
    }
  }
  if (picked.empty())
    throw config_error("adapter selector matches no linear layer: '" + cfg.target_selector + "'");
  std::sort(picked.begin(), picked.end());
  return picked;
}

AdaptedModel::AdaptedModel(const ToyModel& base, const AdapterConfig& cfg, std::uint64_t seed)
    : base_(&base), cfg_(cfg) {
  cfg_.validate();
  const auto targets = resolve_adapter_targets(base, cfg_);
  Rng rng(seed);
  for (const auto& name : targets) {
    const Mat& w = base.params().at(name);  // [fan_out x fan_in]
    AdapterPair p;
    p.target = name;
    p.a = Mat(cfg_.rank, w.cols);
    p.b = Mat(w.rows, cfg_.rank);  // zero: adapted == base at init
    for (double& x : p.a.v) x = 0.02 * normal(rng);
    pairs_.push_back(std::move(p));
  }
}

std::size_t AdaptedModel::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : pairs_) n += p.a.v.size() + p.b.v.size();
  return n;
}

std::string AdaptedModel::fingerprint() const {
  std::uint64_t h = fnv1a64(base_->fingerprint());
  h = fnv1a64("rank=" + std::to_string(cfg_.rank), h);
  h = fnv1a64("alpha=" + std::to_string(cfg_.alpha), h);
  for (const auto& p : pairs_) {
    h = fnv1a64(p.target, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p.a.v.data()),
                                 p.a.v.size() * sizeof(double)),
                h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p.b.v.data()),
                                 p.b.v.size() * sizeof(double)),
                h);
  }
  return to_hex(h);
}

std::vector<TokenId> AdaptedModel::generate(const std::vector<TokenId>& prompt_tokens,
                                            const std::string& image,
                                            const DecodeConfig& cfg) const {
  return base_->generate_adapted(prompt_tokens, image, cfg, overlay());
}

Mat AdaptedModel::forward(const std::vector<TokenId>& tokens, const std::string& image,
                          Tape* tape) const {
  const AdapterOverlay ov = overlay();
  return base_->forward(tokens, image, tape, &ov);
}

void AdaptedModel::backward(const Mat& dlogits, const Tape& tape,
                            std::vector<AdapterPair>& grads) const {
  const AdapterOverlay ov = overlay();
  AdapterGrads sink{&grads};
  base_->backward(dlogits, tape, nullptr, &ov, &sink);
}

std::vector<AdapterPair> AdaptedModel::zero_grads() const {
  std::vector<AdapterPair> grads;
  grads.reserve(pairs_.size());
  for (const auto& p : pairs_) {
    AdapterPair g;
    g.target = p.target;
    g.a = Mat(p.a.rows, p.a.cols);
    g.b = Mat(p.b.rows, p.b.cols);
    grads.push_back(std::move(g));
  }
  return grads;
}

void AdaptedModel::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json meta;
  meta["rank"] = cfg_.rank;
  meta["alpha"] = cfg_.alpha;
  meta["selector"] = cfg_.target_selector;
  meta["base_fingerprint"] = base_->fingerprint();
  std::vector<std::pair<std::string, const Mat*>> tensors;
  for (const auto& p : pairs_) {
    tensors.emplace_back(p.target + ".a", &p.a);
    tensors.emplace_back(p.target + ".b", &p.b);
  }
  write_tensor_archive(path, "SSRADPT1", meta.dump(), tensors);
}

AdaptedModel AdaptedModel::load(const ToyModel& base, const std::filesystem::path& path) {
  TensorArchive ar = read_tensor_archive(path, "SSRADPT1");
  nlohmann::json meta = nlohmann::json::parse(ar.meta_json);
  AdapterConfig cfg;
  cfg.rank = meta.at("rank").get<int>();
  cfg.alpha = meta.at("alpha").get<double>();
  cfg.target_selector = meta.value("selector", "");
  const std::string want = meta.at("base_fingerprint").get<std::string>();
  if (want != base.fingerprint())
    throw provenance_error("adapter checkpoint was trained on base " + want +
                           ", refusing to attach to base " + base.fingerprint());

  AdaptedModel model(base, cfg, 0);
  if (ar.tensors.size() != model.pairs_.size() * 2)
    throw io_error("adapter archive tensor count mismatch");
  for (auto& [name, mat] : ar.tensors) {
    const bool is_a = name.size() > 2 && name.compare(name.size() - 2, 2, ".a") == 0;
    const bool is_b = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (!is_a && !is_b) throw io_error("unexpected tensor in adapter archive: " + name);
    const std::string target = name.substr(0, name.size() - 2);
    const AdapterOverlay ov{0.0, &model.pairs_};
    AdapterPair* p = const_cast<AdapterPair*>(ov.find(target));
    if (!p) throw io_error("adapter archive names unknown target: " + target);
    Mat& dst = is_a ? p->a : p->b;
    if (dst.rows != mat.rows || dst.cols != mat.cols)
      throw io_error("adapter tensor shape mismatch: " + name);
    dst = std::move(mat);
  }
  return model;
}

AdaptedModel attach_adapter(const ToyModel& base, const AdapterConfig& cfg, std::uint64_t seed) {
  return AdaptedModel(base, cfg, seed);
}

std::size_t count_trainable(const AdaptedModel& model) { return model.trainable_count(); }

std::size_t count_trainable(const ToyModel&) {
  throw config_error("count_trainable: no adapter attached");
}

}  // namespace ssr
