#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "conmat/blocks.hpp"
#include "conmat/util.hpp"

namespace conmat {

enum class Ablation { baseline, cbam, danet, cbam_danet, full };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::baseline: return "baseline";
    case Ablation::cbam: return "cbam";
    case Ablation::danet: return "danet";
    case Ablation::cbam_danet: return "cbam_danet";
    case Ablation::full: return "full";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  for (auto a : {Ablation::baseline, Ablation::cbam, Ablation::danet, Ablation::cbam_danet, Ablation::full})
    if (s == ablation_name(a)) return a;
  throw ConfigError("unknown ablation '" + s + "' (baseline|cbam|danet|cbam_danet|full)");
}

inline constexpr std::array<Ablation, 5> kAblationLadder = {Ablation::baseline, Ablation::cbam, Ablation::danet,
                                                            Ablation::cbam_danet, Ablation::full};

struct ModelConfig {
  std::size_t input_size = 224;
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_dims{96, 192, 384, 768};
  std::vector<std::size_t> stage_depths{3, 3, 9, 3};
  std::vector<bool> use_cbam{true, true, true};
  bool use_danet = true;
  bool use_transformer = true;
  bool use_grn = false;
  bool pos_embed = false;
  std::size_t num_classes = 4;
  std::size_t heads = 8;
  double dropout = 0.1;
  std::size_t cbam_reduction = 8;
  double layer_scale_init = 1e-6;

  // Full-size network at 224 px.
  static ModelConfig paper() { return {}; }

  // Same wiring at 64 px with narrow stages; used by CI.
  static ModelConfig desk() {
    ModelConfig c;
    c.input_size = 64;
    c.stage_dims = {24, 48, 96, 192};
    c.stage_depths = {1, 1, 1, 1};
    c.heads = 4;
    return c;
  }

  // Smallest preset: 32 px, used by end-to-end gradient checks and smoke runs.
  static ModelConfig toy() {
    ModelConfig c;
    c.input_size = 32;
    c.stage_dims = {8, 16, 32, 64};
    c.stage_depths = {1, 1, 1, 1};
    c.heads = 2;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "paper") return paper();
    if (name == "desk") return desk();
    if (name == "toy") return toy();
    throw ConfigError("unknown preset '" + name + "' (paper|desk|toy)");
  }

  ModelConfig& apply(Ablation a) {
    const bool cbam = a == Ablation::cbam || a == Ablation::cbam_danet || a == Ablation::full;
    const bool danet = a == Ablation::danet || a == Ablation::cbam_danet || a == Ablation::full;
    use_cbam.assign(3, cbam);
    use_danet = danet;
    use_transformer = a == Ablation::full;
    return *this;
  }

  std::size_t tokens() const {
    const auto s = input_size / 32;
    return s * s;
  }

  void validate() const {
    if (stage_dims.size() != 4 || stage_depths.size() != 4) throw ConfigError("model: four stages expected");
    if (use_cbam.size() != 3) throw ConfigError("model: use_cbam needs three entries (stages 1-3)");
    for (std::size_t i = 1; i < 4; ++i)
      if (stage_dims[i] != 2 * stage_dims[i - 1]) throw ConfigError("model: stage_dims must double at each stage");
    if (stage_dims[0] == 0) throw ConfigError("model: stage_dims must be positive");
    for (auto d : stage_depths)
      if (d == 0) throw ConfigError("model: stage depths must be >= 1");
    if (input_size == 0 || input_size % 32 != 0) throw ConfigError("model: input_size must be a multiple of 32");
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (heads == 0 || stage_dims[3] % heads != 0) throw ConfigError("model: heads must divide the last stage width");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
    for (std::size_t i = 0; i < 3; ++i)
      if (use_cbam[i] && (cbam_reduction == 0 || stage_dims[i] % cbam_reduction != 0))
        throw ConfigError("model: stage width not divisible by cbam_reduction");
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    return {{"input_size", std::to_string(input_size)},
            {"in_channels", std::to_string(in_channels)},
            {"stage_dims", fmt_list(stage_dims)},
            {"stage_depths", fmt_list(stage_depths)},
            {"use_cbam", fmt_list(use_cbam)},
            {"use_danet", use_danet ? "1" : "0"},
            {"use_transformer", use_transformer ? "1" : "0"},
            {"use_grn", use_grn ? "1" : "0"},
            {"pos_embed", pos_embed ? "1" : "0"},
            {"num_classes", std::to_string(num_classes)},
            {"heads", std::to_string(heads)},
            {"dropout", fmt_double(dropout)},
            {"cbam_reduction", std::to_string(cbam_reduction)},
            {"layer_scale_init", fmt_double(layer_scale_init)}};
  }

  // Returns false when `key` is not a model key.
  bool set(const std::string& key, const std::string& v) {
    if (key == "input_size") input_size = parse_size(key, v);
    else if (key == "in_channels") in_channels = parse_size(key, v);
    else if (key == "stage_dims") stage_dims = parse_size_list(key, v);
    else if (key == "stage_depths") stage_depths = parse_size_list(key, v);
    else if (key == "use_cbam") {
      use_cbam = parse_bool_list(key, v);
      if (use_cbam.size() == 1) use_cbam.assign(3, use_cbam[0]);
    } else if (key == "use_danet") use_danet = parse_bool(key, v);
    else if (key == "use_transformer") use_transformer = parse_bool(key, v);
    else if (key == "use_grn") use_grn = parse_bool(key, v);
    else if (key == "pos_embed") pos_embed = parse_bool(key, v);
    else if (key == "num_classes") num_classes = parse_size(key, v);
    else if (key == "heads") heads = parse_size(key, v);
    else if (key == "dropout") dropout = parse_double(key, v);
    else if (key == "cbam_reduction") cbam_reduction = parse_size(key, v);
    else if (key == "layer_scale_init") layer_scale_init = parse_double(key, v);
    else return false;
    return true;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named intermediate activations captured during a forward pass.
template <Real T>
using Taps = std::vector<std::pair<std::string, Var<T>>>;

template <Real T>
const Var<T>& find_tap(const Taps<T>& taps, const std::string& name) {
  for (const auto& [n, v] : taps)
    if (n == name) return v;
  throw ValueError("no tap named '" + name + "' (stem, stage1..stage5, pool)");
}

template <Real T>
struct Stage {
  std::optional<Downsample<T>> downsample;
  std::vector<ConvNextBlock<T>> blocks;
  std::optional<Cbam<T>> cbam;
  std::optional<Danet<T>> danet;
};

template <Real T>
class ConMatFormer {
 public:
  ConMatFormer() = default;

  ConMatFormer(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto& d = cfg_.stage_dims;
    stem_ = Stem<T>(cfg_.in_channels, d[0], rng);
    for (std::size_t s = 0; s < 4; ++s) {
      auto& st = stages_[s];
      if (s > 0) st.downsample.emplace(d[s - 1], d[s], rng);
      for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b)
        st.blocks.emplace_back(d[s], cfg_.use_grn, rng, cfg_.layer_scale_init);
      if (s < 3 && cfg_.use_cbam[s]) st.cbam.emplace(d[s], cfg_.cbam_reduction, rng);
      if (s == 3 && cfg_.use_danet) st.danet.emplace(d[s], rng);
    }
    if (cfg_.use_transformer) {
      transformer_.emplace(d[3], cfg_.heads, cfg_.tokens(), cfg_.dropout, cfg_.pos_embed, rng);
      stage5_norm_.emplace(d[3]);
    }
    pool_norm_ = NormParams<T>(d[3]);
    head_w_ = init::trunc_normal<T>({d[3], cfg_.num_classes}, rng);
    head_b_ = init::constant<T>({cfg_.num_classes}, 0.0);
  }

  const ModelConfig& config() const { return cfg_; }

  // One image [3, S, S] -> logits [K].
  Var<T> forward_one(Context<T>& ctx, const Var<T>& image, Taps<T>* taps = nullptr) {
    if (image.shape() != Shape{cfg_.in_channels, cfg_.input_size, cfg_.input_size})
      throw ShapeError("forward: expected image " +
                       shape_str({cfg_.in_channels, cfg_.input_size, cfg_.input_size}) + ", got " +
                       shape_str(image.shape()));
    auto tap = [&](const char* name, const Var<T>& v) {
      if (taps) taps->emplace_back(name, v);
    };
    auto guarded = [&](const char* name, auto&& fn) {
      try {
        return fn();
      } catch (const NumericError& e) {
        throw NumericError(std::string(name) + ": " + e.what());
      }
    };
    auto x = guarded("stem", [&] { return stem_.forward(ctx, image); });
    tap("stem", x);
    static constexpr const char* kStageNames[4] = {"stage1", "stage2", "stage3", "stage4"};
    for (std::size_t s = 0; s < 4; ++s) {
      x = guarded(kStageNames[s], [&] {
        auto& st = stages_[s];
        auto y = x;
        if (st.downsample) y = st.downsample->forward(ctx, y);
        for (auto& b : st.blocks) y = b.forward(ctx, y);
        if (st.cbam) y = st.cbam->forward(ctx, y);
        if (st.danet) y = st.danet->forward(ctx, y);
        return y;
      });
      tap(kStageNames[s], x);
    }
    if (transformer_) {
      x = guarded("stage5", [&] {
        auto y = transformer_->forward(ctx, x);
        y = stage5_norm_->apply(ctx, y, 0);
        return dropout(y, cfg_.dropout, ctx.training, ctx.random());
      });
      tap("stage5", x);
    }
    auto pooled = guarded("pool", [&] {
      auto p = reshape(global_pool(x, PoolKind::avg), {1, cfg_.stage_dims[3]});
      return pool_norm_.apply(ctx, p, 1);
    });
    tap("pool", pooled);
    return guarded("head", [&] {
      auto logits = linear(pooled, ctx.tape.param(head_w_), std::optional{ctx.tape.param(head_b_)});
      return reshape(logits, {cfg_.num_classes});
    });
  }

  // Batch [B, 3, S, S] -> logits [B, K]. Samples are processed independently.
  Var<T> forward(Context<T>& ctx, const Tensor<T>& batch) {
    if (batch.rank() != 4) throw ShapeError("forward: batch must be [B,3,S,S]");
    const auto b = batch.dim(0);
    const Shape img{batch.dim(1), batch.dim(2), batch.dim(3)};
    const auto per = shape_numel(img);
    std::vector<Var<T>> rows;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<T> buf(batch.ptr() + i * per, batch.ptr() + (i + 1) * per);
      rows.push_back(forward_one(ctx, ctx.tape.constant(Tensor<T>(img, std::move(buf)))));
    }
    return stack(rows);
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    stem_.collect(out, "stem");
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string p = "stage" + std::to_string(s + 1);
      auto& st = stages_[s];
      if (st.downsample) st.downsample->collect(out, p + ".downsample");
      for (std::size_t b = 0; b < st.blocks.size(); ++b) st.blocks[b].collect(out, p + ".block" + std::to_string(b));
      if (st.cbam) st.cbam->collect(out, p + ".cbam");
      if (st.danet) st.danet->collect(out, p + ".danet");
    }
    if (transformer_) {
      transformer_->collect(out, "stage5.transformer");
      stage5_norm_->collect(out, "stage5.norm");
    }
    pool_norm_.collect(out, "pool.norm");
    out.push_back({"head.weight", &head_w_});
    out.push_back({"head.bias", &head_b_});
    return out;
  }

  std::size_t num_params() { return count_params(parameters()); }

  void zero_grad() {
    for (auto& p : parameters()) p.param->zero_grad();
  }

  // Fingerprint of all parameter bytes, in parameter order.
  std::uint64_t checksum() {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto& p : parameters()) h = fnv1a(p.param->value.ptr(), p.param->value.numel() * sizeof(T), h);
    return h;
  }

  Stem<T>& stem() { return stem_; }
  Stage<T>& stage(std::size_t i) { return stages_.at(i); }
  std::optional<TransformerBlock<T>>& transformer() { return transformer_; }

 private:
  ModelConfig cfg_;
  Stem<T> stem_;
  std::array<Stage<T>, 4> stages_;
  std::optional<TransformerBlock<T>> transformer_;
  std::optional<NormParams<T>> stage5_norm_;
  NormParams<T> pool_norm_;
  Parameter<T> head_w_, head_b_;
};

// Inference helper: logits for one image without recording gradients.
template <Real T>
std::vector<T> predict_logits(ConMatFormer<T>& model, const Tensor<T>& image) {
  Tape<T> tape(false);
  Rng rng(0);
  Context<T> ctx{tape, false, &rng};
  auto out = model.forward_one(ctx, tape.constant(image));
  return out.value().vec();
}

// ---------------------------------------------------------------------------
// Parameter / MAC census.

struct CensusRow {
  std::string module;
  std::string name;
  std::size_t params = 0;
  std::size_t macs = 0;
};

struct ParamReport {
  std::vector<CensusRow> rows;
  std::size_t total_params = 0;
  std::size_t total_macs = 0;

  const CensusRow* find(const std::string& module, const std::string& name) const {
    for (const auto& r : rows)
      if (r.module == module && r.name == name) return &r;
    return nullptr;
  }

  std::size_t module_params(const std::string& module) const {
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.module == module) n += r.params;
    return n;
  }

  void write_csv(std::ostream& os) const {
    os << "module,name,params,macs\n";
    for (const auto& r : rows) os << r.module << ',' << r.name << ',' << r.params << ',' << r.macs << '\n';
    os << "total,all," << total_params << ',' << total_macs << '\n';
  }
};

// Reference per-row parameter counts for the full-size configuration.
struct CensusRef {
  const char* module;
  const char* detail;
  std::size_t params;
};

inline const std::vector<CensusRef>& reference_census() {
  static const std::vector<CensusRef> refs = {
      {"stem", "conv", 4704},          {"stem", "norm", 192},
      {"stage1", "blocks", 239904},    {"stage1", "cbam", 2412},
      {"stage2", "blocks", 922176},    {"stage2", "cbam", 9432},
      {"stage3", "blocks", 10841472},  {"stage3", "cbam", 37296},
      {"stage4", "blocks", 14305536},  {"stage4", "danet", 1248032},
      {"stage5", "attention", 2362368}, {"stage5", "mlp", 4722432},
      {"pool", "norm", 1536},          {"head", "linear", 3076},
  };
  return refs;
}
inline constexpr std::size_t kReferenceTotalParams = 36330000;
inline constexpr std::size_t kReferenceTotalMacs = 391950000;

// Exact parameter counts are taken from the built parameter tensors; MACs are
// counted analytically from the activation shapes at cfg.input_size.
template <Real T>
ParamReport count_params_macs(ConMatFormer<T>& model) {
  const auto& cfg = model.config();
  auto params = model.parameters();
  auto sum_prefix = [&](const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& p : params)
      if (p.name.rfind(prefix, 0) == 0) n += p.param->numel();
    return n;
  };
  ParamReport rep;
  auto add = [&](std::string module, std::string name, std::size_t p, std::size_t m) {
    rep.rows.push_back({std::move(module), std::move(name), p, m});
  };
  const auto& d = cfg.stage_dims;
  std::size_t side = cfg.input_size / 4;
  add("stem", "conv", sum_prefix("stem.kernel") + sum_prefix("stem.bias"),
      d[0] * cfg.in_channels * 16 * side * side);
  add("stem", "norm", sum_prefix("stem.norm"), 0);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string st = "stage" + std::to_string(s + 1);
    const auto c = d[s];
    if (s > 0) {
      side /= 2;
      add(st, "downsample", sum_prefix(st + ".downsample"), c * d[s - 1] * 4 * side * side);
    }
    const auto n = side * side;
    const std::size_t block_macs = n * (49 * c + 8 * c * c);
    add(st, "blocks", sum_prefix(st + ".block"), cfg.stage_depths[s] * block_macs);
    if (s < 3 && cfg.use_cbam[s]) {
      const auto hidden = c / cfg.cbam_reduction;
      add(st, "cbam", sum_prefix(st + ".cbam"), 2 * 2 * c * hidden + 2 * 49 * n);
    }
    if (s == 3 && cfg.use_danet) add(st, "danet", sum_prefix(st + ".danet"), 3 * c * c * n + 2 * n * n * c + 2 * c * c * n);
  }
  if (cfg.use_transformer) {
    const auto dim = d[3], n = cfg.tokens();
    add("stage5", "attention", sum_prefix("stage5.transformer.attn"), n * dim * 3 * dim + 2 * n * n * dim + n * dim * dim);
    add("stage5", "mlp", sum_prefix("stage5.transformer.mlp"), 8 * n * dim * dim);
    add("stage5", "block_norms", sum_prefix("stage5.transformer.norm"), 0);
    if (cfg.pos_embed) add("stage5", "pos_embed", sum_prefix("stage5.transformer.pos_embed"), 0);
    add("stage5", "norm", sum_prefix("stage5.norm"), 0);
  }
  add("pool", "norm", sum_prefix("pool.norm"), 0);
  add("head", "linear", sum_prefix("head."), d[3] * cfg.num_classes);
  for (const auto& r : rep.rows) {
    rep.total_params += r.params;
    rep.total_macs += r.macs;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints: named-tensor archive whose header is the model config as
// key = value lines, followed by any extra lines (e.g. class names).

inline std::string config_header(const ModelConfig& cfg,
                                 const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::string out;
  for (const auto& [k, v] : cfg.to_kv()) out += k + " = " + v + "\n";
  for (const auto& [k, v] : extra) out += k + " = " + v + "\n";
  return out;
}

template <Real T>
void save_checkpoint(ConMatFormer<T>& model, const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  io::Archive<float> a;
  a.header = config_header(model.config(), extra);
  for (auto& p : model.parameters()) a.entries.emplace_back(p.name, p.param->value.template cast<float>());
  io::save_archive(path, a);
}

struct LoadedHeader {
  ModelConfig config;
  std::map<std::string, std::string> extra;
};

inline LoadedHeader parse_checkpoint_header(const std::string& header) {
  LoadedHeader h;
  for (const auto& [k, v] : parse_kv_text(header))
    if (!h.config.set(k, v)) h.extra[k] = v;
  return h;
}

template <Real T>
std::pair<ConMatFormer<T>, LoadedHeader> load_checkpoint(const std::string& path) {
  auto a = io::load_archive<T>(path);
  auto hdr = parse_checkpoint_header(a.header);
  Rng rng(0);
  ConMatFormer<T> model(hdr.config, rng);
  for (auto& p : model.parameters()) {
    const auto* t = a.find(p.name);
    if (!t) throw IoError("checkpoint " + path + " lacks parameter " + p.name);
    if (t->shape() != p.param->value.shape()) throw IoError("checkpoint shape mismatch for " + p.name);
    p.param->value = *t;
    p.param->zero_grad();
  }
  return {std::move(model), std::move(hdr)};
}

}  // namespace conmat
