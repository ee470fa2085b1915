#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "crpsrft/dynamics.hpp"
#include "crpsrft/errors.hpp"
#include "crpsrft/rng.hpp"
#include "crpsrft/tensor.hpp"

namespace crpsrft {

enum class NormPlacement { pre, post };

struct BackboneConfig {
  std::size_t history_len = 1;  // k
  std::size_t channels = 1;     // C
  std::vector<std::size_t> spatial;
  std::size_t hidden_dim = 32;
  std::size_t n_blocks = 3;
  NormPlacement norm_placement = NormPlacement::pre;
  bool long_skips = false;
  bool predict_residual = true;
  std::string activation = "silu";
  // degenerate norm mode (norm(x) = gain*x + bias): used by the structural
  // pre/post equivalence checks, never in real training
  bool identity_norms = false;

  std::size_t mlp_dim() const { return 2 * hidden_dim; }
  std::size_t spatial_size() const {
    std::size_t s = 1;
    for (std::size_t e : spatial) s *= e;
    return s;
  }
  void validate() const {
    if (history_len < 1) throw ConfigError("backbone: history_len must be >= 1");
    if (channels < 1) throw ConfigError("backbone: channels must be >= 1");
    if (spatial.empty()) throw ConfigError("backbone: spatial dims required");
    for (std::size_t e : spatial)
      if (e < 5) throw ConfigError("backbone: spatial extents must cover the mixing stencil (>= 5)");
    if (hidden_dim < 1) throw ConfigError("backbone: hidden_dim must be >= 1");
    if (n_blocks < 1) throw ConfigError("backbone: n_blocks must be >= 1");
    if (long_skips && n_blocks < 2)
      throw ConfigError("backbone: long_skips needs n_blocks >= 2");
    if (activation != "silu" && activation != "gelu")
      throw ConfigError("backbone: unknown activation \"" + activation + "\"");
  }
};

enum class InjectionDensity { full, half };

struct NoiseBranchConfig {
  std::size_t d_noise = 32;
  InjectionDensity injection_density = InjectionDensity::full;
  bool use_delta_gate = false;  // tied to backbone long_skips
  double init_scale = 1e-2;    // exact zero = switched-off test mode

  void validate(const BackboneConfig& bb) const {
    if (d_noise < 1) throw ConfigError("noise: d_noise must be >= 1");
    if (use_delta_gate != bb.long_skips)
      throw ConfigError("noise: use_delta_gate must match backbone long_skips");
    if (init_scale < 0.0) throw ConfigError("noise: init_scale must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{
      {"history_len", c.history_len},
      {"channels", c.channels},
      {"spatial", c.spatial},
      {"hidden_dim", c.hidden_dim},
      {"n_blocks", c.n_blocks},
      {"norm_placement", c.norm_placement == NormPlacement::pre ? "pre" : "post"},
      {"long_skips", c.long_skips},
      {"predict_residual", c.predict_residual},
      {"activation", c.activation},
      {"identity_norms", c.identity_norms}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.history_len = j.at("history_len").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.spatial = j.at("spatial").get<std::vector<std::size_t>>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  const std::string np = j.at("norm_placement").get<std::string>();
  if (np != "pre" && np != "post")
    throw ConfigError("backbone: norm_placement must be pre or post");
  c.norm_placement = np == "pre" ? NormPlacement::pre : NormPlacement::post;
  c.long_skips = j.at("long_skips").get<bool>();
  c.predict_residual = j.at("predict_residual").get<bool>();
  c.activation = j.at("activation").get<std::string>();
  c.identity_norms = j.value("identity_norms", false);
}

inline void to_json(nlohmann::json& j, const NoiseBranchConfig& c) {
  j = nlohmann::json{
      {"d_noise", c.d_noise},
      {"injection_density",
       c.injection_density == InjectionDensity::full ? "full" : "half"},
      {"use_delta_gate", c.use_delta_gate},
      {"init_scale", c.init_scale}};
}

inline void from_json(const nlohmann::json& j, NoiseBranchConfig& c) {
  c.d_noise = j.at("d_noise").get<std::size_t>();
  const std::string d = j.at("injection_density").get<std::string>();
  if (d != "full" && d != "half")
    throw ConfigError("noise: injection_density must be full or half");
  c.injection_density =
      d == "full" ? InjectionDensity::full : InjectionDensity::half;
  c.use_delta_gate = j.at("use_delta_gate").get<bool>();
  c.init_scale = j.at("init_scale").get<double>();
}

/// Named leaf parameters in stable insertion order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t) {
    if (index_.count(name))
      throw ValueError("ParamStore: duplicate parameter \"" + name + "\"");
    t.set_requires_grad(true);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ValueError("ParamStore: unknown parameter \"" + name + "\"");
    return tensors_[it->second];
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ValueError("ParamStore: unknown parameter \"" + name + "\"");
    return tensors_[it->second];
  }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }
  Tensor& at(std::size_t i) { return tensors_[i]; }
  const Tensor& at(std::size_t i) const { return tensors_[i]; }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors_) n += t.size();
    return n;
  }
  void zero_grads() {
    for (Tensor& t : tensors_) t.zero_grad();
  }

  /// Deep copy: fresh leaf tensors, values duplicated, grads dropped.
  ParamStore clone() const {
    ParamStore out;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      out.add(names_[i],
              Tensor::from_data(tensors_[i].shape(), tensors_[i].data()));
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// A parameter belongs to the noise branch iff it was added by
/// attach_noise_branch (embedding MLP or a per-block AdaLN head).
inline bool is_noise_param(const std::string& name) {
  return name.rfind("noise.", 0) == 0 ||
         name.find(".adaln.") != std::string::npos;
}

struct ModelBundle {
  BackboneConfig backbone;
  std::optional<NoiseBranchConfig> noise;
  ChannelStats stats;
  ParamStore params;
  std::uint64_t config_hash = 0;
};

inline ModelBundle clone_model(const ModelBundle& m) {
  ModelBundle out;
  out.backbone = m.backbone;
  out.noise = m.noise;
  out.stats = m.stats;
  out.params = m.params.clone();
  out.config_hash = m.config_hash;
  return out;
}

// ---------------------------------------------------------------------------
// Block topology helpers
// ---------------------------------------------------------------------------

/// Long-skip pairing: block i receives the saved output of block
/// n_blocks-1-i when i lies in the upper half (an odd middle block pairs
/// with itself and is excluded).
inline bool block_receives_skip(const BackboneConfig& cfg, std::size_t i) {
  return cfg.long_skips && 2 * i > cfg.n_blocks - 1;
}

inline bool block_donates_skip(const BackboneConfig& cfg, std::size_t i) {
  return cfg.long_skips && 2 * i < cfg.n_blocks - 1;
}

/// Blocks carrying an AdaLN head under the given density (half = every
/// second block starting from block 0).
inline std::vector<std::size_t> injected_blocks(const BackboneConfig& bb,
                                                const NoiseBranchConfig& nz) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bb.n_blocks; ++i)
    if (nz.injection_density == InjectionDensity::full || i % 2 == 0)
      out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor lecun_init(Shape shape, std::size_t fan_in, RngStream& rng,
                         double scale = 1.0) {
  std::vector<double> data(shape_numel(shape));
  const double stddev = scale / std::sqrt(static_cast<double>(fan_in));
  for (double& v : data) v = rng.normal() * stddev;
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace detail

inline ModelBundle init_backbone(const BackboneConfig& cfg,
                                 const ChannelStats& stats,
                                 std::uint64_t seed) {
  cfg.validate();
  if (stats.mean.size() != cfg.channels || stats.stddev.size() != cfg.channels)
    throw ConfigError("init_backbone: channel stats do not match channels");
  ModelBundle m;
  m.backbone = cfg;
  m.stats = stats;
  RngStream rng(mix_seed(seed, 11));
  const std::size_t d = cfg.hidden_dim;
  const std::size_t kc = cfg.history_len * cfg.channels;
  const std::size_t mm = cfg.mlp_dim();

  m.params.add("encoder.weight", detail::lecun_init({kc, d}, kc, rng));
  m.params.add("encoder.bias", Tensor::zeros({d}));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    m.params.add(p + "norm1.gain", Tensor::filled({d}, 1.0));
    m.params.add(p + "norm1.bias", Tensor::zeros({d}));
    m.params.add(p + "mlp.w1", detail::lecun_init({d, mm}, d, rng));
    m.params.add(p + "mlp.b1", Tensor::zeros({mm}));
    m.params.add(p + "mlp.w2", detail::lecun_init({mm, d}, mm, rng));
    m.params.add(p + "mlp.b2", Tensor::zeros({d}));
    // circular stencil, identity at init: centre tap 1, neighbours 0
    m.params.add(p + "mix.center", Tensor::filled({d}, 1.0));
    for (std::size_t a = 0; a < cfg.spatial.size(); ++a)
      for (const char* off : {"m2", "m1", "p1", "p2"})
        m.params.add(p + "mix.a" + std::to_string(a) + "." + off,
                     Tensor::zeros({d}));
    if (cfg.norm_placement == NormPlacement::post) {
      m.params.add(p + "norm2.gain", Tensor::filled({d}, 1.0));
      m.params.add(p + "norm2.bias", Tensor::zeros({d}));
    }
    if (block_receives_skip(cfg, i))
      m.params.add(p + "delta", Tensor::zeros({d}));
  }
  // zero-initialised head: the untrained model is the persistence forecaster
  m.params.add("head.weight", Tensor::zeros({d, cfg.channels}));
  m.params.add("head.bias", Tensor::zeros({cfg.channels}));
  return m;
}

inline void ensure_finite_params(const ModelBundle& m) {
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (!all_finite(m.params.at(i)))
      throw NumericError("model poisoned: parameter \"" +
                         m.params.names()[i] + "\" contains non-finite values");
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-block conditioning emitted by an AdaLN head. Tensors are shaped
/// [B, 1, ..., 1, d_hidden] (unit spatial extents) and broadcast across all
/// spatial positions.
struct ModulationParams {
  Tensor gamma;
  Tensor beta;
  Tensor alpha;
  std::optional<Tensor> delta;
};

using BlockModulation = std::vector<std::optional<ModulationParams>>;

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return matmul(x, w) + b;
}

inline Tensor activate(const Tensor& x, const std::string& name) {
  return name == "gelu" ? gelu(x) : silu(x);
}

/// Norm over the channel axis with the block's learned affine; in the
/// degenerate identity mode, normalisation is skipped and only the affine
/// applies.
inline Tensor block_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, bool identity_mode) {
  if (identity_mode) {
    Shape s(x.ndim(), 1);
    s.back() = gain.extent(0);
    return x * reshape(gain, s) + reshape(bias, s);
  }
  return layer_norm(x, gain, bias, -1);
}

}  // namespace detail

/// History embedding: stacked channels linearly projected to hidden_dim.
/// input: [B, spatial..., k*C] -> [B, spatial..., d_hidden].
inline Tensor encode(const ModelBundle& m, const Tensor& input) {
  const std::size_t kc = m.backbone.history_len * m.backbone.channels;
  if (input.ndim() < 2 || input.extent(input.ndim() - 1) != kc)
    throw ShapeError("encode: expected " + std::to_string(kc) +
                     " stacked history channels, got " +
                     shape_str(input.shape()));
  return detail::linear(input, m.params.get("encoder.weight"),
                        m.params.get("encoder.bias"));
}

/// Depthwise circular stencil (radius 2 per spatial axis) plus centre tap.
/// x: [B, spatial..., d]; identity when centre=1 and neighbour taps are 0.
inline Tensor spatial_mix(const ModelBundle& m, std::size_t block,
                          const Tensor& x) {
  const BackboneConfig& cfg = m.backbone;
  const std::string p = "block" + std::to_string(block) + ".mix.";
  Tensor y = x * m.params.get(p + "center");
  for (std::size_t a = 0; a < cfg.spatial.size(); ++a) {
    const int axis = static_cast<int>(a) + 1;
    const std::string ap = p + "a" + std::to_string(a) + ".";
    y = y + roll(x, 2, axis) * m.params.get(ap + "m2");
    y = y + roll(x, 1, axis) * m.params.get(ap + "m1");
    y = y + roll(x, -1, axis) * m.params.get(ap + "p1");
    y = y + roll(x, -2, axis) * m.params.get(ap + "p2");
  }
  return y;
}

/// One residual block. `skip` is the saved output of the paired earlier
/// block (long skips); `mods` the per-member AdaLN conditioning, if any.
inline Tensor block_forward(const ModelBundle& m, std::size_t i,
                            const Tensor& x, const Tensor* skip,
                            const ModulationParams* mods) {
  const BackboneConfig& cfg = m.backbone;
  const std::string p = "block" + std::to_string(i) + ".";
  const bool receives = block_receives_skip(cfg, i);
  if (skip && !receives)
    throw ValueError("block_forward: block " + std::to_string(i) +
                     " takes no long skip");
  if (receives && !skip)
    throw ValueError("block_forward: block " + std::to_string(i) +
                     " requires its long-skip input");
  if (mods && mods->delta.has_value() && !receives)
    throw ValueError("block_forward: delta gate on a block without a skip");

  Tensor h = detail::block_norm(x, m.params.get(p + "norm1.gain"),
                                m.params.get(p + "norm1.bias"),
                                cfg.identity_norms);
  if (mods) h = h * (1.0 + mods->gamma) + mods->beta;

  Tensor y = detail::linear(h, m.params.get(p + "mlp.w1"),
                            m.params.get(p + "mlp.b1"));
  y = detail::activate(y, cfg.activation);
  y = detail::linear(y, m.params.get(p + "mlp.w2"),
                     m.params.get(p + "mlp.b2"));
  y = spatial_mix(m, i, y);

  if (mods) y = y * (1.0 + mods->alpha);
  Tensor out = x + y;

  if (receives) {
    Tensor delta = m.params.get(p + "delta");
    Tensor delta_eff =
        mods && mods->delta ? Tensor(delta + *mods->delta) : delta;
    out = (out + *skip * delta_eff) * rsqrt(1.0 + delta_eff * delta_eff);
  }
  if (cfg.norm_placement == NormPlacement::post)
    out = detail::block_norm(out, m.params.get(p + "norm2.gain"),
                             m.params.get(p + "norm2.bias"),
                             cfg.identity_norms);
  return out;
}

/// Core network on normalised inputs.
/// input: [B, spatial..., k*C] (history channel-stacked, oldest first)
/// returns: [B, spatial..., C] normalised next-state prediction.
inline Tensor forward_core(const ModelBundle& m, const Tensor& input,
                           const BlockModulation* mods = nullptr) {
  const BackboneConfig& cfg = m.backbone;
  const std::size_t kc = cfg.history_len * cfg.channels;
  if (input.ndim() != cfg.spatial.size() + 2)
    throw ShapeError("forward: input rank " + std::to_string(input.ndim()) +
                     " does not match spatial dims + batch + channels");
  for (std::size_t a = 0; a < cfg.spatial.size(); ++a)
    if (input.extent(a + 1) != cfg.spatial[a])
      throw ShapeError("forward: input spatial extents do not match config");
  if (input.extent(input.ndim() - 1) != kc)
    throw ShapeError("forward: expected " + std::to_string(kc) +
                     " stacked history channels, got " +
                     std::to_string(input.extent(input.ndim() - 1)));
  if (mods && mods->size() != cfg.n_blocks)
    throw ShapeError("forward: modulation list must cover every block");

  Tensor h = encode(m, input);
  std::vector<Tensor> saved(cfg.n_blocks);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const Tensor* skip = nullptr;
    Tensor skip_store;
    if (block_receives_skip(cfg, i)) {
      skip_store = saved[cfg.n_blocks - 1 - i];
      skip = &skip_store;
    }
    const ModulationParams* bm =
        mods && (*mods)[i].has_value() ? &(*mods)[i].value() : nullptr;
    h = block_forward(m, i, h, skip, bm);
    if (block_donates_skip(cfg, i)) saved[i] = h;
  }
  Tensor out = detail::linear(h, m.params.get("head.weight"),
                              m.params.get("head.bias"));
  if (cfg.predict_residual) {
    const int last_axis = static_cast<int>(input.ndim()) - 1;
    Tensor newest = slice(input, last_axis, kc - cfg.channels, kc);
    out = newest + out;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Physical <-> normalised plumbing
// --------------------------------------------------------------------------

/// Builds the normalised, channel-stacked [B, spatial..., k*C] input from
/// raw physical frames. histories[b][j] points at frame j (oldest first) of
/// sample b, each laid out [C, spatial] row-major as in TrajectoryDataset.
inline Tensor build_history_input(
    const ModelBundle& m,
    const std::vector<std::vector<const double*>>& histories) {
  const BackboneConfig& cfg = m.backbone;
  const std::size_t b = histories.size();
  if (b == 0) throw ValueError("build_history_input: empty batch");
  const std::size_t k = cfg.history_len;
  const std::size_t c = cfg.channels;
  const std::size_t s = cfg.spatial_size();
  Shape shape;
  shape.push_back(b);
  for (std::size_t e : cfg.spatial) shape.push_back(e);
  shape.push_back(k * c);
  std::vector<double> data(b * s * k * c);
  for (std::size_t bi = 0; bi < b; ++bi) {
    if (histories[bi].size() != k)
      throw ShapeError("build_history_input: expected " + std::to_string(k) +
                       " history frames, got " +
                       std::to_string(histories[bi].size()));
    for (std::size_t j = 0; j < k; ++j) {
      const double* frame = histories[bi][j];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double mu = m.stats.mean[ch];
        const double sd = m.stats.stddev[ch];
        for (std::size_t site = 0; site < s; ++site)
          data[((bi * s) + site) * k * c + j * c + ch] =
              (frame[ch * s + site] - mu) / sd;
      }
    }
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

/// Normalises a single [C, spatial] frame into the model's [spatial..., C]
/// channels-last layout (no batch axis).
inline Tensor normalize_frame(const ModelBundle& m, const double* frame) {
  const std::size_t c = m.backbone.channels;
  const std::size_t s = m.backbone.spatial_size();
  Shape shape;
  for (std::size_t e : m.backbone.spatial) shape.push_back(e);
  shape.push_back(c);
  std::vector<double> data(s * c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t site = 0; site < s; ++site)
      data[site * c + ch] =
          (frame[ch * s + site] - m.stats.mean[ch]) / m.stats.stddev[ch];
  return Tensor::from_data(std::move(shape), std::move(data));
}

/// Converts one normalised [spatial..., C] prediction (row bi of a batched
/// [B, spatial..., C] value) back to a physical [C, spatial] frame.
inline void denormalize_into(const ModelBundle& m,
                             const std::vector<double>& batch_value,
                             std::size_t bi, double* frame_out) {
  const std::size_t c = m.backbone.channels;
  const std::size_t s = m.backbone.spatial_size();
  const double* row = batch_value.data() + bi * s * c;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t site = 0; site < s; ++site)
      frame_out[ch * s + site] =
          row[site * c + ch] * m.stats.stddev[ch] + m.stats.mean[ch];
}

/// Deterministic single-history forward: physical frames in, physical next
/// state out ([C, spatial] layout).
inline std::vector<double> forward_deterministic(
    const ModelBundle& m, const std::vector<const double*>& history) {
  ensure_finite_params(m);
  NoGradGuard ng;
  Tensor input = build_history_input(m, {history});
  Tensor out = forward_core(m, input);
  if (!all_finite(out))
    throw NumericError("forward_deterministic: non-finite prediction");
  std::vector<double> frame(m.backbone.channels * m.backbone.spatial_size());
  denormalize_into(m, out.data(), 0, frame.data());
  return frame;
}

}  // namespace crpsrft
