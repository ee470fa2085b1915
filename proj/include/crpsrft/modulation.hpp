#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crpsrft/errors.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/rng.hpp"
#include "crpsrft/tensor.hpp"

namespace crpsrft {

/// Noise draw and its embedding, one row per ensemble member (or per folded
/// batch-and-member row during training).
struct NoiseEmbedding {
  Tensor eps;    // [M, d_noise], i.i.d. standard normal
  Tensor embed;  // [M, d_noise], e_eps = LayerNorm(MLP(eps))
};

/// Per-member standard-normal noise. Row m comes from its own stream keyed
/// (seed, member), so members can be generated in any order or in parallel.
inline Tensor sample_noise_eps(std::size_t members, std::size_t d_noise,
                               std::uint64_t seed, std::uint64_t step = 0) {
  if (members == 0) throw ValueError("sample_noise: need at least one member");
  std::vector<double> data(members * d_noise);
  for (std::size_t m = 0; m < members; ++m) {
    RngStream rng(mix_seed(seed, 4, m, step));
    for (std::size_t j = 0; j < d_noise; ++j) data[m * d_noise + j] = rng.normal();
  }
  return Tensor::from_data({members, d_noise}, std::move(data));
}

/// Two-layer embedding MLP (expansion factor 4) with a final layer norm:
/// e_eps = LN(W2 SiLU(W1 eps + b1) + b2).
inline Tensor embed_noise(const ModelBundle& m, const Tensor& eps) {
  if (!m.noise)
    throw ValueError("embed_noise: model has no noise branch; retrofit first");
  if (eps.ndim() != 2 || eps.extent(1) != m.noise->d_noise)
    throw ShapeError("embed_noise: eps must be [M," +
                     std::to_string(m.noise->d_noise) + "], got " +
                     shape_str(eps.shape()));
  Tensor h = silu(matmul(eps, m.params.get("noise.mlp.w1")) +
                  m.params.get("noise.mlp.b1"));
  Tensor z = matmul(h, m.params.get("noise.mlp.w2")) +
             m.params.get("noise.mlp.b2");
  return layer_norm(z, m.params.get("noise.mlp.ln.gain"),
                    m.params.get("noise.mlp.ln.bias"), -1);
}

inline NoiseEmbedding sample_noise(const ModelBundle& m, std::size_t members,
                                   std::uint64_t seed) {
  if (!m.noise)
    throw ValueError("sample_noise: model has no noise branch; retrofit first");
  NoiseEmbedding ne;
  ne.eps = sample_noise_eps(members, m.noise->d_noise, seed);
  ne.embed = embed_noise(m, ne.eps);
  return ne;
}

/// Number of modulation vectors a block's head emits: (gamma, beta, alpha)
/// plus delta when the block combines a long skip under the delta gate.
inline std::size_t block_n_mod(const ModelBundle& m, std::size_t block) {
  return 3 + (m.noise && m.noise->use_delta_gate &&
                      block_receives_skip(m.backbone, block)
                  ? 1
                  : 0);
}

/// Runs every attached AdaLN head on e_eps: per injected block,
/// Linear(d_noise->d) -> SiLU -> Linear(d -> n_mod*d), split into the
/// modulation vectors and reshaped to [M, 1, ..., 1, d] for spatial
/// broadcast. Non-injected blocks get no entry.
inline BlockModulation make_modulation(const ModelBundle& m,
                                       const Tensor& e_eps) {
  if (!m.noise)
    throw ValueError("make_modulation: model has no noise branch");
  const BackboneConfig& cfg = m.backbone;
  const std::size_t d = cfg.hidden_dim;
  const std::size_t rows = e_eps.extent(0);
  Shape bshape;  // [M, 1, ..., 1, d]
  bshape.push_back(rows);
  for (std::size_t a = 0; a < cfg.spatial.size(); ++a) bshape.push_back(1);
  bshape.push_back(d);

  BlockModulation mods(cfg.n_blocks);
  for (std::size_t i : injected_blocks(cfg, *m.noise)) {
    const std::string p = "block" + std::to_string(i) + ".adaln.";
    Tensor h = silu(matmul(e_eps, m.params.get(p + "w1")) +
                    m.params.get(p + "b1"));
    Tensor out = matmul(h, m.params.get(p + "w2")) + m.params.get(p + "b2");
    const std::size_t n_mod = block_n_mod(m, i);
    auto chunk = [&](std::size_t idx) {
      return reshape(slice(out, 1, idx * d, (idx + 1) * d), bshape);
    };
    ModulationParams mp;
    mp.gamma = chunk(0);
    mp.beta = chunk(1);
    mp.alpha = chunk(2);
    if (n_mod == 4) mp.delta = chunk(3);
    mods[i] = std::move(mp);
  }
  return mods;
}

/// Modulated forward on a folded [B*M, spatial..., k*C] batch with one noise
/// row per batch row.
inline Tensor forward_modulated(const ModelBundle& m, const Tensor& input,
                                const Tensor& eps) {
  if (eps.extent(0) != input.extent(0))
    throw ShapeError("forward_modulated: eps rows " +
                     std::to_string(eps.extent(0)) + " != batch rows " +
                     std::to_string(input.extent(0)));
  Tensor e = embed_noise(m, eps);
  BlockModulation mods = make_modulation(m, e);
  return forward_core(m, input, &mods);
}

/// Adds the noise branch to a deterministic checkpoint: backbone parameters
/// copied verbatim, embedding MLP fan-in initialised, AdaLN heads' final
/// linears scaled by init_scale (exactly zero in the switched-off test mode).
inline ModelBundle attach_noise_branch(const ModelBundle& det,
                                       const NoiseBranchConfig& cfg,
                                       std::uint64_t seed) {
  if (det.noise)
    throw ConfigError("attach_noise_branch: model already has a noise branch");
  cfg.validate(det.backbone);
  ModelBundle m = clone_model(det);
  m.noise = cfg;
  RngStream rng(mix_seed(seed, 12));
  const std::size_t dn = cfg.d_noise;
  const std::size_t d = det.backbone.hidden_dim;

  m.params.add("noise.mlp.w1", detail::lecun_init({dn, 4 * dn}, dn, rng));
  m.params.add("noise.mlp.b1", Tensor::zeros({4 * dn}));
  m.params.add("noise.mlp.w2", detail::lecun_init({4 * dn, dn}, 4 * dn, rng));
  m.params.add("noise.mlp.b2", Tensor::zeros({dn}));
  m.params.add("noise.mlp.ln.gain", Tensor::filled({dn}, 1.0));
  m.params.add("noise.mlp.ln.bias", Tensor::zeros({dn}));

  for (std::size_t i : injected_blocks(det.backbone, cfg)) {
    const std::string p = "block" + std::to_string(i) + ".adaln.";
    const std::size_t n_mod = 3 + (cfg.use_delta_gate &&
                                           block_receives_skip(det.backbone, i)
                                       ? 1
                                       : 0);
    m.params.add(p + "w1", detail::lecun_init({dn, d}, dn, rng));
    m.params.add(p + "b1", Tensor::zeros({d}));
    m.params.add(p + "w2",
                 detail::lecun_init({d, n_mod * d}, d, rng, cfg.init_scale));
    m.params.add(p + "b2", Tensor::zeros({n_mod * d}));
  }
  return m;
}

/// Ensemble forecast for one history: replicates the history M times, draws
/// one eps per member and runs the modulated forward. Returns M physical
/// [C, spatial] frames, member order fixed by the seed.
inline std::vector<std::vector<double>> forward_ensemble(
    const ModelBundle& m, const std::vector<const double*>& history,
    std::size_t members, std::uint64_t seed) {
  if (!m.noise)
    throw ValueError("forward_ensemble: model has no noise branch; retrofit first");
  if (members == 0) throw ValueError("forward_ensemble: need at least one member");
  ensure_finite_params(m);
  NoGradGuard ng;
  std::vector<std::vector<const double*>> batch(members, history);
  Tensor input = build_history_input(m, batch);
  Tensor eps = sample_noise_eps(members, m.noise->d_noise, seed);
  Tensor out = forward_modulated(m, input, eps);
  const std::size_t frame = m.backbone.channels * m.backbone.spatial_size();
  std::vector<std::vector<double>> result(members,
                                          std::vector<double>(frame));
  for (std::size_t j = 0; j < members; ++j)
    denormalize_into(m, out.data(), j, result[j].data());
  return result;
}

}  // namespace crpsrft
