#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crpsrft/errors.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/modulation.hpp"

namespace crpsrft {

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'P', 'S',
                                             'R', 'F', 'T', '1'};

template <class T>
void ckpt_write(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
void ckpt_read(std::ifstream& f, T& v, const char* what) {
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f)
    throw IoError(std::string("checkpoint: truncated while reading ") + what);
}

}  // namespace detail

inline void save_checkpoint(const ModelBundle& m, const std::string& path) {
  ensure_finite_params(m);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  f.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);

  nlohmann::json header;
  header["backbone"] = m.backbone;
  header["noise_branch"] = m.noise.has_value();
  if (m.noise) header["noise"] = *m.noise;
  header["stats"] = {{"mean", m.stats.mean}, {"stddev", m.stats.stddev}};
  header["config_hash"] = m.config_hash;
  const std::string hs = header.dump();
  detail::ckpt_write(f, static_cast<std::uint32_t>(hs.size()));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  detail::ckpt_write(f, static_cast<std::uint32_t>(m.params.size()));
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const std::string& name = m.params.names()[i];
    const Tensor& t = m.params.at(i);
    detail::ckpt_write(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::ckpt_write(f, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t e : t.shape())
      detail::ckpt_write(f, static_cast<std::uint64_t>(e));
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

inline ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0)
    throw IoError("load_checkpoint: " + path + " is not a model checkpoint");

  std::uint32_t header_len = 0;
  detail::ckpt_read(f, header_len, "header length");
  std::string hs(header_len, '\0');
  f.read(hs.data(), header_len);
  if (!f) throw IoError("load_checkpoint: truncated header");

  BackboneConfig backbone;
  std::optional<NoiseBranchConfig> noise;
  ChannelStats stats;
  std::uint64_t config_hash = 0;
  try {
    const nlohmann::json header = nlohmann::json::parse(hs);
    backbone = header.at("backbone").get<BackboneConfig>();
    if (header.at("noise_branch").get<bool>())
      noise = header.at("noise").get<NoiseBranchConfig>();
    stats.mean = header.at("stats").at("mean").get<std::vector<double>>();
    stats.stddev = header.at("stats").at("stddev").get<std::vector<double>>();
    config_hash = header.at("config_hash").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: bad header: ") + e.what());
  }

  // rebuild the expected parameter inventory from the configs, then demand
  // the file matches it exactly
  ModelBundle m = init_backbone(backbone, stats, 0);
  if (noise) m = attach_noise_branch(m, *noise, 0);
  m.config_hash = config_hash;

  std::uint32_t n_params = 0;
  detail::ckpt_read(f, n_params, "parameter count");
  if (n_params != m.params.size())
    throw IoError("load_checkpoint: header declares " +
                  std::to_string(m.params.size()) + " parameters, file has " +
                  std::to_string(n_params));
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::uint32_t name_len = 0;
    detail::ckpt_read(f, name_len, "parameter name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f) throw IoError("checkpoint: truncated parameter name");
    if (!m.params.has(name))
      throw IoError("load_checkpoint: unexpected parameter \"" + name + "\"");
    Tensor& t = m.params.get(name);
    std::uint32_t rank = 0;
    detail::ckpt_read(f, rank, "parameter rank");
    Shape shape(rank);
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint64_t e = 0;
      detail::ckpt_read(f, e, "parameter extent");
      shape[r] = static_cast<std::size_t>(e);
    }
    if (shape != t.shape())
      throw IoError("load_checkpoint: parameter \"" + name + "\" has shape " +
                    shape_str(shape) + ", expected " + shape_str(t.shape()));
    f.read(reinterpret_cast<char*>(t.mutable_data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!f) throw IoError("checkpoint: truncated payload for \"" + name + "\"");
  }
  char extra;
  if (f.read(&extra, 1))
    throw IoError("load_checkpoint: trailing bytes after parameters");
  ensure_finite_params(m);
  return m;
}

}  // namespace crpsrft
