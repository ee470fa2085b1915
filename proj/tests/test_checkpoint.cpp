#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "crpsrft/checkpoint.hpp"
#include "crpsrft/model.hpp"
#include "crpsrft/modulation.hpp"
#include "crpsrft/rng.hpp"

using namespace crpsrft;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name)
      : path("ckpt_test_" + name + ".bin") {}
  ~TempFile() { std::remove(path.c_str()); }
};

BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.spatial = {8};
  cfg.channels = 2;
  cfg.history_len = 2;
  cfg.hidden_dim = 6;
  cfg.n_blocks = 3;
  cfg.long_skips = true;
  return cfg;
}

ChannelStats small_stats() {
  ChannelStats st;
  st.mean = {0.25, -1.5};
  st.stddev = {1.75, 0.5};
  return st;
}

ModelBundle noisy_model(std::uint64_t seed) {
  ModelBundle det = init_backbone(small_backbone(), small_stats(), seed);
  NoiseBranchConfig nb;
  nb.d_noise = 4;
  nb.init_scale = 0.02;
  nb.use_delta_gate = true;
  ModelBundle m = attach_noise_branch(det, nb, seed + 1);
  RngStream rng(mix_seed(seed, 99));
  for (std::size_t i = 0; i < m.params.size(); ++i)
    for (double& v : m.params.at(i).mutable_data()) v += 0.05 * rng.normal();
  m.config_hash = 0xfeedbeefcafe1234ull;
  return m;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>(std::istreambuf_iterator<char>(f),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::size_t find_bytes(const std::vector<char>& hay, const std::string& needle) {
  const std::string view(hay.begin(), hay.end());
  const std::size_t pos = view.find(needle);
  REQUIRE(pos != std::string::npos);
  return pos;
}

}  // namespace

TEST_CASE("checkpoint round-trip is bit exact") {
  const ModelBundle m = noisy_model(7);
  TempFile tmp("roundtrip");
  save_checkpoint(m, tmp.path);
  const ModelBundle r = load_checkpoint(tmp.path);

  REQUIRE(r.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    CAPTURE(m.params.names()[i]);
    REQUIRE(r.params.names()[i] == m.params.names()[i]);
    REQUIRE(r.params.at(i).shape() == m.params.at(i).shape());
    REQUIRE(r.params.at(i).data() == m.params.at(i).data());
  }
  REQUIRE(r.backbone.spatial == m.backbone.spatial);
  REQUIRE(r.backbone.hidden_dim == m.backbone.hidden_dim);
  REQUIRE(r.backbone.n_blocks == m.backbone.n_blocks);
  REQUIRE(r.backbone.long_skips == m.backbone.long_skips);
  REQUIRE(r.noise.has_value());
  REQUIRE(r.noise->d_noise == m.noise->d_noise);
  REQUIRE(r.noise->init_scale == m.noise->init_scale);
  REQUIRE(r.noise->use_delta_gate == m.noise->use_delta_gate);
  REQUIRE(r.stats.mean == m.stats.mean);
  REQUIRE(r.stats.stddev == m.stats.stddev);
  REQUIRE(r.config_hash == m.config_hash);
}

TEST_CASE("loaded checkpoint reproduces the forward pass") {
  const ModelBundle m = noisy_model(11);
  TempFile tmp("forward");
  save_checkpoint(m, tmp.path);
  const ModelBundle r = load_checkpoint(tmp.path);

  RngStream rng(321);
  std::vector<double> in(4 * 8 * 4);
  for (double& v : in) v = rng.normal();
  const Tensor x = Tensor::from_data({4, 8, 4}, in);
  const Tensor eps = sample_noise_eps(4, m.noise->d_noise, 17);
  NoGradGuard ng;
  const Tensor a = forward_modulated(m, x, eps);
  const Tensor b = forward_modulated(r, x, eps);
  REQUIRE(a.data() == b.data());
}

TEST_CASE("deterministic checkpoint omits the noise branch") {
  const ModelBundle det = init_backbone(small_backbone(), small_stats(), 3);
  TempFile tmp("det");
  save_checkpoint(det, tmp.path);
  const ModelBundle r = load_checkpoint(tmp.path);
  REQUIRE_FALSE(r.noise.has_value());
  REQUIRE(r.params.size() == det.params.size());
  for (std::size_t i = 0; i < det.params.size(); ++i)
    REQUIRE(r.params.at(i).data() == det.params.at(i).data());
}

TEST_CASE("corrupt magic is rejected") {
  const ModelBundle m = noisy_model(5);
  TempFile tmp("magic");
  save_checkpoint(m, tmp.path);
  std::vector<char> bytes = slurp(tmp.path);
  bytes[0] = 'X';
  spit(tmp.path, bytes);
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path), IoError);
}

TEST_CASE("truncated file is rejected") {
  const ModelBundle m = noisy_model(5);
  TempFile tmp("trunc");
  save_checkpoint(m, tmp.path);
  std::vector<char> bytes = slurp(tmp.path);
  bytes.resize(bytes.size() - 16);
  spit(tmp.path, bytes);
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path), IoError);
}

TEST_CASE("trailing bytes are rejected") {
  const ModelBundle m = noisy_model(5);
  TempFile tmp("tail");
  save_checkpoint(m, tmp.path);
  std::vector<char> bytes = slurp(tmp.path);
  bytes.push_back('\0');
  spit(tmp.path, bytes);
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path), IoError);
}

TEST_CASE("shape mismatch is rejected") {
  const ModelBundle m = noisy_model(5);
  TempFile tmp("shape");
  save_checkpoint(m, tmp.path);
  std::vector<char> bytes = slurp(tmp.path);
  // first extent sits right after the parameter name and its u32 rank
  const std::size_t pos = find_bytes(bytes, "encoder.weight");
  const std::size_t extent_at = pos + std::string("encoder.weight").size() + 4;
  const std::uint64_t wrong = 9999;
  std::memcpy(bytes.data() + extent_at, &wrong, sizeof wrong);
  spit(tmp.path, bytes);
  REQUIRE_THROWS_WITH(load_checkpoint(tmp.path),
                      Catch::Matchers::ContainsSubstring("encoder.weight"));
}

TEST_CASE("unknown parameter name is rejected") {
  const ModelBundle m = noisy_model(5);
  TempFile tmp("name");
  save_checkpoint(m, tmp.path);
  std::vector<char> bytes = slurp(tmp.path);
  const std::size_t pos = find_bytes(bytes, "encoder.bias");
  bytes[pos] = 'q';
  spit(tmp.path, bytes);
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path), IoError);
}

TEST_CASE("non-finite payload is rejected") {
  const ModelBundle m = noisy_model(5);
  TempFile tmp("nan");
  save_checkpoint(m, tmp.path);
  std::vector<char> bytes = slurp(tmp.path);
  const std::size_t pos = find_bytes(bytes, "encoder.weight");
  const std::size_t payload_at =
      pos + std::string("encoder.weight").size() + 4 + 2 * 8;
  const double bad = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(bytes.data() + payload_at, &bad, sizeof bad);
  spit(tmp.path, bytes);
  REQUIRE_THROWS_AS(load_checkpoint(tmp.path), NumericError);
}

TEST_CASE("missing file reports an I/O error") {
  REQUIRE_THROWS_AS(load_checkpoint("no_such_checkpoint_anywhere.bin"),
                    IoError);
}
