#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "decontext/model.hpp"
#include "decontext/rng.hpp"

namespace decontext::testing {

inline Tensor uniform_image(Rng& rng, std::size_t side = 16) {
  Tensor t({3, side, side});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}

// Small model for tests that run many forward passes.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.heads = 2;
  c.double_blocks = 1;
  c.single_blocks = 2;
  c.image_side = 8;
  c.text_tokens = 4;
  c.vocab = 60;
  return c;
}

// Fresh, empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "decontext-tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace decontext::testing
