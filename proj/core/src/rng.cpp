#include "decontext/rng.hpp"

#include <cmath>
#include <numbers>

#include "decontext/errors.hpp"

namespace decontext {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::string_view tag, std::uint64_t counter)
    : seed_(seed), tag_(tag), key_(mix64(seed ^ mix64(fnv1a(tag)))), counter_(counter) {}

std::uint64_t Rng::next_u64() {
  return mix64(key_ + 0x9e3779b97f4a7c15ULL * (counter_++ + 1));
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t lo, std::uint64_t hi) {
  if (hi < lo) throw RangeError("uniform_int: empty range");
  const std::uint64_t span = hi - lo;
  if (span == ~std::uint64_t{0}) return next_u64();
  const unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * (span + 1);
  return lo + static_cast<std::uint64_t>(wide >> 64);
}

double Rng::normal() {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor Rng::normal_tensor(const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<float>(normal());
  return t;
}

TensorD Rng::normal_tensor_d(const Shape& shape) {
  TensorD t(shape);
  for (auto& v : t.data()) v = normal();
  return t;
}

Rng Rng::derive(std::string_view sub) const {
  return Rng(seed_, tag_ + "/" + std::string(sub));
}

Rng Rng::derive(std::string_view sub, std::uint64_t index) const {
  return Rng(seed_, tag_ + "/" + std::string(sub) + "#" + std::to_string(index));
}

}  // namespace decontext
