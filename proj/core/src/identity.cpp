#include "decontext/identity.hpp"

#include <algorithm>
#include <cmath>

#include "decontext/errors.hpp"

namespace decontext {

namespace {

void check_image(const Tensor& image) {
  if (image.shape() != Shape{3, kImageSide, kImageSide}) {
    throw ShapeError("identity metrics expect [3, 16, 16] images, got " + shape_to_string(image.shape()));
  }
}

double hue_degrees(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double c = mx - mn;
  if (c <= 0.0) return 0.0;
  double h;
  if (mx == r) {
    h = std::fmod((g - b) / c, 6.0);
  } else if (mx == g) {
    h = (b - r) / c + 2.0;
  } else {
    h = (r - g) / c + 4.0;
  }
  h *= 60.0;
  return h < 0.0 ? h + 360.0 : h;
}

template <std::size_t N>
void normalize(double* v) {
  double n = 0.0;
  for (std::size_t i = 0; i < N; ++i) n += v[i] * v[i];
  if (n <= 0.0) return;
  n = std::sqrt(n);
  for (std::size_t i = 0; i < N; ++i) v[i] /= n;
}

using Mask = std::array<double, kMaskSide * kMaskSide>;

Mask pooled_shape(std::size_t shape) {
  Mask m{};
  const std::size_t f = kImageSide / kMaskSide;
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      if (shape_covers(shape, y, x)) m[(y / f) * kMaskSide + x / f] += 1.0;
    }
  }
  normalize<kMaskSide * kMaskSide>(m.data());
  return m;
}

const std::array<Mask, kShapes>& shape_templates() {
  static const auto templates = [] {
    std::array<Mask, kShapes> t;
    for (std::size_t s = 0; s < kShapes; ++s) t[s] = pooled_shape(s);
    return t;
  }();
  return templates;
}

}  // namespace

bool is_foreground(float r, float g, float b) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  if (mx < 0.3f) return false;
  return (mx - mn) >= 0.5f * mx;
}

Descriptor describe(const Tensor& image) {
  check_image(image);
  Descriptor d{};
  const auto px = image.data();
  const std::size_t plane = kImageSide * kImageSide;
  const std::size_t f = kImageSide / kMaskSide;
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      const std::size_t i = y * kImageSide + x;
      const float r = std::clamp(px[i], 0.0f, 1.0f);
      const float g = std::clamp(px[plane + i], 0.0f, 1.0f);
      const float b = std::clamp(px[2 * plane + i], 0.0f, 1.0f);
      if (!is_foreground(r, g, b)) continue;
      const double h = hue_degrees(r, g, b);
      const auto bin = std::min(kHueBins - 1, static_cast<std::size_t>(h / (360.0 / kHueBins)));
      d[bin] += 1.0;
      d[kHueBins + (y / f) * kMaskSide + x / f] += 1.0;
    }
  }
  normalize<kHueBins>(d.data());
  normalize<kMaskSide * kMaskSide>(d.data() + kHueBins);
  for (auto& v : d) v /= std::sqrt(2.0);
  return d;
}

double descriptor_similarity(const Descriptor& a, const Descriptor& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa <= 0.0 || bb <= 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double identity_similarity(const Tensor& a, const Tensor& b) {
  return descriptor_similarity(describe(a), describe(b));
}

std::optional<Identity> analyze(const Tensor& image) {
  const auto d = describe(image);
  const auto hue_end = d.begin() + kHueBins;
  const auto top = std::max_element(d.begin(), hue_end);
  if (*top <= 0.0) return std::nullopt;
  Identity id;
  id.palette = static_cast<std::size_t>(top - d.begin());
  double best = -1.0;
  const auto& templates = shape_templates();
  for (std::size_t s = 0; s < kShapes; ++s) {
    double dot = 0.0;
    for (std::size_t i = 0; i < templates[s].size(); ++i) dot += templates[s][i] * d[kHueBins + i];
    if (dot > best) {
      best = dot;
      id.shape = s;
    }
  }
  return id;
}

IdentityReport identity_report(const Tensor& generated, const Tensor& context_clean, const Tensor* perturbed) {
  check_image(generated);
  check_image(context_clean);
  IdentityReport r;
  r.similarity = identity_similarity(generated, context_clean);
  const auto a = analyze(generated);
  const auto b = analyze(context_clean);
  r.analyzer_match = a && b && *a == *b;
  double se = 0.0;
  for (std::size_t i = 0; i < generated.numel(); ++i) {
    const double diff = static_cast<double>(generated[i]) - context_clean[i];
    se += diff * diff;
  }
  r.pixel_mse = se / static_cast<double>(generated.numel());
  if (perturbed) {
    check_image(*perturbed);
    for (std::size_t i = 0; i < perturbed->numel(); ++i) {
      r.linf_budget_used =
          std::max(r.linf_budget_used, std::abs(static_cast<double>((*perturbed)[i]) - context_clean[i]));
    }
  }
  return r;
}

}  // namespace decontext
