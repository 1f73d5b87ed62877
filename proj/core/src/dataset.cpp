#include "decontext/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "decontext/errors.hpp"

namespace decontext {

namespace {

constexpr std::array<float, 5> kBackgrounds = {0.5f, 0.3f, 0.7f, 0.15f, 0.85f};
constexpr std::array<float, 4> kValues = {1.0f, 0.85f, 0.7f, 0.55f};

void check_identity(const Identity& id) {
  if (id.palette >= kPalettes) throw RangeError("palette id " + std::to_string(id.palette) + " out of range");
  if (id.shape >= kShapes) throw RangeError("shape id " + std::to_string(id.shape) + " out of range");
}

std::array<float, 3> hsv_to_rgb(double hue, double sat, double val) {
  const double h = std::fmod(hue, 360.0) / 60.0;
  const double c = val * sat;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = val - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

}  // namespace

Edit edit_for_prompt(std::size_t prompt_id) {
  if (prompt_id >= kPrompts) throw RangeError("prompt id " + std::to_string(prompt_id) + " out of range");
  return Edit{kBackgrounds[prompt_id % 5], kValues[(prompt_id / 5) % 4], static_cast<int>(prompt_id / 20)};
}

double palette_hue(std::size_t palette) { return (static_cast<double>(palette) + 0.5) * 360.0 / kPalettes; }

bool shape_covers(std::size_t shape, std::size_t y, std::size_t x) {
  // Pixel centres relative to the canvas centre.
  const double dy = static_cast<double>(y) - 7.5;
  const double dx = static_cast<double>(x) - 7.5;
  const double ay = std::abs(dy), ax = std::abs(dx);
  const double r2 = dx * dx + dy * dy;
  switch (shape) {
    case 0: return ax < 5 && ay < 5;                          // square
    case 1: return r2 < 30.25;                                // disc
    case 2: return dy > -5.5 && dy < 5 && ax < (dy + 5.5) * 0.55;  // triangle
    case 3: return ax + ay < 6.5;                             // diamond
    case 4: return (ax < 2 && ay < 6) || (ay < 2 && ax < 6);  // plus
    case 5: return r2 < 36 && r2 > 9;                         // ring
    case 6: return ax < 6.5 && ay < 3;                        // wide bar
    case 7: return ax < 3 && ay < 6.5;                        // tall bar
    default: throw RangeError("shape id " + std::to_string(shape) + " out of range");
  }
}

Tensor render(const Identity& identity, const Edit& edit) {
  check_identity(identity);
  const auto fg = hsv_to_rgb(palette_hue(identity.palette), 1.0, edit.value);
  Tensor image(Shape{3, kImageSide, kImageSide});
  auto px = image.data();
  const std::size_t plane = kImageSide * kImageSide;
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      std::array<float, 3> rgb = {edit.background, edit.background, edit.background};
      const bool frame = y == 0 || x == 0 || y == kImageSide - 1 || x == kImageSide - 1;
      if (shape_covers(identity.shape, y, x)) {
        rgb = fg;
      } else if (frame && edit.border != 0) {
        const float v = edit.border == 1 ? 1.0f : 0.0f;
        rgb = {v, v, v};
      }
      for (std::size_t c = 0; c < 3; ++c) px[c * plane + y * kImageSide + x] = rgb[c];
    }
  }
  return image;
}

Tensor render_context(const Identity& identity) { return render(identity, Edit{}); }

SyntheticSample gen_sample(const Identity& identity, std::size_t prompt_id, Rng& rng, const SampleOptions& options) {
  check_identity(identity);
  SyntheticSample s{identity, prompt_id, render_context(identity), render(identity, edit_for_prompt(prompt_id))};
  if (options.jitter > 0.0f) {
    for (Tensor* img : {&s.context_image, &s.target_image}) {
      for (auto& v : img->data()) {
        const double u = rng.uniform() * 2.0 - 1.0;
        v = std::clamp(v + static_cast<float>(u) * options.jitter, 0.0f, 1.0f);
      }
    }
  }
  return s;
}

bool is_held_out(const Identity& identity) { return (identity.palette + identity.shape) % 8 == 0; }

std::vector<Identity> all_identities() {
  std::vector<Identity> out;
  for (std::size_t p = 0; p < kPalettes; ++p) {
    for (std::size_t s = 0; s < kShapes; ++s) out.push_back({p, s});
  }
  return out;
}

std::vector<Identity> training_identities() {
  auto all = all_identities();
  std::erase_if(all, is_held_out);
  return all;
}

std::vector<Identity> held_out_identities() {
  auto all = all_identities();
  std::erase_if(all, [](const Identity& id) { return !is_held_out(id); });
  return all;
}

}  // namespace decontext
