#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "decontext/rng.hpp"
#include "decontext/tensor.hpp"

namespace decontext {

inline constexpr std::size_t kPalettes = 16;
inline constexpr std::size_t kShapes = 8;
inline constexpr std::size_t kPrompts = 60;
inline constexpr std::size_t kImageSide = 16;

struct Identity {
  std::size_t palette = 0;
  std::size_t shape = 0;

  bool operator==(const Identity&) const = default;
};

/// The deterministic edit a prompt applies to an identity.
/// Edits change the background, the foreground brightness and an optional
/// frame; hue and silhouette (the identity) are always preserved.
struct Edit {
  float background = 0.5f;  // neutral gray level
  float value = 1.0f;       // HSV value of the foreground
  int border = 0;           // 0 none, 1 white frame, 2 black frame
};

Edit edit_for_prompt(std::size_t prompt_id);

/// Foreground hue in degrees for a palette.
double palette_hue(std::size_t palette);
/// Shape membership at pixel (y, x) of a 16x16 canvas.
bool shape_covers(std::size_t shape, std::size_t y, std::size_t x);

/// Renders `identity` with `edit` as a [3, 16, 16] image in [0, 1].
Tensor render(const Identity& identity, const Edit& edit);
/// The unedited rendering used as the conditioning image.
Tensor render_context(const Identity& identity);

struct SyntheticSample {
  Identity identity;
  std::size_t prompt_id = 0;
  Tensor context_image;
  Tensor target_image;
};

struct SampleOptions {
  /// Adds uniform noise of this amplitude to both images (benign jitter).
  float jitter = 0.0f;
};

/// Throws RangeError for out-of-range ids. With jitter off the result is a
/// pure function of (identity, prompt_id) and `rng` is not consumed.
SyntheticSample gen_sample(const Identity& identity, std::size_t prompt_id, Rng& rng,
                           const SampleOptions& options = {});

/// Identities never shown during training.
bool is_held_out(const Identity& identity);
std::vector<Identity> training_identities();
std::vector<Identity> held_out_identities();
std::vector<Identity> all_identities();

}  // namespace decontext
