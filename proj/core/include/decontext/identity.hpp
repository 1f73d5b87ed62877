#pragma once

#include <array>
#include <optional>

#include "decontext/dataset.hpp"
#include "decontext/tensor.hpp"

namespace decontext {

inline constexpr std::size_t kHueBins = 16;
inline constexpr std::size_t kMaskSide = 8;
inline constexpr std::size_t kDescriptorSize = kHueBins + kMaskSide * kMaskSide;

/// Colour histogram over hue bins of foreground pixels followed by a pooled
/// foreground mask. Each half is L2-normalised (or left zero when empty) and
/// the whole vector is scaled by 1/sqrt(2), so non-degenerate descriptors are
/// unit length.
using Descriptor = std::array<double, kDescriptorSize>;

/// A pixel is foreground when its HSV saturation >= 0.5 and value >= 0.3.
bool is_foreground(float r, float g, float b);
Descriptor describe(const Tensor& image);
/// Cosine of two descriptors; 0 when either is all zero.
double descriptor_similarity(const Descriptor& a, const Descriptor& b);
double identity_similarity(const Tensor& a, const Tensor& b);

/// Nearest palette (dominant hue bin) and shape (closest mask template).
/// Returns nullopt when the image has no foreground.
std::optional<Identity> analyze(const Tensor& image);

struct IdentityReport {
  double similarity = 0.0;
  bool analyzer_match = false;
  double pixel_mse = 0.0;
  double linf_budget_used = 0.0;
};

/// Compares a generation against the clean context. `perturbed`, when given,
/// is the protected context actually fed to the model; its distance from the
/// clean context is reported as the budget used.
IdentityReport identity_report(const Tensor& generated, const Tensor& context_clean,
                               const Tensor* perturbed = nullptr);

}  // namespace decontext
