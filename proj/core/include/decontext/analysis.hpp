#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "decontext/identity.hpp"
#include "decontext/model.hpp"

namespace decontext {

struct GradientProfile {
  std::vector<int> timesteps;
  std::vector<double> g_tgt;
  std::vector<double> g_ctx;
  std::size_t n_samples = 0;
};

struct ProfileOptions {
  std::uint64_t seed = 0;
  bool zero_context = false;
};

/// Timesteps 0, step, 2 step, ..., T.
std::vector<int> timestep_grid(int timesteps, int step);

/// For every t, the flow loss with the target set equal to the context image
/// is differentiated with respect to the target and context tokens as they
/// enter the first block; the mean absolute gradient of each is averaged over
/// `images`.
GradientProfile timestep_gradient_profile(const Model& model, const std::vector<Tensor>& images,
                                          const std::vector<int>& timesteps, std::size_t prompt_id,
                                          const ProfileOptions& options = {});

/// Mean of g_ctx / g_tgt over the profile rows with t in [lo, hi].
double gradient_ratio(const GradientProfile& profile, int lo, int hi);

struct BlockScan {
  std::vector<std::size_t> block_ids;
  std::vector<BlockKind> kinds;
  std::vector<double> r_ctx;
  std::vector<double> text_share;    // target-query mass on text keys
  std::vector<double> target_share;  // target-query mass on target keys
  std::string condition = "clean";
};

/// Per-block context proportion from one recorded forward pass whose noisy
/// latent is built from a Gaussian stand-in drawn from `rng`.
BlockScan blockwise_ctx_scan(const Model& model, const Tensor& image, std::size_t prompt_id, int t, Rng& rng,
                             const std::string& condition = "clean");
BlockScan scan_from_records(const std::vector<AttentionRecord>& records, const std::string& condition);
/// Element-wise mean of scans over the same blocks.
BlockScan average_scans(const std::vector<BlockScan>& scans);
double mean_r_ctx(const BlockScan& scan);

struct ReportRow {
  std::string run;
  IdentityReport report;
};

void export_csv(const GradientProfile& profile, const std::filesystem::path& path);
void export_csv(const std::vector<BlockScan>& scans, const std::filesystem::path& path);
void export_csv(const std::vector<ReportRow>& reports, const std::filesystem::path& path);

/// gnuplot script drawing a profile CSV (g_ctx / g_tgt against t).
std::string gnuplot_profile_script(const std::filesystem::path& csv, const std::filesystem::path& png);
/// gnuplot script drawing one line per block-scan CSV.
std::string gnuplot_scan_script(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& png);

}  // namespace decontext
