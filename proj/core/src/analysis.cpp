#include "decontext/analysis.hpp"

#include <cmath>
#include <sstream>

#include "decontext/attack.hpp"
#include "decontext/errors.hpp"
#include "decontext/io.hpp"
#include "decontext/trainer.hpp"

namespace decontext {

std::vector<int> timestep_grid(int timesteps, int step) {
  if (timesteps < 1 || step < 1) throw RangeError("timestep grid needs positive T and step");
  std::vector<int> out;
  for (int t = 0; t < timesteps; t += step) out.push_back(t);
  out.push_back(timesteps);
  return out;
}

namespace {

double mean_abs(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += std::abs(static_cast<double>(x));
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

GradientProfile timestep_gradient_profile(const Model& model, const std::vector<Tensor>& images,
                                          const std::vector<int>& timesteps, std::size_t prompt_id,
                                          const ProfileOptions& options) {
  if (images.empty()) throw RangeError("gradient profile needs at least one image");
  if (timesteps.empty()) throw RangeError("gradient profile needs at least one timestep");
  Model frozen = model;
  frozen.set_requires_grad(false);

  GradientProfile p;
  p.timesteps = timesteps;
  p.n_samples = images.size();
  p.g_tgt.assign(timesteps.size(), 0.0);
  p.g_ctx.assign(timesteps.size(), 0.0);
  const Rng base(options.seed, "analysis/profile");
  for (std::size_t s = 0; s < images.size(); ++s) {
    // One noise draw per sample, shared across timesteps.
    const Tensor noise = base.derive("noise", s).normal_tensor(frozen.config().image_shape());
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
      const int t = timesteps[i];
      Tensor z = noisy_latent(images[s], noise, t, frozen.config().timesteps);
      Tensor ctx = images[s];
      z.set_requires_grad(true);
      ctx.set_requires_grad(true);
      Graph<float> g;
      ForwardOptions opts;
      opts.zero_context = options.zero_context;
      auto res = frozen.forward(g, g.input(z), t, g.input(ctx), prompt_id, opts);
      g.backward(flow_matching_loss(res.velocity, images[s], noise));
      p.g_tgt[i] += mean_abs(g.grad(res.target_tokens));
      p.g_ctx[i] += mean_abs(g.grad(res.context_tokens));
    }
  }
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    p.g_tgt[i] /= static_cast<double>(images.size());
    p.g_ctx[i] /= static_cast<double>(images.size());
  }
  return p;
}

double gradient_ratio(const GradientProfile& profile, int lo, int hi) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < profile.timesteps.size(); ++i) {
    const int t = profile.timesteps[i];
    if (t < lo || t > hi) continue;
    if (profile.g_tgt[i] <= 0.0) throw RangeError("zero target gradient at t=" + std::to_string(t));
    total += profile.g_ctx[i] / profile.g_tgt[i];
    ++n;
  }
  if (n == 0) throw RangeError("no profile rows in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return total / static_cast<double>(n);
}

BlockScan scan_from_records(const std::vector<AttentionRecord>& records, const std::string& condition) {
  BlockScan scan;
  scan.condition = condition;
  for (const auto& r : records) {
    const auto p = segment_proportions(r);
    scan.block_ids.push_back(r.block_id);
    scan.kinds.push_back(r.kind);
    scan.r_ctx.push_back(p.context);
    scan.text_share.push_back(p.text);
    scan.target_share.push_back(p.target);
  }
  return scan;
}

BlockScan blockwise_ctx_scan(const Model& model, const Tensor& image, std::size_t prompt_id, int t, Rng& rng,
                             const std::string& condition) {
  Model frozen = model;
  frozen.set_requires_grad(false);
  const auto shape = frozen.config().image_shape();
  AttackDraw draw;
  draw.t = t;
  draw.prompt = prompt_id;
  draw.stand_in = rng.normal_tensor(shape);
  draw.noise = rng.normal_tensor(shape);
  const auto z_t = stand_in_latent(draw, frozen.config().timesteps);
  auto res = forward_velocity(frozen, z_t, t, image, prompt_id, true, false);
  return scan_from_records(res.records, condition);
}

BlockScan average_scans(const std::vector<BlockScan>& scans) {
  if (scans.empty()) throw RangeError("average_scans needs at least one scan");
  BlockScan out = scans.front();
  for (std::size_t s = 1; s < scans.size(); ++s) {
    if (scans[s].block_ids != out.block_ids) throw ShapeError("average_scans: scans cover different blocks");
    for (std::size_t b = 0; b < out.r_ctx.size(); ++b) {
      out.r_ctx[b] += scans[s].r_ctx[b];
      out.text_share[b] += scans[s].text_share[b];
      out.target_share[b] += scans[s].target_share[b];
    }
  }
  const double n = static_cast<double>(scans.size());
  for (std::size_t b = 0; b < out.r_ctx.size(); ++b) {
    out.r_ctx[b] /= n;
    out.text_share[b] /= n;
    out.target_share[b] /= n;
  }
  return out;
}

double mean_r_ctx(const BlockScan& scan) {
  if (scan.r_ctx.empty()) throw RangeError("empty block scan");
  double s = 0.0;
  for (double v : scan.r_ctx) s += v;
  return s / static_cast<double>(scan.r_ctx.size());
}

// ---- CSV -----------------------------------------------------------------------------

namespace {

std::ostringstream csv_stream() {
  std::ostringstream os;
  os.precision(9);
  return os;
}

}  // namespace

void export_csv(const GradientProfile& profile, const std::filesystem::path& path) {
  auto os = csv_stream();
  os << "t,g_tgt,g_ctx\n";
  for (std::size_t i = 0; i < profile.timesteps.size(); ++i) {
    os << profile.timesteps[i] << ',' << profile.g_tgt[i] << ',' << profile.g_ctx[i] << '\n';
  }
  write_text(path, os.str());
}

void export_csv(const std::vector<BlockScan>& scans, const std::filesystem::path& path) {
  auto os = csv_stream();
  os << "block,kind,r_ctx,condition\n";
  for (const auto& scan : scans) {
    for (std::size_t b = 0; b < scan.block_ids.size(); ++b) {
      os << scan.block_ids[b] << ',' << block_kind_name(scan.kinds[b]) << ',' << scan.r_ctx[b] << ','
         << scan.condition << '\n';
    }
  }
  write_text(path, os.str());
}

void export_csv(const std::vector<ReportRow>& reports, const std::filesystem::path& path) {
  auto os = csv_stream();
  os << "run,similarity,match,mse,linf\n";
  for (const auto& row : reports) {
    os << row.run << ',' << row.report.similarity << ',' << (row.report.analyzer_match ? 1 : 0) << ','
       << row.report.pixel_mse << ',' << row.report.linf_budget_used << '\n';
  }
  write_text(path, os.str());
}

std::string gnuplot_profile_script(const std::filesystem::path& csv, const std::filesystem::path& png) {
  std::ostringstream os;
  os << "set datafile separator ','\n"
     << "set terminal pngcairo size 800,500\n"
     << "set output '" << png.string() << "'\n"
     << "set xlabel 'timestep t'\n"
     << "set ylabel 'mean |dL/dZ|'\n"
     << "set key top left\n"
     << "plot '" << csv.string() << "' using 1:2 every ::1 with linespoints title 'target tokens', \\\n"
     << "     '' using 1:3 every ::1 with linespoints title 'context tokens'\n";
  return os.str();
}

std::string gnuplot_scan_script(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& png) {
  std::ostringstream os;
  os << "set datafile separator ','\n"
     << "set terminal pngcairo size 800,500\n"
     << "set output '" << png.string() << "'\n"
     << "set xlabel 'block'\n"
     << "set ylabel 'r_ctx'\n"
     << "set yrange [0:1]\n"
     << "plot ";
  for (std::size_t i = 0; i < csvs.size(); ++i) {
    if (i) os << ", \\\n     ";
    os << "'" << csvs[i].string() << "' using 1:3 every ::1 with linespoints title '" << csvs[i].stem().string() << "'";
  }
  os << '\n';
  return os.str();
}

}  // namespace decontext
