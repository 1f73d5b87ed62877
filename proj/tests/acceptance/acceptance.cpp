// End-to-end acceptance run: trains the default model once, then checks every
// acceptance criterion against it and prints one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "commands.hpp"
#include "decontext/analysis.hpp"
#include "decontext/attack.hpp"
#include "decontext/errors.hpp"
#include "decontext/io.hpp"
#include "decontext/trainer.hpp"
#include "random_graph.hpp"

using namespace decontext;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& detail) {
  verdicts.push_back({id, pass, detail});
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

template <typename... Args>
std::string format(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// Identities used by the attack comparisons: every held-out identity plus
// training identities until there are `n`.
std::vector<Identity> attack_identities(std::size_t n) {
  auto ids = held_out_identities();
  for (const auto& id : training_identities()) {
    if (ids.size() >= n) break;
    if (id.shape % 2 == 0 && id.palette % 3 == 1) ids.push_back(id);
  }
  for (const auto& id : training_identities()) {
    if (ids.size() >= n) break;
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
  }
  ids.resize(n);
  return ids;
}

constexpr std::size_t kEvalPrompts[] = {0, 17, 33, 51};
constexpr int kSampleSteps = 20;

// Mean identity similarity (and analyzer match rate) of generations from
// `context` against the clean rendering, over the evaluation prompts.
std::pair<double, double> generation_identity(Model& model, const Tensor& context, const Tensor& clean,
                                              std::uint64_t seed) {
  double sim = 0.0, match = 0.0;
  for (std::size_t i = 0; i < std::size(kEvalPrompts); ++i) {
    Rng rng = Rng(seed, "acceptance/sample").derive("prompt", i);
    const auto r = identity_report(sample(model, context, kEvalPrompts[i], kSampleSteps, rng, false), clean);
    sim += r.similarity;
    match += r.analyzer_match;
  }
  const double n = static_cast<double>(std::size(kEvalPrompts));
  return {sim / n, match / n};
}

// Every pixel of every iterate stays inside the budget and [0, 1].
struct BudgetAudit {
  std::uint64_t steps = 0, pixels = 0, violations = 0;

  AttackProgress watch(double eta) {
    return [this, eta](const PerturbationState& s) {
      ++steps;
      for (std::size_t i = 0; i < s.x_adv.numel(); ++i) {
        const double a = s.x_adv[i], c = s.x_clean[i];
        ++pixels;
        if (!(std::abs(a - c) <= eta && a >= 0.0 && a <= 1.0)) ++violations;
      }
    };
  }
};

double scan_mean(const Model& model, const Tensor& image, const AttackConfig& ac, std::size_t draws) {
  std::vector<BlockScan> scans;
  Rng rng(11, "acceptance/scan");
  for (std::size_t d = 0; d < draws; ++d) {
    const int t = ac.t_low + static_cast<int>(d) * (ac.t_high - ac.t_low) / static_cast<int>(std::max<std::size_t>(1, draws - 1));
    scans.push_back(blockwise_ctx_scan(model, image, kEvalPrompts[d % std::size(kEvalPrompts)], t, rng));
  }
  return mean_r_ctx(average_scans(scans));
}

// ---- criteria ---------------------------------------------------------------------

void criterion_autodiff() {
  const auto t0 = Clock::now();
  Rng rng(2024, "acceptance/autodiff");
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Rng r = rng.derive("graph", static_cast<std::uint64_t>(i));
    decontext::testing::CompositeGraph graph(r);
    GraphFunction<double> f = [&graph](Graph<double>& g, VarD x) { return graph(g, x); };
    worst = std::max(worst, finite_diff_check(f, decontext::testing::random_tensor(r, graph.input_shape()), 1e-5));
  }
  const double secs = seconds_since(t0);
  report(1, worst < 1e-3 && secs < 60.0, format("max rel err %.3g over 100 graphs (< 1e-3), %.1f s (< 60)", worst, secs));
}

void criterion_intervention(Model& model) {
  const auto t0 = Clock::now();
  const auto ids = all_identities();
  Rng rng(7, "acceptance/intervention");
  double severed = 0.0, connected = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& a = ids[rng.uniform_int(0, ids.size() - 1)];
    auto b = ids[rng.uniform_int(0, ids.size() - 1)];
    if (b == a) b = ids[(i * 37 + 5) % ids.size()];
    const Tensor z = rng.normal_tensor({3, 16, 16});
    const int t = static_cast<int>(rng.uniform_int(0, 1000));
    const std::size_t prompt = rng.uniform_int(0, kPrompts - 1);
    const Tensor ca = render_context(a), cb = render_context(b);
    auto va = forward_velocity(model, z, t, ca, prompt, false, true).velocity;
    auto vb = forward_velocity(model, z, t, cb, prompt, false, true).velocity;
    for (std::size_t k = 0; k < va.numel(); ++k) severed = std::max(severed, static_cast<double>(std::abs(va[k] - vb[k])));
    auto wa = forward_velocity(model, z, t, ca, prompt, false, false).velocity;
    auto wb = forward_velocity(model, z, t, cb, prompt, false, false).velocity;
    double l2 = 0.0;
    for (std::size_t k = 0; k < wa.numel(); ++k) l2 += (wa[k] - wb[k]) * (wa[k] - wb[k]);
    connected = i == 0 ? std::sqrt(l2) : std::min(connected, std::sqrt(l2));
  }
  const double secs = seconds_since(t0);
  report(2, severed < 1e-5 && connected > 0.0 && secs < 60.0,
         format("severed max diff %.3g (< 1e-5), connected min L2 %.3g (> 0), %.1f s", severed, connected, secs));
}

void criterion_training(Model& model, double train_secs) {
  double sim = 0.0, match = 0.0;
  const auto held = held_out_identities();
  for (std::size_t i = 0; i < held.size(); ++i) {
    const Tensor ctx = render_context(held[i]);
    const auto [s, m] = generation_identity(model, ctx, ctx, 100 + i);
    sim += s;
    match += m;
  }
  sim /= static_cast<double>(held.size());
  match /= static_cast<double>(held.size());
  report(3, sim > 0.8 && match > 0.9 && train_secs <= 1800.0,
         format("held-out similarity %.4f (> 0.8), match rate %.4f (> 0.9), %zu generations, train %.0f s (<= 1800)",
                sim, match, held.size() * std::size(kEvalPrompts), train_secs));
}

void criterion_gradients(const Model& model) {
  const auto t0 = Clock::now();
  std::vector<Tensor> images;
  const auto held = held_out_identities();
  for (std::size_t i = 0; i < 8; ++i) images.push_back(render_context(held[i]));
  const auto profile = timestep_gradient_profile(model, images, timestep_grid(1000, 50), 0, {0, false});
  const double hi = gradient_ratio(profile, 900, 1000), lo = gradient_ratio(profile, 0, 100);
  const double secs = seconds_since(t0);
  report(4, hi >= 1.5 * lo && secs < 300.0,
         format("g_ctx/g_tgt high-t %.4f vs low-t %.4f, factor %.3f (>= 1.5), 8 samples, %.1f s", hi, lo, hi / lo, secs));
}

struct AttackComparison {
  double r_clean = 0.0, r_attacked = 0.0;
  double sim_decontext = 0.0, sim_diffpgd = 0.0, sim_clean = 0.0;
  double decontext_secs = 0.0, total_secs = 0.0;
};

AttackComparison compare_attacks(Model& model, const std::vector<Identity>& ids, BudgetAudit& audit) {
  AttackComparison out;
  const auto t0 = Clock::now();
  AttackConfig ac;
  const AttackConfig resolved = ac.resolved(model.config());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor clean = render_context(ids[i]);
    ac.seed = i;

    const auto td = Clock::now();
    const auto dec = decontext_attack(model, clean, ac, audit.watch(ac.eta));
    const Tensor dec_img = quantize_within_budget(dec.x_adv, clean, ac.eta);
    out.decontext_secs += seconds_since(td);
    out.r_clean += scan_mean(model, clean, resolved, 8);
    out.r_attacked += scan_mean(model, dec_img, resolved, 8);

    const auto pgd = diffpgd_attack(model, clean, ac, PgdMode::kUntargeted, std::nullopt, audit.watch(ac.eta));
    const Tensor pgd_img = quantize_within_budget(pgd.x_adv, clean, ac.eta);

    out.sim_clean += generation_identity(model, clean, clean, 500 + i).first;
    out.sim_decontext += generation_identity(model, dec_img, clean, 500 + i).first;
    out.sim_diffpgd += generation_identity(model, pgd_img, clean, 500 + i).first;
    std::printf("  identity (%zu,%zu): r_ctx %.4f -> %.4f, similarity clean %.4f decontext %.4f diffpgd %.4f\n",
                ids[i].palette, ids[i].shape, out.r_clean / static_cast<double>(i + 1),
                out.r_attacked / static_cast<double>(i + 1), out.sim_clean / static_cast<double>(i + 1),
                out.sim_decontext / static_cast<double>(i + 1), out.sim_diffpgd / static_cast<double>(i + 1));
    std::fflush(stdout);
  }
  const double n = static_cast<double>(ids.size());
  out.r_clean /= n;
  out.r_attacked /= n;
  out.sim_clean /= n;
  out.sim_decontext /= n;
  out.sim_diffpgd /= n;
  out.total_secs = seconds_since(t0);
  return out;
}

void criterion_budget_ablation(Model& model, BudgetAudit& audit) {
  const auto ids = attack_identities(8);
  std::vector<double> sims;
  std::string detail;
  for (double eta : {0.05, 0.10, 0.15}) {
    AttackConfig ac;
    ac.eta = eta;
    ac.seed = 77;
    double sim = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Tensor clean = render_context(ids[i]);
      const auto st = decontext_attack(model, clean, ac, audit.watch(eta));
      sim += generation_identity(model, quantize_within_budget(st.x_adv, clean, eta), clean, 900 + i).first;
    }
    sims.push_back(sim / static_cast<double>(ids.size()));
    detail += format("eta %.2f: %.4f  ", eta, sims.back());
  }
  report(7, sims[1] <= sims[0] && sims[2] <= sims[1], detail + "(non-increasing, 8 identities, seed 77)");
}

void criterion_unbiasedness(const Model& model) {
  const Tensor x = render_context({4, 3});
  AttackConfig ac;
  ac.seed = 5;
  const double d50 = mc_gradient_unbiasedness(model, x, ac, 50, true);
  const double d500 = mc_gradient_unbiasedness(model, x, ac, 500, true);
  report(9, d500 < 0.6 * d50, format("deviation n=500 %.4g vs n=50 %.4g, ratio %.3f (< 0.6)", d500, d50, d500 / d50));
}

// Not numbered criteria: the loss trend over 100-step windows and the
// held-out loss reduction against the untrained initialisation.
void training_notes(const TrainConfig& tc) {
  std::ifstream in(tc.log_path);
  std::string line;
  std::getline(in, line);
  std::vector<double> windows;
  double acc = 0.0;
  int n = 0;
  while (std::getline(in, line)) {
    acc += std::stod(line.substr(line.find(',') + 1));
    if (++n == 100) {
      windows.push_back(acc / n);
      acc = 0.0;
      n = 0;
    }
  }
  int rises = 0;
  for (std::size_t i = 1; i < windows.size(); ++i) rises += windows[i] > windows[i - 1];
  std::printf("  note: %zu 100-step windows, first %.4f last %.4f, %d rises between adjacent windows\n", windows.size(),
              windows.front(), windows.back(), rises);
  Model initial = Model::initialized(tc.model, tc.seed);
  Model trained = Checkpoint::load(tc.checkpoint_path).to_model();
  const auto held = held_out_identities();
  const double before = mean_flow_loss(initial, held, 32, 1), after = mean_flow_loss(trained, held, 32, 1);
  std::printf("  note: held-out flow loss %.4f -> %.4f (%.1fx lower)\n", before, after, before / after);
}

// ---- determinism ------------------------------------------------------------------

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") out.push_back(fs::relative(e.path(), dir));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void criterion_determinism(const fs::path& work, const fs::path& checkpoint) {
  const fs::path root = work / "replay";
  fs::remove_all(root);
  std::ostringstream sink;
  const auto image = root / "ctx.ppm";
  fs::create_directories(root);
  write_ppm(image, render_context({6, 1}));

  std::vector<std::pair<std::string, Json>> runs{
      {"train", Json{{"steps", 4}, {"batch", 2}, {"seed", 3}, {"output_dir", (root / "train").string()}}},
      {"attack", Json{{"checkpoint", checkpoint.string()}, {"image", image.string()}, {"steps", 6},
                      {"output_dir", (root / "attack").string()}}},
      {"attack", Json{{"checkpoint", checkpoint.string()}, {"image", image.string()}, {"steps", 6},
                      {"method", "diffpgd"}, {"output_dir", (root / "pgd").string()}}},
      {"grad-profile", Json{{"checkpoint", checkpoint.string()}, {"samples", 2}, {"t_step", 250},
                            {"output_dir", (root / "profile").string()}}},
      {"block-scan", Json{{"checkpoint", checkpoint.string()}, {"image", image.string()},
                          {"attacked", (root / "attack" / "adv.ppm").string()}, {"draws", 2},
                          {"output_dir", (root / "scan").string()}}},
      {"sample", Json{{"checkpoint", checkpoint.string()}, {"context", image.string()}, {"steps", 5},
                      {"output_dir", (root / "sample").string()}}},
      {"identity", Json{{"generated", (root / "sample" / "sample.ppm").string()}, {"context", image.string()},
                        {"perturbed", (root / "attack" / "adv.ppm").string()},
                        {"output_dir", (root / "identity").string()}}},
  };
  std::size_t compared = 0, differing = 0;
  std::string first_diff;
  for (const auto& [command, config] : runs) {
    const fs::path dir = config.at("output_dir").get<std::string>();
    cli::run_command(command, config, sink);
    const fs::path again = dir.string() + "_replay";
    cli::replay(dir / "manifest.json", again, sink);
    const auto files = files_under(dir);
    if (files != files_under(again)) {
      ++differing;
      if (first_diff.empty()) first_diff = command + ": artifact sets differ";
      continue;
    }
    for (const auto& f : files) {
      ++compared;
      if (read_file(dir / f) != read_file(again / f)) {
        ++differing;
        if (first_diff.empty()) first_diff = (dir.filename() / f).string();
      }
    }
  }
  report(10, differing == 0 && compared > 0,
         format("%zu artifacts from %zu commands replayed, %zu differ%s%s", compared, runs.size(), differing,
                first_diff.empty() ? "" : ", first: ", first_diff.c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string work = "acceptance_work";
  std::string reuse;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--checkpoint", reuse, "Skip training and use this checkpoint (criterion 3 then reports no runtime)");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(work);
    const auto t_all = Clock::now();
    criterion_autodiff();

    fs::path checkpoint = reuse;
    double train_secs = 0.0;
    if (reuse.empty()) {
      TrainConfig tc;
      checkpoint = fs::absolute(work) / "checkpoint";
      tc.checkpoint_path = checkpoint;
      tc.log_path = fs::path(work) / "train_log.csv";
      const auto t0 = Clock::now();
      train(tc, [&](const TrainStep& s) {
        if (s.step % 500 == 0) {
          std::printf("  train step %llu loss %.5f\n", static_cast<unsigned long long>(s.step), s.loss);
          std::fflush(stdout);
        }
      });
      train_secs = seconds_since(t0);
      training_notes(tc);
    }
    Model model = Checkpoint::load(checkpoint).to_model();
    model.set_requires_grad(false);

    criterion_intervention(model);
    criterion_training(model, train_secs);
    criterion_gradients(model);

    BudgetAudit audit;
    const auto cmp = compare_attacks(model, attack_identities(20), audit);
    report(5, cmp.r_attacked <= 0.5 * cmp.r_clean && cmp.decontext_secs <= 1200.0,
           format("mean per-block r_ctx attacked %.4f vs clean %.4f, ratio %.3f (<= 0.5), decontext time %.0f s",
                  cmp.r_attacked, cmp.r_clean, cmp.r_attacked / cmp.r_clean, cmp.decontext_secs));
    report(6, cmp.sim_decontext < cmp.sim_diffpgd && cmp.total_secs <= 2400.0,
           format("identity similarity decontext %.4f vs diffpgd %.4f (strictly lower), clean %.4f, 20 identities, %.0f s",
                  cmp.sim_decontext, cmp.sim_diffpgd, cmp.sim_clean, cmp.total_secs));

    criterion_budget_ablation(model, audit);
    report(8, audit.violations == 0 && audit.steps > 0,
           format("%llu attack steps, %llu pixel checks, %llu violations", static_cast<unsigned long long>(audit.steps),
                  static_cast<unsigned long long>(audit.pixels), static_cast<unsigned long long>(audit.violations)));
    criterion_unbiasedness(model);
    criterion_determinism(fs::absolute(work), checkpoint);

    std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
    int failed = 0;
    std::printf("\nsummary (%.0f s):\n", seconds_since(t_all));
    for (const auto& v : verdicts) {
      std::printf("criterion %d: %s\n", v.id, v.pass ? "PASS" : "FAIL");
      failed += !v.pass;
    }
    return failed == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 2;
  }
}
