#include "commands.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "decontext/analysis.hpp"
#include "decontext/attack.hpp"
#include "decontext/errors.hpp"
#include "decontext/io.hpp"
#include "decontext/trainer.hpp"

namespace decontext::cli {

namespace {

namespace fs = std::filesystem;

// Typed access to one config object; unknown keys are rejected up front.
class Fields {
 public:
  Fields(const Json& obj, std::string where, std::initializer_list<std::string_view> allowed)
      : obj_(obj), where_(std::move(where)) {
    reject_unknown_keys(obj_, allowed, where_);
  }

  bool has(const char* key) const { return obj_.contains(key) && !obj_.at(key).is_null(); }

  template <typename T>
  T get(const char* key, T fallback) const {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const char* key) const {
    if (!has(key)) throw ConfigError(where_ + ": missing required key \"" + key + "\"");
    return convert<T>(key);
  }

  fs::path path(const char* key) const { return fs::absolute(require<std::string>(key)).lexically_normal(); }

 private:
  template <typename T>
  T convert(const char* key) const {
    try {
      return obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json& obj_;
  std::string where_;
};

fs::path prepare_output(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_manifest(const fs::path& dir, const std::string& command, const Json& resolved,
                    const std::vector<std::string>& artifacts) {
  Json m{{"format", "decontext-run"}, {"version", 1}, {"command", command}, {"config", resolved},
         {"artifacts", artifacts}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Model load_model(const fs::path& checkpoint) {
  Model m = Checkpoint::load(checkpoint).to_model();
  m.set_requires_grad(false);
  return m;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

Json load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---- train -------------------------------------------------------------------------

Json run_train(const Json& config, std::ostream& out) {
  Fields f(config, "train", {"seed", "steps", "batch", "learning_rate", "jitter", "model", "output_dir"});
  TrainConfig tc;
  tc.seed = f.get("seed", tc.seed);
  tc.steps = f.get("steps", tc.steps);
  tc.batch = f.get("batch", tc.batch);
  tc.learning_rate = f.get("learning_rate", tc.learning_rate);
  tc.jitter = f.get("jitter", tc.jitter);
  if (f.has("model")) tc.model = model_config_from_json(config.at("model"));
  const auto dir = f.path("output_dir");
  tc.validate();

  const Json resolved{{"seed", tc.seed},   {"steps", tc.steps},   {"batch", tc.batch},
                      {"learning_rate", tc.learning_rate},        {"jitter", tc.jitter},
                      {"model", model_config_to_json(tc.model)}, {"output_dir", dir.string()}};
  prepare_output(dir);
  tc.checkpoint_path = dir / "checkpoint";
  tc.log_path = dir / "train_log.csv";
  const std::uint64_t every = std::max<std::uint64_t>(1, tc.steps / 20);
  auto result = train(tc, [&](const TrainStep& s) {
    if (s.step % every == 0 || s.step == tc.steps) out << "step " << s.step << " loss " << fmt(s.loss) << '\n';
  });
  write_manifest(dir, "train", resolved, {"checkpoint", "train_log.csv"});
  out << tc.checkpoint_path.string() << '\n' << tc.log_path.string() << '\n';
  return resolved;
}

// ---- attack ------------------------------------------------------------------------

Json run_attack(const Json& config, std::ostream& out) {
  Fields f(config, "attack",
           {"checkpoint", "image", "output_dir", "method", "mode", "target", "alpha", "eta", "steps", "t_low",
            "t_high", "block_set", "prompt_pool", "seed", "batch"});
  AttackConfig ac;
  ac.alpha = f.get("alpha", ac.alpha);
  ac.eta = f.get("eta", ac.eta);
  ac.steps = f.get("steps", ac.steps);
  ac.t_low = f.get("t_low", ac.t_low);
  ac.t_high = f.get("t_high", ac.t_high);
  ac.block_set = f.get("block_set", ac.block_set);
  ac.prompt_pool = f.get("prompt_pool", ac.prompt_pool);
  ac.seed = f.get("seed", ac.seed);
  ac.batch = f.get("batch", ac.batch);
  const auto method = f.get<std::string>("method", "decontext");
  const auto mode = f.get<std::string>("mode", "untargeted");
  if (method != "decontext" && method != "diffpgd") throw ConfigError("attack.method must be decontext or diffpgd");
  if (mode != "untargeted" && mode != "targeted") throw ConfigError("attack.mode must be untargeted or targeted");
  if (mode == "targeted" && !f.has("target")) throw ConfigError("attack.mode targeted needs attack.target");
  const auto dir = f.path("output_dir");
  const auto ck_path = f.path("checkpoint");
  const auto image_path = f.path("image");
  ac.validate_scalars();

  Model model = load_model(ck_path);
  ac.validate(model.config());
  ac = ac.resolved(model.config());
  const Tensor clean = read_ppm(image_path);
  std::optional<Tensor> target;
  Json resolved{{"checkpoint", ck_path.string()}, {"image", image_path.string()}, {"output_dir", dir.string()},
                {"method", method},                {"mode", mode},                {"alpha", ac.alpha},
                {"eta", ac.eta},                   {"steps", ac.steps},           {"t_low", ac.t_low},
                {"t_high", ac.t_high},             {"block_set", ac.block_set},   {"prompt_pool", ac.prompt_pool},
                {"seed", ac.seed},                 {"batch", ac.batch}};
  if (f.has("target")) {
    const auto target_path = f.path("target");
    target = read_ppm(target_path);
    resolved["target"] = target_path.string();
  }
  prepare_output(dir);

  const auto state = method == "decontext"
                         ? decontext_attack(model, clean, ac)
                         : diffpgd_attack(model, clean, ac,
                                          mode == "targeted" ? PgdMode::kTargeted : PgdMode::kUntargeted, target);

  write_ppm(dir / "adv.ppm", quantize_within_budget(state.x_adv, clean, ac.eta));
  write_dctx(dir / "adv.dctx", state.x_adv);
  std::ostringstream log;
  log.precision(9);
  log << "step,loss,r_ctx,linf\n";
  for (const auto& e : state.history) log << e.step << ',' << e.loss << ',' << e.r_ctx << ',' << e.linf << '\n';
  write_text(dir / "attack_log.csv", log.str());
  write_manifest(dir, "attack", resolved, {"adv.ppm", "adv.dctx", "attack_log.csv"});
  if (!state.history.empty()) {
    out << "r_ctx first " << fmt(state.history.front().r_ctx) << " last " << fmt(state.history.back().r_ctx)
        << '\n';
  }
  out << (dir / "adv.ppm").string() << '\n' << (dir / "adv.dctx").string() << '\n'
      << (dir / "attack_log.csv").string() << '\n';
  return resolved;
}

// ---- analyze -------------------------------------------------------------------------

Json run_grad_profile(const Json& config, std::ostream& out) {
  Fields f(config, "grad-profile",
           {"checkpoint", "images", "samples", "t_step", "timesteps", "prompt", "seed", "zero_context", "output_dir"});
  const auto ck_path = f.path("checkpoint");
  const auto dir = f.path("output_dir");
  const auto samples = f.get<std::size_t>("samples", 8);
  const auto t_step = f.get<int>("t_step", 50);
  const auto prompt = f.get<std::size_t>("prompt", 0);
  const auto seed = f.get<std::uint64_t>("seed", 0);
  const auto zero_context = f.get("zero_context", false);
  auto image_paths = f.get<std::vector<std::string>>("images", {});
  if (image_paths.empty() && samples == 0) throw ConfigError("grad-profile.samples must be >= 1");

  Model model = load_model(ck_path);
  auto timesteps = f.get<std::vector<int>>("timesteps", {});
  if (timesteps.empty()) timesteps = timestep_grid(model.config().timesteps, t_step);
  std::vector<Tensor> images;
  Json used = Json::array();
  if (image_paths.empty()) {
    // Held-out identities, rendered unedited.
    const auto held = held_out_identities();
    for (std::size_t i = 0; i < samples; ++i) images.push_back(render_context(held[i % held.size()]));
  } else {
    for (const auto& p : image_paths) {
      const auto abs = fs::absolute(p).lexically_normal();
      images.push_back(read_ppm(abs));
      used.push_back(abs.string());
    }
  }
  const Json resolved{{"checkpoint", ck_path.string()}, {"images", used},
                      {"samples", images.size()},        {"timesteps", timesteps},
                      {"prompt", prompt},                {"seed", seed},
                      {"zero_context", zero_context},    {"output_dir", dir.string()}};
  prepare_output(dir);
  const auto profile = timestep_gradient_profile(model, images, timesteps, prompt, {seed, zero_context});
  export_csv(profile, dir / "grad_profile.csv");
  // Relative names keep the script identical wherever the run is replayed.
  write_text(dir / "grad_profile.gp", gnuplot_profile_script("grad_profile.csv", "grad_profile.png"));
  write_manifest(dir, "grad-profile", resolved, {"grad_profile.csv", "grad_profile.gp"});
  out << (dir / "grad_profile.csv").string() << '\n';
  return resolved;
}

Json run_block_scan(const Json& config, std::ostream& out) {
  Fields f(config, "block-scan", {"checkpoint", "image", "attacked", "prompt", "t", "draws", "seed", "output_dir"});
  const auto ck_path = f.path("checkpoint");
  const auto image_path = f.path("image");
  const auto dir = f.path("output_dir");
  const auto prompt = f.get<std::size_t>("prompt", 0);
  const auto t = f.get<int>("t", 1000);
  const auto draws = f.get<std::size_t>("draws", 8);
  const auto seed = f.get<std::uint64_t>("seed", 0);
  if (draws == 0) throw ConfigError("block-scan.draws must be >= 1");

  Model model = load_model(ck_path);
  if (t < 0 || t > model.config().timesteps) throw ConfigError("block-scan.t outside [0, T]");
  Json resolved{{"checkpoint", ck_path.string()}, {"image", image_path.string()}, {"prompt", prompt}, {"t", t},
                {"draws", draws},                 {"seed", seed},                 {"output_dir", dir.string()}};
  std::vector<std::pair<std::string, fs::path>> inputs{{"clean", image_path}};
  if (f.has("attacked")) {
    const auto attacked = f.path("attacked");
    resolved["attacked"] = attacked.string();
    inputs.emplace_back("attacked", attacked);
  }
  std::vector<Tensor> images;
  for (const auto& [_, p] : inputs) images.push_back(read_ppm(p));
  prepare_output(dir);

  std::vector<std::string> artifacts;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    // Both conditions see the same noise draws.
    Rng rng(seed, "analysis/block-scan");
    std::vector<BlockScan> scans;
    for (std::size_t d = 0; d < draws; ++d) scans.push_back(blockwise_ctx_scan(model, images[i], prompt, t, rng, inputs[i].first));
    const auto mean = average_scans(scans);
    const std::string name = "scan_" + inputs[i].first + ".csv";
    export_csv(std::vector<BlockScan>{mean}, dir / name);
    artifacts.push_back(name);
    out << inputs[i].first << " mean r_ctx " << fmt(mean_r_ctx(mean)) << '\n';
  }
  const std::vector<fs::path> csvs(artifacts.begin(), artifacts.end());
  write_text(dir / "block_scan.gp", gnuplot_scan_script(csvs, "block_scan.png"));
  artifacts.push_back("block_scan.gp");
  write_manifest(dir, "block-scan", resolved, artifacts);
  for (const auto& a : artifacts) {
    if (a.ends_with(".csv")) out << (dir / a).string() << '\n';
  }
  return resolved;
}

Json run_identity(const Json& config, std::ostream& out) {
  Fields f(config, "identity", {"generated", "context", "perturbed", "run", "output_dir"});
  const auto generated = f.path("generated");
  const auto context = f.path("context");
  const auto dir = f.path("output_dir");
  const auto run = f.get<std::string>("run", "run0");
  if (run.find_first_of(",\n\"") != std::string::npos) throw ConfigError("identity.run must not contain commas or quotes");
  Json resolved{{"generated", generated.string()}, {"context", context.string()}, {"run", run},
                {"output_dir", dir.string()}};
  std::optional<Tensor> perturbed;
  if (f.has("perturbed")) {
    const auto p = f.path("perturbed");
    perturbed = read_ppm(p);
    resolved["perturbed"] = p.string();
  }
  const auto report = identity_report(read_ppm(generated), read_ppm(context), perturbed ? &*perturbed : nullptr);
  prepare_output(dir);
  export_csv(std::vector<ReportRow>{{run, report}}, dir / "identity.csv");
  write_manifest(dir, "identity", resolved, {"identity.csv"});
  out << "similarity " << fmt(report.similarity) << " match " << (report.analyzer_match ? "yes" : "no") << '\n'
      << (dir / "identity.csv").string() << '\n';
  return resolved;
}

// ---- sample --------------------------------------------------------------------------

Json run_sample(const Json& config, std::ostream& out) {
  Fields f(config, "sample", {"checkpoint", "context", "prompt", "steps", "seed", "zero_context", "output_dir"});
  const auto ck_path = f.path("checkpoint");
  const auto context_path = f.path("context");
  const auto dir = f.path("output_dir");
  const auto prompt = f.get<std::size_t>("prompt", 0);
  const auto steps = f.get<int>("steps", 20);
  const auto seed = f.get<std::uint64_t>("seed", 0);
  const auto zero_context = f.get("zero_context", false);
  if (steps < 1) throw ConfigError("sample.steps must be >= 1");

  Model model = load_model(ck_path);
  if (prompt >= model.config().vocab) throw ConfigError("sample.prompt outside the vocabulary");
  const Tensor context = read_ppm(context_path);
  const Json resolved{{"checkpoint", ck_path.string()}, {"context", context_path.string()},
                      {"prompt", prompt},                {"steps", steps},
                      {"seed", seed},                    {"zero_context", zero_context},
                      {"output_dir", dir.string()}};
  prepare_output(dir);
  Rng rng(seed, "sample");
  write_ppm(dir / "sample.ppm", sample(model, context, prompt, steps, rng, zero_context));
  write_manifest(dir, "sample", resolved, {"sample.ppm"});
  out << (dir / "sample.ppm").string() << '\n';
  return resolved;
}

// ---- dispatch ------------------------------------------------------------------------

Json run_command(const std::string& command, const Json& config, std::ostream& out) {
  if (command == "train") return run_train(config, out);
  if (command == "attack") return run_attack(config, out);
  if (command == "grad-profile") return run_grad_profile(config, out);
  if (command == "block-scan") return run_block_scan(config, out);
  if (command == "identity") return run_identity(config, out);
  if (command == "sample") return run_sample(config, out);
  throw ConfigError("unknown command \"" + command + "\"");
}

Json replay(const fs::path& manifest_path, const fs::path& output_dir, std::ostream& out) {
  const Json manifest = load_config(manifest_path);
  if (!manifest.is_object() || manifest.value("format", "") != "decontext-run") {
    throw ConfigError(manifest_path.string() + ": not a run manifest");
  }
  Json config = manifest.at("config");
  if (!output_dir.empty()) config["output_dir"] = fs::absolute(output_dir).lexically_normal().string();
  return run_command(manifest.at("command").get<std::string>(), config, out);
}

int report_failure(std::ostream& err) {
  try {
    throw;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NonFiniteError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "unexpected error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace decontext::cli
