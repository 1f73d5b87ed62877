#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "commands.hpp"
#include "decontext/errors.hpp"

namespace {

using decontext::Json;
namespace cli = decontext::cli;

// Flag values collected before they are folded into a JSON config.
struct Flags {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::vector<std::string> images;
  std::string image;
  std::string attacked;
  std::string generated;
  std::string context;
  std::string perturbed;
  std::string run;
  std::string method;
  std::optional<std::size_t> prompt;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> draws;
  std::optional<int> t;
  std::optional<int> t_step;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  bool zero_context = false;
};

Json base_config(const Flags& f) { return f.config.empty() ? Json::object() : cli::load_config(f.config); }

void set_if(Json& j, const char* key, const std::string& v) {
  if (!v.empty()) j[key] = v;
}

template <typename T>
void set_if(Json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale context-suppression attacks on a miniature multi-modal diffusion transformer"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", f.config, "Training config (JSON)")->required();
  train->add_option("--out", f.out, "Override output_dir");

  auto* attack = app.add_subcommand("attack", "Perturb a context image");
  attack->add_option("--config", f.config, "Attack config (JSON)")->required();
  attack->add_option("--method", f.method, "decontext or diffpgd")->check(CLI::IsMember({"decontext", "diffpgd"}));
  attack->add_option("--out", f.out, "Override output_dir");

  auto* analyze = app.add_subcommand("analyze", "Gradient profiles, block scans and identity metrics");
  analyze->require_subcommand(1);
  auto* profile = analyze->add_subcommand("grad-profile", "Per-timestep target/context gradient magnitudes");
  auto* scan = analyze->add_subcommand("block-scan", "Per-block context proportion");
  auto* identity = analyze->add_subcommand("identity", "Identity similarity of a generation");
  for (auto* sub : {profile, scan, identity}) {
    sub->add_option("--config", f.config, "Analysis config (JSON); flags override its keys");
    sub->add_option("--out", f.out, "Output directory");
  }
  for (auto* sub : {profile, scan}) {
    sub->add_option("--checkpoint", f.checkpoint, "Checkpoint directory");
    sub->add_option("--prompt", f.prompt, "Prompt id");
    sub->add_option("--seed", f.seed, "Seed");
  }
  profile->add_option("--image", f.images, "Context image(s); default renders held-out identities");
  profile->add_option("--samples", f.samples, "Number of held-out renders when no image is given");
  profile->add_option("--t-step", f.t_step, "Timestep grid spacing");
  profile->add_flag("--zero-context", f.zero_context, "Sever context attention");
  scan->add_option("--image", f.image, "Clean context image");
  scan->add_option("--attacked", f.attacked, "Perturbed context image");
  scan->add_option("--t", f.t, "Timestep");
  scan->add_option("--draws", f.draws, "Noise draws averaged per condition");
  identity->add_option("--generated", f.generated, "Generated image");
  identity->add_option("--context", f.context, "Clean context image");
  identity->add_option("--perturbed", f.perturbed, "Perturbed context image");
  identity->add_option("--run", f.run, "Run label");

  auto* sample = app.add_subcommand("sample", "Generate an image conditioned on a context image");
  sample->add_option("--config", f.config, "Sample config (JSON); flags override its keys");
  sample->add_option("--checkpoint", f.checkpoint, "Checkpoint directory");
  sample->add_option("--context", f.context, "Context image (PPM)");
  sample->add_option("--prompt", f.prompt, "Prompt id");
  sample->add_option("--steps", f.steps, "Euler steps");
  sample->add_option("--seed", f.seed, "Seed");
  sample->add_flag("--zero-context", f.zero_context, "Sever context attention");
  sample->add_option("--out", f.out, "Output directory");

  std::string manifest;
  auto* replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  replay->add_option("manifest", manifest, "manifest.json of a previous run")->required();
  replay->add_option("--out", f.out, "Write to this directory instead of the recorded one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kUsage;
  }

  try {
    if (*replay) {
      cli::replay(manifest, f.out, std::cout);
      return cli::kOk;
    }
    Json config = base_config(f);
    set_if(config, "output_dir", f.out);
    if (*train) {
      cli::run_train(config, std::cout);
    } else if (*attack) {
      set_if(config, "method", f.method);
      cli::run_attack(config, std::cout);
    } else if (*sample) {
      set_if(config, "checkpoint", f.checkpoint);
      set_if(config, "context", f.context);
      set_if(config, "prompt", f.prompt);
      set_if(config, "steps", f.steps);
      set_if(config, "seed", f.seed);
      if (f.zero_context) config["zero_context"] = true;
      cli::run_sample(config, std::cout);
    } else if (*profile) {
      set_if(config, "checkpoint", f.checkpoint);
      if (!f.images.empty()) config["images"] = f.images;
      set_if(config, "samples", f.samples);
      set_if(config, "t_step", f.t_step);
      set_if(config, "prompt", f.prompt);
      set_if(config, "seed", f.seed);
      if (f.zero_context) config["zero_context"] = true;
      cli::run_grad_profile(config, std::cout);
    } else if (*scan) {
      set_if(config, "checkpoint", f.checkpoint);
      set_if(config, "image", f.image);
      set_if(config, "attacked", f.attacked);
      set_if(config, "prompt", f.prompt);
      set_if(config, "t", f.t);
      set_if(config, "draws", f.draws);
      set_if(config, "seed", f.seed);
      cli::run_block_scan(config, std::cout);
    } else if (*identity) {
      set_if(config, "generated", f.generated);
      set_if(config, "context", f.context);
      set_if(config, "perturbed", f.perturbed);
      set_if(config, "run", f.run);
      cli::run_identity(config, std::cout);
    }
  } catch (...) {
    return cli::report_failure(std::cerr);
  }
  return cli::kOk;
}
