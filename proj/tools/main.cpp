#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

using mhex::cli::RunConfig;

// --config must be applied before flags so that explicit flags win.
std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

void add_common(CLI::App* sub, RunConfig& rc, std::string& config_path) {
  sub->add_option("--config", config_path, "key=value run config; explicit flags override it");
  sub->add_option("--dataset", rc.dataset, "shapes|tokens")->check(CLI::IsMember({"shapes", "tokens"}));
  sub->add_option("--n-train", rc.n_train, "training samples");
  sub->add_option("--n-eval", rc.n_eval, "evaluation samples");
  sub->add_option("--vocab", rc.vocab, "token vocabulary size");
  sub->add_option("--mode", rc.mode, "pretrain|finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
  sub->add_option("--epochs", rc.epochs, "training epochs");
  sub->add_option("--lr", rc.lr, "learning rate");
  sub->add_option("--batch", rc.batch, "minibatch size");
  sub->add_option("--seed", rc.seed, "seed for data, init and shuffling");
  sub->add_option("--workers", rc.workers, "worker threads");
  sub->add_option("--alpha", rc.alpha, "mix for negative weights");
  sub->add_option("--ss", rc.ss, "sharpness threshold, or 'auto' for 1/n_class + 0.2");
  sub->add_option("--decay", rc.decay, "per-layer decay");
  sub->add_option("--layers", rc.layers, "token saliency layers L");
  sub->add_option("--grid", rc.grid, "block-wise grid size");
  sub->add_option("--site", rc.site, "block-wise site index");
  sub->add_option("--steps", rc.steps, "insertion/deletion steps");
  sub->add_option("--top-frac", rc.top_frac, "token fraction to mask");
  sub->add_option("--out", rc.out, "output directory (MHEX_OUT overrides)");
  sub->add_option("--checkpoint", rc.checkpoint, "checkpoint path (default <out>/checkpoint.mhex)");
  sub->add_option("--samples", rc.samples, "comma-separated evaluation sample ids");
  sub->add_option("--class", rc.class_id, "class to explain (-1: true label)");
  sub->add_flag("--grad-cam,!--no-grad-cam", rc.grad_cam, "also run the Grad-CAM baseline");
  sub->add_flag("--oracle-explainer,!--no-oracle-explainer", rc.oracle_explainer, "also score the ground-truth mask");
  sub->add_option("--force-area", rc.force_area, "override every saliency area (testing)");
  sub->add_option("--entropy-samples", rc.entropy_samples, "samples for the entropy check");
  sub->add_option("--bins", rc.bins, "histogram bins for the entropy check");
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig rc;
  std::string config_path;
  try {
    config_path = find_config_arg(argc, argv);
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw mhex::IoError("cannot read config '" + config_path + "'");
      std::stringstream ss;
      ss << in.rdbuf();
      rc.merge(mhex::KeyValues::parse(ss.str()));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"MHEX: saliency explanations from multi-head explainer blocks"};
  app.require_subcommand(1);
  for (const char* name : {"train", "explain", "evaluate", "analyze"}) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, rc, config_path);
  }
  CLI11_PARSE(app, argc, argv);
  rc.command = app.get_subcommands().front()->get_name();
  if (const char* env = std::getenv("MHEX_OUT"); env && *env) rc.out = env;

  try {
    return mhex::cli::dispatch(rc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
