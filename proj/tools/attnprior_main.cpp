#include <CLI11.hpp>

#include <iostream>

#include "attnprior/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"attnprior: latent-noise causal attention priors, margins, and the desk-scale "
               "training harness"};
  app.require_subcommand(1);

  attnprior::cli::RunOptions opts;
  std::string lambda_override, sigma_max_override, epochs_override;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "key=value config file");
    sub->add_option("--seed", opts.seed, "master seed");
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--preset", opts.preset, "desk | paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    sub->add_flag_callback("--no-svg", [&] { opts.svg = false; }, "skip SVG plot output");
  };

  auto* figures = app.add_subcommand("theory-figures", "density/factor curves and populations");
  add_common(figures);

  auto* density = app.add_subcommand("density", "DensityReport for an embedding CSV");
  add_common(density);
  density->add_option("--input", opts.input_path, "embedding CSV, rows = positions")->required();
  density->add_option_function<double>(
      "--coupling", [&](double a) { opts.cfg.set("prior.a", std::to_string(a)); },
      "scalar coupling a for d=1 input");

  auto* verify = app.add_subcommand("verify", "run the invariant suite");
  add_common(verify);
  verify->add_flag("--corrupt-cache", opts.corrupt_cache,
                   "negative control: corrupt the coupling cache first");

  auto add_train_flags = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--corpus", opts.corpus_path, "UTF-8 corpus path");
    sub->add_option_function<double>(
        "--lambda", [&](double v) { opts.cfg.set("train.lambda", std::to_string(v)); },
        "margin penalty weight");
    sub->add_option_function<long>(
        "--epochs", [&](long v) { opts.cfg.set("train.epochs", std::to_string(v)); },
        "training epochs");
  };

  auto* train = app.add_subcommand("train", "train one model and write metrics + checkpoint");
  add_train_flags(train);

  auto* robust = app.add_subcommand("robustness", "embedding-noise robustness curves");
  add_train_flags(robust);
  robust->add_option("--checkpoint", opts.checkpoint_path, "evaluate an existing checkpoint");
  robust->add_option_function<double>(
      "--sigma-max", [&](double v) { opts.cfg.set("robustness.sigma_max", std::to_string(v)); },
      "largest noise level");

  auto* sweep = app.add_subcommand("lambda-sweep", "regularization path over lambda");
  add_train_flags(sweep);
  sweep->add_option_function<std::string>(
      "--lambdas", [&](std::string v) { opts.cfg.set("sweep.lambdas", v); },
      "comma-separated lambda grid");

  CLI11_PARSE(app, argc, argv);
  opts.command = app.get_subcommands().front()->get_name();

  try {
    return attnprior::cli::run_command(opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
