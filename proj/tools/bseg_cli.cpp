// bseg: command-line front end for data generation, training, prediction,
// evaluation and the invariant self-check.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data/validation error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "bseg/bseg.hpp"

namespace fs = std::filesystem;
using namespace bseg;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

int exit_code_for(const Error& e) { return e.code() == ErrorCode::BadConfig ? kExitUsage : kExitData; }

struct GenDataArgs {
  std::string out;
  std::size_t n = 8;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  std::string difficulty = "easy";
  std::size_t depth = NetConfig{}.depth;
};

int run_gen_data(const GenDataArgs& a) {
  const std::size_t multiple = std::size_t{1} << a.depth;
  if (a.size % multiple != 0)
    std::cerr << "warning: size " << a.size << " is not divisible by " << multiple << " (2^depth for depth "
              << a.depth << "); a network of that depth cannot train on these images\n";
  const auto data = generate_synthetic(a.n, a.size, a.size, a.seed, parse_difficulty(a.difficulty));
  write_dataset(a.out, data);
  std::cout << "wrote " << data.size() << " samples to " << a.out << "\n";
  return 0;
}

// Optional per-flag overrides of the config file; a flag only applies when given.
struct TrainOverrides {
  TrainConfig defaults;
  NetConfig net_defaults;
  std::size_t epochs = defaults.max_epochs;
  std::size_t batch_size = defaults.batch_size;
  double lr = defaults.learning_rate;
  std::string optimizer = to_string(defaults.optimizer);
  double momentum = defaults.momentum;
  double weight_decay = defaults.weight_decay;
  std::string scheduler = to_string(defaults.scheduler);
  std::size_t patience = defaults.plateau_patience;
  double factor = defaults.plateau_factor;
  double gamma = defaults.cyclical_gamma;
  std::size_t latent_dim = net_defaults.latent_dim;
  std::uint64_t seed = defaults.seed;
};

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
  std::string metrics;
  TrainOverrides o;
};

void apply_overrides(RunConfig& rc, const TrainOverrides& o, CLI::App& cmd) {
  auto given = [&](const char* flag) { return cmd.count(flag) > 0; };
  if (given("--epochs")) rc.train.max_epochs = o.epochs;
  if (given("--batch-size")) rc.train.batch_size = o.batch_size;
  if (given("--lr")) rc.train.learning_rate = o.lr;
  if (given("--optimizer")) rc.train.optimizer = parse_optimizer(o.optimizer);
  if (given("--momentum")) rc.train.momentum = o.momentum;
  if (given("--weight-decay")) rc.train.weight_decay = o.weight_decay;
  if (given("--scheduler")) rc.train.scheduler = parse_scheduler(o.scheduler);
  if (given("--patience")) rc.train.plateau_patience = o.patience;
  if (given("--factor")) rc.train.plateau_factor = o.factor;
  if (given("--gamma")) rc.train.cyclical_gamma = o.gamma;
  if (given("--latent-dim")) rc.net.latent_dim = o.latent_dim;
  if (given("--seed")) rc.train.seed = o.seed;
  rc.net.validate();
  rc.train.validate();
}

int run_train(const TrainArgs& a, CLI::App& cmd) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_config(a.config);
  apply_overrides(rc, a.o, cmd);
  const auto data = read_dataset(a.data);
  if (data.empty()) fail(ErrorCode::EmptySet, "no samples in " + a.data);

  SegNet net(rc.net, rc.train.seed);
  if (!a.resume.empty()) {
    net = load_checkpoint(a.resume);
    if (!a.config.empty() && !(net.config() == rc.net))
      fail(ErrorCode::ConfigShapeMismatch, "checkpoint network differs from the configured network");
    std::cout << "resuming from " << a.resume << "\n";
  }

  const fs::path metrics_path = a.metrics.empty() ? fs::path(a.out).replace_extension(".metrics.csv") : fs::path(a.metrics);
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) fail(ErrorCode::IoFailure, "cannot write " + metrics_path.string());
  metrics << kMetricsHeader << "\n";

  Trainer trainer(net, data, rc.train, rc.loss);
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<EpochMetrics> last;
  trainer.fit([&](const EpochMetrics& m) {
    metrics << metrics_row(m) << "\n" << std::flush;
    last = m;
  });
  if (!metrics) fail(ErrorCode::IoFailure, "write failed for " + metrics_path.string());
  save_checkpoint(net, a.out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (last)
    std::printf("epoch %zu: train_loss %.6f val_loss %.6f seg_loss %.6f lr %.3g (%.1f s)\n", last->epoch,
                last->train_loss, last->val_loss, last->seg_loss, last->lr, secs);
  else
    std::printf("no epochs run\n");
  std::printf("checkpoint %s, metrics %s\n", a.out.c_str(), metrics_path.string().c_str());
  return 0;
}

struct PredictArgs {
  std::string ckpt;
  std::string image;
  std::string out;
  std::size_t samples = 20;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  std::string space = "probability";
};

UncertaintySpace parse_space(const std::string& s) {
  if (s == "probability") return UncertaintySpace::Probability;
  if (s == "logit") return UncertaintySpace::Logit;
  fail(ErrorCode::BadConfig, "space must be 'probability' or 'logit', got '" + s + "'");
}

int run_predict(const PredictArgs& a) {
  const UncertaintySpace space = parse_space(a.space);
  const SegNet net = load_checkpoint(a.ckpt);
  const Grid img = read_image(a.image);
  const Grid x = img.reshaped({1, 1, img.dim(0), img.dim(1)});
  const auto report = decompose(mc_predict(net, x, a.samples, Rng(a.seed), space), a.threshold, space);
  for (const auto& p : export_uncertainty_maps(report, a.out)) std::cout << "wrote " << p.string() << "\n";
  std::printf("mean total variance %.9g (aleatoric %.9g, epistemic %.9g) over %zu samples\n", report.total_var.mean(),
              report.aleatoric.mean(), report.epistemic.mean(), report.n_samples);
  return 0;
}

struct EvaluateArgs {
  std::string ckpt;
  std::string data;
  std::string out = "evaluation.csv";
  std::size_t samples = 20;
  std::uint64_t seed = 0;
  double threshold = 0.5;
};

int run_evaluate(const EvaluateArgs& a) {
  const SegNet net = load_checkpoint(a.ckpt);
  const auto data = read_dataset(a.data);
  if (data.empty()) fail(ErrorCode::EmptySet, "no images in " + a.data);
  std::vector<Grid> preds, truths;
  std::vector<std::string> ids;
  for (const auto& s : data) {
    const Grid x = s.image.reshaped({1, 1, s.image.dim(0), s.image.dim(1)});
    const auto report = decompose(mc_predict(net, x, a.samples, Rng(a.seed)), a.threshold);
    preds.push_back(report.mask.reshaped(s.mask.shape()));
    truths.push_back(s.mask);
    ids.push_back(s.id);
  }
  const SetScore score = evaluate_set(preds, truths);
  write_evaluation_csv(a.out, ids, score);
  std::printf("images %zu: mean DSC %.6f, mean IoU %.6f (written to %s)\n", data.size(), score.mean_dsc,
              score.mean_iou, a.out.c_str());
  return 0;
}

int run_checks(std::size_t seeds) {
  const auto t0 = std::chrono::steady_clock::now();
  int failures = 0;
  for (const auto& c : run_selftest(seeds)) {
    std::printf("[%s] %s (%s)\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
    failures += c.passed ? 0 : 1;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s: %d failure(s) in %.1f s\n", failures ? "selftest FAILED" : "selftest passed", failures, secs);
  return failures ? kExitData : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian U-Net segmentation with aleatoric/epistemic uncertainty"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic ellipse dataset as PGM files");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen.size, "Image height and width")->capture_default_str()->check(CLI::Range(4, 4096));
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--difficulty", gen.difficulty, "Noise level")
      ->capture_default_str()
      ->check(CLI::IsMember({"easy", "hard"}));
  gen_cmd->add_option("--depth", gen.depth, "Network depth the data is meant for (size check only)")
      ->capture_default_str()
      ->check(CLI::Range(1, 16));

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a network; flags override the config file");
  train_cmd->add_option("--data", train.data, "Dataset directory (manifest.csv)")->required();
  train_cmd->add_option("--config", train.config, "Config file of key = value lines");
  train_cmd->add_option("--out", train.out, "Checkpoint to write")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
  train_cmd->add_option("--metrics", train.metrics, "Per-epoch CSV (default: <out>.metrics.csv)");
  auto& o = train.o;
  train_cmd->add_option("--epochs", o.epochs, "Maximum epochs")->capture_default_str();
  train_cmd->add_option("--batch-size", o.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--lr", o.lr, "Learning rate")->capture_default_str();
  train_cmd->add_option("--optimizer", o.optimizer, "adam or sgd-momentum")->capture_default_str();
  train_cmd->add_option("--momentum", o.momentum, "SGD momentum")->capture_default_str();
  train_cmd->add_option("--weight-decay", o.weight_decay, "Weight decay")->capture_default_str();
  train_cmd->add_option("--scheduler", o.scheduler, "plateau, cyclical or none")->capture_default_str();
  train_cmd->add_option("--patience", o.patience, "LR scheduler patience (epochs)")->capture_default_str();
  train_cmd->add_option("--factor", o.factor, "LR scheduler reduction factor")->capture_default_str();
  train_cmd->add_option("--gamma", o.gamma, "Cyclical LR scheduler gamma")->capture_default_str();
  train_cmd->add_option("--latent-dim", o.latent_dim, "Latent variable size")->capture_default_str();
  train_cmd->add_option("--seed", o.seed, "Random seed")->capture_default_str();

  PredictArgs pred;
  auto* pred_cmd = app.add_subcommand("predict", "MC prediction with uncertainty maps for one image");
  pred_cmd->add_option("--ckpt", pred.ckpt, "Checkpoint")->required();
  pred_cmd->add_option("--image", pred.image, "Input PGM image")->required();
  pred_cmd->add_option("--out", pred.out, "Output directory")->required();
  pred_cmd->add_option("--samples", pred.samples, "Monte-Carlo samples")->capture_default_str()->check(CLI::PositiveNumber);
  pred_cmd->add_option("--seed", pred.seed, "Random seed")->capture_default_str();
  pred_cmd->add_option("--threshold", pred.threshold, "Mask threshold on mean probability")->capture_default_str();
  pred_cmd->add_option("--space", pred.space, "Variance space: probability or logit")->capture_default_str();

  EvaluateArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Mean DSC/IoU of MC-averaged masks on a dataset");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--samples", eval.samples, "Monte-Carlo samples")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval.seed, "Random seed")->capture_default_str();
  eval_cmd->add_option("--threshold", eval.threshold, "Mask threshold on mean probability")->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Per-image CSV")->capture_default_str();

  std::size_t selftest_seeds = 5;
  auto* self_cmd = app.add_subcommand("selftest", "Gradient, KL and variance-identity checks");
  self_cmd->add_option("--seeds", selftest_seeds, "Random cases per gradient check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(train, *train_cmd);
    if (*pred_cmd) return run_predict(pred);
    if (*eval_cmd) return run_evaluate(eval);
    if (*self_cmd) return run_checks(selftest_seeds);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
