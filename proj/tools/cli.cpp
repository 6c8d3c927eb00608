#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsg/core_data.hpp"
#include "tsg/grounding_model.hpp"
#include "tsg/inference_eval.hpp"
#include "tsg/kv_config.hpp"
#include "tsg/pseudo_video.hpp"
#include "tsg/synthetic_benchmark.hpp"
#include "tsg/training.hpp"

namespace tsg::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool quiet() {
  const char* q = std::getenv("TSG_QUIET");
  return q != nullptr && *q != '\0' && std::string(q) != "0";
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_snapshot(const CLI::App& sub, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "command_config.txt");
  out << "# tsg " << sub.get_name() << '\n' << sub.config_to_str(true, false);
}

void print_report(const MetricsReport& r) {
  if (quiet()) return;
  std::printf("%-10s n=%-5d", r.split.c_str(), r.sample_count);
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    std::printf("  R@1,IoU=%.1f %6.2f", r.thresholds[i], r.recall_at_1[i]);
  }
  std::printf("  mIoU %6.2f\n", r.miou);
}

// ---- shared option sets ------------------------------------------------------------

struct Globals {
  int threads = 1;
  double fps = 1.0;
};

/// Exactly one source of predictions for evaluate and shuffle-test.
struct PredictorOptions {
  std::string checkpoint;
  std::string predictions;
  std::string oracle;

  int count() const {
    return !checkpoint.empty() + !predictions.empty() + !oracle.empty();
  }
};

/// A predictor together with everything it borrows.
struct LoadedPredictor {
  std::unique_ptr<GroundingModel> model;
  std::unique_ptr<BenchmarkMetadata> metadata;
  std::unique_ptr<Predictor> predictor;
};

std::vector<DatasetSplit> load_data(const std::string& dir, const Globals& g) {
  if (!fs::is_directory(dir)) throw UsageError("data directory not found: " + dir);
  return load_dataset_dir(dir, g.fps);
}

DatasetSplit& split_named(std::vector<DatasetSplit>& splits, const std::string& name) {
  for (auto& s : splits) {
    if (s.name == name) return s;
  }
  throw UsageError("unknown split '" + name + "'");
}

LoadedPredictor load_predictor(const PredictorOptions& opts,
                               std::vector<DatasetSplit>& splits,
                               const std::string& data_dir) {
  LoadedPredictor lp;
  if (!opts.checkpoint.empty()) {
    if (!fs::exists(opts.checkpoint)) {
      throw UsageError("checkpoint not found: " + opts.checkpoint);
    }
    Checkpoint ck = load_checkpoint(opts.checkpoint);
    for (auto& s : splits) ck.vocabulary.map(s);
    lp.model = std::make_unique<GroundingModel>(ck.model_config,
                                                std::move(ck.parameters));
    lp.predictor = std::make_unique<ModelPredictor>(*lp.model);
  } else if (!opts.predictions.empty()) {
    if (!fs::exists(opts.predictions)) {
      throw UsageError("predictions file not found: " + opts.predictions);
    }
    lp.predictor = std::make_unique<PredictionTable>(load_predictions(opts.predictions));
  } else if (opts.oracle == "bias") {
    lp.metadata = std::make_unique<BenchmarkMetadata>(load_metadata(data_dir));
    lp.predictor = std::make_unique<BiasOnlyOracle>(split_named(splits, "training"),
                                                    *lp.metadata);
  } else if (opts.oracle == "content") {
    lp.metadata = std::make_unique<BenchmarkMetadata>(load_metadata(data_dir));
    lp.predictor = std::make_unique<ContentOracle>(*lp.metadata);
  } else {
    throw UsageError("unknown oracle '" + opts.oracle + "' (expected bias or content)");
  }
  return lp;
}

// ---- generate-data --------------------------------------------------------------

struct GenerateOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int generate_data(const CLI::App& sub, const GenerateOptions& o) {
  BenchConfig config;
  if (!o.config.empty()) config = BenchConfig::from_kv(KeyValueConfig::load(o.config));
  if (o.seed) config.seed = *o.seed;
  config.validate();
  const Benchmark bench = generate_benchmark(config);
  write_benchmark(bench, o.out);
  write_snapshot(sub, o.out);
  if (!quiet()) {
    for (const auto& s : split_statistics(bench.splits)) {
      std::printf("%-10s videos=%-5d pairs=%-5d mean moment %.2fs  mean duration %.2fs\n",
                  s.name.c_str(), s.videos, s.pairs, s.mean_moment_sec,
                  s.mean_duration_sec);
    }
  }
  return kExitOk;
}

// ---- train --------------------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::string config;
  std::string out;
  bool baseline = false;
  std::optional<double> lambda1, lambda2, lambda3;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

int train(const CLI::App& sub, const TrainOptions& o, const Globals& g) {
  TrainConfig config;
  if (!o.config.empty()) config.apply(KeyValueConfig::load(o.config));
  if (o.baseline && (o.lambda1 || o.lambda2 || o.lambda3)) {
    throw UsageError("--baseline cannot be combined with --lambda1/2/3");
  }
  if (o.baseline) config.weights = {0.0, 0.0, 0.0};
  if (o.lambda1) config.weights.intra = *o.lambda1;
  if (o.lambda2) config.weights.inter = *o.lambda2;
  if (o.lambda3) config.weights.order = *o.lambda3;
  if (o.epochs) config.epochs = *o.epochs;
  if (o.seed) config.seed = *o.seed;
  config.threads = g.threads;
  config.validate();

  auto splits = load_data(o.data, g);
  DatasetSplit& training = split_named(splits, "training");
  DatasetSplit& val = split_named(splits, "val");
  std::vector<DatasetSplit*> others;
  for (auto& s : splits) {
    if (&s != &training) others.push_back(&s);
  }
  const Vocabulary vocab = prepare_vocabulary(training, others);
  const int feature_dim = training.samples.front().features->dim();

  const fs::path out = o.out;
  GroundingModel model(config.model_config(vocab.size(), feature_dim), config.seed);
  TrainState state = initial_state(model);
  if (o.resume) {
    const auto last = out / "checkpoint_last.bin";
    if (!fs::exists(last)) throw UsageError("nothing to resume in " + o.out);
    Checkpoint ck = load_checkpoint(last);
    if (ck.vocabulary.tokens() != vocab.tokens()) {
      throw ValidationError("checkpoint vocabulary does not match the data");
    }
    if (!ck.state) throw ValidationError("checkpoint has no training state");
    model = GroundingModel(ck.model_config, std::move(ck.parameters));
    state = std::move(*ck.state);
  }
  write_snapshot(sub, out);
  if (!quiet()) {
    std::printf("training: %zu samples, lambda=(%g, %g, %g), %d epochs, %lld parameters\n",
                training.samples.size(), config.weights.intra, config.weights.inter,
                config.weights.order, config.epochs,
                model.parameters().scalar_count());
  }

  FitResult result = fit(model, vocab, training, val, config, state, out);
  if (!quiet()) {
    for (const auto& m : result.history) {
      std::printf("epoch %3d  loss %.4f  val mIoU %6.2f\n", m.epoch, m.total,
                  m.validation ? m.validation->miou : 0.0);
    }
    std::printf("best epoch %d (%s %.2f)\n", result.best_epoch,
                config.selection_metric.c_str(), result.best_metric);
  }

  const GroundingModel best(model.config(), result.best_parameters);
  ModelPredictor predictor(best);
  ordered_json summary;
  summary["best_epoch"] = result.best_epoch;
  summary["selection_metric"] = config.selection_metric;
  summary["best_metric"] = result.best_metric;
  ordered_json reports;
  for (const auto& s : splits) {
    if (s.name == "training") continue;
    const auto r = evaluate(predictor, s, kDefaultThresholds, g.threads).report;
    print_report(r);
    reports[s.name] = to_json(r);
    if (s.name == "val") write_json(out / "val_report.json", to_json(r));
  }
  summary["reports"] = reports;
  write_json(out / "summary.json", summary);
  return kExitOk;
}

// ---- evaluate -----------------------------------------------------------------------

struct EvaluateOptions {
  PredictorOptions source;
  std::string data;
  std::string split = "test-ood";
  std::string out;
};

int evaluate_cmd(const CLI::App& sub, const EvaluateOptions& o, const Globals& g) {
  if (o.source.count() != 1) {
    throw UsageError("give exactly one of --checkpoint, --predictions, --oracle");
  }
  auto splits = load_data(o.data, g);
  const DatasetSplit& split = split_named(splits, o.split);
  const LoadedPredictor lp = load_predictor(o.source, splits, o.data);
  const EvaluationResult r = evaluate(*lp.predictor, split, kDefaultThresholds, g.threads);
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "metrics.json", to_json(r.report));
  save_predictions(fs::path(o.out) / "predictions.jsonl", r.predictions);
  write_snapshot(sub, o.out);
  print_report(r.report);
  return kExitOk;
}

// ---- shuffle-test -------------------------------------------------------------------

struct ShuffleOptions {
  PredictorOptions source;
  std::string data;
  std::string split = "test-ood";
  int segment_len = kDefaultSegmentLength;
  std::uint64_t seed = 0;
  std::string out;
};

int shuffle_test(const CLI::App& sub, const ShuffleOptions& o, const Globals& g) {
  if (o.source.count() != 1) {
    throw UsageError("give exactly one of --checkpoint, --oracle");
  }
  auto splits = load_data(o.data, g);
  const DatasetSplit& split = split_named(splits, o.split);
  const LoadedPredictor lp = load_predictor(o.source, splits, o.data);
  const SanityCheckResult r =
      randomized_video_test(*lp.predictor, split, o.segment_len, o.seed);
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "shuffle_test.json", to_json(r));
  write_snapshot(sub, o.out);
  print_report(r.raw);
  if (!quiet()) {
    std::printf("randomized:\n");
    print_report(r.randomized);
    std::printf("drop R@1,IoU=0.5 %.2f  drop mIoU %.2f\n", r.drop(0.5), r.miou_drop);
  }
  return kExitOk;
}

// ---- bias-report --------------------------------------------------------------------

struct BiasOptions {
  std::string data;
  std::string word;
  int top_k = 0;
  int bins = kDefaultHistogramBins;
  std::string split = "test-ood";
  std::string predictions;
  std::string out;
};

int bias_report(const CLI::App& sub, const BiasOptions& o, const Globals& g) {
  if (o.word.empty() == (o.top_k <= 0)) {
    throw UsageError("give exactly one of --word, --top-k");
  }
  if (o.bins < 1) throw UsageError("--bins must be >= 1");
  auto splits = load_data(o.data, g);
  const DatasetSplit& training = split_named(splits, "training");
  const DatasetSplit& split = split_named(splits, o.split);

  std::vector<std::string> words;
  if (!o.word.empty()) {
    bool found = false;
    for (const auto& s : training.samples) {
      for (const auto& t : s.query.tokens) found = found || t == o.word;
    }
    if (!found) {
      std::string list;
      for (const auto& w : top_words(training, 10)) list += (list.empty() ? "" : ", ") + w;
      throw ValidationError("word '" + o.word + "' not found; frequent words: " + list);
    }
    words.push_back(o.word);
  } else {
    words = top_words(training, o.top_k);
  }
  std::optional<std::vector<Prediction>> preds;
  if (!o.predictions.empty()) {
    if (!fs::exists(o.predictions)) {
      throw UsageError("predictions file not found: " + o.predictions);
    }
    preds = load_predictions(o.predictions);
  }

  auto entries = ordered_json::array();
  for (const auto& w : words) {
    ordered_json e;
    e["word"] = w;
    const BiasHistogram train_hist = bias_histogram(training, w, o.bins);
    e["training"] = to_json(train_hist);
    std::optional<BiasHistogram> split_hist;
    try {
      split_hist = bias_histogram(split, w, o.bins);
      e[o.split] = to_json(*split_hist);
      e["js_training_vs_split"] = distribution_divergence(train_hist, *split_hist);
    } catch (const ValidationError&) {
      e[o.split] = nullptr;
    }
    if (preds && split_hist) {
      const BiasHistogram pred_hist = bias_histogram(split, *preds, w, o.bins);
      e["predictions"] = to_json(pred_hist);
      e["js_predictions_vs_training"] = distribution_divergence(pred_hist, train_hist);
      e["js_predictions_vs_split"] = distribution_divergence(pred_hist, *split_hist);
    }
    if (!quiet()) {
      std::printf("%-12s training n=%-4d", w.c_str(), train_hist.total);
      if (split_hist) {
        std::printf("  %s n=%-4d JS=%.4f", o.split.c_str(), split_hist->total,
                    e["js_training_vs_split"].get<double>());
      }
      std::printf("\n");
    }
    entries.push_back(e);
  }
  ordered_json report;
  report["split"] = o.split;
  report["bins"] = o.bins;
  report["words"] = entries;
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "bias_report.json", report);
  write_snapshot(sub, o.out);
  return kExitOk;
}

// ---- dump-triplets ------------------------------------------------------------------

struct DumpOptions {
  std::string data;
  std::string split = "training";
  int epoch = 0;
  std::uint64_t seed = 0;
  int count = 0;  // 0 = all
  std::string out;
};

int dump_triplets(const CLI::App& sub, const DumpOptions& o, const Globals& g) {
  if (o.epoch < 0) throw UsageError("--epoch must be >= 0");
  auto splits = load_data(o.data, g);
  const DatasetSplit& split = split_named(splits, o.split);
  const auto triplets = make_epoch_triplets(split, o.seed, o.epoch);
  const std::size_t n =
      o.count > 0 ? std::min<std::size_t>(o.count, triplets.size()) : triplets.size();
  fs::create_directories(o.out);
  std::ofstream out(fs::path(o.out) / "triplets.jsonl");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = triplets[i];
    const auto& s = *t.sample;
    // Source frame of every pseudo frame, recovered by shuffling frame indices.
    FeatureMatrix index(s.frames, 1);
    for (int f = 0; f < s.frames; ++f) index(f, 0) = static_cast<float>(f);
    const PseudoVideo p = reinsert_moment(make_frame_features(index, s.duration), s.span,
                                          t.insertion_offset);
    std::vector<int> source(s.frames);
    for (int f = 0; f < s.frames; ++f) source[f] = static_cast<int>(p.features.data(f, 0));
    ordered_json j;
    j["video_id"] = s.video_id;
    j["query_index"] = s.query_index;
    j["query"] = s.query_text;
    j["frames"] = s.frames;
    j["original_span"] = {s.span.start_frame, s.span.end_frame};
    j["pseudo_span"] = {t.pseudo_span.start_frame, t.pseudo_span.end_frame};
    j["insertion_offset"] = t.insertion_offset;
    j["degenerate"] = t.degenerate;
    j["source_frames"] = source;
    out << j.dump() << '\n';
  }
  write_snapshot(sub, o.out);
  if (!quiet()) std::printf("wrote %zu triplets\n", n);
  return kExitOk;
}

void add_predictor_options(CLI::App* sub, PredictorOptions& o, bool allow_predictions) {
  sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  if (allow_predictions) {
    sub->add_option("--predictions", o.predictions, "Predictions file (JSON lines)");
  }
  sub->add_option("--oracle", o.oracle, "Reference predictor: bias or content");
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Temporal sentence grounding with shuffled-video training"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads (1 = deterministic)")
      ->check(CLI::PositiveNumber);
  app.add_option("--fps", g.fps, "Feature frames per second")->check(CLI::PositiveNumber);

  GenerateOptions gen;
  auto* gen_cmd = app.add_subcommand("generate-data", "Write the synthetic benchmark");
  gen_cmd->add_option("--config", gen.config, "Benchmark config file");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Overrides the config seed");

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a grounding model");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--config", tr.config, "Training config file");
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_flag("--baseline", tr.baseline, "Disable all auxiliary losses");
  train_cmd->add_option("--lambda1", tr.lambda1, "Weight of the intra-video loss");
  train_cmd->add_option("--lambda2", tr.lambda2, "Weight of the inter-video loss");
  train_cmd->add_option("--lambda3", tr.lambda3, "Weight of the order loss");
  train_cmd->add_option("--epochs", tr.epochs, "Overrides the config epochs");
  train_cmd->add_option("--seed", tr.seed, "Overrides the config seed");
  train_cmd->add_flag("--resume", tr.resume, "Continue from checkpoint_last.bin");

  EvaluateOptions ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score predictions on a split");
  add_predictor_options(eval_cmd, ev.source, true);
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "Split name");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();

  ShuffleOptions sh;
  auto* shuffle_cmd =
      app.add_subcommand("shuffle-test", "Compare metrics on original and randomized videos");
  add_predictor_options(shuffle_cmd, sh.source, false);
  shuffle_cmd->add_option("--data", sh.data, "Dataset directory")->required();
  shuffle_cmd->add_option("--split", sh.split, "Split name");
  shuffle_cmd->add_option("--segment-len", sh.segment_len, "Frames per segment")
      ->check(CLI::PositiveNumber);
  shuffle_cmd->add_option("--seed", sh.seed, "Permutation seed");
  shuffle_cmd->add_option("--out", sh.out, "Output directory")->required();

  BiasOptions bi;
  auto* bias_cmd = app.add_subcommand("bias-report", "Moment-location histograms per word");
  bias_cmd->add_option("--data", bi.data, "Dataset directory")->required();
  bias_cmd->add_option("--word", bi.word, "Query word");
  bias_cmd->add_option("--top-k", bi.top_k, "Most frequent words");
  bias_cmd->add_option("--bins", bi.bins, "Bins per axis");
  bias_cmd->add_option("--split", bi.split, "Split compared with training");
  bias_cmd->add_option("--predictions", bi.predictions, "Predictions on that split");
  bias_cmd->add_option("--out", bi.out, "Output directory")->required();

  DumpOptions du;
  auto* dump_cmd = app.add_subcommand("dump-triplets", "Write one epoch's training triplets");
  dump_cmd->add_option("--data", du.data, "Dataset directory")->required();
  dump_cmd->add_option("--split", du.split, "Split name");
  dump_cmd->add_option("--epoch", du.epoch, "Epoch index");
  dump_cmd->add_option("--seed", du.seed, "Training seed");
  dump_cmd->add_option("--count", du.count, "Number of triplets (0 = all)");
  dump_cmd->add_option("--out", du.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return generate_data(*gen_cmd, gen);
    if (train_cmd->parsed()) return train(*train_cmd, tr, g);
    if (eval_cmd->parsed()) return evaluate_cmd(*eval_cmd, ev, g);
    if (shuffle_cmd->parsed()) return shuffle_test(*shuffle_cmd, sh, g);
    if (bias_cmd->parsed()) return bias_report(*bias_cmd, bi, g);
    if (dump_cmd->parsed()) return dump_triplets(*dump_cmd, du, g);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const tsg::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace tsg::cli
