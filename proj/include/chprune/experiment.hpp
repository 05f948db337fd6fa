#pragma once

// Experiment harness: key/value experiment configs and the study commands
// behind the command-line tool. Every command writes into its own directory
// under `out`: CSV files carrying a `# ` header with the resolved config, plus
// one manifest.json.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "config.hpp"
#include "data.hpp"
#include "network.hpp"
#include "pipeline.hpp"

namespace chprune {

struct ExperimentConfig {
  std::string architecture;                // path to an .arch file
  std::optional<std::size_t> input_size;   // overrides the architecture's height and width

  std::string dataset = "synthetic";       // synthetic | cifar10
  std::string cifar_dir;
  std::size_t cifar_train_per_class = 0;   // 0 = all records
  std::size_t cifar_test_per_class = 0;
  SyntheticSpec synthetic;                 // n = training size; shape follows the architecture
  std::size_t synthetic_test = 500;
  std::optional<std::uint64_t> data_seed;  // unset = seed

  PretrainConfig pretrain;
  std::string checkpoint;                  // empty = <out>/checkpoint

  PipelineConfig pipeline;
  std::uint64_t seed = 0;
  std::size_t repeats = 1;
  std::string out = "results";
  std::string label = "model";

  std::vector<std::size_t> windows;        // empty = 1, k+1, 2k+1, 3k+1
  std::vector<double> learning_rates{1e-4, 1e-5};
  std::size_t correlation_batches = 0;     // 0 = finetune_batches
  std::size_t variation_batches = 0;       // 0 = one full epoch
  bool precise_after = true;

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out) / "checkpoint" : std::filesystem::path(checkpoint);
  }
  std::uint64_t resolved_data_seed() const { return data_seed.value_or(seed); }
  std::vector<std::size_t> resolved_windows() const {
    if (!windows.empty()) return windows;
    const auto k = pipeline.filters_per_prune;
    return {1, k + 1, 2 * k + 1, 3 * k + 1};
  }
  /// Seed of repeat `r`; repeat 0 uses `seed` itself.
  std::uint64_t repeat_seed(std::size_t r) const { return seed + r; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["architecture"] = architecture;
    if (input_size) j["input_size"] = *input_size;
    j["dataset"] = dataset;
    if (dataset == "cifar10") {
      j["cifar_dir"] = cifar_dir;
      j["cifar_train_per_class"] = cifar_train_per_class;
      j["cifar_test_per_class"] = cifar_test_per_class;
    } else {
      j["synthetic_train"] = synthetic.n;
      j["synthetic_test"] = synthetic_test;
      j["synthetic_classes"] = synthetic.classes;
      j["synthetic_noise"] = synthetic.noise;
      j["synthetic_jitter"] = synthetic.jitter;
      j["synthetic_color_jitter"] = synthetic.color_jitter;
      j["synthetic_prototype_seed"] = synthetic.prototype_seed;
    }
    j["data_seed"] = resolved_data_seed();
    j["pretrain_epochs"] = pretrain.epochs;
    j["pretrain_lr"] = pretrain.learning_rate;
    j["pretrain_batch_size"] = pretrain.batch_size;
    j["checkpoint"] = checkpoint_path().string();
    j["pipeline"] = pipeline.to_json();
    j["seed"] = seed;
    j["repeats"] = repeats;
    j["out"] = out;
    j["label"] = label;
    j["windows"] = resolved_windows();
    j["learning_rates"] = learning_rates;
    j["correlation_batches"] = correlation_batches;
    j["variation_batches"] = variation_batches;
    j["precise_after"] = precise_after;
    return j;
  }
};

/// Reads an experiment config. `overrides` replace keys of the document
/// before parsing; relative architecture paths resolve against `base_dir`.
inline ExperimentConfig parse_experiment(ConfigDocument doc, const std::filesystem::path& base_dir = {},
                                         const std::map<std::string, std::string>& overrides = {}) {
  if (!doc.layers.empty()) {
    throw Error("line " + std::to_string(doc.layers.front().line) +
                ": layer lines belong in the architecture file");
  }
  for (const auto& [k, v] : overrides) {
    doc.values[k] = v;
    doc.value_lines.try_emplace(k, 0);
  }
  ExperimentConfig c;
  ConfigReader r(doc);
  c.architecture = r.get_string("architecture", "");
  if (c.architecture.empty()) throw Error("experiment config needs 'architecture'");
  if (std::filesystem::path(c.architecture).is_relative() && !base_dir.empty()) {
    c.architecture = (base_dir / c.architecture).lexically_normal().string();
  }
  if (r.has("input_size")) c.input_size = r.get<std::size_t>("input_size", 0);

  c.dataset = r.get_string("dataset", c.dataset);
  if (c.dataset != "synthetic" && c.dataset != "cifar10") {
    throw Error("dataset must be 'synthetic' or 'cifar10', got '" + c.dataset + "'");
  }
  c.cifar_dir = r.get_string("cifar_dir", "");
  if (!c.cifar_dir.empty() && std::filesystem::path(c.cifar_dir).is_relative() && !base_dir.empty()) {
    c.cifar_dir = (base_dir / c.cifar_dir).lexically_normal().string();
  }
  if (c.dataset == "cifar10" && c.cifar_dir.empty()) throw Error("dataset 'cifar10' needs 'cifar_dir'");
  c.cifar_train_per_class = r.get("cifar_train_per_class", c.cifar_train_per_class);
  c.cifar_test_per_class = r.get("cifar_test_per_class", c.cifar_test_per_class);
  c.synthetic.n = r.get("synthetic_train", std::size_t{2000});
  c.synthetic_test = r.get("synthetic_test", c.synthetic_test);
  c.synthetic.classes = r.get("synthetic_classes", 0);
  c.synthetic.noise = r.get("synthetic_noise", c.synthetic.noise);
  c.synthetic.jitter = r.get("synthetic_jitter", c.synthetic.jitter);
  c.synthetic.color_jitter = r.get("synthetic_color_jitter", c.synthetic.color_jitter);
  c.synthetic.prototype_seed = r.get("synthetic_prototype_seed", c.synthetic.prototype_seed);
  if (r.has("data_seed")) c.data_seed = r.get<std::uint64_t>("data_seed", 0);

  c.pretrain.epochs = r.get("pretrain_epochs", c.pretrain.epochs);
  c.pretrain.learning_rate = r.get("pretrain_lr", c.pretrain.learning_rate);
  c.pretrain.batch_size = r.get("pretrain_batch_size", c.pretrain.batch_size);
  c.checkpoint = r.get_string("checkpoint", "");

  auto& p = c.pipeline;
  p.criterion = parse_criterion(r.get_string("criterion", std::string(to_string(p.criterion))));
  p.mode = parse_mode(r.get_string("mode", std::string(to_string(p.mode))));
  p.window_start = r.get("window_start", p.window_start);
  p.filters_per_prune = r.get("filters_per_prune", p.filters_per_prune);
  p.finetune_batches = r.get("finetune_batches", p.finetune_batches);
  p.learning_rate = r.get("learning_rate", p.learning_rate);
  p.batch_size = r.get("batch_size", p.batch_size);
  if (r.has("target_remove") && r.has("target_fraction")) {
    throw Error("set only one of 'target_remove' and 'target_fraction'");
  }
  if (r.has("target_remove")) p.target = {r.get<std::size_t>("target_remove", 0), std::nullopt};
  if (r.has("target_fraction")) p.target = {std::nullopt, r.get<double>("target_fraction", 0.5)};
  p.eval_every = r.get("eval_every", p.eval_every);
  p.ranking_batches = r.get("ranking_batches", p.ranking_batches);
  if (r.has("normalize")) p.normalize = r.get<bool>("normalize", true);
  p.abs_before_mean = r.get("abs_before_mean", p.abs_before_mean);
  const auto boot = r.get_string("bootstrap", "random");
  if (boot == "random") {
    p.bootstrap = Bootstrap::random;
  } else if (boot == "warmup") {
    p.bootstrap = Bootstrap::warmup;
  } else {
    throw Error("bootstrap must be 'random' or 'warmup', got '" + boot + "'");
  }

  c.seed = r.get("seed", c.seed);
  c.repeats = r.get("repeats", c.repeats);
  if (c.repeats < 1) throw Error("repeats must be >= 1");
  c.out = r.get_string("out", c.out);
  c.label = r.get_string("label", c.label);
  if (r.has("windows")) c.windows = ConfigReader::parse_list<std::size_t>("windows", r.get_string("windows", ""));
  if (r.has("learning_rates")) {
    c.learning_rates = ConfigReader::parse_list<double>("learning_rates", r.get_string("learning_rates", ""));
  }
  c.correlation_batches = r.get("correlation_batches", c.correlation_batches);
  c.variation_batches = r.get("variation_batches", c.variation_batches);
  c.precise_after = r.get("precise_after", c.precise_after);
  c.pretrain.seed = c.seed;
  r.finish();
  p.seed = c.seed;
  p.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path,
                                        const std::map<std::string, std::string>& overrides = {}) {
  return parse_experiment(parse_config(read_text_file(path.string())), path.parent_path(), overrides);
}

inline ArchitectureSpec experiment_architecture(const ExperimentConfig& c) {
  auto spec = load_architecture(c.architecture);
  if (c.input_size) spec.input[1] = spec.input[2] = *c.input_size;
  return spec;
}

namespace detail {

inline std::size_t output_classes(const ArchitectureSpec& spec) {
  for (auto it = spec.layers.rbegin(); it != spec.layers.rend(); ++it) {
    if (it->kind == LayerKind::linear) return it->out;
  }
  throw Error("architecture has no linear output layer");
}

}  // namespace detail

/// Train and test splits, standardized with training-split statistics.
inline DataSplit load_experiment_data(const ExperimentConfig& c, const ArchitectureSpec& spec) {
  const auto classes = detail::output_classes(spec);
  DataSplit split;
  if (c.dataset == "cifar10") {
    if (spec.input != std::vector<std::size_t>{3, kCifarSide, kCifarSide}) {
      throw Error("cifar10 needs a 3x32x32 architecture input");
    }
    const auto [train_files, test_file] = cifar10_files(c.cifar_dir);
    split.train = read_cifar10_records(train_files);
    split.test = read_cifar10_records({test_file});
    if (c.cifar_train_per_class) split.train = split.train.take_per_class(c.cifar_train_per_class);
    if (c.cifar_test_per_class) split.test = split.test.take_per_class(c.cifar_test_per_class);
  } else {
    auto s = c.synthetic;
    if (s.classes == 0) s.classes = static_cast<int>(classes);
    s.channels = spec.input[0];
    s.height = spec.input[1];
    s.width = spec.input[2];
    const auto seed = c.resolved_data_seed();
    split.train = synthetic_dataset(s, mix_seed(seed, 11));
    s.n = c.synthetic_test;
    split.test = synthetic_dataset(s, mix_seed(seed, 12));
  }
  if (static_cast<std::size_t>(split.train.class_count) > classes) {
    throw Error("dataset has " + std::to_string(split.train.class_count) + " classes but the model outputs " +
                std::to_string(classes));
  }
  const auto stats = compute_channel_stats(split.train);
  standardize(split.train, stats);
  standardize(split.test, stats);
  return split;
}

/// Precise pipeline per window, each over the same seeds, all from `start`.
struct WindowStudy {
  std::vector<std::size_t> windows;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<RunMetrics>> runs;  // [window][seed]

  /// Mean over seeds of the trajectory-mean |acc(window 0) - acc(window w)|,
  /// in percentage points.
  double gap_to_baseline_pp(std::size_t w) const {
    double sum = 0.0;
    for (std::size_t s = 0; s < seeds.size(); ++s) sum += trajectory_gap(runs[0][s], runs[w][s]);
    return 100.0 * sum / static_cast<double>(seeds.size());
  }

  /// Mean over seeds of the trajectory-mean of the largest pairwise gap
  /// across windows, in percentage points.
  double max_pairwise_gap_pp() const {
    double sum = 0.0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto n = runs[0][s].rows.size();
      double acc = 0.0;
      std::size_t points = 0;
      for (std::size_t t = 0; t < n; ++t) {
        double lo = 1e300, hi = -1e300;
        bool ok = true;
        for (const auto& per_window : runs) {
          if (t >= per_window[s].rows.size() || !per_window[s].rows[t].test_accuracy) {
            ok = false;
            break;
          }
          lo = std::min(lo, *per_window[s].rows[t].test_accuracy);
          hi = std::max(hi, *per_window[s].rows[t].test_accuracy);
        }
        if (!ok) continue;
        acc += hi - lo;
        ++points;
      }
      if (points) sum += acc / static_cast<double>(points);
    }
    return 100.0 * sum / static_cast<double>(seeds.size());
  }

  double mean_final_accuracy(std::size_t w) const {
    double sum = 0.0;
    for (const auto& m : runs[w]) sum += m.final_accuracy().value_or(0.0);
    return sum / static_cast<double>(runs[w].size());
  }

  static double trajectory_gap(const RunMetrics& a, const RunMetrics& b) {
    double sum = 0.0;
    std::size_t points = 0;
    for (std::size_t t = 0; t < std::min(a.rows.size(), b.rows.size()); ++t) {
      if (!a.rows[t].test_accuracy || !b.rows[t].test_accuracy) continue;
      sum += std::abs(*a.rows[t].test_accuracy - *b.rows[t].test_accuracy);
      ++points;
    }
    return points ? sum / static_cast<double>(points) : 0.0;
  }
};

inline WindowStudy run_window_study(const NetworkGraph& start, const DataSplit& data, PipelineConfig base,
                                    const std::vector<std::size_t>& windows,
                                    const std::vector<std::uint64_t>& seeds) {
  if (windows.empty() || seeds.empty()) throw Error("window study needs windows and seeds");
  base.mode = RankMode::precise;
  WindowStudy study{windows, seeds, {}};
  for (auto w : windows) {
    auto& per_seed = study.runs.emplace_back();
    for (auto seed : seeds) {
      auto net = start;
      auto cfg = base;
      cfg.window_start = w;
      cfg.seed = seed;
      per_seed.push_back(run_pipeline(net, data, cfg));
      if (per_seed.back().error) return study;
    }
  }
  return study;
}

/// Precise and coarse pipelines over the same configs and seeds.
struct TimingStudy {
  std::vector<RunMetrics> precise, coarse;

  static double mean_rt(const std::vector<RunMetrics>& runs) {
    double s = 0.0;
    for (const auto& m : runs) s += m.mean_ranking_time();
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
  }
  static double mean_tt(const std::vector<RunMetrics>& runs) {
    double s = 0.0;
    for (const auto& m : runs) s += m.total_time();
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
  }
  static double mean_final_accuracy(const std::vector<RunMetrics>& runs) {
    double s = 0.0;
    for (const auto& m : runs) s += m.final_accuracy().value_or(0.0);
    return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
  }

  void write_csv(std::ostream& os, const std::vector<std::string>& header = {}) const {
    for (const auto& h : header) os << "# " << h << '\n';
    os << "mode,RT_mean_s,TT_s\n";
    os.precision(9);
    os << "precise," << mean_rt(precise) << ',' << mean_tt(precise) << '\n';
    os << "coarse," << mean_rt(coarse) << ',' << mean_tt(coarse) << '\n';
  }
};

inline TimingStudy run_timing_study(const NetworkGraph& start, const DataSplit& data, PipelineConfig base,
                                    const std::vector<std::uint64_t>& seeds) {
  TimingStudy study;
  for (auto seed : seeds) {
    for (auto mode : {RankMode::precise, RankMode::coarse}) {
      auto net = start;
      auto cfg = base;
      cfg.mode = mode;
      cfg.seed = seed;
      auto& runs = mode == RankMode::precise ? study.precise : study.coarse;
      runs.push_back(run_pipeline(net, data, cfg));
      if (runs.back().error) return study;
    }
  }
  return study;
}

inline CorrelationProtocol experiment_protocol(const ExperimentConfig& c) {
  CorrelationProtocol p;
  p.criterion = c.pipeline.criterion;
  p.finetune_batches = c.correlation_batches ? c.correlation_batches : c.pipeline.finetune_batches;
  p.batch_size = c.pipeline.batch_size;
  p.options = c.pipeline.rank_options();
  p.precise_after = c.precise_after;
  return p;
}

// ---------------------------------------------------------------------------
// Commands

/// Files written by a command, relative to `out_dir` (a per-command
/// subdirectory of the configured output directory).
struct CommandResult {
  std::filesystem::path out_dir;
  std::vector<std::string> files;
  nlohmann::json summary = nlohmann::json::object();
};

namespace detail {

class Run {
 public:
  Run(const ExperimentConfig& cfg, std::string command, const std::string& subdir)
      : cfg_(cfg), command_(std::move(command)) {
    result_.out_dir = std::filesystem::path(cfg.out) / subdir;
    std::filesystem::create_directories(result_.out_dir);
  }

  std::vector<std::string> header() const {
    return {"chprune " + command_, "seed: " + std::to_string(cfg_.seed), "config: " + cfg_.to_json().dump()};
  }

  std::ofstream open(const std::string& name) {
    const auto path = result_.out_dir / name;
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    result_.files.push_back(name);
    return os;
  }

  template <typename Fn>
  void write(const std::string& name, Fn&& fn) {
    auto os = open(name);
    fn(os);
  }

  void write_metrics(const std::string& stem, const RunMetrics& m, std::uint64_t seed) {
    auto h = header();
    h.push_back("run_seed: " + std::to_string(seed));
    write(stem + ".csv", [&](std::ostream& os) { m.write_csv(os, h); });
    write(stem + ".json", [&](std::ostream& os) {
      auto j = m.to_json();
      j["seed"] = seed;
      j["config"] = cfg_.to_json();
      os << j.dump(2) << '\n';
    });
    write(stem + "_surgery.jsonl", [&](std::ostream& os) {
      for (const auto& s : m.surgeries) os << s.to_json_line() << '\n';
    });
  }

  nlohmann::json& summary() { return result_.summary; }

  /// Writes manifest.json; a non-empty `error` marks the run as failed.
  void finish(const std::string& error = {}) {
    nlohmann::json j;
    j["command"] = command_;
    j["seed"] = cfg_.seed;
    j["config"] = cfg_.to_json();
    j["files"] = result_.files;
    j["summary"] = result_.summary;
    j["status"] = error.empty() ? "ok" : "error";
    if (!error.empty()) j["error"] = error;
    std::ofstream os(result_.out_dir / "manifest.json");
    os << j.dump(2) << '\n';
  }

  CommandResult result() const { return result_; }

 private:
  const ExperimentConfig& cfg_;
  std::string command_;
  CommandResult result_;
};

/// Runs `body`, always writing the manifest; rethrows failures after.
template <typename Body>
CommandResult guarded(const ExperimentConfig& cfg, const std::string& command, const std::string& subdir,
                      Body&& body) {
  Run run(cfg, command, subdir);
  try {
    body(run);
  } catch (const std::exception& e) {
    run.finish(e.what());
    throw;
  }
  run.finish();
  return run.result();
}

inline void check(const RunMetrics& m, const std::string& what) {
  if (m.error) throw Error(what + " failed: " + *m.error);
}

inline std::vector<std::uint64_t> seeds_of(const ExperimentConfig& c) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t r = 0; r < c.repeats; ++r) seeds.push_back(c.repeat_seed(r));
  return seeds;
}

inline std::string lr_tag(double lr) {
  std::ostringstream t;
  t << lr;
  return t.str();
}

}  // namespace detail

/// Loads the experiment's pre-trained checkpoint; absent checkpoints are errors.
inline NetworkGraph experiment_checkpoint(const ExperimentConfig& c) {
  const auto dir = c.checkpoint_path();
  if (!std::filesystem::exists(dir / "manifest.arch")) {
    throw Error("checkpoint not found at " + dir.string() + " (run 'chprune pretrain' first)");
  }
  return load_checkpoint(dir);
}

inline CommandResult cmd_pretrain(const ExperimentConfig& cfg) {
  return detail::guarded(cfg, "pretrain", "pretrain", [&](detail::Run& run) {
    const auto spec = experiment_architecture(cfg);
    const auto data = load_experiment_data(cfg, spec);
    auto net = build_network(spec, cfg.seed);
    PassCounter passes;
    PretrainResult res;
    try {
      res = pretrain(net, data, cfg.pretrain, &passes);
    } catch (const TrainingDiverged& e) {
      save_checkpoint(e.last_good(), cfg.checkpoint_path().string() + ".last_good");
      throw;
    }
    save_checkpoint(net, cfg.checkpoint_path());
    run.write("pretrain.csv", [&](std::ostream& os) {
      for (const auto& h : run.header()) os << "# " << h << '\n';
      os << "epoch,train_loss,test_accuracy\n";
      os.precision(17);
      for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
        os << e + 1 << ',' << res.epoch_loss[e] << ',' << res.epoch_accuracy[e] << '\n';
      }
    });
    run.summary()["baseline_accuracy"] = res.baseline_accuracy;
    run.summary()["checkpoint"] = cfg.checkpoint_path().string();
    run.summary()["parameters"] = net.parameter_count();
    run.summary()["filters"] = net.total_filters();
  });
}

inline CommandResult cmd_prune(const ExperimentConfig& cfg) {
  const std::string base = "prune_" + std::string(to_string(cfg.pipeline.mode)) + "_" +
                           std::string(to_string(cfg.pipeline.criterion));
  return detail::guarded(cfg, "prune", base, [&](detail::Run& run) {
    const auto start = experiment_checkpoint(cfg);
    const auto data = load_experiment_data(cfg, start.architecture());
    nlohmann::json finals = nlohmann::json::array();
    for (auto seed : detail::seeds_of(cfg)) {
      auto net = start;
      auto pc = cfg.pipeline;
      pc.seed = seed;
      const auto m = run_pipeline(net, data, pc);
      const auto stem = cfg.repeats > 1 ? base + "_seed" + std::to_string(seed) : base;
      run.write_metrics(stem, m, seed);
      detail::check(m, "prune run (seed " + std::to_string(seed) + ")");
      save_checkpoint(net, run.result().out_dir / (stem + "_network"));
      finals.push_back({{"seed", seed},
                        {"final_accuracy", m.final_accuracy().value_or(0.0)},
                        {"baseline_accuracy", m.baseline_accuracy},
                        {"filters_remaining", net.total_filters()},
                        {"mean_ranking_time_s", m.mean_ranking_time()},
                        {"total_time_s", m.total_time()}});
    }
    run.summary()["runs"] = finals;
  });
}

inline CommandResult cmd_window_study(const ExperimentConfig& cfg) {
  return detail::guarded(cfg, "window-study", "window-study", [&](detail::Run& run) {
    const auto start = experiment_checkpoint(cfg);
    const auto data = load_experiment_data(cfg, start.architecture());
    const auto windows = cfg.resolved_windows();
    const auto seeds = detail::seeds_of(cfg);
    const auto study = run_window_study(start, data, cfg.pipeline, windows, seeds);
    for (std::size_t w = 0; w < study.runs.size(); ++w) {
      run.write("window_" + std::to_string(windows[w]) + ".csv", [&](std::ostream& os) {
        auto h = run.header();
        h.push_back("window: (" + std::to_string(windows[w]) + ", " + std::to_string(cfg.pipeline.filters_per_prune) +
                    ")");
        for (const auto& hl : h) os << "# " << hl << '\n';
        os << "seed,iteration,filters_remaining,filters_pruned,params_remaining,test_accuracy,train_loss,"
              "ranking_time_s,finetune_time_s,total_elapsed_s\n";
        os.precision(17);
        for (std::size_t s = 0; s < study.runs[w].size(); ++s) {
          const auto& m = study.runs[w][s];
          os << seeds[s] << ",0," << m.initial_filters << ",0,,"
             << m.baseline_accuracy << ",,,,\n";
          for (const auto& r : m.rows) {
            os << seeds[s] << ',' << r.iteration << ',' << r.filters_remaining << ','
               << (m.initial_filters - r.filters_remaining) << ',' << r.params_remaining << ',';
            if (r.test_accuracy) os << *r.test_accuracy;
            os << ',' << r.train_loss << ',' << r.ranking_time_s << ',' << r.finetune_time_s << ','
               << r.total_elapsed_s << '\n';
          }
        }
      });
    }
    for (const auto& per_window : study.runs) {
      for (const auto& m : per_window) detail::check(m, "window study run");
    }
    run.write("window_summary.csv", [&](std::ostream& os) {
      for (const auto& h : run.header()) os << "# " << h << '\n';
      os << "# max_pairwise_gap_pp: " << study.max_pairwise_gap_pp() << '\n';
      os << "window_start,window_width,mean_final_accuracy,mean_gap_to_baseline_pp\n";
      os.precision(9);
      for (std::size_t w = 0; w < windows.size(); ++w) {
        os << windows[w] << ',' << cfg.pipeline.filters_per_prune << ',' << study.mean_final_accuracy(w) << ','
           << study.gap_to_baseline_pp(w) << '\n';
      }
    });
    run.summary()["max_pairwise_gap_pp"] = study.max_pairwise_gap_pp();
    nlohmann::json gaps = nlohmann::json::object();
    for (std::size_t w = 0; w < windows.size(); ++w) gaps[std::to_string(windows[w])] = study.gap_to_baseline_pp(w);
    run.summary()["gap_to_baseline_pp"] = gaps;
  });
}

inline CommandResult cmd_timing_study(const ExperimentConfig& cfg) {
  return detail::guarded(cfg, "timing-study", "timing-study", [&](detail::Run& run) {
    const auto start = experiment_checkpoint(cfg);
    const auto data = load_experiment_data(cfg, start.architecture());
    const auto seeds = detail::seeds_of(cfg);
    const auto study = run_timing_study(start, data, cfg.pipeline, seeds);
    for (const auto* runs : {&study.precise, &study.coarse}) {
      for (std::size_t s = 0; s < runs->size(); ++s) {
        const auto& m = (*runs)[s];
        run.write_metrics("timing_" + std::string(to_string(m.mode)) + "_seed" + std::to_string(seeds[s]), m,
                          seeds[s]);
      }
    }
    for (const auto* runs : {&study.precise, &study.coarse}) {
      for (const auto& m : *runs) detail::check(m, "timing study run");
    }
    run.write("timing.csv", [&](std::ostream& os) { study.write_csv(os, run.header()); });
    run.summary()["precise_rt_mean_s"] = TimingStudy::mean_rt(study.precise);
    run.summary()["coarse_rt_mean_s"] = TimingStudy::mean_rt(study.coarse);
    run.summary()["precise_tt_s"] = TimingStudy::mean_tt(study.precise);
    run.summary()["coarse_tt_s"] = TimingStudy::mean_tt(study.coarse);
    run.summary()["precise_final_accuracy"] = TimingStudy::mean_final_accuracy(study.precise);
    run.summary()["coarse_final_accuracy"] = TimingStudy::mean_final_accuracy(study.coarse);
  });
}

inline CommandResult cmd_correlation_study(const ExperimentConfig& cfg) {
  return detail::guarded(cfg, "correlation-study", "correlation-study", [&](detail::Run& run) {
    const auto start = experiment_checkpoint(cfg);
    const auto data = load_experiment_data(cfg, start.architecture());
    if (cfg.learning_rates.empty()) throw Error("correlation study needs 'learning_rates'");
    const auto protocol = experiment_protocol(cfg);
    const auto study = correlation_study(start, data.train, protocol, cfg.learning_rates, cfg.repeats, cfg.seed,
                                         cfg.variation_batches, cfg.label);
    run.write("correlation.csv", [&](std::ostream& os) {
      auto h = run.header();
      h.push_back("protocol: " + study.protocol);
      study.write_csv(os, h);
    });
    run.write("correlation_runs.csv", [&](std::ostream& os) {
      for (const auto& h : run.header()) os << "# " << h << '\n';
      os << "repeat,series,r_s\n";
      os.precision(17);
      for (std::size_t r = 0; r < cfg.repeats; ++r) {
        for (std::size_t i = 0; i < study.learning_rates.size(); ++i) {
          os << r << ",corr_" << detail::lr_tag(study.learning_rates[i]) << ',' << study.correlation[i].values[r]
             << '\n';
        }
        os << r << ",variation," << study.variation.values[r] << '\n';
      }
    });
    nlohmann::json means = nlohmann::json::object();
    for (std::size_t i = 0; i < study.learning_rates.size(); ++i) {
      means[detail::lr_tag(study.learning_rates[i])] = {{"mean", study.correlation[i].mean},
                                                        {"std", study.correlation[i].stddev}};
    }
    run.summary()["correlation"] = means;
    run.summary()["variation"] = {{"mean", study.variation.mean}, {"std", study.variation.stddev}};
  });
}

inline CommandResult run_command(const std::string& name, const ExperimentConfig& cfg) {
  if (name == "pretrain") return cmd_pretrain(cfg);
  if (name == "prune") return cmd_prune(cfg);
  if (name == "window-study") return cmd_window_study(cfg);
  if (name == "timing-study") return cmd_timing_study(cfg);
  if (name == "correlation-study") return cmd_correlation_study(cfg);
  throw Error("unknown command '" + name + "'");
}

}  // namespace chprune
