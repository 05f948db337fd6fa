#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "chprune/capture.hpp"
#include "chprune/criteria.hpp"
#include "chprune/data.hpp"
#include "chprune/network.hpp"
#include "chprune/pruner.hpp"
#include "json.hpp"

namespace chprune {

/// splitmix64 finalizer; derives independent stream seeds from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace seed_salt {
inline constexpr std::uint64_t finetune = 1;
inline constexpr std::uint64_t ranking = 2;
inline constexpr std::uint64_t bootstrap = 3;
inline constexpr std::uint64_t pretrain = 4;
}  // namespace seed_salt

struct DataSplit {
  Dataset train;
  Dataset test;
};

enum class Bootstrap { random, warmup };

struct PipelineConfig {
  Criterion criterion = Criterion::taylor;
  RankMode mode = RankMode::precise;
  std::size_t window_start = 1;
  std::size_t filters_per_prune = 10;
  std::size_t finetune_batches = 100;
  double learning_rate = 1e-4;
  std::size_t batch_size = 64;
  PruneTarget target{std::nullopt, 0.5};
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;        // prune iterations between evaluations
  std::size_t ranking_batches = 0;   // precise pass size; 0 = one full epoch
  std::optional<bool> normalize;     // unset = criterion default
  bool abs_before_mean = true;
  Bootstrap bootstrap = Bootstrap::random;

  SelectionStrategy strategy() const { return {window_start, filters_per_prune}; }

  RankOptions rank_options() const {
    auto opts = RankOptions::defaults_for(criterion);
    if (normalize) opts.normalize = *normalize;
    opts.abs_before_mean = abs_before_mean;
    return opts;
  }

  void validate() const {
    if (window_start < 1) throw Error("window_start must be >= 1");
    if (filters_per_prune < 1) throw Error("filters_per_prune must be >= 1");
    if (finetune_batches < 1) throw Error("finetune_batches must be >= 1");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (eval_every < 1) throw Error("eval_every must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw Error("learning_rate must be finite and >= 0");
    }
    if (mode == RankMode::precise && criterion == Criterion::random) {
      throw Error("precise mode needs a data-driven criterion (taylor or mean-activation)");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["criterion"] = std::string(to_string(criterion));
    j["mode"] = std::string(to_string(mode));
    j["window_start"] = window_start;
    j["filters_per_prune"] = filters_per_prune;
    j["finetune_batches"] = finetune_batches;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    if (target.total_filters_to_remove) j["target_remove"] = *target.total_filters_to_remove;
    if (target.target_remaining_fraction) j["target_fraction"] = *target.target_remaining_fraction;
    j["seed"] = seed;
    j["eval_every"] = eval_every;
    j["ranking_batches"] = ranking_batches;
    j["normalize"] = rank_options().normalize;
    j["abs_before_mean"] = abs_before_mean;
    j["bootstrap"] = bootstrap == Bootstrap::random ? "random" : "warmup";
    return j;
  }
};

struct IterationMetrics {
  std::size_t iteration = 0;
  std::size_t filters_remaining = 0;
  std::size_t params_remaining = 0;
  std::optional<double> test_accuracy;
  double train_loss = 0.0;
  double ranking_time_s = 0.0;
  double finetune_time_s = 0.0;
  double total_elapsed_s = 0.0;
};

struct RunMetrics {
  RankMode mode = RankMode::precise;
  Criterion criterion = Criterion::taylor;
  std::size_t initial_filters = 0;
  double baseline_accuracy = 0.0;
  std::vector<IterationMetrics> rows;
  std::vector<SurgeryRecord> surgeries;
  PassCounter passes;
  std::optional<std::string> error;

  double mean_ranking_time() const {
    if (rows.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& r : rows) sum += r.ranking_time_s;
    return sum / static_cast<double>(rows.size());
  }
  /// Rank + surgery + fine-tune time from the first ranking to the target.
  double total_time() const { return rows.empty() ? 0.0 : rows.back().total_elapsed_s; }
  std::optional<double> final_accuracy() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
      if (it->test_accuracy) return it->test_accuracy;
    }
    return std::nullopt;
  }

  /// One row per prune iteration. Lines of `header` are written first as
  /// `# ` comments. Timing columns are omitted when `timing` is false.
  void write_csv(std::ostream& os, const std::vector<std::string>& header = {}, bool timing = true) const {
    for (const auto& h : header) os << "# " << h << '\n';
    os << "iteration,filters_remaining,filters_pruned,params_remaining,test_accuracy,train_loss";
    if (timing) os << ",ranking_time_s,finetune_time_s,total_elapsed_s";
    os << '\n';
    os.precision(17);
    for (const auto& r : rows) {
      os << r.iteration << ',' << r.filters_remaining << ',' << (initial_filters - r.filters_remaining)
         << ',' << r.params_remaining << ',';
      if (r.test_accuracy) os << *r.test_accuracy;
      os << ',' << r.train_loss;
      if (timing) os << ',' << r.ranking_time_s << ',' << r.finetune_time_s << ',' << r.total_elapsed_s;
      os << '\n';
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = std::string(to_string(mode));
    j["criterion"] = std::string(to_string(criterion));
    j["initial_filters"] = initial_filters;
    j["baseline_accuracy"] = baseline_accuracy;
    j["mean_ranking_time_s"] = mean_ranking_time();
    j["total_time_s"] = total_time();
    j["passes"] = {{"ranking", passes.ranking},
                   {"finetune", passes.finetune},
                   {"eval", passes.eval},
                   {"pretrain", passes.pretrain}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row{{"iteration", r.iteration},
                         {"filters_remaining", r.filters_remaining},
                         {"params_remaining", r.params_remaining},
                         {"train_loss", r.train_loss},
                         {"ranking_time_s", r.ranking_time_s},
                         {"finetune_time_s", r.finetune_time_s},
                         {"total_elapsed_s", r.total_elapsed_s}};
      row["test_accuracy"] = r.test_accuracy ? nlohmann::json(*r.test_accuracy) : nlohmann::json();
      j["rows"].push_back(row);
    }
    if (error) j["error"] = *error;
    return j;
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace detail

/// Top-1 accuracy over the whole dataset, in chunks of `batch_size`.
inline double evaluate(const NetworkGraph& net, const Dataset& data, std::size_t batch_size = 256,
                       PassCounter* counter = nullptr) {
  if (data.size() == 0) throw Error("evaluate: empty dataset");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto chunk = data.subset(idx);
    const auto pass = run_forward(net, chunk.images);
    if (counter) ++counter->eval;
    const auto& logits = pass.logits();
    const std::size_t classes = logits.dim(1);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const double* row = logits.raw() + n * classes;
      const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
      if (pred == chunk.labels[n]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// One SGD step on `batch`. When `board` is given the pass's taps are
/// accumulated into it before the weights move. Returns the batch loss.
inline double train_step(NetworkGraph& net, const Batch& batch, double learning_rate,
                         ScoreBoard* board = nullptr, std::size_t* pass_count = nullptr) {
  const auto pass = run_forward(net, batch.images);
  if (pass_count) ++*pass_count;
  const auto loss = softmax_cross_entropy(pass.logits(), batch.labels);
  if (!std::isfinite(loss.loss)) throw Error("training diverged: loss is not finite");
  const auto grads = run_backward(net, pass, loss.grad_logits);
  if (board) accumulate_batch(*board, pass, &grads.grad_taps);
  sgd_step(net.mutable_layers(), grads.param_grads, learning_rate);
  return loss.loss;
}

struct PretrainConfig {
  std::size_t epochs = 5;
  double learning_rate = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  double baseline_accuracy = 0.0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

/// Raised when pre-training produces a non-finite loss; carries the network
/// as of the last completed epoch.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, NetworkGraph last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const NetworkGraph& last_good() const noexcept { return last_good_; }

 private:
  NetworkGraph last_good_;
};

inline PretrainResult pretrain(NetworkGraph& net, const DataSplit& data, const PretrainConfig& config,
                               PassCounter* counter = nullptr) {
  if (data.train.size() == 0) throw Error("pretrain: empty training set");
  BatchStream stream(data.train, config.batch_size, mix_seed(config.seed, seed_salt::pretrain));
  PretrainResult result;
  NetworkGraph last_good = net;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    const std::size_t batches = stream.batches_per_epoch();
    if (batches == 0) throw Error("pretrain: training set smaller than one batch");
    std::size_t* passes = counter ? &counter->pretrain : nullptr;
    for (std::size_t b = 0; b < batches; ++b) {
      double loss = 0.0;
      try {
        loss = train_step(net, stream.next_batch(), config.learning_rate, nullptr, passes);
      } catch (const Error& e) {
        net = last_good;
        throw TrainingDiverged("pretrain epoch " + std::to_string(epoch) + ": " + e.what(), last_good);
      }
      loss_sum += loss;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    result.epoch_accuracy.push_back(evaluate(net, data.test, 256, counter));
    last_good = net;
  }
  result.baseline_accuracy = evaluate(net, data.test, 256, counter);
  return result;
}

namespace detail {

struct FinetuneOutcome {
  double mean_loss = 0.0;
  double seconds = 0.0;
};

inline FinetuneOutcome finetune(NetworkGraph& net, BatchStream& stream, const PipelineConfig& config,
                                ScoreBoard* board, PassCounter& passes) {
  const auto start = Clock::now();
  double loss = 0.0;
  for (std::size_t b = 0; b < config.finetune_batches; ++b) {
    loss += train_step(net, stream.next_batch(), config.learning_rate, board, &passes.finetune);
  }
  return {loss / static_cast<double>(config.finetune_batches), seconds_since(start)};
}

// Shared prune-iteration loop. `rank` produces the ranking for the current
// network (and is the only timed RT section); `board` is non-null in coarse
// mode, where fine-tuning feeds it and each prune resets it.
template <typename RankFn>
RunMetrics run_pipeline(NetworkGraph& net, const DataSplit& data, const PipelineConfig& config,
                        ScoreBoard* board, RankFn&& rank) {
  RunMetrics m;
  m.mode = config.mode;
  m.criterion = config.criterion;
  m.initial_filters = net.total_filters();
  m.baseline_accuracy = evaluate(net, data.test, 256, &m.passes);
  BatchStream ft_stream(data.train, config.batch_size, mix_seed(config.seed, seed_salt::finetune));
  std::size_t step = 0;
  double elapsed = 0.0;
  try {
    const std::size_t target = config.target.remaining_filters(m.initial_filters, net.conv_count());
    if (board && config.bootstrap == Bootstrap::warmup) {
      *board = reset(net, step, config.abs_before_mean);
      const auto warm = finetune(net, ft_stream, config, board, m.passes);
      step += config.finetune_batches;
      elapsed += warm.seconds;
    }
    std::size_t iteration = 0;
    while (net.total_filters() > target) {
      ++iteration;
      IterationMetrics row;
      row.iteration = iteration;

      auto t0 = Clock::now();
      const Ranking ranking = rank(net, iteration, m.passes);
      row.ranking_time_s = seconds_since(t0);

      t0 = Clock::now();
      const auto victims = select_filters(ranking, config.strategy(), net);
      SurgeryRecord record{step, describe_victims(ranking, victims), net.parameter_count(), 0};
      prune_filters(net, victims);
      record.params_after = net.parameter_count();
      m.surgeries.push_back(std::move(record));
      if (board) *board = reset(net, step, config.abs_before_mean);
      const double surgery_s = seconds_since(t0);

      const auto ft = finetune(net, ft_stream, config, board, m.passes);
      step += config.finetune_batches;
      row.finetune_time_s = ft.seconds;
      row.train_loss = ft.mean_loss;
      elapsed += row.ranking_time_s + surgery_s + ft.seconds;
      row.total_elapsed_s = elapsed;
      row.filters_remaining = net.total_filters();
      row.params_remaining = net.parameter_count();
      if (iteration % config.eval_every == 0 || net.total_filters() <= target) {
        row.test_accuracy = evaluate(net, data.test, 256, &m.passes);
      }
      m.rows.push_back(row);
    }
  } catch (const Error& e) {
    m.error = e.what();
  }
  return m;
}

}  // namespace detail

/// Baseline loop: precise rank (frozen weights) -> prune -> fine-tune.
inline RunMetrics run_precise_pipeline(NetworkGraph& net, const DataSplit& data, PipelineConfig config) {
  config.mode = RankMode::precise;
  config.validate();
  BatchStream rank_stream(data.train, config.batch_size, mix_seed(config.seed, seed_salt::ranking));
  const std::size_t n_batches =
      config.ranking_batches > 0 ? config.ranking_batches : rank_stream.batches_per_epoch();
  const auto opts = config.rank_options();
  return detail::run_pipeline(net, data, config, nullptr,
                              [&](const NetworkGraph& current, std::size_t, PassCounter& passes) {
                                return precise_rank(current, rank_stream, n_batches, config.criterion,
                                                    opts, &passes);
                              });
}

/// Ranking embedded in fine-tuning: the first prune is random (or follows a
/// warm-up window), later prunes sort the scores harvested while
/// fine-tuning since the previous prune.
inline RunMetrics run_coarse_pipeline(NetworkGraph& net, const DataSplit& data, PipelineConfig config) {
  config.mode = RankMode::coarse;
  config.validate();
  ScoreBoard board = reset(net, 0, config.abs_before_mean);
  const auto opts = config.rank_options();
  const auto bootstrap_seed = mix_seed(config.seed, seed_salt::bootstrap);
  return detail::run_pipeline(net, data, config, &board,
                              [&](const NetworkGraph& current, std::size_t iteration, PassCounter&) {
                                if (config.criterion == Criterion::random || board.batches_seen() == 0) {
                                  return random_rank(current, mix_seed(bootstrap_seed, iteration));
                                }
                                return coarse_rank(board, config.criterion, opts);
                              });
}

inline RunMetrics run_pipeline(NetworkGraph& net, const DataSplit& data, const PipelineConfig& config) {
  return config.mode == RankMode::precise ? run_precise_pipeline(net, data, config)
                                          : run_coarse_pipeline(net, data, config);
}

}  // namespace chprune
