#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chprune/criteria.hpp"
#include "chprune/pipeline.hpp"

namespace chprune {

/// 1-based ranks of `values` in ascending order; tied values share the
/// average of the positions they span.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of positions i+1..j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
    i = j;
  }
  return ranks;
}

inline bool has_ties(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("pearson: need two equal-length series, n >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw Error("correlation undefined: a series is constant");
  return sab / std::sqrt(saa * sbb);
}

/// r_s = 1 - 6 sum(d^2) / (N (N^2 - 1)); valid for distinct ranks.
inline double spearman_distinct(std::span<const double> rank_a, std::span<const double> rank_b) {
  if (rank_a.size() != rank_b.size() || rank_a.size() < 2) {
    throw Error("spearman: need two equal-length rank vectors, N >= 2");
  }
  double sum_d2 = 0.0;
  for (std::size_t i = 0; i < rank_a.size(); ++i) {
    const double d = rank_a[i] - rank_b[i];
    sum_d2 += d * d;
  }
  const double n = static_cast<double>(rank_a.size());
  return 1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0));
}

/// Spearman correlation of two score vectors over the same items. Uses the
/// closed form when neither side has ties, Pearson of average ranks
/// otherwise.
inline double spearman_scores(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  if (!has_ties(a) && !has_ties(b)) return spearman_distinct(ra, rb);
  return pearson(ra, rb);
}

struct CorrelationReport {
  double r_s = 0.0;
  std::size_t n = 0;
  std::vector<std::pair<double, double>> pairs;  // (rank in a, rank in b) per filter
  std::string criterion;
  std::string mode;
  double learning_rate = std::nan("");
  std::string protocol;
};

inline CorrelationReport spearman(const Ranking& a, const Ranking& b) {
  std::vector<FilterId> only_a, only_b;
  const std::size_t layers = std::max(a.scores.size(), b.scores.size());
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t na = l < a.scores.size() ? a.scores[l].size() : 0;
    const std::size_t nb = l < b.scores.size() ? b.scores[l].size() : 0;
    for (std::size_t f = nb; f < na; ++f) only_a.push_back({l, f});
    for (std::size_t f = na; f < nb; ++f) only_b.push_back({l, f});
  }
  if (!only_a.empty() || !only_b.empty()) {
    std::ostringstream msg;
    msg << "spearman: rankings cover different filters; only in first:";
    for (const auto& id : only_a) msg << ' ' << to_string(id);
    msg << "; only in second:";
    for (const auto& id : only_b) msg << ' ' << to_string(id);
    throw Error(msg.str());
  }
  std::vector<double> sa, sb;
  for (std::size_t l = 0; l < a.scores.size(); ++l) {
    sa.insert(sa.end(), a.scores[l].begin(), a.scores[l].end());
    sb.insert(sb.end(), b.scores[l].begin(), b.scores[l].end());
  }
  if (sa.size() < 2) throw Error("spearman: need N >= 2 filters");
  CorrelationReport report;
  report.n = sa.size();
  report.r_s = std::clamp(spearman_scores(sa, sb), -1.0, 1.0);
  const auto ra = average_ranks(sa), rb = average_ranks(sb);
  for (std::size_t i = 0; i < ra.size(); ++i) report.pairs.emplace_back(ra[i], rb[i]);
  report.criterion = std::string(to_string(a.criterion));
  report.mode = std::string(to_string(a.mode)) + "-vs-" + std::string(to_string(b.mode));
  return report;
}

/// Pairwise correlations between `n_repeats` precise rankings that differ
/// only in mini-batch shuffling. `n_batches` = 0 means one full epoch.
inline std::vector<CorrelationReport> variation_baseline(const NetworkGraph& net, const Dataset& train,
                                                         Criterion criterion, std::size_t n_repeats,
                                                         std::uint64_t seed, std::size_t batch_size,
                                                         std::size_t n_batches, RankOptions options) {
  if (n_repeats < 2) throw Error("variation_baseline: n_repeats must be >= 2");
  std::vector<Ranking> rankings;
  for (std::size_t r = 0; r < n_repeats; ++r) {
    BatchStream stream(train, batch_size, mix_seed(seed, 100 + r));
    const std::size_t nb = n_batches > 0 ? n_batches : stream.batches_per_epoch();
    rankings.push_back(precise_rank(net, stream, nb, criterion, options));
  }
  std::vector<CorrelationReport> reports;
  for (std::size_t i = 0; i < rankings.size(); ++i) {
    for (std::size_t j = i + 1; j < rankings.size(); ++j) {
      auto rep = spearman(rankings[i], rankings[j]);
      rep.protocol = "variation: precise vs precise, shuffle seeds " + std::to_string(i) + "/" +
                     std::to_string(j) + ", batches " + std::to_string(n_batches);
      reports.push_back(std::move(rep));
    }
  }
  return reports;
}

/// How a coarse ranking is compared against a precise one.
struct CorrelationProtocol {
  Criterion criterion = Criterion::taylor;
  std::size_t finetune_batches = 100;
  std::size_t batch_size = 64;
  RankOptions options = RankOptions::defaults_for(Criterion::taylor);
  bool precise_after = true;  // rank the fine-tuned weights (else the starting weights)

  std::string describe() const {
    return "coarse over " + std::to_string(finetune_batches) + " fine-tune batches of " +
           std::to_string(batch_size) + "; precise over the same batches on the " +
           (precise_after ? "fine-tuned" : "starting") + " weights";
  }
};

/// Fine-tunes a copy of `net` for the protocol's window while harvesting a
/// coarse ranking, then ranks precisely over the same batches.
inline CorrelationReport coarse_precise_correlation(const NetworkGraph& net, const Dataset& train,
                                                    const CorrelationProtocol& protocol,
                                                    double learning_rate, std::uint64_t seed) {
  NetworkGraph work = net;
  const auto stream_seed = mix_seed(seed, seed_salt::finetune);
  BatchStream stream(train, protocol.batch_size, stream_seed);
  ScoreBoard board = reset(work, 0, protocol.options.abs_before_mean);
  for (std::size_t b = 0; b < protocol.finetune_batches; ++b) {
    train_step(work, stream.next_batch(), learning_rate, &board);
  }
  const auto coarse = coarse_rank(board, protocol.criterion, protocol.options);
  BatchStream replay(train, protocol.batch_size, stream_seed);
  const auto precise = precise_rank(protocol.precise_after ? work : net, replay,
                                    protocol.finetune_batches, protocol.criterion, protocol.options);
  auto report = spearman(coarse, precise);
  report.learning_rate = learning_rate;
  report.protocol = protocol.describe();
  return report;
}

struct SummaryStat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
  std::vector<double> values;
};

inline SummaryStat summarize(std::vector<double> values) {
  SummaryStat s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  const double n = static_cast<double>(s.values.size());
  s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / n;
  if (s.values.size() > 1) {
    double sq = 0.0;
    for (double v : s.values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / (n - 1.0));
  }
  return s;
}

/// Coarse-vs-precise correlation per learning rate plus the
/// precise-vs-precise variation, each over `repeats` seeds.
struct CorrelationStudy {
  std::string label;
  std::vector<double> learning_rates;
  std::vector<SummaryStat> correlation;  // parallel to learning_rates
  SummaryStat variation;
  std::string protocol;

  void write_csv(std::ostream& os, const std::vector<std::string>& header = {}) const {
    for (const auto& h : header) os << "# " << h << '\n';
    os << "model";
    for (double lr : learning_rates) {
      std::ostringstream t;
      t << lr;
      os << ",corr_" << t.str() << "_mean,corr_" << t.str() << "_std";
    }
    os << ",variation_mean,variation_std,repeats\n";
    os.precision(6);
    os << std::fixed;
    os << label;
    for (const auto& c : correlation) os << ',' << c.mean << ',' << c.stddev;
    os << ',' << variation.mean << ',' << variation.stddev << ',' << variation.values.size() << '\n';
    os.unsetf(std::ios::fixed);
  }
};

inline CorrelationStudy correlation_study(const NetworkGraph& net, const Dataset& train,
                                          const CorrelationProtocol& protocol,
                                          const std::vector<double>& learning_rates, std::size_t repeats,
                                          std::uint64_t seed, std::size_t variation_batches,
                                          std::string label = "model") {
  if (repeats < 1) throw Error("correlation_study: repeats must be >= 1");
  CorrelationStudy study;
  study.label = std::move(label);
  study.learning_rates = learning_rates;
  study.protocol = protocol.describe();
  std::vector<std::vector<double>> per_lr(learning_rates.size());
  std::vector<double> variation;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto run_seed = mix_seed(seed, 1000 + r);
    for (std::size_t i = 0; i < learning_rates.size(); ++i) {
      per_lr[i].push_back(coarse_precise_correlation(net, train, protocol, learning_rates[i], run_seed).r_s);
    }
    const auto pair = variation_baseline(net, train, protocol.criterion, 2, run_seed, protocol.batch_size,
                                         variation_batches, protocol.options);
    variation.push_back(pair.front().r_s);
  }
  for (auto& v : per_lr) study.correlation.push_back(summarize(std::move(v)));
  study.variation = summarize(std::move(variation));
  return study;
}

}  // namespace chprune
