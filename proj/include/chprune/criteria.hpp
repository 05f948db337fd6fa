#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "chprune/capture.hpp"
#include "chprune/data.hpp"
#include "chprune/network.hpp"

namespace chprune {

enum class Criterion { taylor, mean_activation, random };
enum class RankMode { precise, coarse };

inline std::string_view to_string(Criterion c) {
  switch (c) {
    case Criterion::taylor: return "taylor";
    case Criterion::mean_activation: return "mean-activation";
    case Criterion::random: return "random";
  }
  return "unknown";
}

inline std::string_view to_string(RankMode m) { return m == RankMode::precise ? "precise" : "coarse"; }

inline Criterion parse_criterion(std::string_view s) {
  if (s == "taylor") return Criterion::taylor;
  if (s == "mean-activation" || s == "mean_activation") return Criterion::mean_activation;
  if (s == "random") return Criterion::random;
  throw Error("unknown criterion '" + std::string(s) + "' (taylor|mean-activation|random)");
}

inline RankMode parse_mode(std::string_view s) {
  if (s == "precise") return RankMode::precise;
  if (s == "coarse") return RankMode::coarse;
  throw Error("unknown mode '" + std::string(s) + "' (precise|coarse)");
}

/// Per conv layer, per filter.
using LayerScores = std::vector<std::vector<double>>;

/// Total order over active filters, least important first.
struct Ranking {
  std::vector<FilterId> ordered;
  LayerScores raw_scores;
  LayerScores scores;  // ordering key (raw, or per-layer normalized)
  Criterion criterion = Criterion::taylor;
  RankMode mode = RankMode::precise;

  std::size_t size() const noexcept { return ordered.size(); }
  double score(const FilterId& id) const { return scores.at(id.layer).at(id.filter); }
  double raw_score(const FilterId& id) const { return raw_scores.at(id.layer).at(id.filter); }

  /// 0-based rank position of every filter, indexed [layer][filter].
  std::vector<std::vector<std::size_t>> positions() const {
    std::vector<std::vector<std::size_t>> pos(scores.size());
    for (std::size_t l = 0; l < scores.size(); ++l) pos[l].assign(scores[l].size(), 0);
    for (std::size_t i = 0; i < ordered.size(); ++i) pos[ordered[i].layer][ordered[i].filter] = i;
    return pos;
  }

  void write_csv(std::ostream& os) const {
    os << "rank,layer,filter,raw_score,normalized_score,criterion,mode\n";
    os.precision(17);
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      const auto& id = ordered[i];
      os << (i + 1) << ',' << id.layer << ',' << id.filter << ',' << raw_score(id) << ','
         << score(id) << ',' << to_string(criterion) << ',' << to_string(mode) << '\n';
    }
  }
};

struct RankOptions {
  bool normalize = true;
  bool abs_before_mean = true;

  /// Per-layer L2 normalization on for Taylor, off for mean activation.
  static RankOptions defaults_for(Criterion c) { return {c == Criterion::taylor, true}; }
};

/// Counts forward passes by purpose. A pass with backward counts once.
struct PassCounter {
  std::size_t ranking = 0;
  std::size_t finetune = 0;
  std::size_t eval = 0;
  std::size_t pretrain = 0;
  std::size_t total() const noexcept { return ranking + finetune + eval + pretrain; }
};

/// Divides every layer by its L2 norm; all-zero layers pass through.
inline LayerScores normalize_per_layer(LayerScores scores) {
  for (auto& layer : scores) {
    double sq = 0.0;
    for (double v : layer) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > 0.0) {
      for (double& v : layer) v /= norm;
    }
  }
  return scores;
}

/// Sorts ascending by (normalized) score; ties by (layer, filter).
inline Ranking make_ranking(LayerScores raw, Criterion criterion, RankMode mode, bool normalize) {
  Ranking r;
  r.criterion = criterion;
  r.mode = mode;
  for (std::size_t l = 0; l < raw.size(); ++l) {
    for (std::size_t f = 0; f < raw[l].size(); ++f) {
      const double v = raw[l][f];
      if (!std::isfinite(v) || v < 0.0) {
        throw Error("ranking: score of filter " + to_string(FilterId{l, f}) +
                    " is not finite and non-negative");
      }
      r.ordered.push_back({l, f});
    }
  }
  r.scores = normalize ? normalize_per_layer(raw) : raw;
  r.raw_scores = std::move(raw);
  std::stable_sort(r.ordered.begin(), r.ordered.end(), [&](const FilterId& a, const FilterId& b) {
    const double sa = r.score(a), sb = r.score(b);
    if (sa != sb) return sa < sb;
    return a < b;
  });
  return r;
}

namespace detail {

inline LayerScores board_scores(const ScoreBoard& board, Criterion criterion) {
  switch (criterion) {
    case Criterion::taylor: return board.taylor_scores();
    case Criterion::mean_activation: return board.activation_scores();
    case Criterion::random: break;
  }
  throw Error("board scores are undefined for the random criterion; use random_rank");
}

}  // namespace detail

/// Ranking from a dedicated pass over `n_batches` batches with frozen
/// weights. Taylor needs forward and backward; mean activation forward only.
inline Ranking precise_rank(const NetworkGraph& net, BatchStream& data, std::size_t n_batches,
                            Criterion criterion, RankOptions options = RankOptions::defaults_for(Criterion::taylor),
                            PassCounter* counter = nullptr) {
  if (criterion == Criterion::random) throw Error("precise_rank: random criterion has no precise pass");
  if (n_batches == 0) throw Error("precise_rank: n_batches must be >= 1");
  if (data.batches_per_epoch() == 0) throw Error("precise_rank: empty data stream");
  ScoreBoard board = reset(net, 0, options.abs_before_mean);
  for (std::size_t b = 0; b < n_batches; ++b) {
    const auto batch = data.next_batch();
    const auto pass = run_forward(net, batch.images);
    if (counter) ++counter->ranking;
    if (criterion == Criterion::taylor) {
      const auto loss = softmax_cross_entropy(pass.logits(), batch.labels);
      const auto grads = run_backward(net, pass, loss.grad_logits);
      accumulate_batch(board, pass, &grads.grad_taps);
    } else {
      accumulate_batch(board, pass, nullptr);
    }
  }
  return make_ranking(detail::board_scores(board, criterion), criterion, RankMode::precise,
                      options.normalize);
}

/// Ranking from statistics gathered during fine-tuning. Touches only the
/// board: a sort over filters.
inline Ranking coarse_rank(const ScoreBoard& board, Criterion criterion,
                           RankOptions options = RankOptions::defaults_for(Criterion::taylor)) {
  if (board.batches_seen() == 0) throw Error("coarse_rank: no batches accumulated");
  return make_ranking(detail::board_scores(board, criterion), criterion, RankMode::coarse,
                      options.normalize);
}

/// Seeded uniform permutation of active filters. Scores are rank fractions
/// so the score order agrees with the permutation.
inline Ranking random_rank(const NetworkGraph& net, std::uint64_t seed) {
  Ranking r;
  r.criterion = Criterion::random;
  r.mode = RankMode::coarse;
  r.ordered = net.active_filters();
  std::mt19937_64 rng(seed);
  std::shuffle(r.ordered.begin(), r.ordered.end(), rng);
  const auto counts = net.filter_counts();
  r.scores.resize(counts.size());
  for (std::size_t l = 0; l < counts.size(); ++l) r.scores[l].assign(counts[l], 0.0);
  const double n = static_cast<double>(r.ordered.size());
  for (std::size_t i = 0; i < r.ordered.size(); ++i) {
    r.scores[r.ordered[i].layer][r.ordered[i].filter] = static_cast<double>(i) / n;
  }
  r.raw_scores = r.scores;
  return r;
}

}  // namespace chprune
