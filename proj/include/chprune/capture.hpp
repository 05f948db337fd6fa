#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "chprune/network.hpp"

namespace chprune {

/// Per-filter contributions of a single forward/backward pass.
struct BatchScores {
  std::vector<std::vector<double>> taylor;      // mean over batch and positions of h * dC/dh
  std::vector<std::vector<double>> activation;  // mean over batch and positions of |a|
};

/// Reduces one pass's taps to per-filter numbers. The Taylor entries are
/// signed; callers decide where the absolute value goes. `grad_taps` may be
/// null, in which case Taylor entries are zero.
inline BatchScores batch_scores(const ForwardPass& pass, const std::vector<Tensor>* grad_taps) {
  if (grad_taps && grad_taps->size() != pass.tap_count()) {
    throw Error("batch_scores: " + std::to_string(grad_taps->size()) + " grad taps for " +
                std::to_string(pass.tap_count()) + " conv layers");
  }
  BatchScores out;
  out.taylor.resize(pass.tap_count());
  out.activation.resize(pass.tap_count());
  for (std::size_t j = 0; j < pass.tap_count(); ++j) {
    const Tensor& h = pass.tap_h(j);
    const Tensor& a = pass.tap_a(j);
    const std::size_t batch = h.dim(0), channels = h.dim(1), area = h.dim(2) * h.dim(3);
    const double inv = 1.0 / static_cast<double>(batch * area);
    const Tensor* g = grad_taps ? &(*grad_taps)[j] : nullptr;
    if (g && g->shape() != h.shape()) {
      throw Error("batch_scores: grad tap " + std::to_string(j) + " has shape " +
                  shape_str(g->shape()) + ", expected " + shape_str(h.shape()));
    }
    out.taylor[j].assign(channels, 0.0);
    out.activation[j].assign(channels, 0.0);
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = (n * channels + c) * area;
        double act = 0.0;
        for (std::size_t p = 0; p < area; ++p) act += std::abs(a[base + p]);
        out.activation[j][c] += act;
        if (g) {
          double prod = 0.0;
          for (std::size_t p = 0; p < area; ++p) prod += h[base + p] * (*g)[base + p];
          out.taylor[j][c] += prod;
        }
      }
    }
    for (std::size_t c = 0; c < channels; ++c) {
      out.taylor[j][c] *= inv;
      out.activation[j][c] *= inv;
    }
  }
  return out;
}

struct FilterStats {
  double sum_taylor = 0.0;
  double sum_activation = 0.0;
};

/// Running per-filter importance statistics over the batches seen since the
/// last reset.
///
/// With `abs_before_mean` (default) each batch contributes
/// |mean(h * dC/dh)|; otherwise the signed means are summed and the absolute
/// value is taken when scores are read out.
class ScoreBoard {
 public:
  ScoreBoard() = default;
  ScoreBoard(const std::vector<std::size_t>& filter_counts, std::uint64_t step, bool abs_before_mean)
      : abs_before_mean_(abs_before_mean), created_at_step_(step) {
    stats_.reserve(filter_counts.size());
    for (auto c : filter_counts) stats_.emplace_back(c);
  }

  std::size_t batches_seen() const noexcept { return batches_seen_; }
  std::uint64_t created_at_step() const noexcept { return created_at_step_; }
  bool abs_before_mean() const noexcept { return abs_before_mean_; }
  const std::vector<std::vector<FilterStats>>& stats() const noexcept { return stats_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& layer : stats_) n += layer.size();
    return n;
  }

  std::vector<std::size_t> filter_counts() const {
    std::vector<std::size_t> counts;
    for (const auto& layer : stats_) counts.push_back(layer.size());
    return counts;
  }

  void add(const BatchScores& scores) {
    if (scores.taylor.size() != stats_.size()) {
      throw Error("ScoreBoard: taps cover " + std::to_string(scores.taylor.size()) +
                  " conv layers but board covers " + std::to_string(stats_.size()) +
                  "; reset the board after surgery");
    }
    for (std::size_t l = 0; l < stats_.size(); ++l) {
      if (scores.taylor[l].size() != stats_[l].size()) {
        throw Error("ScoreBoard: conv layer " + std::to_string(l) + " has " +
                    std::to_string(scores.taylor[l].size()) + " filters but board tracks " +
                    std::to_string(stats_[l].size()) + "; reset the board after surgery");
      }
    }
    for (std::size_t l = 0; l < stats_.size(); ++l) {
      for (std::size_t f = 0; f < stats_[l].size(); ++f) {
        const double t = scores.taylor[l][f];
        const double a = scores.activation[l][f];
        if (!std::isfinite(t) || !std::isfinite(a)) {
          throw Error("ScoreBoard: non-finite contribution for filter " + to_string(FilterId{l, f}));
        }
        stats_[l][f].sum_taylor += abs_before_mean_ ? std::abs(t) : t;
        stats_[l][f].sum_activation += a;
      }
    }
    ++batches_seen_;
  }

  /// Mean Taylor score per filter.
  std::vector<std::vector<double>> taylor_scores() const {
    return finalize([this](const FilterStats& s) {
      const double mean = s.sum_taylor / static_cast<double>(batches_seen_);
      return abs_before_mean_ ? mean : std::abs(mean);
    });
  }

  /// Mean activation score per filter.
  std::vector<std::vector<double>> activation_scores() const {
    return finalize(
        [this](const FilterStats& s) { return s.sum_activation / static_cast<double>(batches_seen_); });
  }

  void write_csv(std::ostream& os) const {
    os << "layer,filter,taylor_score,activation_score,batches_seen\n";
    os.precision(17);
    for (std::size_t l = 0; l < stats_.size(); ++l) {
      for (std::size_t f = 0; f < stats_[l].size(); ++f) {
        double taylor = 0.0, act = 0.0;
        if (batches_seen_ > 0) {
          taylor = stats_[l][f].sum_taylor / static_cast<double>(batches_seen_);
          if (!abs_before_mean_) taylor = std::abs(taylor);
          act = stats_[l][f].sum_activation / static_cast<double>(batches_seen_);
        }
        os << l << ',' << f << ',' << taylor << ',' << act << ',' << batches_seen_ << '\n';
      }
    }
  }

 private:
  template <typename F>
  std::vector<std::vector<double>> finalize(F&& value) const {
    if (batches_seen_ == 0) throw Error("ScoreBoard: no batches accumulated");
    std::vector<std::vector<double>> out(stats_.size());
    for (std::size_t l = 0; l < stats_.size(); ++l) {
      out[l].reserve(stats_[l].size());
      for (const auto& s : stats_[l]) out[l].push_back(value(s));
    }
    return out;
  }

  std::vector<std::vector<FilterStats>> stats_;
  std::size_t batches_seen_ = 0;
  bool abs_before_mean_ = true;
  std::uint64_t created_at_step_ = 0;
};

/// Adds one forward(+backward) pass to the board. `grad_taps` may be null
/// when only activation statistics are needed.
inline void accumulate_batch(ScoreBoard& board, const ForwardPass& taps,
                             const std::vector<Tensor>* grad_taps) {
  board.add(batch_scores(taps, grad_taps));
}

/// Fresh board covering the network's current filters.
inline ScoreBoard reset(const NetworkGraph& net, std::uint64_t step = 0, bool abs_before_mean = true) {
  return ScoreBoard(net.filter_counts(), step, abs_before_mean);
}

}  // namespace chprune
