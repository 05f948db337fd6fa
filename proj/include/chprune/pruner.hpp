#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "chprune/criteria.hpp"
#include "chprune/network.hpp"
#include "json.hpp"

namespace chprune {

/// Prune the filters at 1-based rank positions [window_start, window_start + window_width).
struct SelectionStrategy {
  std::size_t window_start = 1;
  std::size_t window_width = 10;
};

/// Stop condition: remove a fixed number of filters, or keep a fraction.
struct PruneTarget {
  std::optional<std::size_t> total_filters_to_remove;
  std::optional<double> target_remaining_fraction;

  /// Number of filters the network should have at most once pruning ends.
  std::size_t remaining_filters(std::size_t initial, std::size_t conv_layers) const {
    std::size_t remaining = initial;
    if (total_filters_to_remove) {
      remaining = *total_filters_to_remove >= initial ? 0 : initial - *total_filters_to_remove;
    } else if (target_remaining_fraction) {
      const double f = *target_remaining_fraction;
      if (!(f >= 0.0 && f <= 1.0)) throw Error("target_remaining_fraction must lie in [0, 1]");
      remaining = static_cast<std::size_t>(std::ceil(f * static_cast<double>(initial) - 1e-9));
    }
    if (remaining < conv_layers) {
      throw Error("prune target leaves " + std::to_string(remaining) + " filters for " +
                  std::to_string(conv_layers) + " conv layers; every layer keeps at least one");
    }
    return remaining;
  }
};

/// Walks the ranking from the window start and takes `window_width` filters,
/// skipping any filter whose removal would empty its layer (the next-ranked
/// eligible filter takes its place).
inline std::vector<FilterId> select_filters(const Ranking& ranking, const SelectionStrategy& strategy,
                                            const NetworkGraph& net) {
  if (strategy.window_start < 1 || strategy.window_width < 1) {
    throw Error("selection window must have start >= 1 and width >= 1");
  }
  if (ranking.size() != net.total_filters()) {
    throw Error("ranking covers " + std::to_string(ranking.size()) + " filters but the network has " +
                std::to_string(net.total_filters()));
  }
  for (const auto& id : ranking.ordered) {
    if (!net.contains(id)) throw Error("ranking names inactive filter " + to_string(id));
  }
  const std::size_t first = strategy.window_start - 1;
  if (first + strategy.window_width > ranking.size()) {
    throw Error("selection window [" + std::to_string(strategy.window_start) + ", " +
                std::to_string(strategy.window_start + strategy.window_width) + ") exceeds " +
                std::to_string(ranking.size()) + " ranked filters");
  }
  auto remaining = net.filter_counts();
  std::vector<FilterId> chosen;
  for (std::size_t p = first; p < ranking.size() && chosen.size() < strategy.window_width; ++p) {
    const auto& id = ranking.ordered[p];
    if (remaining[id.layer] <= 1) continue;
    --remaining[id.layer];
    chosen.push_back(id);
  }
  if (chosen.size() < strategy.window_width) {
    throw Error("only " + std::to_string(chosen.size()) + " eligible filters from rank " +
                std::to_string(strategy.window_start) + " onward; need " +
                std::to_string(strategy.window_width));
  }
  return chosen;
}

namespace detail {

// Keeps the listed slices of `axis`, where each slice spans `block`
// consecutive entries of that axis. `keep` is ascending.
inline Tensor keep_slices(const Tensor& t, std::size_t axis, std::size_t block,
                          const std::vector<std::size_t>& keep) {
  const auto& shape = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t slices = shape[axis] / block;
  const std::size_t unit = block * inner;
  Shape out_shape = shape;
  out_shape[axis] = keep.size() * block;
  Tensor out(out_shape);
  double* dst = out.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    for (auto k : keep) {
      const double* src = t.raw() + (o * slices + k) * unit;
      dst = std::copy_n(src, unit, dst);
    }
  }
  return out;
}

inline std::vector<std::size_t> kept_indices(std::size_t count, const std::set<std::size_t>& removed) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < count; ++i) {
    if (!removed.count(i)) keep.push_back(i);
  }
  return keep;
}

/// Index of the layer that reads conv layer `layer_index`'s channels.
inline std::size_t consumer_of(const NetworkGraph& net, std::size_t layer_index) {
  const auto& layers = net.layers();
  for (std::size_t i = layer_index + 1; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::conv2d || layers[i].kind == LayerKind::linear) return i;
  }
  throw Error("conv layer at position " + std::to_string(layer_index) + " has no consumer layer");
}

/// Number of linear input columns per channel of the flattened map feeding
/// `linear_index` (row-major [C, H, W] flattening).
inline std::size_t flatten_block(const NetworkGraph& net, std::size_t linear_index) {
  const auto& layers = net.layers();
  for (std::size_t i = linear_index; i-- > 0;) {
    if (layers[i].kind == LayerKind::flatten) {
      const auto& s = net.layer_input_shape(i);
      return s.size() == 4 ? s[2] * s[3] : 1;
    }
  }
  throw Error("linear layer " + std::to_string(linear_index) + " is not fed by a flatten");
}

inline std::map<std::size_t, std::set<std::size_t>> group_victims(const NetworkGraph& net,
                                                                 std::span<const FilterId> victims) {
  std::map<std::size_t, std::set<std::size_t>> by_layer;
  for (const auto& v : victims) {
    if (!net.contains(v)) throw Error("prune_filters: victim " + to_string(v) + " is out of range");
    if (!by_layer[v.layer].insert(v.filter).second) {
      throw Error("prune_filters: duplicate victim " + to_string(v));
    }
  }
  const auto counts = net.filter_counts();
  for (const auto& [layer, filters] : by_layer) {
    if (filters.size() >= counts[layer]) {
      throw Error("prune_filters: removing " + std::to_string(filters.size()) + " of " +
                  std::to_string(counts[layer]) + " filters would empty conv layer " +
                  std::to_string(layer));
    }
  }
  return by_layer;
}

}  // namespace detail

/// Parameters removed by pruning `victims`: per victim its kernel, bias and
/// consumer slice, minus the consumer-kernel entries shared by victims in
/// adjacent conv layers (counted once from each side).
inline std::size_t expected_parameter_delta(const NetworkGraph& net, std::span<const FilterId> victims) {
  const auto by_layer = detail::group_victims(net, victims);
  const auto& layers = net.layers();
  const auto& conv = net.conv_layer_indices();
  std::size_t delta = 0;
  for (const auto& [j, filters] : by_layer) {
    const auto& producer = layers[conv[j]];
    const auto& w = producer.weights->shape();
    const std::size_t own = w[1] * w[2] * w[3] + (producer.bias ? 1 : 0);
    const std::size_t consumer_index = detail::consumer_of(net, conv[j]);
    const auto& cw = layers[consumer_index].weights->shape();
    std::size_t slice = 0;
    if (layers[consumer_index].kind == LayerKind::conv2d) {
      slice = cw[0] * cw[2] * cw[3];
    } else {
      slice = cw[0] * detail::flatten_block(net, consumer_index);
    }
    delta += filters.size() * (own + slice);
    if (layers[consumer_index].kind == LayerKind::conv2d) {
      auto next = by_layer.find(j + 1);
      if (next != by_layer.end()) delta -= filters.size() * next->second.size() * cw[2] * cw[3];
    }
  }
  return delta;
}

/// Removes each victim's kernel and bias entry and the matching input
/// slice of its consumer (next conv's input channel, or the block of
/// first-linear columns for the last conv). Victims are given in
/// pre-surgery coordinates. On error the network is left untouched.
inline void prune_filters(NetworkGraph& net, std::span<const FilterId> victims) {
  const auto by_layer = detail::group_victims(net, victims);
  std::vector<LayerParams> layers = net.layers();
  const auto& conv = net.conv_layer_indices();
  for (const auto& [j, filters] : by_layer) {
    const std::size_t producer_index = conv[j];
    auto& producer = layers[producer_index];
    const auto keep = detail::kept_indices(producer.weights->dim(0), filters);
    producer.weights = detail::keep_slices(*producer.weights, 0, 1, keep);
    if (producer.bias) producer.bias = detail::keep_slices(*producer.bias, 0, 1, keep);

    const std::size_t consumer_index = detail::consumer_of(net, producer_index);
    auto& consumer = layers[consumer_index];
    const std::size_t block =
        consumer.kind == LayerKind::conv2d ? 1 : detail::flatten_block(net, consumer_index);
    consumer.weights = detail::keep_slices(*consumer.weights, 1, block, keep);
  }
  NetworkGraph pruned(net.input_shape(), std::move(layers), net.name());
  net = std::move(pruned);
}

struct PrunedFilter {
  FilterId id;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based
};

/// One prune event, serialized as a JSON line.
struct SurgeryRecord {
  std::size_t step = 0;
  std::vector<PrunedFilter> victims;
  std::size_t params_before = 0;
  std::size_t params_after = 0;

  std::string to_json_line() const {
    nlohmann::json j;
    j["step"] = step;
    j["victims"] = nlohmann::json::array();
    for (const auto& v : victims) {
      j["victims"].push_back({{"layer", v.id.layer}, {"filter", v.id.filter}, {"score", v.score},
                              {"rank", v.rank}});
    }
    j["params_before"] = params_before;
    j["params_after"] = params_after;
    return j.dump();
  }
};

inline std::vector<PrunedFilter> describe_victims(const Ranking& ranking,
                                                  const std::vector<FilterId>& victims) {
  const auto pos = ranking.positions();
  std::vector<PrunedFilter> out;
  for (const auto& v : victims) out.push_back({v, ranking.score(v), pos[v.layer][v.filter] + 1});
  return out;
}

}  // namespace chprune
