#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chprune/config.hpp"
#include "chprune/layers.hpp"
#include "chprune/serialize.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

/// (conv-layer ordinal, filter index): the unit of pruning. `layer` counts
/// conv layers only, not positions in the full layer list.
struct FilterId {
  std::size_t layer = 0;
  std::size_t filter = 0;
  auto operator<=>(const FilterId&) const = default;
};

inline std::string to_string(const FilterId& id) {
  return "(" + std::to_string(id.layer) + ", " + std::to_string(id.filter) + ")";
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out = 0;                 // conv out_channels / linear out_features
  std::optional<std::size_t> in;       // optional declared input width, checked
  std::size_t kernel = 0;              // conv kernel or pool window
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

/// Sequential architecture description. `input` is [channels, height, width].
struct ArchitectureSpec {
  std::string name = "net";
  Shape input{3, 32, 32};
  std::vector<LayerSpec> layers;
};

namespace detail {

inline LayerKind parse_layer_kind(const std::string& s, int line) {
  if (s == "conv2d" || s == "conv") return LayerKind::conv2d;
  if (s == "relu") return LayerKind::relu;
  if (s == "maxpool2d" || s == "maxpool" || s == "pool") return LayerKind::maxpool2d;
  if (s == "flatten") return LayerKind::flatten;
  if (s == "linear" || s == "fc") return LayerKind::linear;
  throw Error("line " + std::to_string(line) + ": unknown layer kind '" + s + "'");
}

}  // namespace detail

inline ArchitectureSpec architecture_from_document(const ConfigDocument& doc) {
  ArchitectureSpec spec;
  ConfigReader reader(doc);
  spec.name = reader.get_string("name", spec.name);
  const auto input_text = reader.get_string("input", "3 32 32");
  reader.finish();
  spec.input.clear();
  for (const auto& tok : detail::split_ws(input_text)) {
    spec.input.push_back(ConfigReader::parse_value<std::size_t>("input", tok));
  }
  if (spec.input.size() != 3) throw Error("architecture 'input' must be 'channels height width'");

  for (const auto& line : doc.layers) {
    LayerSpec ls;
    ls.kind = detail::parse_layer_kind(line.kind, line.line);
    std::set<std::string> allowed;
    switch (ls.kind) {
      case LayerKind::conv2d: allowed = {"out", "in", "kernel", "stride", "pad", "bias"}; break;
      case LayerKind::maxpool2d: allowed = {"size", "stride"}; break;
      case LayerKind::linear: allowed = {"out", "in", "bias"}; break;
      default: break;
    }
    for (const auto& [key, value] : line.attrs) {
      if (!allowed.count(key)) {
        throw Error("line " + std::to_string(line.line) + ": unknown attribute '" + key + "' for " +
                    line.kind);
      }
    }
    auto num = [&](const std::string& key, std::size_t fallback) {
      auto it = line.attrs.find(key);
      return it == line.attrs.end() ? fallback : ConfigReader::parse_value<std::size_t>(key, it->second);
    };
    if (ls.kind == LayerKind::conv2d || ls.kind == LayerKind::linear) {
      if (!line.attrs.count("out")) {
        throw Error("line " + std::to_string(line.line) + ": " + line.kind + " requires out=");
      }
      ls.out = num("out", 0);
      if (line.attrs.count("in")) ls.in = num("in", 0);
      if (auto it = line.attrs.find("bias"); it != line.attrs.end()) {
        ls.bias = ConfigReader::parse_value<bool>("bias", it->second);
      }
    }
    if (ls.kind == LayerKind::conv2d) {
      ls.kernel = num("kernel", 3);
      ls.stride = num("stride", 1);
      ls.padding = num("pad", 0);
    } else if (ls.kind == LayerKind::maxpool2d) {
      ls.kernel = num("size", 2);
      ls.stride = num("stride", ls.kernel);
    }
    spec.layers.push_back(ls);
  }
  return spec;
}

inline ArchitectureSpec parse_architecture(std::string_view text) {
  return architecture_from_document(parse_config(text));
}

inline ArchitectureSpec load_architecture(const std::string& path) {
  return parse_architecture(read_text_file(path));
}

inline std::string architecture_to_text(const ArchitectureSpec& spec) {
  std::ostringstream os;
  os << "name = " << spec.name << "\n";
  os << "input = " << spec.input.at(0) << ' ' << spec.input.at(1) << ' ' << spec.input.at(2) << "\n";
  for (const auto& l : spec.layers) {
    os << "layer " << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv2d:
        os << " out=" << l.out;
        if (l.in) os << " in=" << *l.in;
        os << " kernel=" << l.kernel << " stride=" << l.stride << " pad=" << l.padding;
        if (!l.bias) os << " bias=false";
        break;
      case LayerKind::maxpool2d: os << " size=" << l.kernel << " stride=" << l.stride; break;
      case LayerKind::linear:
        os << " out=" << l.out;
        if (l.in) os << " in=" << *l.in;
        if (!l.bias) os << " bias=false";
        break;
      default: break;
    }
    os << "\n";
  }
  return os.str();
}

/// Sequential CNN: convs (with relu/pool between), then flatten, then linears.
class NetworkGraph {
 public:
  NetworkGraph() = default;

  /// Validates the chain and indexes conv layers. `input` is [C, H, W].
  NetworkGraph(Shape input, std::vector<LayerParams> layers, std::string name = "net")
      : name_(std::move(name)), input_(std::move(input)), layers_(std::move(layers)) {
    reindex();
  }

  const std::string& name() const noexcept { return name_; }
  const Shape& input_shape() const noexcept { return input_; }
  const std::vector<LayerParams>& layers() const noexcept { return layers_; }
  std::span<LayerParams> mutable_layers() noexcept { return layers_; }
  const std::vector<std::size_t>& conv_layer_indices() const noexcept { return conv_indices_; }
  std::size_t conv_count() const noexcept { return conv_indices_.size(); }

  std::vector<std::size_t> filter_counts() const {
    std::vector<std::size_t> counts;
    counts.reserve(conv_indices_.size());
    for (auto idx : conv_indices_) counts.push_back(layers_[idx].weights->dim(0));
    return counts;
  }

  std::size_t total_filters() const {
    std::size_t total = 0;
    for (auto c : filter_counts()) total += c;
    return total;
  }

  std::vector<FilterId> active_filters() const {
    std::vector<FilterId> ids;
    const auto counts = filter_counts();
    for (std::size_t l = 0; l < counts.size(); ++l) {
      for (std::size_t f = 0; f < counts[l]; ++f) ids.push_back({l, f});
    }
    return ids;
  }

  bool contains(const FilterId& id) const {
    return id.layer < conv_indices_.size() &&
           id.filter < layers_[conv_indices_[id.layer]].weights->dim(0);
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& l : layers_) total += l.parameter_count();
    return total;
  }

  /// Input shape (batch 1) seen by layer `index`; index == layers().size()
  /// gives the logits shape.
  const Shape& layer_input_shape(std::size_t index) const { return shapes_.at(index); }

  /// Current architecture, reflecting any surgery performed so far.
  ArchitectureSpec architecture() const {
    ArchitectureSpec spec{name_, input_, {}};
    for (const auto& l : layers_) {
      LayerSpec ls;
      ls.kind = l.kind;
      ls.kernel = l.kernel;
      ls.stride = l.stride;
      ls.padding = l.padding;
      ls.bias = l.bias.has_value();
      if (l.weights) {
        ls.out = l.weights->dim(0);
        ls.in = l.weights->dim(1);
        if (l.kind == LayerKind::conv2d) ls.kernel = l.weights->dim(2);
      }
      spec.layers.push_back(ls);
    }
    return spec;
  }

  bool operator==(const NetworkGraph& other) const {
    return input_ == other.input_ && layers_ == other.layers_;
  }

  /// Re-derives conv indices and per-layer shapes; throws if the chain is
  /// inconsistent. Called after construction and after surgery.
  void reindex() {
    conv_indices_.clear();
    shapes_.clear();
    if (input_.size() != 3) throw Error("network input must be [channels, height, width]");
    Shape shape{1, input_[0], input_[1], input_[2]};
    bool flattened = false;
    std::optional<std::size_t> last_weighted;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& layer = layers_[i];
      shapes_.push_back(shape);
      check_layer_params(i, layer);
      if (flattened && (layer.kind == LayerKind::conv2d || layer.kind == LayerKind::maxpool2d ||
                        layer.kind == LayerKind::flatten)) {
        throw Error("layer " + std::to_string(i) + " (" + std::string(to_string(layer.kind)) +
                    ") follows flatten; only linear/relu layers may follow");
      }
      if (!flattened && layer.kind == LayerKind::linear) {
        throw Error("layer " + std::to_string(i) + " (linear) requires a preceding flatten");
      }
      const bool is_weighted = layer.kind == LayerKind::conv2d || layer.kind == LayerKind::linear;
      if (is_weighted) {
        const std::size_t have = layer.kind == LayerKind::conv2d ? shape[1] : shape[1];
        const std::size_t want = layer.weights->dim(1);
        if (have != want) {
          std::string producer = last_weighted
                                     ? "layer " + std::to_string(*last_weighted) + " (" +
                                           std::string(to_string(layers_[*last_weighted].kind)) + ")"
                                     : std::string("network input");
          throw Error("inconsistent channel chain: " + producer + " produces " +
                      std::to_string(have) + " features/channels but layer " + std::to_string(i) +
                      " (" + std::string(to_string(layer.kind)) + ") expects " +
                      std::to_string(want));
        }
        last_weighted = i;
      }
      try {
        shape = output_shape(layer, shape);
      } catch (const Error& e) {
        throw Error("layer " + std::to_string(i) + ": " + e.what());
      }
      if (layer.kind == LayerKind::conv2d) conv_indices_.push_back(i);
      if (layer.kind == LayerKind::flatten) flattened = true;
    }
    shapes_.push_back(shape);
    for (auto c : filter_counts()) {
      if (c == 0) throw Error("conv layer emptied");
    }
  }

 private:
  static void check_layer_params(std::size_t i, const LayerParams& layer) {
    const bool needs = layer.kind == LayerKind::conv2d || layer.kind == LayerKind::linear;
    if (needs != layer.weights.has_value()) {
      throw Error("layer " + std::to_string(i) + " (" + std::string(to_string(layer.kind)) +
                  (needs ? ") is missing weights" : ") must not carry weights"));
    }
    if (!needs && layer.bias) {
      throw Error("layer " + std::to_string(i) + " (" + std::string(to_string(layer.kind)) +
                  ") must not carry a bias");
    }
    if (layer.kind == LayerKind::conv2d) {
      const auto& w = layer.weights->shape();
      if (w.size() != 4 || w[2] != w[3]) {
        throw Error("layer " + std::to_string(i) + " (conv2d): weights must be [out, in, k, k], got " +
                    shape_str(w));
      }
      if (layer.stride == 0) throw Error("layer " + std::to_string(i) + " (conv2d): stride must be >= 1");
    }
    if (layer.kind == LayerKind::linear && layer.weights->rank() != 2) {
      throw Error("layer " + std::to_string(i) + " (linear): weights must be [out, in], got " +
                  shape_str(layer.weights->shape()));
    }
    if (layer.kind == LayerKind::maxpool2d && (layer.kernel == 0 || layer.stride == 0)) {
      throw Error("layer " + std::to_string(i) + " (maxpool2d): size and stride must be >= 1");
    }
    if (layer.bias && (layer.bias->rank() != 1 || layer.bias->dim(0) != layer.weights->dim(0))) {
      throw Error("layer " + std::to_string(i) + " (" + std::string(to_string(layer.kind)) +
                  "): bias shape " + shape_str(layer.bias->shape()) + " does not match " +
                  std::to_string(layer.weights->dim(0)) + " outputs");
    }
  }

  std::string name_ = "net";
  Shape input_;
  std::vector<LayerParams> layers_;
  std::vector<std::size_t> conv_indices_;
  std::vector<Shape> shapes_;
};

/// Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias.
inline void kaiming_uniform(Tensor& weights, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : weights.data()) v = dist(rng);
}

inline NetworkGraph build_network(const ArchitectureSpec& spec, std::uint64_t seed) {
  if (spec.input.size() != 3) throw Error("architecture input must be [channels, height, width]");
  std::mt19937_64 rng(seed);
  std::vector<LayerParams> layers;
  Shape shape{1, spec.input[0], spec.input[1], spec.input[2]};
  std::optional<std::size_t> producer;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& ls = spec.layers[i];
    LayerParams layer;
    layer.kind = ls.kind;
    if (ls.kind == LayerKind::conv2d || ls.kind == LayerKind::linear) {
      if (ls.kind == LayerKind::linear && shape.size() != 2) {
        throw Error("layer " + std::to_string(i) + " (linear) requires a preceding flatten");
      }
      if (ls.kind == LayerKind::conv2d && shape.size() != 4) {
        throw Error("layer " + std::to_string(i) + " (conv2d) cannot follow flatten");
      }
      const std::size_t in = shape[1];
      if (ls.in && *ls.in != in) {
        throw Error("inconsistent channel chain: " +
                    (producer ? "layer " + std::to_string(*producer) + " (" +
                                    std::string(to_string(spec.layers[*producer].kind)) + ", out=" +
                                    std::to_string(in) + ")"
                              : "network input (" + std::to_string(in) + " channels)") +
                    " feeds layer " + std::to_string(i) + " (" + std::string(to_string(ls.kind)) +
                    ", in=" + std::to_string(*ls.in) + ")");
      }
      if (ls.out == 0) throw Error("layer " + std::to_string(i) + ": out must be >= 1");
      std::size_t fan_in = in;
      if (ls.kind == LayerKind::conv2d) {
        if (ls.kernel == 0) throw Error("layer " + std::to_string(i) + ": kernel must be >= 1");
        layer.weights = Tensor({ls.out, in, ls.kernel, ls.kernel});
        fan_in = in * ls.kernel * ls.kernel;
        layer.kernel = ls.kernel;
        layer.stride = ls.stride;
        layer.padding = ls.padding;
      } else {
        layer.weights = Tensor({ls.out, in});
      }
      kaiming_uniform(*layer.weights, fan_in, rng);
      if (ls.bias) layer.bias = Tensor({ls.out}, 0.0);
      producer = i;
    } else if (ls.kind == LayerKind::maxpool2d) {
      layer.kernel = ls.kernel;
      layer.stride = ls.stride;
    }
    try {
      shape = output_shape(layer, shape);
    } catch (const Error& e) {
      throw Error("layer " + std::to_string(i) + ": " + e.what());
    }
    layers.push_back(std::move(layer));
  }
  return NetworkGraph(spec.input, std::move(layers), spec.name);
}

/// Activations of one forward pass: activations[0] is the input batch,
/// activations[i + 1] the output of layer i. Owned by the caller, so several
/// passes over the same network can coexist.
struct ForwardPass {
  std::vector<Tensor> activations;
  std::vector<std::size_t> conv_indices;
  std::vector<bool> conv_has_relu;

  bool valid() const noexcept { return !activations.empty(); }
  const Tensor& logits() const { return activations.back(); }
  std::size_t tap_count() const noexcept { return conv_indices.size(); }
  /// Pre-ReLU conv output h of conv layer `j`.
  const Tensor& tap_h(std::size_t j) const { return activations.at(conv_indices.at(j) + 1); }
  /// Post-ReLU activation a of conv layer `j` (h itself when no ReLU follows).
  const Tensor& tap_a(std::size_t j) const {
    return activations.at(conv_indices.at(j) + (conv_has_relu.at(j) ? 2 : 1));
  }
};

inline ForwardPass run_forward(const NetworkGraph& net, const Tensor& batch) {
  const auto& in = net.input_shape();
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw Error("run_forward: expected batch shape [batch, " + std::to_string(in[0]) + ", " +
                std::to_string(in[1]) + ", " + std::to_string(in[2]) + "], got " +
                shape_str(batch.shape()));
  }
  ForwardPass pass;
  const auto& layers = net.layers();
  pass.activations.reserve(layers.size() + 1);
  pass.activations.push_back(batch);
  for (const auto& layer : layers) pass.activations.push_back(forward(layer, pass.activations.back()));
  pass.conv_indices = net.conv_layer_indices();
  for (auto idx : pass.conv_indices) {
    pass.conv_has_relu.push_back(idx + 1 < layers.size() && layers[idx + 1].kind == LayerKind::relu);
  }
  return pass;
}

struct BackwardPass {
  std::vector<ParamGrads> param_grads;  // one per layer
  std::vector<Tensor> grad_taps;        // dC/dh per conv layer
};

inline BackwardPass run_backward(const NetworkGraph& net, const ForwardPass& cache,
                                 const Tensor& grad_logits) {
  const auto& layers = net.layers();
  if (!cache.valid()) throw Error("run_backward: missing forward cache (call run_forward first)");
  if (cache.activations.size() != layers.size() + 1 || cache.conv_indices != net.conv_layer_indices()) {
    throw Error("run_backward: forward cache does not belong to this network");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto expected = output_shape(layers[i], cache.activations[i].shape());
    if (expected != cache.activations[i + 1].shape()) {
      throw Error("run_backward: forward cache is stale for layer " + std::to_string(i));
    }
  }
  if (grad_logits.shape() != cache.logits().shape()) {
    throw Error("run_backward: expected grad_logits shape " + shape_str(cache.logits().shape()) +
                ", got " + shape_str(grad_logits.shape()));
  }
  BackwardPass result;
  result.param_grads.resize(layers.size());
  result.grad_taps.resize(net.conv_count());
  std::vector<std::size_t> conv_ordinal(layers.size(), 0);
  for (std::size_t j = 0; j < net.conv_count(); ++j) conv_ordinal[net.conv_layer_indices()[j]] = j;

  Tensor grad = grad_logits;
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (layers[i].kind == LayerKind::conv2d) result.grad_taps[conv_ordinal[i]] = grad;
    auto g = backward(layers[i], cache.activations[i], grad);
    result.param_grads[i] = std::move(g.params);
    grad = std::move(g.input);
  }
  return result;
}

// Checkpoint directory layout:
//   manifest.arch   architecture text (current, post-surgery widths)
//   weights.pft     PFT1 tensors: weights then bias, for each weighted layer

inline void save_checkpoint(const NetworkGraph& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream manifest(dir / "manifest.arch");
    if (!manifest) throw Error("cannot write " + (dir / "manifest.arch").string());
    manifest << architecture_to_text(net.architecture());
  }
  std::ofstream weights(dir / "weights.pft", std::ios::binary);
  if (!weights) throw Error("cannot write " + (dir / "weights.pft").string());
  for (const auto& layer : net.layers()) {
    if (layer.weights) write_tensor(weights, *layer.weights);
    if (layer.bias) write_tensor(weights, *layer.bias);
  }
}

inline NetworkGraph load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.arch")) {
    throw Error("checkpoint not found: " + (dir / "manifest.arch").string());
  }
  const auto spec = load_architecture((dir / "manifest.arch").string());
  auto net = build_network(spec, 0);
  std::ifstream weights(dir / "weights.pft", std::ios::binary);
  if (!weights) throw Error("cannot read " + (dir / "weights.pft").string());
  std::vector<LayerParams> layers = net.layers();
  for (auto& layer : layers) {
    auto load_into = [&](std::optional<Tensor>& slot) {
      if (!slot) return;
      auto t = read_tensor(weights);
      if (t.shape() != slot->shape()) {
        throw Error("checkpoint tensor shape " + shape_str(t.shape()) + " does not match manifest " +
                    shape_str(slot->shape()));
      }
      slot = std::move(t);
    };
    load_into(layer.weights);
    load_into(layer.bias);
  }
  return NetworkGraph(spec.input, std::move(layers), spec.name);
}

}  // namespace chprune
