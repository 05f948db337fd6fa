#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "chprune/serialize.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Labelled images, [n, channels, height, width].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_volume() const { return images.size() / labels.size(); }

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> hist(static_cast<std::size_t>(class_count), 0);
    for (int l : labels) ++hist[static_cast<std::size_t>(l)];
    return hist;
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    if (indices.empty()) throw Error("Dataset::subset: empty index list");
    Shape shape = images.shape();
    shape[0] = indices.size();
    Dataset out{Tensor(shape), {}, class_count};
    const std::size_t vol = sample_volume();
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::size_t src = indices[i];
      if (src >= size()) throw Error("Dataset::subset: index out of range");
      std::copy_n(images.raw() + src * vol, vol, out.images.raw() + i * vol);
      out.labels.push_back(labels[src]);
    }
    return out;
  }

  /// First `per_class` samples of every class, in original order.
  Dataset take_per_class(std::size_t per_class) const {
    std::vector<std::size_t> taken(static_cast<std::size_t>(class_count), 0);
    std::vector<std::size_t> indices;
    for (std::size_t i = 0; i < size(); ++i) {
      auto& t = taken[static_cast<std::size_t>(labels[i])];
      if (t < per_class) {
        indices.push_back(i);
        ++t;
      }
    }
    return subset(indices);
  }
};

inline ChannelStats compute_channel_stats(const Dataset& ds) {
  const std::size_t n = ds.images.dim(0), channels = ds.images.dim(1);
  const std::size_t area = ds.images.dim(2) * ds.images.dim(3);
  ChannelStats stats{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  const double count = static_cast<double>(n * area);
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.images.raw() + (i * channels + c) * area;
      for (std::size_t k = 0; k < area; ++k) sum += p[k];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.images.raw() + (i * channels + c) * area;
      for (std::size_t k = 0; k < area; ++k) sq += (p[k] - mean) * (p[k] - mean);
    }
    stats.mean[c] = mean;
    stats.stddev[c] = std::max(std::sqrt(sq / count), 1e-12);
  }
  return stats;
}

inline void standardize(Dataset& ds, const ChannelStats& stats) {
  const std::size_t n = ds.images.dim(0), channels = ds.images.dim(1);
  const std::size_t area = ds.images.dim(2) * ds.images.dim(3);
  if (stats.mean.size() != channels) throw Error("standardize: channel count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = ds.images.raw() + (i * channels + c) * area;
      for (std::size_t k = 0; k < area; ++k) p[k] = (p[k] - stats.mean[c]) / stats.stddev[c];
    }
  }
}

// CIFAR-10 binary records: 1 label byte + 3072 pixel bytes (R, G, B planes,
// each 32x32 row-major).
inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

/// Parses one or more CIFAR-10 binary files into pixels scaled to [0, 1]
/// (no standardization).
inline Dataset read_cifar10_records(const std::vector<std::filesystem::path>& files) {
  std::vector<unsigned char> bytes;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw Error("cannot open CIFAR-10 file " + f.string());
    std::vector<unsigned char> chunk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (chunk.size() % kCifarRecordBytes != 0 || chunk.empty()) {
      throw Error("CIFAR-10 file " + f.string() + " has " + std::to_string(chunk.size()) +
                  " bytes, not a positive multiple of 3073");
    }
    bytes.insert(bytes.end(), chunk.begin(), chunk.end());
  }
  if (bytes.empty()) throw Error("no CIFAR-10 files given");
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset ds{Tensor({n, 3, kCifarSide, kCifarSide}), std::vector<int>(n), 10};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw Error("CIFAR-10 record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]));
    }
    ds.labels[i] = rec[0];
    double* dst = ds.images.raw() + i * 3072;
    for (std::size_t k = 0; k < 3072; ++k) dst[k] = rec[1 + k] / 255.0;
  }
  return ds;
}

/// CIFAR-10 files standardized with `stats`, or with their own statistics
/// when `stats` is null (training split).
inline Dataset load_cifar10(const std::vector<std::filesystem::path>& files,
                            const ChannelStats* stats = nullptr) {
  auto ds = read_cifar10_records(files);
  standardize(ds, stats ? *stats : compute_channel_stats(ds));
  return ds;
}

inline Dataset load_cifar10(const std::filesystem::path& file, const ChannelStats* stats = nullptr) {
  return load_cifar10(std::vector<std::filesystem::path>{file}, stats);
}

/// Training files (data_batch_1..5.bin that exist) and test file of a
/// standard CIFAR-10 binary directory.
inline std::pair<std::vector<std::filesystem::path>, std::filesystem::path> cifar10_files(
    const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> train;
  for (int i = 1; i <= 5; ++i) {
    auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
    if (std::filesystem::exists(p)) train.push_back(p);
  }
  auto test = dir / "test_batch.bin";
  if (train.empty() || !std::filesystem::exists(test)) {
    throw Error("CIFAR-10 directory " + dir.string() + " lacks data_batch_*.bin / test_batch.bin");
  }
  return {train, test};
}

/// Colored-blob classification task. Each class owns a color, an anchor
/// position and a radius (drawn from `prototype_seed`); samples jitter the
/// anchor and color and add Gaussian pixel noise.
struct SyntheticSpec {
  std::size_t n = 200;
  int classes = 2;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.15;
  double jitter = 2.0;          // anchor jitter in pixels (uniform +-)
  double color_jitter = 0.1;    // per-channel color perturbation (uniform +-)
  std::uint64_t prototype_seed = 7;
};

/// Pixels in [0, 1] before standardization; use `standardize` afterwards.
inline Dataset synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.n == 0 || spec.classes < 1) throw Error("synthetic_dataset: n and classes must be >= 1");
  struct Proto {
    std::vector<double> color;
    double cy, cx, radius;
  };
  std::mt19937_64 proto_rng(spec.prototype_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
  std::vector<Proto> protos;
  for (int k = 0; k < spec.classes; ++k) {
    Proto p;
    for (std::size_t c = 0; c < spec.channels; ++c) p.color.push_back(unit(proto_rng));
    p.cy = h * (0.25 + 0.5 * unit(proto_rng));
    p.cx = w * (0.25 + 0.5 * unit(proto_rng));
    p.radius = std::min(h, w) * (0.08 + 0.12 * unit(proto_rng));
    protos.push_back(p);
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  Dataset ds{Tensor({spec.n, spec.channels, spec.height, spec.width}), std::vector<int>(spec.n),
             spec.classes};
  const std::size_t area = spec.height * spec.width;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    ds.labels[i] = label;
    const auto& p = protos[static_cast<std::size_t>(label)];
    const double cy = p.cy + spec.jitter * sym(rng);
    const double cx = p.cx + spec.jitter * sym(rng);
    std::vector<double> color(spec.channels);
    for (std::size_t c = 0; c < spec.channels; ++c) color[c] = p.color[c] + spec.color_jitter * sym(rng);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      double* plane = ds.images.raw() + (i * spec.channels + c) * area;
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double blob = std::exp(-(dy * dy + dx * dx) / (2.0 * p.radius * p.radius));
          const double v = 0.5 + blob * (color[c] - 0.5) + spec.noise * gauss(rng);
          plane[y * spec.width + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return ds;
}

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/// Seeded shuffled mini-batches. Each epoch is an independent permutation
/// derived from (seed, epoch); the trailing short batch is dropped.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ == 0) throw Error("BatchStream: batch_size must be >= 1");
  }

  std::size_t batch_size() const noexcept { return batch_size_; }
  std::size_t batches_per_epoch() const noexcept { return data_->size() / batch_size_; }
  std::uint64_t epoch() const noexcept { return epoch_; }
  const Dataset& dataset() const noexcept { return *data_; }

  Batch next_batch() {
    if (batches_per_epoch() == 0) {
      throw Error("BatchStream: dataset of " + std::to_string(data_->size()) +
                  " samples cannot fill a batch of " + std::to_string(batch_size_));
    }
    if (order_.empty() || cursor_ + batch_size_ > order_.size()) {
      if (!order_.empty()) ++epoch_;
      shuffle_epoch();
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
    cursor_ += batch_size_;
    auto sub = data_->subset(idx);
    return {std::move(sub.images), std::move(sub.labels), std::move(idx)};
  }

 private:
  void shuffle_epoch() {
    order_.resize(data_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch_), static_cast<std::uint32_t>(epoch_ >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
  }

  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// Dataset cache: images tensor, labels as an [n] tensor, class count as [1].
inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_tensor(out, ds.images);
  Tensor labels({ds.size()});
  for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = ds.labels[i];
  write_tensor(out, labels);
  write_tensor(out, Tensor({1}, static_cast<double>(ds.class_count)));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  Dataset ds;
  ds.images = read_tensor(in);
  const auto labels = read_tensor(in);
  ds.class_count = static_cast<int>(read_tensor(in)[0]);
  if (labels.size() != ds.images.dim(0)) throw Error("dataset cache: label count mismatch");
  for (double v : labels.data()) ds.labels.push_back(static_cast<int>(v));
  return ds;
}

}  // namespace chprune
