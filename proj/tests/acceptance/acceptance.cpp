// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Pass criterion numbers as arguments to run a subset.
//
// Criteria 6-10 run on the experiment described by configs/desk_alexnet.cfg.

#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "../test_support.hpp"
#include "chprune/analysis.hpp"
#include "chprune/experiment.hpp"

namespace {

using namespace chprune;
namespace fs = std::filesystem;
using testing::random_tensor;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared desk-scale setup, built on first use.

struct Desk {
  ExperimentConfig cfg;
  DataSplit data;
  NetworkGraph net;
  double baseline = 0.0;
};

const Desk& desk() {
  static const Desk d = [] {
    Desk x;
    x.cfg = load_experiment(fs::path(CHPRUNE_SOURCE_DIR) / "configs" / "desk_alexnet.cfg");
    const auto spec = experiment_architecture(x.cfg);
    x.data = load_experiment_data(x.cfg, spec);
    x.net = build_network(spec, x.cfg.seed);
    x.baseline = pretrain(x.net, x.data, x.cfg.pretrain).baseline_accuracy;
    std::cout << "  desk model: " << x.net.total_filters() << " filters, baseline accuracy " << fmt(x.baseline)
              << " on " << x.data.test.size() << " test images\n";
    return x;
  }();
  return d;
}

std::vector<std::uint64_t> desk_seeds() {
  std::vector<std::uint64_t> s;
  for (std::size_t r = 0; r < desk().cfg.repeats; ++r) s.push_back(desk().cfg.repeat_seed(r));
  return s;
}

PipelineConfig desk_pipeline(Criterion c) {
  auto p = desk().cfg.pipeline;
  p.criterion = c;
  return p;
}

const TimingStudy& desk_timing(Criterion c) {
  static std::map<Criterion, TimingStudy> cache;
  auto it = cache.find(c);
  if (it == cache.end()) it = cache.emplace(c, run_timing_study(desk().net, desk().data, desk_pipeline(c), desk_seeds())).first;
  return it->second;
}

// ---------------------------------------------------------------------------
// 1. Gradient exactness

LayerParams make_conv(std::size_t out, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                      std::mt19937_64& rng) {
  LayerParams l;
  l.kind = LayerKind::conv2d;
  l.weights = random_tensor({out, in, k, k}, rng, 0.5);
  l.bias = random_tensor({out}, rng, 0.5);
  l.kernel = k;
  l.stride = stride;
  l.padding = pad;
  return l;
}

/// Worst tolerance ratio of input/weight/bias gradients of `layer` against
/// central differences of sum(forward(x) * r).
double fd_layer(const LayerParams& layer, const Tensor& x, std::mt19937_64& rng) {
  const auto r = random_tensor(forward(layer, x).shape(), rng);
  const auto g = backward(layer, x, r);
  auto loss_x = [&](const Tensor& p) { return testing::dot(forward(layer, p), r); };
  double worst = testing::worst_mismatch(g.input, testing::numeric_gradient(loss_x, x));
  if (layer.weights) {
    auto loss_w = [&](const Tensor& w) {
      auto p = layer;
      p.weights = w;
      return testing::dot(forward(p, x), r);
    };
    worst = std::max(worst, testing::worst_mismatch(*g.params.weights, testing::numeric_gradient(loss_w, *layer.weights)));
  }
  if (layer.bias) {
    auto loss_b = [&](const Tensor& b) {
      auto p = layer;
      p.bias = b;
      return testing::dot(forward(p, x), r);
    };
    worst = std::max(worst, testing::worst_mismatch(*g.params.bias, testing::numeric_gradient(loss_b, *layer.bias)));
  }
  return worst;
}

Outcome gradient_exactness() {
  std::mt19937_64 rng(2024);
  const int shapes = 24;
  std::map<std::string, double> worst;
  for (int t = 0; t < shapes; ++t) {
    const std::size_t k = 1 + rng() % 3, stride = 1 + rng() % 2, pad = rng() % 2;
    const std::size_t cin = 1 + rng() % 3, cout = 1 + rng() % 4, n = 1 + rng() % 2;
    const auto conv = make_conv(cout, cin, k, stride, pad, rng);
    worst["conv2d"] = std::max(worst["conv2d"],
                               fd_layer(conv, random_tensor({n, cin, k + 2 + rng() % 4, k + 2 + rng() % 4}, rng), rng));

    const std::size_t fin = 1 + rng() % 8, fout = 1 + rng() % 6;
    LayerParams lin;
    lin.kind = LayerKind::linear;
    lin.weights = random_tensor({fout, fin}, rng, 0.5);
    lin.bias = random_tensor({fout}, rng, 0.5);
    worst["linear"] = std::max(worst["linear"], fd_layer(lin, random_tensor({n, fin}, rng), rng));

    LayerParams pool;
    pool.kind = LayerKind::maxpool2d;
    pool.kernel = 2;
    pool.stride = 1 + rng() % 2;
    worst["maxpool2d"] = std::max(
        worst["maxpool2d"], fd_layer(pool, random_tensor({n, 1 + rng() % 3, 4 + rng() % 4, 4 + rng() % 4}, rng), rng));

    LayerParams relu;
    relu.kind = LayerKind::relu;
    worst["relu"] = std::max(worst["relu"], fd_layer(relu, random_tensor({n, 2 + rng() % 5, 3, 3}, rng), rng));

    LayerParams flat;
    flat.kind = LayerKind::flatten;
    worst["flatten"] = std::max(worst["flatten"], fd_layer(flat, random_tensor({n, 2, 1 + rng() % 3, 3}, rng), rng));

    const std::size_t classes = 2 + rng() % 9, batch = 1 + rng() % 4;
    std::vector<int> labels;
    for (std::size_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>(rng() % classes));
    const auto logits = random_tensor({batch, classes}, rng, 2.0);
    auto f = [&](const Tensor& z) { return softmax_cross_entropy(z, labels).loss; };
    worst["cross_entropy"] =
        std::max(worst["cross_entropy"], testing::worst_mismatch(softmax_cross_entropy(logits, labels).grad_logits,
                                                                 testing::numeric_gradient(f, logits)));
  }
  double overall = 0.0;
  std::string parts;
  for (const auto& [name, w] : worst) {
    overall = std::max(overall, w);
    parts += " " + name + "=" + fmt(w, 3);
  }
  return {overall <= 1.0, std::to_string(shapes) + " random shapes per primitive; worst |err|/tol:" + parts};
}

// ---------------------------------------------------------------------------
// 2. Surgery soundness

/// Parameter count from first principles for `spec` with conv widths
/// replaced by `widths`.
std::size_t analytic_params(ArchitectureSpec spec, const std::vector<std::size_t>& widths) {
  std::size_t c = spec.input[0], h = spec.input[1], w = spec.input[2], flat = 0, j = 0, total = 0;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::conv2d: {
        const auto out = widths.at(j++);
        total += out * c * l.kernel * l.kernel + (l.bias ? out : 0);
        h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
        w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
        c = out;
        break;
      }
      case LayerKind::maxpool2d:
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
        break;
      case LayerKind::flatten: flat = c * h * w; break;
      case LayerKind::linear:
        total += l.out * flat + (l.bias ? l.out : 0);
        flat = l.out;
        break;
      default: break;
    }
  }
  return total;
}

std::vector<FilterId> random_victims(const NetworkGraph& net, std::size_t want, std::mt19937_64& rng) {
  auto ids = net.active_filters();
  std::shuffle(ids.begin(), ids.end(), rng);
  auto left = net.filter_counts();
  std::vector<FilterId> out;
  for (const auto& id : ids) {
    if (out.size() == want) break;
    if (left[id.layer] > 1) {
      --left[id.layer];
      out.push_back(id);
    }
  }
  return out;
}

Outcome surgery_soundness() {
  std::mt19937_64 rng(77);
  auto alex = load_architecture(std::string(CHPRUNE_SOURCE_DIR) + "/configs/mini_alexnet.arch");
  alex.input = {3, 16, 16};
  std::vector<ArchitectureSpec> specs{alex};
  for (int i = 0; i < 5; ++i) specs.push_back(testing::toy_two_conv(2 + rng() % 6, 2 + rng() % 6, 8, 3));

  double worst_logit = 0.0;
  bool seq_ok = true, params_ok = true;
  std::size_t cases = 0;
  for (const auto& spec : specs) {
    for (int trial = 0; trial < 4; ++trial, ++cases) {
      auto net = build_network(spec, rng());
      testing::randomize_biases(net, rng);
      // (a) zero the kernels and biases of a few filters: their maps vanish.
      const auto dead = random_victims(net, 1 + rng() % 3, rng);
      for (const auto& id : dead) {
        auto& layer = net.mutable_layers()[net.conv_layer_indices()[id.layer]];
        const auto per = layer.weights->size() / layer.weights->dim(0);
        std::fill_n(layer.weights->raw() + id.filter * per, per, 0.0);
        (*layer.bias)[id.filter] = 0.0;
      }
      auto pruned = net;
      prune_filters(pruned, dead);
      for (int b = 0; b < 3; ++b) {
        const auto x = random_tensor({4, spec.input[0], spec.input[1], spec.input[2]}, rng);
        const auto a = run_forward(net, x).logits(), c = run_forward(pruned, x).logits();
        for (std::size_t i = 0; i < a.size(); ++i) worst_logit = std::max(worst_logit, std::abs(a[i] - c[i]));
      }
      // (b) batch removal equals one-at-a-time removal (descending filter
      // index per layer, so earlier removals do not renumber later ones).
      const auto victims = random_victims(net, 1 + rng() % 6, rng);
      auto batch = net, sequential = net;
      prune_filters(batch, victims);
      auto order = victims;
      std::sort(order.begin(), order.end(), [](const FilterId& x, const FilterId& y) {
        return x.layer != y.layer ? x.layer < y.layer : x.filter > y.filter;
      });
      for (const auto& v : order) {
        const std::vector<FilterId> one{v};
        prune_filters(sequential, one);
      }
      seq_ok &= batch == sequential;
      // (c) parameter deltas against the closed-form count.
      const auto before = analytic_params(spec, net.filter_counts());
      const auto after = analytic_params(spec, batch.filter_counts());
      params_ok &= net.parameter_count() == before && batch.parameter_count() == after &&
                   expected_parameter_delta(net, victims) == before - after;
    }
  }
  const bool pass = worst_logit < 1e-12 && seq_ok && params_ok;
  return {pass, std::to_string(cases) + " cases; (a) max logit change " + fmt(worst_logit, 3) + " (< 1e-12); (b) " +
                    (seq_ok ? "identical" : "MISMATCH") + "; (c) " + (params_ok ? "exact" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// 3. Taylor vs exact ablation

Outcome taylor_vs_ablation() {
  std::vector<double> values;
  for (std::uint64_t seed : {36, 37, 38}) {
    auto net = build_network(testing::toy_two_conv(6, 8, 8, 3), seed);
    SyntheticSpec s;
    s.n = 96;
    s.classes = 3;
    s.height = s.width = 8;
    auto data = synthetic_dataset(s, seed);
    standardize(data, compute_channel_stats(data));
    BatchStream train(data, 16, seed + 100);
    for (int i = 0; i < 60; ++i) train_step(net, train.next_batch(), 0.05);
    BatchStream stream(data, 16, seed + 200);
    std::vector<Tensor> xs;
    std::vector<std::vector<int>> ys;
    for (int b = 0; b < 6; ++b) {
      auto batch = stream.next_batch();
      xs.push_back(batch.images);
      ys.push_back(batch.labels);
    }
    BatchStream replay(data, 16, seed + 200);
    const auto ranking = precise_rank(net, replay, 6, Criterion::taylor, {false, true});
    values.push_back(testing::brute_spearman(testing::flatten_scores(ranking.raw_scores),
                                             testing::flatten_scores(testing::ablation_scores(net, xs, ys))));
  }
  const double lo = *std::min_element(values.begin(), values.end());
  return {lo >= 0.5, "Spearman(Taylor, ablation) on 3 toy nets: " + fmt(values[0], 3) + ", " + fmt(values[1], 3) +
                         ", " + fmt(values[2], 3) + " (min >= 0.5)"};
}

// ---------------------------------------------------------------------------
// 4. Frozen-weights equivalence

Outcome frozen_weights(Criterion criterion) {
  const auto opts = RankOptions::defaults_for(criterion);
  bool same_order = true;
  double worst_rel = 0.0;
  std::size_t filters = 0;
  auto check = [&](NetworkGraph net, const Dataset& data, std::size_t batches, std::size_t bs, std::uint64_t seed) {
    BatchStream stream(data, bs, seed);
    ScoreBoard board = reset(net, 0, opts.abs_before_mean);
    const auto before = net;
    for (std::size_t b = 0; b < batches; ++b) train_step(net, stream.next_batch(), 0.0, &board);
    if (!(net == before)) same_order = false;
    const auto coarse = coarse_rank(board, criterion, opts);
    BatchStream replay(data, bs, seed);
    const auto precise = precise_rank(net, replay, batches, criterion, opts);
    same_order &= coarse.ordered == precise.ordered;
    for (const auto& id : precise.ordered) {
      const double p = precise.score(id), c = coarse.score(id);
      const double rel = p == 0.0 ? std::abs(c) : std::abs(c - p) / std::abs(p);
      worst_rel = std::max(worst_rel, rel);
    }
    filters += precise.size();
  };
  check(desk().net, desk().data.train, 10, 32, 5);
  auto toy = build_network(testing::toy_two_conv(5, 7), 9);
  SyntheticSpec s;
  s.n = 64;
  s.classes = 3;
  s.height = s.width = 8;
  auto data = synthetic_dataset(s, 9);
  standardize(data, compute_channel_stats(data));
  check(toy, data, 8, 8, 6);
  return {same_order && worst_rel <= 1e-10,
          std::string(to_string(criterion)) + ": " + std::to_string(filters) + " filters over 2 nets; permutation " +
              (same_order ? "identical" : "DIFFERS") + "; max relative score diff " + fmt(worst_rel, 3) +
              " (<= 1e-10)"};
}

// ---------------------------------------------------------------------------
// 5. Spearman correctness

Outcome spearman_correctness() {
  auto single = [](const std::vector<double>& v) { return make_ranking({v}, Criterion::taylor, RankMode::precise, false); };
  const bool identical = spearman(single({0.4, 0.1, 0.9, 0.3}), single({0.4, 0.1, 0.9, 0.3})).r_s == 1.0;
  const bool reversed = spearman(single({1, 2, 3, 4, 5}), single({5, 4, 3, 2, 1})).r_s == -1.0;
  std::mt19937_64 rng(5);
  std::vector<double> base(10);
  std::iota(base.begin(), base.end(), 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto a = base, b = base;
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    worst = std::max(worst, std::abs(spearman(single(a), single(b)).r_s - testing::brute_spearman(a, b)));
  }
  return {identical && reversed && worst <= 1e-12, std::string("identical ") + (identical ? "+1" : "WRONG") +
                                                       "; reversed " + (reversed ? "-1" : "WRONG") +
                                                       "; max deviation from Pearson-of-ranks over 1000 permutations " +
                                                       fmt(worst, 3)};
}

// ---------------------------------------------------------------------------
// 6. Rank windows

Outcome window_study() {
  const auto& d = desk();
  const auto windows = d.cfg.resolved_windows();
  const auto study = run_window_study(d.net, d.data, desk_pipeline(Criterion::taylor), windows, desk_seeds());
  for (const auto& per : study.runs) {
    for (const auto& m : per) {
      if (m.error) return {false, "run failed: " + *m.error};
    }
  }
  bool pass = true;
  std::string parts;
  for (std::size_t w = 1; w < windows.size(); ++w) {
    const double gap = study.gap_to_baseline_pp(w);
    pass &= gap <= 2.0;
    parts += " (" + std::to_string(windows[w]) + "," + std::to_string(d.cfg.pipeline.filters_per_prune) + ")=" +
             fmt(gap, 3);
  }
  std::string finals;
  for (std::size_t w = 0; w < windows.size(); ++w) finals += " " + fmt(study.mean_final_accuracy(w), 4);
  return {pass, "mean trajectory gap to (1,k) in pp over " + std::to_string(study.seeds.size()) + " seeds:" + parts +
                    " (<= 2); max pairwise " + fmt(study.max_pairwise_gap_pp(), 3) + "; final accuracies" + finals};
}

// ---------------------------------------------------------------------------
// 7. Coarse vs precise accuracy, 8. timing

Outcome coarse_accuracy(Criterion c) {
  const auto& t = desk_timing(c);
  for (const auto* runs : {&t.precise, &t.coarse}) {
    for (const auto& m : *runs) {
      if (m.error) return {false, "run failed: " + *m.error};
    }
  }
  const double p = TimingStudy::mean_final_accuracy(t.precise), q = TimingStudy::mean_final_accuracy(t.coarse);
  const auto remaining = t.precise.front().rows.back().filters_remaining;
  const double gap = 100.0 * std::abs(p - q);
  return {gap <= 2.0, std::string(to_string(c)) + ": final accuracy precise " + fmt(p) + ", coarse " + fmt(q) +
                          " (gap " + fmt(gap, 3) + " pp <= 2) at " + std::to_string(remaining) + "/" +
                          std::to_string(t.precise.front().initial_filters) + " filters, " +
                          std::to_string(t.precise.size()) + " seeds"};
}

Outcome timing(Criterion c) {
  const auto& t = desk_timing(c);
  const double prt = TimingStudy::mean_rt(t.precise), crt = TimingStudy::mean_rt(t.coarse);
  const double ptt = TimingStudy::mean_tt(t.precise), ctt = TimingStudy::mean_tt(t.coarse);
  bool passes_ok = true;
  for (const auto& m : t.coarse) {
    passes_ok &= !m.error && m.passes.ranking == 0 && m.passes.pretrain == 0 &&
                 m.passes.finetune == m.rows.size() * desk().cfg.pipeline.finetune_batches &&
                 m.passes.total() == m.passes.finetune + m.passes.eval;
  }
  const bool pass = crt < 0.01 * prt && ctt < ptt && passes_ok;
  return {pass, std::string(to_string(c)) + ": RT precise " + fmt(prt, 3) + " s, coarse " + fmt(crt, 3) +
                    " s (ratio " + fmt(crt / prt, 3) + " < 0.01); TT precise " + fmt(ptt, 4) + " s, coarse " +
                    fmt(ctt, 4) + " s; coarse passes outside fine-tune/eval: " + (passes_ok ? "0" : "NONZERO") +
                    "; same runs as criterion 7"};
}

// ---------------------------------------------------------------------------
// 9. Correlation vs learning rate

Outcome correlation() {
  const auto& d = desk();
  auto protocol = experiment_protocol(d.cfg);
  const std::vector<double> lrs{1e-4, 1e-5};
  const auto study = correlation_study(d.net, d.data.train, protocol, lrs, std::max<std::size_t>(5, d.cfg.repeats),
                                       d.cfg.seed, d.cfg.variation_batches, d.cfg.label);
  const double hi = study.correlation[0].mean, lo = study.correlation[1].mean;
  const bool pass = lo >= hi && hi > 0.0 && lo > 0.0;
  return {pass, "mean r_s over " + std::to_string(study.variation.values.size()) + " seeds: lr 1e-4 " + fmt(hi, 6) +
                    " +- " + fmt(study.correlation[0].stddev, 2) + ", lr 1e-5 " + fmt(lo, 6) + " +- " +
                    fmt(study.correlation[1].stddev, 2) + "; variation baseline " + fmt(study.variation.mean, 6) +
                    " +- " + fmt(study.variation.stddev, 2)};
}

// ---------------------------------------------------------------------------
// 10. Mean activation

Outcome mean_activation() {
  const auto a = frozen_weights(Criterion::mean_activation);
  const auto b = coarse_accuracy(Criterion::mean_activation);
  const auto c = timing(Criterion::mean_activation);
  return {a.pass && b.pass && c.pass, "[4] " + std::string(a.pass ? "pass" : "FAIL") + " " + a.detail + " | [7] " +
                                          (b.pass ? "pass" : "FAIL") + " " + b.detail + " | [8] " +
                                          (c.pass ? "pass" : "FAIL") + " " + c.detail};
}

// ---------------------------------------------------------------------------
// 11. Determinism

std::string timing_free(const fs::path& csv) {
  std::ostringstream os;
  std::vector<bool> keep;
  std::istringstream in(read_text_file(csv.string()));
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("# ", 0) == 0) {
      os << line << '\n';
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (keep.empty()) {
      for (const auto& n : cells) keep.push_back(n.size() < 2 || n.compare(n.size() - 2, 2, "_s") != 0);
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i < keep.size() && keep[i]) os << cells[i];
      os << ',';
    }
    os << '\n';
  }
  return os.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).string();
    if (e.path().extension() == ".csv") out[rel] = timing_free(e.path());
    if (e.path().extension() == ".pft" || e.path().extension() == ".jsonl" || e.path().extension() == ".arch") {
      out[rel] = read_text_file(e.path().string());
    }
  }
  return out;
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / ("chprune_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto cfg = load_experiment(fs::path(CHPRUNE_SOURCE_DIR) / "configs" / "desk_alexnet.cfg",
                                   {{"out", dir.string()},
                                    {"repeats", "2"},
                                    {"synthetic_train", "400"},
                                    {"synthetic_test", "200"},
                                    {"pretrain_epochs", "2"},
                                    {"finetune_batches", "5"},
                                    {"ranking_batches", "3"},
                                    {"correlation_batches", "5"},
                                    {"variation_batches", "5"},
                                    {"target_fraction", "0.8"}});
  std::vector<std::map<std::string, std::string>> runs;
  for (int rerun = 0; rerun < 2; ++rerun) {
    for (const auto* cmd : {"pretrain", "window-study", "timing-study", "correlation-study"}) run_command(cmd, cfg);
    for (const auto* mode : {"precise", "coarse"}) {
      auto c = cfg;
      c.pipeline.mode = parse_mode(mode);
      cmd_prune(c);
    }
    runs.push_back(snapshot(dir));
  }
  std::size_t csvs = 0;
  std::vector<std::string> differing;
  for (const auto& [name, text] : runs[0]) {
    if (name.size() > 4 && name.substr(name.size() - 4) == ".csv") ++csvs;
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != text) differing.push_back(name);
  }
  fs::remove_all(dir);
  const bool pass = differing.empty() && runs[0].size() == runs[1].size() && csvs > 0;
  std::string detail = "reduced reruns of pretrain, prune (both modes), window/timing/correlation studies: " +
                       std::to_string(runs[0].size()) + " artifacts (" + std::to_string(csvs) + " CSV) compared; ";
  detail += differing.empty() ? "all identical apart from *_s columns" : "differ: " + differing.front();
  return {pass, detail};
}

struct Criterion_ {
  int id;
  std::string name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));

  const std::vector<Criterion_> criteria{
      {1, "gradient exactness", 60, gradient_exactness},
      {2, "surgery soundness", 60, surgery_soundness},
      {3, "Taylor vs ablation", 120, taylor_vs_ablation},
      {4, "frozen-weights equivalence", 60, [] { return frozen_weights(Criterion::taylor); }},
      {5, "Spearman correctness", 10, spearman_correctness},
      {6, "rank windows agree", 1800, window_study},
      {7, "coarse matches precise accuracy", 1800, [] { return coarse_accuracy(Criterion::taylor); }},
      {8, "coarse ranking cost", 900, [] { return timing(Criterion::taylor); }},
      {9, "correlation vs learning rate", 1200, correlation},
      {10, "mean-activation generality", 1800, mean_activation},
      {11, "determinism", 1800, determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.limit_s;
    const bool pass = out.pass && in_time;
    failures += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << out.detail << " ["
              << fmt(secs, 3) << " s, limit " << c.limit_s << " s" << (in_time ? "" : ", OVER LIMIT") << "]"
              << std::endl;
  }
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << "(" << failures << " failing)" << std::endl;
  return failures ? 1 : 0;
}
