#include <gtest/gtest.h>

#include <set>

#include "chprune/analysis.hpp"
#include "chprune/criteria.hpp"
#include "chprune/pipeline.hpp"
#include "test_support.hpp"

namespace chprune {
namespace {

using testing::random_tensor;

Dataset toy_data(std::size_t n, int classes, std::size_t side, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n = n;
  spec.classes = classes;
  spec.height = spec.width = side;
  auto ds = synthetic_dataset(spec, seed);
  standardize(ds, compute_channel_stats(ds));
  return ds;
}

bool is_permutation_of_active(const Ranking& r, const NetworkGraph& net) {
  std::set<FilterId> seen(r.ordered.begin(), r.ordered.end());
  const auto active = net.active_filters();
  return seen.size() == r.ordered.size() && r.ordered.size() == active.size() &&
         std::set<FilterId>(active.begin(), active.end()) == seen;
}

TEST(NormalizePerLayer, ScalesToUnitNorm) {
  const auto out = normalize_per_layer({{3.0, 4.0}});
  EXPECT_DOUBLE_EQ(out[0][0], 0.6);
  EXPECT_DOUBLE_EQ(out[0][1], 0.8);
}

TEST(NormalizePerLayer, AllZeroLayerUnchanged) {
  const auto out = normalize_per_layer({{0.0, 0.0}, {1.0}});
  EXPECT_EQ(out[0], (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(out[1], (std::vector<double>{1.0}));
}

TEST(MakeRanking, TiesBreakByLayerThenFilter) {
  const auto r = make_ranking({{1.0, 0.5}, {0.5, 0.0}}, Criterion::taylor, RankMode::precise, false);
  const std::vector<FilterId> expect{{1, 1}, {0, 1}, {1, 0}, {0, 0}};
  EXPECT_EQ(r.ordered, expect);
  EXPECT_THROW(make_ranking({{-1.0}}, Criterion::taylor, RankMode::precise, false), Error);
  EXPECT_THROW(make_ranking({{std::nan("")}}, Criterion::taylor, RankMode::precise, false), Error);
}

TEST(PreciseRank, MeanActivationOfConstantOneMapIsOne) {
  auto net = build_network(testing::toy_two_conv(), 31);
  auto& conv0 = net.mutable_layers()[0];
  for (std::size_t i = 0; i < conv0.weights->size() / conv0.weights->dim(0); ++i) (*conv0.weights)[i] = 0.0;
  (*conv0.bias)[0] = 1.0;
  const auto data = toy_data(16, 3, 8, 31);
  BatchStream stream(data, 8, 1);
  const auto r = precise_rank(net, stream, 2, Criterion::mean_activation,
                              RankOptions::defaults_for(Criterion::mean_activation));
  EXPECT_DOUBLE_EQ(r.raw_score({0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(r.score({0, 0}), 1.0);
}

TEST(PreciseRank, DeadPathFilterScoresZeroAndRanksFirst) {
  auto net = build_network(testing::toy_two_conv(), 32);
  std::mt19937_64 rng(32);
  testing::randomize_biases(net, rng);
  auto& consumer = *net.mutable_layers()[2].weights;  // conv1 reads conv0's maps
  for (std::size_t o = 0; o < consumer.dim(0); ++o)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) consumer.at(o, 2, ky, kx) = 0.0;
  const auto data = toy_data(32, 3, 8, 32);
  BatchStream stream(data, 8, 2);
  const auto r = precise_rank(net, stream, 4, Criterion::taylor);
  EXPECT_EQ(r.raw_score({0, 2}), 0.0);
  EXPECT_EQ(r.ordered.front(), (FilterId{0, 2}));
  EXPECT_GT(r.score(r.ordered[1]), 0.0);
}

TEST(PreciseRank, DoesNotMutateWeights) {
  const auto net = build_network(testing::toy_two_conv(), 33);
  const NetworkGraph before = net;
  const auto data = toy_data(32, 3, 8, 33);
  BatchStream stream(data, 8, 3);
  precise_rank(net, stream, 4, Criterion::taylor);
  precise_rank(net, stream, 4, Criterion::mean_activation);
  EXPECT_EQ(net, before);
}

TEST(PreciseRank, CountsPassesAndRejectsEmptyStreams) {
  const auto net = build_network(testing::toy_two_conv(), 34);
  const auto data = toy_data(32, 3, 8, 34);
  BatchStream stream(data, 8, 4);
  PassCounter counter;
  precise_rank(net, stream, 3, Criterion::taylor, RankOptions{}, &counter);
  EXPECT_EQ(counter.ranking, 3u);
  const auto tiny = toy_data(4, 2, 8, 34);
  BatchStream empty(tiny, 8, 4);
  EXPECT_THROW(precise_rank(net, empty, 1, Criterion::taylor), Error);
}

TEST(PreciseRank, IsAValidPermutationAfterSurgery) {
  auto net = build_network(testing::toy_two_conv(), 35);
  const std::vector<FilterId> victims{{0, 1}, {1, 0}, {1, 5}};
  prune_filters(net, victims);
  const auto data = toy_data(16, 3, 8, 35);
  BatchStream stream(data, 8, 5);
  EXPECT_TRUE(is_permutation_of_active(precise_rank(net, stream, 2, Criterion::taylor), net));
}

TEST(TaylorScore, TracksExactAblationOnToyNet) {
  auto net = build_network(testing::toy_two_conv(6, 8, 8, 3), 36);
  const auto data = toy_data(96, 3, 8, 36);
  // A little training so gradients are not dominated by the random init.
  BatchStream train(data, 16, 6);
  for (int i = 0; i < 60; ++i) train_step(net, train.next_batch(), 0.05);

  BatchStream stream(data, 16, 7);
  std::vector<Tensor> xs;
  std::vector<std::vector<int>> ys;
  for (int b = 0; b < 6; ++b) {
    auto batch = stream.next_batch();
    xs.push_back(batch.images);
    ys.push_back(batch.labels);
  }
  BatchStream replay(data, 16, 7);
  const auto r = precise_rank(net, replay, 6, Criterion::taylor, {false, true});
  const auto oracle = testing::ablation_scores(net, xs, ys);
  const double rs = testing::brute_spearman(testing::flatten_scores(r.raw_scores), testing::flatten_scores(oracle));
  RecordProperty("spearman", std::to_string(rs));
  EXPECT_GE(rs, 0.5);
}

TEST(CoarseRank, FrozenWeightsMatchPrecise) {
  for (auto criterion : {Criterion::taylor, Criterion::mean_activation}) {
    auto net = build_network(testing::toy_two_conv(), 37);
    const auto data = toy_data(64, 3, 8, 37);
    const auto opts = RankOptions::defaults_for(criterion);
    BatchStream stream(data, 8, 8);
    ScoreBoard board = reset(net);
    for (int b = 0; b < 6; ++b) train_step(net, stream.next_batch(), 0.0, &board);
    const auto coarse = coarse_rank(board, criterion, opts);
    BatchStream replay(data, 8, 8);
    const auto precise = precise_rank(net, replay, 6, criterion, opts);
    EXPECT_EQ(coarse.ordered, precise.ordered);
    EXPECT_EQ(coarse.mode, RankMode::coarse);
    for (const auto& id : coarse.ordered) {
      EXPECT_NEAR(coarse.score(id), precise.score(id), 1e-10 * std::abs(precise.score(id)));
    }
  }
}

TEST(CoarseRank, SingleFilterNetwork) {
  ArchitectureSpec spec;
  spec.input = {1, 4, 4};
  spec.layers = {testing::conv_spec(1), testing::plain_spec(LayerKind::relu),
                 testing::plain_spec(LayerKind::flatten), testing::linear_spec(2)};
  const auto net = build_network(spec, 38);
  ScoreBoard board = reset(net);
  const auto pass = run_forward(net, Tensor({1, 1, 4, 4}, 1.0));
  accumulate_batch(board, pass, nullptr);
  const auto r = coarse_rank(board, Criterion::mean_activation);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r.ordered.front(), (FilterId{0, 0}));
}

TEST(CoarseRank, DoubledSumsRankLater) {
  ForwardPass pass;
  Tensor h({1, 2, 2, 2}, 1.0);
  for (std::size_t p = 4; p < 8; ++p) h[p] = 2.0;  // filter 1 maps are twice filter 0
  pass.activations = {Tensor({1, 1, 1, 1}), h, h};
  pass.conv_indices = {0};
  pass.conv_has_relu = {true};
  const std::vector<Tensor> g{Tensor({1, 2, 2, 2}, 1.0)};
  ScoreBoard board({2}, 0, true);
  accumulate_batch(board, pass, &g);
  accumulate_batch(board, pass, &g);
  for (auto c : {Criterion::taylor, Criterion::mean_activation}) {
    const auto r = coarse_rank(board, c);
    EXPECT_EQ(r.ordered, (std::vector<FilterId>{{0, 0}, {0, 1}})) << to_string(c);
  }
}

TEST(CoarseRank, NeedsBatchesAndUsesOnlyTheBoard) {
  auto net = build_network(testing::toy_two_conv(), 39);
  ScoreBoard board = reset(net);
  EXPECT_THROW(coarse_rank(board, Criterion::taylor), Error);
  {
    const auto data = toy_data(16, 3, 8, 39);
    BatchStream stream(data, 8, 9);
    train_step(net, stream.next_batch(), 0.01, &board);
  }
  // The dataset is gone; ranking still works from the board alone.
  EXPECT_TRUE(is_permutation_of_active(coarse_rank(board, Criterion::taylor), net));
  EXPECT_THROW(coarse_rank(board, Criterion::random), Error);
}

TEST(RandomRank, DeterministicPermutation) {
  const auto net = build_network(testing::toy_two_conv(8, 12), 40);
  const auto a = random_rank(net, 5), b = random_rank(net, 5), c = random_rank(net, 6);
  EXPECT_EQ(a.ordered, b.ordered);
  EXPECT_NE(a.ordered, c.ordered);
  EXPECT_TRUE(is_permutation_of_active(a, net));
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LT(a.score(a.ordered[i - 1]), a.score(a.ordered[i]));
}

TEST(CriterionNames, ParseAndPrint) {
  for (auto c : {Criterion::taylor, Criterion::mean_activation, Criterion::random}) {
    EXPECT_EQ(parse_criterion(to_string(c)), c);
  }
  EXPECT_EQ(parse_criterion("mean-activation"), Criterion::mean_activation);
  EXPECT_EQ(parse_mode("coarse"), RankMode::coarse);
  EXPECT_THROW(parse_criterion("l1"), Error);
  EXPECT_THROW(parse_mode("fast"), Error);
}

TEST(RankingCsv, ColumnsAndRowCount) {
  const auto r = make_ranking({{0.2, 0.1}}, Criterion::taylor, RankMode::precise, true);
  std::ostringstream os;
  r.write_csv(os);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "rank,layer,filter,raw_score,normalized_score,criterion,mode");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 6), "1,0,1,");
}

}  // namespace
}  // namespace chprune
