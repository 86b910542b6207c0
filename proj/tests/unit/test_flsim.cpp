#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "ambient/errors.hpp"
#include "ambient/flsim.hpp"
#include "support/dropout_oracle.hpp"

using namespace ambient;
using ambient::testing::element_dropped;
using ambient::testing::enumerated_fraction;

namespace {

ModelConfig toy(NormKind norm = NormKind::group) {
  ModelConfig c = ModelConfig::preset(SizePreset::toyS);
  c.norm_kind = norm;
  c.num_classes = 4;
  c.feature_dim = 6;
  c.frames = 8;
  return c;
}

SyntheticTaskSpec toy_task() {
  SyntheticTaskSpec t;
  t.num_classes = 4;
  t.feature_dim = 6;
  t.frames = 8;
  return t;
}

LayerClassification ranking(std::vector<std::size_t> order) {
  LayerClassification c;
  c.ranking = std::move(order);
  return c;
}

std::size_t zeros(const std::vector<std::uint8_t>& keep) {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
}

ParamStore scalar_store(double v) {
  ParamStore s = ParamStore::detached(1, 1);
  s.insert({0, "ffn_start", "w_in"}, ParamEntry{Tensor::vector({v, 2.0 * v}), InitSpec{}, true});
  return s;
}

FLConfig small_fl(std::size_t clients, std::size_t per_round, std::size_t rounds, std::size_t steps) {
  FLConfig f;
  f.num_clients = clients;
  f.clients_per_round = per_round;
  f.num_rounds = rounds;
  f.client_steps = steps;
  f.client_lr = 0.05;
  f.client_batch_size = 4;
  f.seed = 17;
  return f;
}

TrainConfig client_sgd(const FLConfig& f, std::size_t round, std::size_t client) {
  TrainConfig tc;
  tc.optimizer = OptimizerKind::sgd;
  tc.lr = f.client_lr;
  tc.batch_size = f.client_batch_size;
  tc.total_steps = f.client_steps;
  tc.seed = client_train_seed(f, round, client);
  return tc;
}

}  // namespace

TEST(ShardClients, TenExamplesOverThreeClients) {
  const Dataset d = make_dataset(toy_task(), Split::train, 10, 1);
  const auto shards = shard_clients(d, 3, 5);
  ASSERT_EQ(shards.size(), 3u);
  std::multiset<std::size_t> sizes;
  for (const Dataset& s : shards) sizes.insert(s.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{3, 3, 4}));
}

TEST(ShardClients, DisjointCoverAndDeterministic) {
  SyntheticTaskSpec t = toy_task();
  const Dataset d = make_dataset(t, Split::train, 23, 2);
  const auto shards = shard_clients(d, 4, 9);
  // Noisy examples are distinct, so they identify themselves.
  std::vector<std::vector<double>> seen;
  for (const Dataset& s : shards)
    for (std::size_t i = 0; i < s.size(); ++i) seen.emplace_back(s.example(i).begin(), s.example(i).end());
  ASSERT_EQ(seen.size(), d.size());
  std::vector<std::vector<double>> all;
  for (std::size_t i = 0; i < d.size(); ++i) all.emplace_back(d.example(i).begin(), d.example(i).end());
  std::sort(seen.begin(), seen.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(seen, all);
  EXPECT_EQ(std::adjacent_find(seen.begin(), seen.end()), seen.end());
  EXPECT_EQ(shards, shard_clients(d, 4, 9));
}

TEST(ShardClients, SingleClientIsTheDataset) {
  const Dataset d = make_dataset(toy_task(), Split::train, 13, 3);
  const auto shards = shard_clients(d, 1, 4);
  ASSERT_EQ(shards.size(), 1u);
  EXPECT_EQ(shards[0], d);
  EXPECT_THROW(shard_clients(d, 14, 4), ConfigError);
}

TEST(DropoutSchedule, ParseAndToken) {
  for (const char* text : {"none", "flat@0.2", "amb-2@0.5", "crit-4@0.5"})
    EXPECT_EQ(DropoutSchedule::parse(text).token(), text);
  EXPECT_EQ(DropoutSchedule::parse("amb-3@0.5"), DropoutSchedule::ambient(3, 0.5));
  for (const char* bad : {"", "flat", "amb-x@0.5", "amb-1.5@0.5", "drop@0.1", "flat@0.1x"})
    EXPECT_THROW(DropoutSchedule::parse(bad), ConfigError) << bad;
}

TEST(DropoutSchedule, LayerRatesFollowRanking) {
  const auto cls = ranking({2, 0, 3, 1});
  EXPECT_EQ(DropoutSchedule::ambient(2, 0.5).layer_rates(cls, 4), (std::vector<double>{0.5, 0, 0.5, 0}));
  EXPECT_EQ(DropoutSchedule::critical(2, 0.5).layer_rates(cls, 4), (std::vector<double>{0, 0.5, 0, 0.5}));
  EXPECT_EQ(DropoutSchedule::flat(0.2).layer_rates(cls, 4), (std::vector<double>(4, 0.2)));
  EXPECT_EQ(DropoutSchedule::none().layer_rates(cls, 4), (std::vector<double>(4, 0.0)));
}

TEST(BuildMask, NoneIsAllKeep) {
  const ModelConfig c = toy();
  const SubmodelMask m = build_mask(DropoutSchedule::none(), ranking({0, 1, 2, 3}), c, 3);
  EXPECT_TRUE(m.all_keep());
  EXPECT_EQ(params_dropped_fraction(m, c), 0.0);
  EXPECT_EQ(params_dropped(m, c), 0u);
}

TEST(BuildMask, InvalidSchedulesRejected) {
  const ModelConfig c = toy();
  const auto cls = ranking({0, 1, 2, 3});
  EXPECT_THROW(build_mask(DropoutSchedule::flat(1.0), cls, c, 1), ConfigError);
  EXPECT_THROW(build_mask(DropoutSchedule::flat(-0.1), cls, c, 1), ConfigError);
  EXPECT_THROW(build_mask(DropoutSchedule::ambient(5, 0.5), cls, c, 1), ConfigError);
  EXPECT_THROW(build_mask(DropoutSchedule::critical(2, 0.5), ranking({0, 1}), c, 1), ConfigError);
}

TEST(BuildMask, FlatDropsFloorOfRateTimesUnits) {
  for (NormKind k : {NormKind::group, NormKind::batch, NormKind::layer}) {
    const ModelConfig c = toy(k);
    for (double r : {0.5, 0.3}) {
      const SubmodelMask m = build_mask(DropoutSchedule::flat(r), ranking({0, 1, 2, 3}), c, 11);
      for (const LayerMask& l : m.layers) {
        EXPECT_EQ(zeros(l.ffn_start), static_cast<std::size_t>(std::floor(r * 64)));
        EXPECT_EQ(zeros(l.ffn_end), static_cast<std::size_t>(std::floor(r * 64)));
        EXPECT_EQ(zeros(l.heads), static_cast<std::size_t>(std::floor(r * 4)));
        EXPECT_EQ(zeros(l.conv_units), static_cast<std::size_t>(std::floor(r * static_cast<double>(c.conv_units()))));
      }
    }
  }
}

TEST(BuildMask, DeterministicAndSeedSensitive) {
  const ModelConfig c = toy();
  const auto cls = ranking({3, 1, 0, 2});
  const auto s = DropoutSchedule::ambient(2, 0.5);
  EXPECT_EQ(build_mask(s, cls, c, 8), build_mask(s, cls, c, 8));
  EXPECT_NE(build_mask(s, cls, c, 8).layers, build_mask(s, cls, c, 9).layers);
}

TEST(ParamsDropped, MatchesElementEnumeration) {
  const auto cls = ranking({2, 0, 3, 1});
  for (NormKind k : {NormKind::group, NormKind::batch, NormKind::layer}) {
    const ModelConfig c = toy(k);
    for (const char* text : {"flat@0.2", "flat@0.5", "amb-2@0.5", "crit-2@0.5", "amb-3@0.5", "crit-4@0.5", "amb-1@0.75"}) {
      for (std::uint64_t seed : {1u, 2u}) {
        const SubmodelMask m = build_mask(DropoutSchedule::parse(text), cls, c, seed);
        EXPECT_EQ(params_dropped_fraction(m, c), enumerated_fraction(m, c)) << text;
      }
    }
  }
}

TEST(ParamsDropped, AmbientFractionGrowsWithLayerCount) {
  const ModelConfig c = toy();
  const auto cls = ranking({1, 3, 0, 2});
  const auto frac = [&](std::size_t n) {
    return params_dropped_fraction(build_mask(DropoutSchedule::ambient(n, 0.5), cls, c, 4), c);
  };
  EXPECT_LT(frac(2), frac(3));
  EXPECT_LT(frac(3), frac(4));
}

TEST(Submodel, AllKeepExtractAndEmbedAreIdentity) {
  const ParamStore p = init_model(toy(), 1);
  const SubmodelMask m = full_mask(toy());
  EXPECT_TRUE(bitwise_equal(extract_submodel(p, m), p));
  EXPECT_TRUE(bitwise_equal(embed_values(p, m, p), p));
  EXPECT_TRUE(bitwise_equal(embed_update(p, m, p), p));
}

TEST(Submodel, EmbedUpdateIsZeroAtDroppedCoordinates) {
  const ModelConfig c = toy();
  const ParamStore p = init_model(c, 2);
  const SubmodelMask m = build_mask(DropoutSchedule::flat(0.5), ranking({0, 1, 2, 3}), c, 5);
  const ParamStore embedded = embed_update(p, m, extract_submodel(p, m));
  std::size_t zeros_seen = 0;
  for (const auto& [key, entry] : embedded.entries()) {
    const Shape& s = entry.value.shape();
    const std::size_t rows = s[0], cols = s.size() == 2 ? s[1] : 1;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t col = 0; col < cols; ++col) {
        const std::size_t i = r * cols + col;
        const bool dropped = key.layer >= 0 && entry.trainable &&
                             element_dropped(key, r, col, s.size(), m.layers[static_cast<std::size_t>(key.layer)], c);
        if (dropped) {
          EXPECT_EQ(entry.value[i], 0.0) << key.name();
          ++zeros_seen;
        } else {
          EXPECT_EQ(entry.value[i], p.tensor(key)[i]) << key.name();
        }
      }
  }
  EXPECT_EQ(zeros_seen, params_dropped(m, c));
}

TEST(Submodel, MaskMismatchRejected) {
  const ParamStore p = init_model(toy(), 3);
  ModelConfig other = toy();
  other.num_layers = 2;
  EXPECT_THROW(extract_submodel(p, full_mask(other)), ConfigError);
}

TEST(Submodel, ForwardEqualsZeroedFullModel) {
  const Dataset d = make_dataset(toy_task(), Split::eval, 5, 4);
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Tensor x = d.batch(idx);
  for (NormKind k : {NormKind::group, NormKind::batch, NormKind::layer}) {
    for (LayerOrder order : {LayerOrder::nonstreaming, LayerOrder::streaming}) {
      ModelConfig c = toy(k);
      c.layer_order = order;
      const ParamStore p = init_model(c, 6);
      for (const char* text : {"flat@0.5", "amb-2@0.75", "crit-3@0.3"}) {
        const SubmodelMask m = build_mask(DropoutSchedule::parse(text), ranking({3, 2, 1, 0}), c, 21);
        const ParamStore sub = extract_submodel(p, m), zeroed = zero_dropped(p, m);
        EXPECT_LE(max_abs_diff(predict_logits(sub, x), predict_logits(zeroed, x)), 1e-10) << text;
        Graph g1(false), g2(false);
        const Tensor a = forward(sub, x, NormMode::train, g1).value();
        const Tensor b = forward(zeroed, x, NormMode::train, g2).value();
        EXPECT_LE(max_abs_diff(a, b), 1e-10) << text << " train mode";
      }
    }
  }
}

TEST(Aggregate, SingleClientUnchanged) {
  const ParamStore delta = scalar_store(1.7);
  EXPECT_TRUE(bitwise_equal(aggregate({{0, 5.0, delta, {}}}), delta));
}

TEST(Aggregate, HandWeightedMean) {
  const ParamStore out = aggregate({{0, 1.0, scalar_store(0.0), {}}, {1, 3.0, scalar_store(4.0), {}}});
  EXPECT_EQ(out.tensor({0, "ffn_start", "w_in"})[0], 3.0);
  EXPECT_EQ(out.tensor({0, "ffn_start", "w_in"})[1], 6.0);
}

TEST(Aggregate, PermutationInvariant) {
  std::vector<ClientContribution> items{
      {2, 1.5, scalar_store(0.1), {}}, {0, 2.5, scalar_store(0.7), {}}, {1, 0.5, scalar_store(-0.3), {}}};
  const ParamStore ref = aggregate(items);
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.client_id > b.client_id; });
  EXPECT_TRUE(bitwise_equal(aggregate(items), ref));
  std::swap(items[0], items[2]);
  EXPECT_TRUE(bitwise_equal(aggregate(items), ref));
}

TEST(Aggregate, IdenticalDeltasAreReproduced) {
  const ParamStore d = scalar_store(0.25);
  const ParamStore out = aggregate({{0, 1.0, d, {}}, {1, 2.0, d, {}}, {2, 5.0, d, {}}});
  EXPECT_TRUE(bitwise_equal(out, d));
}

TEST(Aggregate, ZeroOrNegativeWeightsRejected) {
  EXPECT_THROW(aggregate({{0, 0.0, scalar_store(1.0), {}}, {1, 0.0, scalar_store(2.0), {}}}), NumericError);
  EXPECT_THROW(aggregate({{0, -1.0, scalar_store(1.0), {}}}), NumericError);
  EXPECT_THROW(aggregate({}), ConfigError);
}

TEST(Aggregate, CoordinatesAveragedOverParticipatingClients) {
  const ModelConfig c = toy();
  const ParamStore base = init_model(c, 7);
  const auto cls = ranking({0, 1, 2, 3});
  const SubmodelMask ma = build_mask(DropoutSchedule::flat(0.5), cls, c, 100);
  const SubmodelMask mb = build_mask(DropoutSchedule::flat(0.5), cls, c, 200);
  ParamStore da = base, db = base;
  for (auto& [key, e] : da.entries()) e.value = Tensor::filled(e.value.shape(), 1.0);
  for (auto& [key, e] : db.entries()) e.value = Tensor::filled(e.value.shape(), 5.0);
  const ParamStore out = aggregate({{0, 1.0, da, ma}, {1, 3.0, db, mb}});
  const ParamKey key{1, "ffn_start", "b_in"};
  const auto& ka = ma.layers[1].ffn_start;
  const auto& kb = mb.layers[1].ffn_start;
  for (std::size_t i = 0; i < ka.size(); ++i) {
    const double expected = ka[i] && kb[i] ? 4.0 : ka[i] ? 1.0 : kb[i] ? 5.0 : 0.0;
    EXPECT_EQ(out.tensor(key)[i], expected) << i;
  }
}

TEST(FlTrain, SingleClientEqualsCentralisedSgdBitwise) {
  const ModelConfig c = toy();
  const ParamStore server = init_model(c, 8);
  const Dataset data = make_dataset(toy_task(), Split::train, 24, 8);
  const FLConfig f = small_fl(1, 1, 1, 6);
  const FLResult r = fl_train(server, shard_clients(data, 1, f.seed), f, DropoutSchedule::none(), ranking({0, 1, 2, 3}));
  const ParamStore central = train(server, data, client_sgd(f, 0, 0)).final_params;
  EXPECT_TRUE(bitwise_equal(r.final_params, central));
  ASSERT_EQ(r.rounds.size(), 1u);
  EXPECT_EQ(r.rounds[0].clients, (std::vector<std::size_t>{0}));
  EXPECT_EQ(r.rounds[0].params_dropped_fraction, 0.0);
}

TEST(FlTrain, NoneAndFlatZeroAreIdentical) {
  const ModelConfig c = toy(NormKind::batch);
  const ParamStore server = init_model(c, 9);
  const auto shards = shard_clients(make_dataset(toy_task(), Split::train, 30, 9), 3, 1);
  const FLConfig f = small_fl(3, 2, 2, 2);
  const auto cls = ranking({0, 1, 2, 3});
  const FLResult a = fl_train(server, shards, f, DropoutSchedule::none(), cls);
  const FLResult b = fl_train(server, shards, f, DropoutSchedule::flat(0.0), cls);
  EXPECT_TRUE(bitwise_equal(a.final_params, b.final_params));
  for (std::size_t i = 0; i < a.rounds.size(); ++i) EXPECT_EQ(a.rounds[i].mean_client_loss, b.rounds[i].mean_client_loss);
}

TEST(FlTrain, TwoClientsMatchHandWeightedMean) {
  const ModelConfig c = toy();
  const ParamStore server = init_model(c, 10);
  const auto shards = shard_clients(make_dataset(toy_task(), Split::train, 11, 10), 2, 3);
  const FLConfig f = small_fl(2, 2, 1, 1);
  const FLResult r = fl_train(server, shards, f, DropoutSchedule::none(), ranking({0, 1, 2, 3}));
  const ParamStore a = train(server, shards[0], client_sgd(f, 0, 0)).final_params;
  const ParamStore b = train(server, shards[1], client_sgd(f, 0, 1)).final_params;
  const double na = static_cast<double>(shards[0].size()), nb = static_cast<double>(shards[1].size());
  ASSERT_NE(na, nb);
  for (const auto& [key, entry] : server.entries()) {
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      const double da = a.tensor(key)[i] - entry.value[i], db = b.tensor(key)[i] - entry.value[i];
      const double expected = entry.value[i] + (na * da + nb * db) / (na + nb);
      ASSERT_NEAR(r.final_params.tensor(key)[i], expected, 1e-12) << key.name();
    }
  }
}

TEST(FlTrain, DeterministicWithDropout) {
  const ModelConfig c = toy();
  const ParamStore server = init_model(c, 11);
  const Dataset data = make_dataset(toy_task(), Split::train, 32, 11);
  const Dataset eval = make_dataset(toy_task(), Split::eval, 16, 11);
  FLConfig f = small_fl(4, 2, 3, 2);
  f.eval_every_round = true;
  const auto shards = shard_clients(data, 4, f.seed);
  const auto s = DropoutSchedule::ambient(2, 0.5);
  const FLResult a = fl_train(server, shards, f, s, ranking({1, 0, 3, 2}), &eval);
  const FLResult b = fl_train(server, shards, f, s, ranking({1, 0, 3, 2}), &eval);
  EXPECT_TRUE(bitwise_equal(a.final_params, b.final_params));
  ASSERT_EQ(a.rounds.size(), 3u);
  for (const RoundReport& rep : a.rounds) {
    EXPECT_EQ(rep.clients.size(), 2u);
    EXPECT_TRUE(std::is_sorted(rep.clients.begin(), rep.clients.end()));
    EXPECT_TRUE(rep.eval_error.has_value());
    EXPECT_GT(rep.params_dropped_fraction, 0.0);
  }
  ASSERT_TRUE(a.final_eval.has_value());
  EXPECT_EQ(a.rounds.back().eval_error, a.final_eval->error_rate);
}

TEST(FlTrain, ShardCountMustMatchClients) {
  const ParamStore server = init_model(toy(), 12);
  const auto shards = shard_clients(make_dataset(toy_task(), Split::train, 12, 12), 3, 1);
  EXPECT_THROW(fl_train(server, shards, small_fl(4, 2, 1, 1), DropoutSchedule::none(), ranking({0, 1, 2, 3})),
               ConfigError);
}

TEST(SampleClients, WithoutReplacementAndSeeded) {
  const FLConfig f = small_fl(10, 4, 5, 1);
  for (std::size_t round = 0; round < 5; ++round) {
    const auto ids = sample_clients(f, round);
    EXPECT_EQ(ids.size(), 4u);
    EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 4u);
    EXPECT_EQ(ids, sample_clients(f, round));
  }
}

TEST(DomainTransfer, RowsAndDroppedColumn) {
  TransferSetup s;
  s.model = toy();
  s.model.num_layers = 2;
  s.domain_a = toy_task();
  s.domain_b = toy_task();
  s.domain_b.domain_transform_seed = 5;
  s.train_examples_a = 32;
  s.eval_examples_a = 16;
  s.train_examples_b = 16;
  s.eval_examples_b = 16;
  s.pretrain.total_steps = 5;
  s.pretrain.batch_size = 8;
  s.fl = small_fl(2, 2, 1, 1);
  s.schedules = {DropoutSchedule::ambient(1, 0.5), DropoutSchedule::critical(1, 0.5), DropoutSchedule::flat(0.2)};
  s.seed = 3;
  const TransferResult r = domain_transfer_experiment(s);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[0].schedule, "none");
  EXPECT_EQ(r.rows[0].params_dropped, 0.0);
  for (std::size_t i = 1; i < r.rows.size(); ++i) {
    const SubmodelMask m = build_mask(s.schedules[i - 1], r.classification, s.model, client_mask_seed(s.fl, 0, 0));
    EXPECT_EQ(r.rows[i].schedule, s.schedules[i - 1].token());
    EXPECT_EQ(r.rows[i].params_dropped, enumerated_fraction(m, s.model));
    EXPECT_EQ(r.rows[i].seed, 3u);
  }
  s.schedules.push_back(DropoutSchedule::none());
  EXPECT_EQ(domain_transfer_experiment(s, r.pretrained).rows.size(), 4u);
  s.domain_b.domain_transform_seed.reset();
  EXPECT_THROW(domain_transfer_experiment(s), ConfigError);
}
