#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fedmeta/algorithms.hpp"
#include "fedmeta/models.hpp"
#include "fedmeta/oracles.hpp"
#include "test_support.hpp"

using namespace fedmeta;
using fedmeta::testing::flat;
using fedmeta::testing::QuadraticObjective;

namespace {

QuadraticObjective quad1d(double a, double c, std::size_t n = 1) {
  return {Tensor<double>({1, 1}, {a}), Tensor<double>::vector({c}), n};
}

ClientUpdateResult grad_result(std::size_t id, std::size_t n, std::vector<double> g) {
  return {id, n, PayloadKind::kGradient, flat(std::move(g))};
}

ClientUpdateResult param_result(std::size_t id, std::size_t n, std::vector<double> w) {
  return {id, n, PayloadKind::kParams, flat(std::move(w))};
}

}  // namespace

TEST(EpochBatches, CoverEveryPositionOncePerEpoch) {
  const auto b = epoch_batches(23, 5, 7, 2);
  ASSERT_EQ(b.size(), 5u);
  EXPECT_EQ(b.back().size(), 3u);
  std::vector<std::size_t> all;
  for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 23; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(epoch_batches(23, 5, 7, 2), b);
  EXPECT_NE(epoch_batches(23, 5, 7, 3), b);
  EXPECT_EQ(epoch_batches(23, kFullBatch, 7, 0).size(), 1u);
  EXPECT_THROW(epoch_batches(23, 0, 7, 0), ConfigError);
}

TEST(ClientSgd, ZeroLearningRateReturnsStart) {
  const auto q = quad1d(2.0, 1.0);
  const auto r = client_update_sgd(q, 4, flat({3.0}), {3, kFullBatch, 0.0}, std::nullopt, 1);
  EXPECT_EQ(r.payload, flat({3.0}));
  EXPECT_EQ(r.client_id, 4u);
  EXPECT_EQ(r.kind, PayloadKind::kParams);
}

TEST(ClientSgd, OneStepOnQuadratic) {
  const double a = 2.0, c = 1.0, eta = 0.1, w = 3.0;
  const auto r = client_update_sgd(quad1d(a, c), 0, flat({w}), {1, kFullBatch, eta}, std::nullopt, 1);
  EXPECT_NEAR(r.payload[0], w - eta * a * (w - c), 1e-15);
}

TEST(ClientSgd, ProximalTermShrinksDrift) {
  const QuadraticObjective q{Tensor<double>::matrix({{2, 0}, {0, 1}}), Tensor<double>::vector({1, -1}), 1};
  const ParamVector start = flat({0.0, 0.0});
  double prev = INFINITY;
  for (double mu : {0.0, 1.0, 1e3}) {
    const auto r = client_update_sgd(q, 0, start, {20, kFullBatch, 1e-4}, ProxSpec{mu}, 1);
    const double drift = norm(r.payload - start);
    EXPECT_LT(drift, prev) << "mu=" << mu;
    prev = drift;
  }
}

TEST(ClientSgd, RejectsBadInputs) {
  const auto q = quad1d(1.0, 0.0, 0);
  EXPECT_THROW(client_update_sgd(q, 0, flat({1.0}), {1, 1, 0.1}, std::nullopt, 1), DataError);
  EXPECT_THROW(client_update_sgd(quad1d(1.0, 0.0), 0, flat({1.0}), {0, 1, 0.1}, std::nullopt, 1), ConfigError);
  EXPECT_THROW(client_update_sgd(quad1d(1.0, 0.0), 0, flat({1.0}), {1, 1, 0.1}, ProxSpec{-1.0}, 1), ConfigError);
}

TEST(ClientUga, TwoStepExampleOnScalarQuadratic) {
  const double a = 1.5, eta = 0.2, w = 0.8;
  const auto r = client_update_uga(quad1d(a, 0.0), 0, flat({w}), {2, kFullBatch, eta}, 1);
  EXPECT_EQ(r.kind, PayloadKind::kGradient);
  EXPECT_NEAR(r.payload[0], a * (1 - eta * a) * (1 - eta * a) * w, 1e-15);
}

TEST(ClientUga, StationaryPointGivesZero) {
  const QuadraticObjective q{Tensor<double>::matrix({{2, 1}, {1, 3}}), Tensor<double>::vector({0.5, -0.5}), 1};
  const auto r = client_update_uga(q, 0, flat({0.5, -0.5}), {4, kFullBatch, 0.1}, 1);
  EXPECT_EQ(r.payload, flat({0.0, 0.0}));
}

TEST(ClientUga, NeedsTwoEpochs) {
  EXPECT_THROW(client_update_uga(quad1d(1.0, 0.0), 0, flat({1.0}), {1, kFullBatch, 0.1}, 1), ConfigError);
}

TEST(ClientUga, MlpMatchesUnrolledFiniteDifference) {
  const Dataset data = synth_classification(4, 20, 8, 2.0, 3);  // 32 examples
  const auto arch = Architecture::mlp(20, {16}, 4);
  const ModelObjective obj(arch, data);
  const ParamVector w = init_params(arch, 4);
  const LocalSchedule s{3, 8, 0.1};
  const std::uint64_t seed = 12;
  const auto g = client_update_uga(obj, 0, w, s, seed).payload;
  auto unrolled = [&](const Tensor<double>& th) {
    return full_loss(obj, local_descent(obj, ParamVector(w.layout(), th), 2, 8, 0.1, seed).final_params);
  };
  const auto fd = oracle::fd_gradient(unrolled, w.values(), 1e-5);
  EXPECT_LE(oracle::relative_l2_error(g.values(), fd), 1e-5);
}

TEST(ClientUga, SharesBatchSequenceWithSgd) {
  const Dataset data = synth_classification(3, 4, 5, 2.0, 3);
  const auto arch = Architecture::logreg(4, 3);
  const ModelObjective obj(arch, data);
  const ParamVector w = init_params(arch, 4);
  const auto sgd = client_update_sgd(obj, 0, w, {2, 4, 0.1}, std::nullopt, 9).payload;
  const auto trace = local_descent(obj, w, 3, 4, 0.1, 9, std::nullopt, true);
  // The first two epochs of a recorded 3-epoch run land where 2-epoch SGD does.
  const std::size_t per_epoch = (data.size() + 3) / 4;
  EXPECT_EQ(trace.steps[2 * per_epoch].params_before, sgd);
}

TEST(AggregateGradients, WeightedMeanOfScalars) {
  const std::vector<ClientUpdateResult> r{grad_result(0, 1, {4.0}), grad_result(1, 3, {0.0})};
  EXPECT_EQ(aggregate_gradients(flat({5.0}), r, 1.0), flat({4.0}));
}

TEST(AggregateGradients, ZeroGradientsKeepParams) {
  const std::vector<ClientUpdateResult> r{grad_result(0, 2, {0.0, 0.0}), grad_result(3, 5, {0.0, 0.0})};
  EXPECT_EQ(aggregate_gradients(flat({1.0, 2.0}), r, 0.7), flat({1.0, 2.0}));
}

TEST(AggregateGradients, SingleClient) {
  const std::vector<ClientUpdateResult> r{grad_result(9, 4, {2.0, -1.0})};
  EXPECT_EQ(aggregate_gradients(flat({1.0, 1.0}), r, 0.5), flat({0.0, 1.5}));
}

TEST(AggregateGradients, Errors) {
  const std::vector<ClientUpdateResult> none;
  EXPECT_THROW(aggregate_gradients(flat({1.0}), none, 1.0), DataError);
  const std::vector<ClientUpdateResult> mixed{grad_result(0, 1, {1.0}), grad_result(1, 1, {1.0, 2.0})};
  EXPECT_THROW(aggregate_gradients(flat({1.0}), mixed, 1.0), ShapeError);
  const std::vector<ClientUpdateResult> kinds{grad_result(0, 1, {1.0}), param_result(1, 1, {1.0})};
  EXPECT_THROW(aggregate_gradients(flat({1.0}), kinds, 1.0), ConfigError);
  const std::vector<ClientUpdateResult> dup{grad_result(2, 1, {1.0}), grad_result(2, 1, {1.0})};
  EXPECT_THROW(aggregate_gradients(flat({1.0}), dup, 1.0), DataError);
  const std::vector<ClientUpdateResult> empty_n{grad_result(0, 0, {1.0})};
  EXPECT_THROW(aggregate_gradients(flat({1.0}), empty_n, 1.0), DataError);
}

TEST(AggregateParams, IdenticalParamsReturned) {
  const std::vector<ClientUpdateResult> r{param_result(0, 3, {1.5, -2}), param_result(1, 7, {1.5, -2})};
  EXPECT_EQ(aggregate_params(r), flat({1.5, -2}));
}

TEST(AggregateParams, EqualWeightsAverage) {
  const std::vector<ClientUpdateResult> r{param_result(0, 1, {0.0}), param_result(1, 1, {2.0})};
  EXPECT_EQ(aggregate_params(r), flat({1.0}));
}

TEST(Aggregate, BitwisePermutationInvariant) {
  std::vector<ClientUpdateResult> g, p;
  Rng rng(3);
  for (std::size_t k = 0; k < 7; ++k) {
    std::vector<double> v(5);
    for (auto& x : v) x = standard_normal(rng) * std::pow(10.0, static_cast<double>(k) - 3);
    g.push_back(grad_result(k * 3, k + 1, v));
    p.push_back(param_result(k * 3, k + 1, v));
  }
  const auto g0 = aggregate_gradients(flat({1, 2, 3, 4, 5}), g, 0.3);
  const auto p0 = aggregate_params(p);
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng r(s);
    shuffle(g, r);
    shuffle(p, r);
    EXPECT_EQ(aggregate_gradients(flat({1, 2, 3, 4, 5}), g, 0.3), g0);
    EXPECT_EQ(aggregate_params(p), p0);
  }
}

TEST(Aggregate, OneStepFedAvgEqualsGradientForm) {
  const Dataset data = synth_classification(4, 6, 10, 2.0, 5);
  const auto arch = Architecture::mlp(6, {8}, 4);
  const Partition part = partition_label_skew(data, 4, 1, 2);
  const ParamVector w = init_params(arch, 1);
  const double eta = 0.3;
  std::vector<ClientUpdateResult> params, grads;
  for (const auto& c : part.clients) {
    const ModelObjective obj(arch, data, c.indices);
    params.push_back(client_update_sgd(obj, c.client_id, w, {1, kFullBatch, eta}, std::nullopt, 1));
    grads.push_back({c.client_id, c.size(), PayloadKind::kGradient, full_gradient(obj, w).grad});
  }
  EXPECT_LE(max_abs_diff(aggregate_params(params), aggregate_gradients(w, grads, eta)), 1e-12);
}

TEST(Aggregate, OneStepUnbiasedAgainstCentralGradient) {
  const Dataset data = synth_classification(5, 6, 12, 2.0, 8);
  const auto arch = Architecture::mlp(6, {8}, 5);
  const Partition part = partition_label_skew(data, 5, 2, 3);
  const ParamVector w = init_params(arch, 2);
  std::vector<ClientUpdateResult> grads;
  for (const auto& c : part.clients) {
    const ModelObjective obj(arch, data, c.indices);
    grads.push_back({c.client_id, c.size(), PayloadKind::kGradient, full_gradient(obj, w).grad});
  }
  const ParamVector combined = w - aggregate_gradients(w, grads, 1.0);
  EXPECT_LE(max_abs_diff(combined, full_gradient(ModelObjective(arch, data), w).grad), 1e-10);
}

TEST(MetaUpdate, ZeroRateUnchanged) {
  const auto q = quad1d(1.0, 1.0);
  EXPECT_EQ(meta_update(flat({3.0}), q, 0.0), flat({3.0}));
}

TEST(MetaUpdate, ScalarQuadraticStep) {
  EXPECT_EQ(meta_update(flat({3.0}), quad1d(1.0, 1.0), 0.5), flat({2.0}));
  EXPECT_EQ(meta_update(flat({3.0}), quad1d(1.0, 1.0), 0.5, 2), flat({1.5}));
}

TEST(MetaUpdate, SmallStepDescendsOnMlp) {
  const Dataset meta = synth_classification(4, 6, 5, 1.5, 9);
  const auto arch = Architecture::mlp(6, {8}, 4);
  const ModelObjective obj(arch, meta);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto step = meta_update_report(init_params(arch, s), obj, 1e-3);
    EXPECT_LE(step.loss_after, step.loss_before);
  }
}

TEST(MetaUpdate, Errors) {
  EXPECT_THROW(meta_update(flat({1.0}), quad1d(1.0, 0.0, 0), 0.1), DataError);
  EXPECT_THROW(meta_update(flat({1.0}), quad1d(1.0, 0.0), 0.1, 0), ConfigError);
}

TEST(FedShare, TenSharedOverTenClients) {
  const Dataset data = synth_classification(10, 2, 10, 1.0, 1);
  const Dataset share = synth_classification(10, 2, 1, 1.0, 2);
  const Partition part = partition_label_skew(data, 10, 2, 3);
  const SharedData s = apply_fedshare(data, part, share, 4);
  EXPECT_EQ(s.data.size(), 110u);
  std::set<std::size_t> gained;
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_EQ(s.partition.clients[k].size(), part.clients[k].size() + 1);
    for (std::size_t r : s.partition.clients[k].indices)
      if (r >= 100) gained.insert(r);
  }
  EXPECT_EQ(gained.size(), 10u);
  EXPECT_EQ(s.partition.total(), part.total() + share.size());
}

TEST(FedShare, RejectsEmptyClientsAndShare) {
  const Dataset data = synth_classification(2, 2, 4, 1.0, 1);
  Partition part = partition_iid(data, 2, 0);
  EXPECT_THROW(apply_fedshare(data, part, Dataset{}, 1), DataError);
  part.clients[1].indices.clear();
  EXPECT_THROW(apply_fedshare(data, part, synth_classification(2, 2, 1, 1.0, 2), 1), DataError);
}

TEST(BiasWitness, FedAvgBiasGrowsWhileUgaStaysExact) {
  // Expected numbers come from an independent closed-form evaluation.
  const QuadraticObjective q1{Tensor<double>::matrix({{3.0, 0.5}, {0.5, 0.4}}), Tensor<double>::vector({1.0, -1.0}), 1};
  const QuadraticObjective q2{Tensor<double>::matrix({{0.3, -0.2}, {-0.2, 2.5}}), Tensor<double>::vector({-2.0, 0.5}),
                              3};
  const ParamVector w = flat({0.5, 0.5});
  const double eta = 0.1;
  const std::vector<std::size_t> steps{1, 2, 4, 8};
  const std::vector<double> bias_expected{0.0, 0.0837985516916909, 0.4121661968351863, 1.3737309156703277};
  const std::vector<std::vector<double>> uga_expected{{0.416975, -0.09531625},
                                                      {0.42260311874999984, 0.007211552125000034},
                                                      {0.3952233105720956, 0.08667582598788205},
                                                      {0.3184412900529332, 0.09754254808843552}};
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::size_t s = steps[i];
    std::vector<ClientUpdateResult> avg{client_update_sgd(q1, 0, w, {s, kFullBatch, eta}, std::nullopt, 1),
                                        client_update_sgd(q2, 1, w, {s, kFullBatch, eta}, std::nullopt, 1)};
    ParamVector central = w;
    for (std::size_t k = 0; k < s; ++k) {
      const std::vector<ClientUpdateResult> g{{0, 1, PayloadKind::kGradient, full_gradient(q1, central).grad},
                                              {1, 3, PayloadKind::kGradient, full_gradient(q2, central).grad}};
      central = aggregate_gradients(central, g, eta);
    }
    const double bias = norm((1.0 / eta) * (central - aggregate_params(avg)));
    EXPECT_NEAR(bias, bias_expected[i], 1e-12) << "steps=" << s;

    const std::vector<ClientUpdateResult> uga{client_update_uga(q1, 0, w, {s + 1, kFullBatch, eta}, 1),
                                              client_update_uga(q2, 1, w, {s + 1, kFullBatch, eta}, 1)};
    const ParamVector g = w - aggregate_gradients(w, uga, 1.0);
    EXPECT_LE(max_abs_diff(g, flat(uga_expected[i])), 1e-8) << "steps=" << s;
  }
}
