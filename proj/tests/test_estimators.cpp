#include <gtest/gtest.h>

#include <cmath>

#include "quzo/estimators.hpp"

using namespace quzo;

namespace {

std::vector<double> gaussian(std::size_t d, std::uint64_t seed) {
    const RngStream rng(SeedPath{seed, 0, 0, Role::Test});
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = rng.normal(i);
    return v;
}

} // namespace

TEST(Perturbation, DeterministicAndMoments) {
    const SeedPath p{3, 1, 2, Role::Perturbation};
    EXPECT_EQ(sample_perturbation(p, 100), sample_perturbation(p, 100));
    const std::size_t d = 100000;
    const auto u = sample_perturbation(p, d);
    double m = 0, v = 0;
    for (double x : u) m += x;
    m /= d;
    for (double x : u) v += (x - m) * (x - m);
    v /= d;
    EXPECT_LT(std::abs(m), 4.0 / std::sqrt(double(d)));
    EXPECT_NEAR(v, 1.0, 0.05);
}

TEST(Perturbation, DistinctQueriesUncorrelated) {
    const std::size_t d = 10000;
    const auto a = sample_perturbation({3, 1, 0, Role::Perturbation}, d);
    const auto b = sample_perturbation({3, 1, 1, Role::Perturbation}, d);
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < d; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    EXPECT_LT(std::abs(ab / std::sqrt(aa * bb)), 0.02);
}

TEST(Perturbation, OffsetSegmentsConcatenate) {
    const SeedPath p{3, 1, 2, Role::Perturbation};
    const auto whole = sample_perturbation(p, 30);
    const auto tail = sample_perturbation(p, 10, 20);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(tail[i], whole[20 + i]);
}

TEST(PerturbationPair, OnGridAndZero) {
    const std::vector<double> u{1.0, -3.0, 0.0, 7.0};
    const auto s = QuantScheme::per_tensor(QuantFormat::integer(8), 1.0, Rounding::Stochastic);
    const auto p = quantize_perturbation_pair(u, s, {1, 0, 0, Role::Perturbation});
    EXPECT_EQ(p.u1.tensor.codes, (std::vector<std::int32_t>{1, -3, 0, 7}));
    EXPECT_EQ(p.u2.tensor.codes, p.u1.tensor.codes);
    const std::vector<double> z(5, 0.0);
    const auto q = quantize_perturbation_pair(z, perturbation_scheme(z, QuantFormat::integer(4)), {1, 0, 0});
    for (auto c : q.u1.tensor.codes) EXPECT_EQ(c, 0);
    for (auto c : q.u2.tensor.codes) EXPECT_EQ(c, 0);
}

TEST(PerturbationPair, CrossMomentVersusSameSeed) {
    const auto s = QuantScheme::per_tensor(QuantFormat::integer(8), 1.0, Rounding::Stochastic);
    const std::size_t n = 1'000'000;
    const std::vector<double> u(n, 0.5);
    // Element i of a length-n tensor is an independent rounding of 0.5.
    const auto p = quantize_perturbation_pair(u, s, {9, 0, 0});
    double cross = 0, self = 0;
    for (std::size_t i = 0; i < n; ++i) {
        cross += p.u1.tensor.codes[i] * p.u2.tensor.codes[i];
        self += p.u1.tensor.codes[i] * p.u1.tensor.codes[i];
    }
    cross /= n;
    self /= n;
    EXPECT_NEAR(cross, 0.25, 4 * std::sqrt(0.25 * 0.75 / n));
    EXPECT_NEAR(self, 0.5, 4 * std::sqrt(0.25 / n));
}

TEST(PerturbationPair, ConditionalIndependenceMatrix) {
    // E[u1 u2^T] over rounding streams = u u^T for a fixed u.
    const std::vector<double> u{0.3, -1.7, 2.45};
    const auto s = QuantScheme::per_tensor(QuantFormat::integer(4), 1.0, Rounding::Stochastic);
    const std::size_t draws = 200000;
    double acc[3][3] = {};
    for (std::size_t t = 0; t < draws; ++t) {
        const auto p = quantize_perturbation_pair(u, s, {5, 0, t});
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) acc[a][b] += double(p.u1.tensor.codes[a]) * p.u2.tensor.codes[b];
    }
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) EXPECT_NEAR(acc[a][b] / draws, u[a] * u[b], 0.02);
}

TEST(Rge, LinearLossIndependentOfEpsilon) {
    const std::vector<double> c{1.0, -2.0, 0.5};
    const LinearObjective obj({0.0, 0.0, 0.0}, c);
    EstimatorOptions o{1, 1e-3};
    const auto e1 = estimate_rge(obj, o);
    o.epsilon = 0.5;
    const auto e2 = estimate_rge(obj, o);
    const auto u = sample_perturbation({0, 0, 0, Role::Perturbation}, 3);
    const double cu = c[0] * u[0] + c[1] * u[1] + c[2] * u[2];
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(e1.dense[i], cu * u[i], 1e-9);
        EXPECT_NEAR(e2.dense[i], cu * u[i], 1e-12);
    }
}

TEST(Rge, QuadraticMeanWithinThreePercent) {
    const auto w = gaussian(64, 1);
    const QuadraticObjective obj(w, std::vector<double>(64, 0.0));
    const auto e = estimate_rge(obj, {100000, 1e-3, std::nullopt, 7});
    EXPECT_LT(relative_l2(e.dense, w), 0.03);
}

TEST(Qrge1, LosslessLimitAgreesWithRge) {
    const auto w = gaussian(16, 2);
    const QuadraticObjective obj(w, std::vector<double>(16, 0.0));
    EstimatorOptions o{50, 1e-3, QuantFormat::integer(16), 3};
    const auto q = estimate_qrge1(obj, o);
    const auto r = estimate_rge(obj, o);
    EXPECT_LT(relative_l2(q.dense, r.dense), 1e-3);
}

TEST(Qrge1, ZeroGradientPoint) {
    const auto w = gaussian(16, 2);
    const QuadraticObjective obj(w, w);
    const auto q = estimate_qrge1(obj, {200, 1e-3, QuantFormat::integer(4), 3});
    for (double v : q.dense) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(Qrge2, UnbiasedOnQuadratic) {
    const auto w = gaussian(64, 4);
    const auto t = gaussian(64, 5);
    const QuadraticObjective obj(w, t);
    const auto e = estimate_qrge2(obj, {100000, 1e-3, QuantFormat::integer(4), 11});
    EXPECT_LT(relative_l2(e.dense, obj.gradient()), 0.05);
    EXPECT_GE(e.clamp_rate(), 0.0);
}

TEST(Qrge2, BiasGapAgainstQrge1) {
    // Q-RGE1's mean is diag(E[u^2 rounding]) scaled; on a gradient with
    // uneven coordinates the two estimators separate.
    const auto w = gaussian(64, 4);
    const QuadraticObjective obj(w, std::vector<double>(64, 0.0));
    const EstimatorOptions o{20000, 1e-3, QuantFormat::integer(2), 11};
    const auto g = obj.gradient();
    const double e1 = relative_l2(estimate_qrge1(obj, o).dense, g);
    const double e2 = relative_l2(estimate_qrge2(obj, o).dense, g);
    EXPECT_LT(e2, e1);
}

TEST(Estimators, NegatedDirectionsInvariant) {
    // Central differences are odd in u: mu(-u) (-u) = mu(u) u.
    const auto w = gaussian(8, 4);
    const QuadraticObjective obj(w, std::vector<double>(8, 0.0));
    const SeedPath p{1, 0, 0};
    const auto u = sample_perturbation(p, 8);
    std::vector<double> up(w), um(w), neg(8);
    for (std::size_t i = 0; i < 8; ++i) {
        up[i] += 1e-3 * u[i];
        um[i] -= 1e-3 * u[i];
    }
    const double mu = (obj.loss(up) - obj.loss(um)) / 2e-3;
    const double mu_neg = (obj.loss(um) - obj.loss(up)) / 2e-3;
    for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(mu * u[i], mu_neg * -u[i]);
}

TEST(Estimators, DeterministicAndThreadInvariant) {
    const auto w = gaussian(32, 4);
    const QuadraticObjective obj(w, std::vector<double>(32, 0.0));
    EstimatorOptions o{300, 1e-3, QuantFormat::integer(4), 5};
    const auto a = estimate_qrge2(obj, o);
    o.threads = 3;
    const auto b = estimate_qrge2(obj, o);
    EXPECT_EQ(a.dense, b.dense);
}

TEST(Densify, MatchesDenseAndChecksDimension) {
    const auto w = gaussian(20, 4);
    const QuadraticObjective obj(w, std::vector<double>(20, 0.0));
    const auto e = estimate_qrge2(obj, {37, 1e-3, QuantFormat::integer(4), 5});
    EXPECT_EQ(densify(e, 20), e.dense);
    EXPECT_THROW(densify(e, 21), IntegrityError);
    GradientEstimate zero = e;
    zero.queries.resize(1);
    zero.queries[0].mu = 0.0;
    for (double v : densify(zero, 20)) EXPECT_EQ(v, 0.0);
}

TEST(Densify, OnGridDirectionIsExact) {
    // d = 1 with INT16: u / s lands on code L_max exactly, so u1 = u2 = u.
    GradientEstimate e;
    e.kind = EstimatorKind::QRge2;
    e.format = QuantFormat::integer(16);
    e.segments = {1};
    e.queries = {ZoQuery{2.0, {1, 0, 0, Role::Perturbation}}};
    const auto u = sample_perturbation({1, 0, 0, Role::Perturbation}, 1);
    EXPECT_DOUBLE_EQ(densify(e, 1)[0], 2.0 * u[0]);
}

TEST(Estimators, ModelObjectiveRuns) {
    const auto m = make_mlp({{3, 4, 2}, Activation::Relu, LossKind::CrossEntropy, QuantFormat::integer(8)});
    Batch b;
    b.inputs = Matrix(2, 3, 0.5);
    b.labels = {0, 1};
    const ModelObjective obj(m, b);
    EXPECT_EQ(obj.dimension(), 3u * 4u + 4u * 2u);
    EXPECT_NEAR(obj.loss(obj.point()), forward(m, b), 1e-9);
    const auto e = estimate_qrge2(obj, {4, 1e-2, QuantFormat::integer(8), 1});
    EXPECT_EQ(e.dense.size(), obj.dimension());
}
