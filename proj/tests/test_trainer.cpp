#include <gtest/gtest.h>

#include <cmath>

#include "quzo/data.hpp"
#include "quzo/memory.hpp"
#include "quzo/model.hpp"
#include "quzo/trainer.hpp"

using namespace quzo;

namespace {

std::vector<std::vector<std::int32_t>> all_codes(const ModelGraph& m) {
    std::vector<std::vector<std::int32_t>> out;
    for (const auto& p : m.params) out.push_back(p.quantized() ? p.quant->codes : std::vector<std::int32_t>{});
    return out;
}

Batch gaussian_batch(std::size_t rows, std::size_t cols, std::size_t outs, std::uint64_t seed) {
    const RngStream rng(SeedPath{seed, 0, 0, Role::Test});
    Batch b;
    b.inputs = Matrix(rows, cols);
    for (std::size_t i = 0; i < b.inputs.data.size(); ++i) b.inputs.data[i] = rng.normal(i);
    b.targets = Matrix(rows, outs);
    for (std::size_t i = 0; i < b.targets.data.size(); ++i) b.targets.data[i] = rng.normal(100000 + i);
    for (std::size_t r = 0; r < rows; ++r) b.labels.push_back(static_cast<int>(r % outs));
    return b;
}

ModelGraph int_mlp(std::vector<std::size_t> dims, int bits, std::uint64_t seed = 3) {
    MlpSpec spec;
    spec.dims = std::move(dims);
    spec.weight_format = QuantFormat::integer(bits);
    spec.activation_format = QuantFormat::integer(8);
    spec.seed = seed;
    return make_mlp(spec);
}

QuantTensor zero_tensor(std::size_t n, int bits, double scale) {
    QuantTensor w;
    w.shape = {n};
    w.scheme = QuantScheme::per_tensor(QuantFormat::integer(bits), scale);
    w.codes.assign(n, 0);
    return w;
}

} // namespace

TEST(QuantizedUpdate, ZeroSensitivityIsExactNoOp) {
    QuantTensor w = zero_tensor(64, 8, 0.05);
    for (std::size_t i = 0; i < w.codes.size(); ++i) w.codes[i] = static_cast<std::int32_t>(i) - 32;
    const auto before = w.codes;
    const std::vector<double> dir(64, 0.7);
    const RngStream rng(SeedPath{1, 0, 0, Role::Update});
    const auto st = quantized_update(w, dir, 0.0, 0.1, 1, rng);
    EXPECT_EQ(w.codes, before);
    EXPECT_EQ(st.changed, 0u);
    EXPECT_EQ(st.saturated, 0u);
}

TEST(QuantizedUpdate, SubCodeStepProbabilityEqualsStepOverScale) {
    const double s = 0.05;
    QuantTensor w = zero_tensor(5, 8, s);
    const std::vector<double> step{0.3 * s, 0.01 * s, 0.49 * s, -0.3 * s, -0.45 * s};
    std::vector<double> prob;
    const RngStream rng(SeedPath{2, 0, 0, Role::Update});
    quantized_update(w, step, rng, &prob);
    for (std::size_t i = 0; i < step.size(); ++i) {
        // Nonzero update means rounding up for positive steps, down for negative.
        const double p_nonzero = step[i] > 0 ? prob[i] : 1.0 - prob[i];
        EXPECT_NEAR(p_nonzero, std::abs(step[i]) / s, 1e-12) << i;
    }
}

TEST(QuantizedUpdate, ExpectedCodeMatchesClosedForm) {
    const double s = 0.02;
    const std::vector<double> step{2.37 * s, -0.61 * s, 0.05 * s, -3.5 * s};
    const int trials = 20000;
    std::vector<double> mean(step.size(), 0.0);
    for (int t = 0; t < trials; ++t) {
        QuantTensor w = zero_tensor(step.size(), 8, s);
        const RngStream rng(SeedPath{7, static_cast<std::uint64_t>(t), 0, Role::Update});
        quantized_update(w, step, rng);
        for (std::size_t i = 0; i < step.size(); ++i) mean[i] += w.codes[i];
    }
    for (std::size_t i = 0; i < step.size(); ++i) {
        mean[i] /= trials;
        const double y = step[i] / s;
        const double p = y - std::floor(y);
        const double sigma = std::sqrt(p * (1 - p) / trials);
        EXPECT_NEAR(mean[i], -y, 4 * sigma + 1e-12) << i;
    }
}

TEST(QuantizedUpdate, SaturationIsCountedAndClamped) {
    const double s = 0.1;
    QuantTensor w = zero_tensor(3, 8, s);
    w.codes = {127, -127, 0};
    const std::vector<double> step{-5 * s, 4 * s, 1 * s};
    const RngStream rng(SeedPath{0, 0, 0, Role::Update});
    const auto st = quantized_update(w, step, rng);
    EXPECT_EQ(st.saturated, 2u);
    EXPECT_EQ(w.codes, (std::vector<std::int32_t>{127, -127, -1}));
}

TEST(QuzoStep, ZeroLearningRateLeavesWeightsBitIdentical) {
    for (Optimizer opt : {Optimizer::Quzo, Optimizer::QuzoRge1, Optimizer::MezoFp}) {
        ModelGraph m = int_mlp({6, 8, 3}, 8);
        const Batch b = gaussian_batch(16, 6, 3, 1);
        TrainConfig cfg;
        cfg.lr = 0.0;
        cfg.epsilon = 0.05;
        cfg.queries = 3;
        cfg.optimizer = opt;
        const auto before = all_codes(m);
        for (std::size_t t = 0; t < 20; ++t) quzo_step(m, b, cfg, t);
        EXPECT_EQ(all_codes(m), before) << to_string(opt);
    }
}

TEST(QuzoStep, FloatModelRestoresAfterZeroStep) {
    MlpSpec spec;
    spec.dims = {4, 5, 2};
    ModelGraph m = make_mlp(spec);
    const Batch b = gaussian_batch(8, 4, 2, 2);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.optimizer = Optimizer::MezoFp;
    const auto before = m.params[0].values;
    quzo_step(m, b, cfg, 0);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(m.params[0].values[i], before[i], 1e-15);
}

TEST(QuzoStep, QuadraticProbeLossDecreasesEveryWindow) {
    const std::size_t d = 16;
    const RngStream rng(SeedPath{11, 0, 0, Role::Test});
    std::vector<double> start(d), target(d);
    for (std::size_t i = 0; i < d; ++i) {
        start[i] = rng.normal(i);
        target[i] = 0.25 * rng.normal(d + i);
    }
    ModelGraph m = make_quadratic_probe(start, target, QuantFormat::integer(8));
    TrainConfig cfg;
    cfg.lr = 0.005;
    cfg.epsilon = 0.05;
    cfg.seed = 4;
    const Batch none;
    std::vector<double> losses;
    for (std::size_t t = 0; t < 500; ++t) {
        quzo_step(m, none, cfg, t);
        losses.push_back(forward(m, none));
    }
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < 10; ++w) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 50; ++i) mean += losses[w * 50 + i];
        mean /= 50;
        EXPECT_LT(mean, prev) << "window " << w;
        prev = mean;
    }
}

TEST(QuzoStep, NonFiniteLossRaisesRunError) {
    const std::vector<double> start{1.0, 2.0};
    const std::vector<double> target{std::numeric_limits<double>::infinity(), 0.0};
    ModelGraph m = make_quadratic_probe(start, target, std::nullopt);
    TrainConfig cfg;
    cfg.optimizer = Optimizer::MezoFp;
    EXPECT_THROW(quzo_step(m, Batch{}, cfg, 0), RunError);
}

TEST(QuzoStep, SpikeGuardDiscardsQueries) {
    ModelGraph m = int_mlp({6, 8, 3}, 8);
    const Batch b = gaussian_batch(16, 6, 3, 1);
    TrainConfig cfg;
    cfg.lr = 1.0;
    cfg.epsilon = 0.05;
    cfg.queries = 4;
    cfg.mu_limit = 1e-12;
    const auto before = all_codes(m);
    const auto rec = quzo_step(m, b, cfg, 0);
    EXPECT_EQ(rec.discarded, 4u);
    EXPECT_EQ(all_codes(m), before);
}

TEST(Accumulation, SingleMicroBatchMatchesQuzoStep) {
    ModelGraph a = int_mlp({6, 8, 3}, 8);
    ModelGraph b = a;
    const Batch batch = gaussian_batch(16, 6, 3, 5);
    TrainConfig cfg;
    cfg.lr = 0.05;
    cfg.epsilon = 0.05;
    cfg.queries = 2;
    for (std::size_t t = 0; t < 10; ++t) {
        const auto ra = quzo_step(a, batch, cfg, t);
        const auto rb = accumulate_and_step(b, std::span<const Batch>(&batch, 1), cfg, t);
        EXPECT_EQ(ra.mu, rb.mu);
        EXPECT_EQ(ra.loss, rb.loss);
    }
    EXPECT_EQ(all_codes(a), all_codes(b));
}

TEST(Accumulation, TwoIdenticalMicroBatchesMatchOneBatch) {
    ModelGraph a = int_mlp({6, 8, 3}, 8);
    ModelGraph b = a;
    const Batch batch = gaussian_batch(16, 6, 3, 6);
    const std::vector<Batch> twice{batch, batch};
    TrainConfig cfg;
    cfg.lr = 0.05;
    cfg.epsilon = 0.05;
    for (std::size_t t = 0; t < 10; ++t) {
        const auto ra = quzo_step(a, batch, cfg, t);
        const auto rb = accumulate_and_step(b, twice, cfg, t);
        EXPECT_EQ(ra.mu, rb.mu);
    }
    EXPECT_EQ(all_codes(a), all_codes(b));
}

TEST(Accumulation, FourMicroBatchesAgreeWithOneLargeBatchInExpectation) {
    MlpSpec spec;
    spec.dims = {5, 3};
    spec.loss = LossKind::MeanSquared;
    spec.weight_format = QuantFormat::integer(8);
    const ModelGraph base = make_mlp(spec);
    const Batch large = gaussian_batch(32, 5, 3, 8);
    std::vector<Batch> micro;
    for (std::size_t k = 0; k < 4; ++k) {
        Batch b;
        b.inputs = Matrix(8, 5);
        b.targets = Matrix(8, 3);
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t j = 0; j < 5; ++j) b.inputs(r, j) = large.inputs(k * 8 + r, j);
            for (std::size_t j = 0; j < 3; ++j) b.targets(r, j) = large.targets(k * 8 + r, j);
        }
        micro.push_back(b);
    }
    const int trials = 400;
    const std::size_t n = base.params[0].size();
    std::vector<double> mean_large(n, 0.0), mean_micro(n, 0.0);
    for (int s = 0; s < trials; ++s) {
        TrainConfig cfg;
        cfg.lr = 0.02;
        cfg.epsilon = 0.05;
        cfg.seed = static_cast<std::uint64_t>(s);
        ModelGraph a = base;
        ModelGraph b = base;
        const auto ra = quzo_step(a, large, cfg, 0);
        const auto rb = accumulate_and_step(b, micro, cfg, 0);
        EXPECT_NEAR(ra.mu, rb.mu, 1e-9 * (1 + std::abs(ra.mu)));
        for (std::size_t i = 0; i < n; ++i) {
            mean_large[i] += a.params[0].quant->codes[i] - base.params[0].quant->codes[i];
            mean_micro[i] += b.params[0].quant->codes[i] - base.params[0].quant->codes[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        EXPECT_NEAR(mean_large[i] / trials, mean_micro[i] / trials, 0.05) << i;
    }
}

TEST(SteFo, FullPrecisionStepIsPlainSgd) {
    MlpSpec spec;
    spec.dims = {4, 6, 5, 3};
    ModelGraph m = make_mlp(spec);
    const Batch b = gaussian_batch(10, 4, 3, 9);
    const auto lg = loss_and_gradient(m, b);
    std::vector<std::vector<double>> expect;
    for (std::size_t id = 0; id < m.params.size(); ++id) {
        auto v = m.params[id].values;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * lg.grads[id][i];
        expect.push_back(v);
    }
    TrainConfig cfg;
    cfg.lr = 0.1;
    cfg.optimizer = Optimizer::SteFo;
    ste_fo_step(m, b, cfg, 0);
    for (std::size_t id = 0; id < m.params.size(); ++id) {
        for (std::size_t i = 0; i < expect[id].size(); ++i) EXPECT_NEAR(m.params[id].values[i], expect[id][i], 1e-6);
    }
}

TEST(Train, ZeroStepsReturnsInputModel) {
    ModelGraph m = int_mlp({8, 16, 2}, 8);
    const Dataset data = gen_synthetic({.n = 64});
    TrainConfig cfg;
    cfg.steps = 0;
    const auto r = train(m, data, cfg);
    EXPECT_EQ(all_codes(r.model), all_codes(m));
    EXPECT_TRUE(r.log.records.empty());
}

TEST(Train, TwoGaussiansInt8Quzo) {
    const Dataset data = gen_synthetic({.task = "two-gaussians", .n = 1000, .seed = 1});
    TrainConfig cfg;
    cfg.steps = 2000;
    cfg.lr = 0.01;
    cfg.epsilon = 0.01;
    cfg.seed = 1;
    const auto r = train(int_mlp({8, 16, 2}, 8, 1), data, cfg);
    EXPECT_GE(r.final_accuracy, 0.90);
}

TEST(Train, DeterministicForSameSeed) {
    const Dataset data = gen_synthetic({.n = 200, .seed = 2});
    TrainConfig cfg;
    cfg.steps = 50;
    cfg.lr = 0.01;
    cfg.epsilon = 0.01;
    cfg.queries = 2;
    const auto a = train(int_mlp({8, 16, 2}, 8), data, cfg);
    const auto b = train(int_mlp({8, 16, 2}, 8), data, cfg);
    EXPECT_EQ(all_codes(a.model), all_codes(b.model));
    ASSERT_EQ(a.log.records.size(), b.log.records.size());
    for (std::size_t i = 0; i < a.log.records.size(); ++i) EXPECT_EQ(a.log.records[i].loss, b.log.records[i].loss);
}

TEST(Train, AccumulationSplitsBatch) {
    const Dataset data = gen_synthetic({.n = 200, .seed = 2});
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.lr = 0.01;
    cfg.epsilon = 0.01;
    cfg.accumulation_steps = 4;
    const auto r = train(int_mlp({8, 16, 2}, 8), data, cfg);
    EXPECT_EQ(r.log.records.size(), 20u);
    EXPECT_TRUE(std::isfinite(r.final_loss));
}

TEST(Train, LoraKeepsBaseCodesFrozen) {
    const Dataset data = gen_synthetic({.n = 200, .seed = 3});
    const ModelGraph base = int_mlp({8, 16, 2}, 4);
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.lr = 0.01;
    cfg.epsilon = 0.05;
    cfg.lora.enabled = true;
    cfg.lora.rank = 2;
    const auto r = train(base, data, cfg);
    ASSERT_FALSE(r.model.adapters.empty());
    for (std::size_t id = 0; id < base.params.size(); ++id) {
        EXPECT_EQ(r.model.params[id].quant->codes, base.params[id].quant->codes) << base.params[id].id();
        EXPECT_FALSE(r.model.params[id].trainable);
    }
    bool moved = false;
    for (std::size_t id = base.params.size(); id < r.model.params.size(); ++id) {
        const auto& p = r.model.params[id];
        for (double v : p.read()) moved = moved || (p.name == "B" && v != 0.0);
    }
    EXPECT_TRUE(moved);
}

TEST(Train, QuzoNeverAllocatesADenseGradient) {
    const Dataset data = gen_synthetic({.n = 128, .seed = 4});
    ModelGraph m = int_mlp({8, 32, 16, 2}, 8);
    std::size_t largest_layer = 0;
    for (const auto& p : m.params) largest_layer = std::max(largest_layer, p.size());
    ASSERT_LT(largest_layer, m.trainable_count());
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.epsilon = 0.05;
    cfg.queries = 2;
    memory::tracker().reset();
    train(m, data, cfg);
    EXPECT_GT(memory::tracker().allocations, 0u);
    EXPECT_LE(memory::tracker().largest_elements, largest_layer);

    // The first-order baseline does hold the full gradient.
    memory::tracker().reset();
    cfg.optimizer = Optimizer::SteFo;
    cfg.steps = 2;
    train(m, data, cfg);
    EXPECT_EQ(memory::tracker().largest_elements, m.trainable_count());
}

TEST(Train, SmallEpsilonWarns) {
    const ModelGraph m = int_mlp({8, 16, 2}, 4);
    EXPECT_FALSE(epsilon_warnings(m, 1e-3).empty());
    EXPECT_TRUE(epsilon_warnings(m, 10.0).empty());
}

TEST(TrainConfig, RejectsInvalidValues) {
    TrainConfig c;
    c.epsilon = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.queries = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lr = std::nan("");
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(parse_optimizer("adam"), ConfigError);
    EXPECT_EQ(parse_optimizer("ste-fo"), Optimizer::SteFo);
}

TEST(TrainConfig, LinearScheduleDecays) {
    TrainConfig c;
    c.steps = 100;
    c.lr = 1.0;
    c.schedule = Schedule::Linear;
    EXPECT_DOUBLE_EQ(c.lr_at(0), 1.0);
    EXPECT_DOUBLE_EQ(c.lr_at(50), 0.5);
}
