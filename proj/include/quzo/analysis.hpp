#pragma once

// Measurement tools: estimator bias sweeps, per-layer datatype search,
// outlier-aware INT8 quantization, perturbation bit-width sweeps and the
// symbolic memory model for the six optimizer configurations.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "quzo/data.hpp"
#include "quzo/errors.hpp"
#include "quzo/estimators.hpp"
#include "quzo/model.hpp"
#include "quzo/quant.hpp"
#include "quzo/trainer.hpp"

namespace quzo {

// ---------------------------------------------------------------- bias sweep

struct BiasSweepOptions {
    std::vector<int> bits{3, 4, 8};
    std::size_t n = 1000;
    double epsilon = 1e-3;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct BiasSweepRow {
    EstimatorKind estimator = EstimatorKind::QRge1;
    int bits = 0;
    std::size_t n = 0;
    double rel_l2_error = 0.0;
    double clamp_rate = 0.0;
    double wall_time = 0.0;
};

struct BiasSweepResult {
    std::vector<BiasSweepRow> rows; // bits ascending, q-rge1 before q-rge2
    double reference_norm = 0.0;
    double reference_wall_time = 0.0;

    const BiasSweepRow& at(EstimatorKind k, int bits) const {
        for (const auto& r : rows) {
            if (r.estimator == k && r.bits == bits) return r;
        }
        throw ConfigError("no bias sweep row for " + std::string(to_string(k)) + " at " + std::to_string(bits) +
                          " bits");
    }
};

/// Monte Carlo means of Q-RGE1 and Q-RGE2 against the full-precision RGE
/// mean. All three use the same query seeds, so the base directions u_i
/// coincide and only the rounding differs.
inline BiasSweepResult bias_sweep(const ModelGraph& model, const Batch& batch, const BiasSweepOptions& opt) {
    if (opt.bits.empty()) throw ConfigError("bias sweep needs at least one bit width");
    const ModelObjective obj(model, batch);
    EstimatorOptions eo;
    eo.queries = opt.n;
    eo.epsilon = opt.epsilon;
    eo.seed = opt.seed;
    eo.threads = opt.threads;

    BiasSweepResult res;
    auto t0 = std::chrono::steady_clock::now();
    const auto ref = estimate_rge(obj, eo);
    res.reference_wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double norm = 0.0;
    for (double v : ref.dense) norm += v * v;
    res.reference_norm = std::sqrt(norm);

    std::vector<int> bits = opt.bits;
    std::sort(bits.begin(), bits.end());
    bits.erase(std::unique(bits.begin(), bits.end()), bits.end());
    for (int b : bits) {
        eo.perturbation_format = QuantFormat::integer(b);
        for (EstimatorKind k : {EstimatorKind::QRge1, EstimatorKind::QRge2}) {
            t0 = std::chrono::steady_clock::now();
            const auto e = estimate(obj, k, eo);
            BiasSweepRow row;
            row.estimator = k;
            row.bits = b;
            row.n = opt.n;
            row.rel_l2_error = relative_l2(e.dense, ref.dense);
            row.clamp_rate = e.clamp_rate();
            row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            res.rows.push_back(row);
        }
    }
    return res;
}

/// Numeric columns only; timings live in the JSON report.
inline void write_bias_csv(std::ostream& os, const BiasSweepResult& r) {
    os << "estimator,bits,n,rel_l2_error,clamp_rate\n";
    for (const auto& row : r.rows) {
        os << to_string(row.estimator) << ',' << row.bits << ',' << row.n << ',' << format_double(row.rel_l2_error)
           << ',' << format_double(row.clamp_rate) << '\n';
    }
}

/// One (estimator, bits, metric, value) row per measurement, for plotting.
inline void write_bias_long_csv(std::ostream& os, const BiasSweepResult& r) {
    os << "estimator,bits,metric,value\n";
    for (const auto& row : r.rows) {
        os << to_string(row.estimator) << ',' << row.bits << ",rel_l2_error," << format_double(row.rel_l2_error)
           << '\n';
        os << to_string(row.estimator) << ',' << row.bits << ",clamp_rate," << format_double(row.clamp_rate) << '\n';
    }
}

inline nlohmann::ordered_json to_json(const BiasSweepResult& r) {
    nlohmann::ordered_json j;
    j["reference_norm"] = r.reference_norm;
    j["reference_wall_time"] = r.reference_wall_time;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : r.rows) {
        j["rows"].push_back({{"estimator", std::string(to_string(row.estimator))},
                             {"bits", row.bits},
                             {"n", row.n},
                             {"rel_l2_error", row.rel_l2_error},
                             {"clamp_rate", row.clamp_rate},
                             {"wall_time", row.wall_time}});
    }
    return j;
}

// ----------------------------------------------------------- datatype search

/// Mean squared round-trip error under symmetric max-abs calibration.
inline double format_mse(std::span<const double> x, const Shape& shape, const QuantFormat& format,
                         Granularity granularity = Granularity::PerTensor) {
    const QuantScheme s = fit_scale(x, shape, format, granularity, 0);
    const auto back = dequantize(quantize_nearest(x, shape, s));
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - back[i]) * (x[i] - back[i]);
    return acc / static_cast<double>(x.size());
}

struct DatatypeLayer {
    std::string layer;
    std::vector<QuantFormat> candidates;
    std::vector<double> mse; // parallel to candidates; empty when skipped
    std::optional<QuantFormat> chosen;
    std::string note;
};

struct DatatypeReport {
    std::vector<DatatypeLayer> layers;
};

/// Index of the smallest MSE. Exact ties prefer an INT format, then the
/// earlier candidate.
inline std::size_t argmin_format(std::span<const QuantFormat> candidates, std::span<const double> mse) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        if (mse[i] < mse[best] || (mse[i] == mse[best] && candidates[i].is_int() && !candidates[best].is_int())) {
            best = i;
        }
    }
    return best;
}

inline DatatypeLayer choose_format(std::string name, std::span<const double> x, const Shape& shape,
                                   std::span<const QuantFormat> candidates,
                                   Granularity granularity = Granularity::PerTensor) {
    if (candidates.empty()) throw ConfigError("datatype search needs at least one candidate");
    DatatypeLayer out;
    out.layer = std::move(name);
    out.candidates.assign(candidates.begin(), candidates.end());
    if (x.empty()) {
        out.note = "empty tensor, skipped";
        return out;
    }
    for (const auto& f : candidates) out.mse.push_back(format_mse(x, shape, f, granularity));
    out.chosen = candidates[argmin_format(candidates, out.mse)];
    return out;
}

/// One search over every parameter tensor, using the same granularity the
/// model quantizes with (per output channel for matrices).
inline DatatypeReport datatype_search(const ModelGraph& m, std::span<const QuantFormat> candidates) {
    DatatypeReport r;
    for (const auto& p : m.params) {
        const auto values = p.read();
        const Granularity g = p.shape.size() == 2 ? Granularity::PerChannel : Granularity::PerTensor;
        r.layers.push_back(choose_format(p.id(), values, p.shape, candidates, g));
    }
    return r;
}

inline void write_dtype_csv(std::ostream& os, const DatatypeReport& r) {
    os << "layer,format,mse,chosen\n";
    for (const auto& l : r.layers) {
        for (std::size_t i = 0; i < l.mse.size(); ++i) {
            os << l.layer << ',' << l.candidates[i].name() << ',' << format_double(l.mse[i]) << ','
               << (l.chosen && *l.chosen == l.candidates[i] ? 1 : 0) << '\n';
        }
    }
}

inline nlohmann::ordered_json to_json(const DatatypeReport& r) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& l : r.layers) {
        nlohmann::ordered_json e;
        e["layer"] = l.layer;
        nlohmann::ordered_json mse = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < l.mse.size(); ++i) mse[l.candidates[i].name()] = l.mse[i];
        e["mse"] = mse;
        e["chosen"] = l.chosen ? nlohmann::ordered_json(l.chosen->name()) : nlohmann::ordered_json(nullptr);
        if (!l.note.empty()) e["note"] = l.note;
        j.push_back(e);
    }
    return j;
}

// ------------------------------------------------------ outlier quantization

inline constexpr std::int32_t kOutlierCode = -128;

struct OutlierQuantTensor {
    QuantTensor base;                 // INT8 codes in [-127, 127], or kOutlierCode
    std::vector<std::size_t> indices; // sorted, unique
    QuantTensor side;                 // FP8 E4M3, one entry per index, per-table scale
    double threshold = 0.0;
    double alpha = 0.0;
};

/// Magnitudes strictly above the (1 - alpha_target) quantile of |x| go to
/// the FP8 side-table; the rest are INT8 with a scale fitted to inliers.
inline OutlierQuantTensor outlier_quantize(std::span<const double> x, const Shape& shape,
                                           double alpha_target = 0.01) {
    if (x.empty()) throw InputError("outlier_quantize: empty tensor");
    if (!(alpha_target >= 0.0 && alpha_target < 1.0)) throw ConfigError("outlier ratio must be in [0, 1)");
    detail::require_finite(x, "outlier_quantize");
    std::vector<double> mag(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) mag[i] = std::abs(x[i]);
    std::vector<double> sorted = mag;
    std::sort(sorted.begin(), sorted.end());
    const auto k = static_cast<std::size_t>(
        std::ceil((1.0 - alpha_target) * static_cast<double>(x.size())));
    OutlierQuantTensor out;
    out.threshold = sorted[std::min(x.size(), std::max<std::size_t>(k, 1)) - 1];

    std::vector<double> inliers(x.size(), 0.0);
    std::vector<double> outliers;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (mag[i] > out.threshold) {
            out.indices.push_back(i);
            outliers.push_back(x[i]);
        } else {
            inliers[i] = x[i];
        }
    }
    const QuantFormat int8 = QuantFormat::integer(8);
    out.base = quantize_nearest(inliers, shape, fit_scale(inliers, shape, int8));
    for (std::size_t i : out.indices) out.base.codes[i] = kOutlierCode;
    if (!outliers.empty()) {
        const Shape side_shape{outliers.size()};
        out.side = quantize_nearest(outliers, side_shape, fit_scale(outliers, side_shape, QuantFormat::fp8_e4m3()));
    }
    out.alpha = static_cast<double>(out.indices.size()) / static_cast<double>(x.size());
    return out;
}

inline std::vector<double> dequantize(const OutlierQuantTensor& q) {
    std::vector<double> out(q.base.codes.size());
    const double s = q.base.scheme.scales[0];
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = q.base.codes[i] == kOutlierCode ? 0.0 : s * q.base.codes[i];
    }
    if (!q.indices.empty()) {
        const auto side = dequantize(q.side);
        for (std::size_t j = 0; j < q.indices.size(); ++j) out[q.indices[j]] = side[j];
    }
    return out;
}

// -------------------------------------------------- perturbation bit sweep

struct BitSweepRow {
    int bits = 0; // 32 = unquantized perturbation
    double final_accuracy = 0.0;
    double final_loss = 0.0;
};

struct BitSweepResult {
    std::vector<BitSweepRow> rows;
    double spread = 0.0; // max - min accuracy, in accuracy units (0..1)
};

inline BitSweepResult perturbation_bit_sweep(const ModelGraph& model, const Dataset& data, std::span<const int> bits,
                                             TrainConfig cfg) {
    if (bits.empty()) throw ConfigError("bit sweep needs at least one width");
    BitSweepResult r;
    for (int b : bits) {
        cfg.perturbation_format = b == 32 ? std::nullopt : std::optional<QuantFormat>(QuantFormat::integer(b));
        const auto t = train(model, data, cfg);
        r.rows.push_back({b, t.final_accuracy, t.final_loss});
    }
    const auto [lo, hi] = std::minmax_element(r.rows.begin(), r.rows.end(), [](const auto& a, const auto& b) {
        return a.final_accuracy < b.final_accuracy;
    });
    r.spread = hi->final_accuracy - lo->final_accuracy;
    return r;
}

inline void write_bit_sweep_csv(std::ostream& os, const BitSweepResult& r) {
    os << "perturbation_bits,final_accuracy,final_loss\n";
    for (const auto& row : r.rows) {
        os << row.bits << ',' << format_double(row.final_accuracy) << ',' << format_double(row.final_loss) << '\n';
    }
}

// ------------------------------------------------------------- memory model

/// Exact non-negative rational.
struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;

    Rational() = default;
    Rational(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
        if (d == 0) throw IntegrityError("rational with zero denominator");
        const std::int64_t g = std::gcd(num, den);
        if (g != 0) {
            num /= g;
            den /= g;
        }
        if (den < 0) {
            num = -num;
            den = -den;
        }
    }
    friend Rational operator+(Rational a, Rational b) { return {a.num * b.den + b.num * a.den, a.den * b.den}; }
    friend Rational operator/(Rational a, std::int64_t k) { return {a.num, a.den * k}; }
    friend bool operator==(const Rational&, const Rational&) = default;
    friend bool operator<(Rational a, Rational b) { return a.num * b.den < b.num * a.den; }
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }
};

/// Memory expression over the symbols |w| (all weights), |w_l| and |a_l|
/// (per-layer weights and activations).
struct MemExpr {
    enum class Op { TotalWeights, LayerWeights, LayerActs, Div, Max, SumLayers, MaxLayers };
    Op op;
    std::int64_t divisor = 1;
    std::vector<std::shared_ptr<const MemExpr>> args;

    friend bool operator==(const MemExpr& a, const MemExpr& b) {
        if (a.op != b.op || a.divisor != b.divisor || a.args.size() != b.args.size()) return false;
        for (std::size_t i = 0; i < a.args.size(); ++i) {
            if (!(*a.args[i] == *b.args[i])) return false;
        }
        return true;
    }
};

using MemExprPtr = std::shared_ptr<const MemExpr>;

namespace mem {

inline MemExprPtr node(MemExpr::Op op, std::vector<MemExprPtr> args = {}, std::int64_t divisor = 1) {
    return std::make_shared<const MemExpr>(MemExpr{op, divisor, std::move(args)});
}
inline MemExprPtr w() { return node(MemExpr::Op::TotalWeights); }
inline MemExprPtr wl() { return node(MemExpr::Op::LayerWeights); }
inline MemExprPtr al() { return node(MemExpr::Op::LayerActs); }
inline MemExprPtr div(MemExprPtr e, std::int64_t k) { return node(MemExpr::Op::Div, {std::move(e)}, k); }
inline MemExprPtr max(MemExprPtr a, MemExprPtr b) { return node(MemExpr::Op::Max, {std::move(a), std::move(b)}); }
inline MemExprPtr sum_l(MemExprPtr e) { return node(MemExpr::Op::SumLayers, {std::move(e)}); }
inline MemExprPtr max_l(MemExprPtr e) { return node(MemExpr::Op::MaxLayers, {std::move(e)}); }

} // namespace mem

inline std::string to_string(const MemExpr& e) {
    switch (e.op) {
    case MemExpr::Op::TotalWeights: return "|w|";
    case MemExpr::Op::LayerWeights: return "|w_l|";
    case MemExpr::Op::LayerActs: return "|a_l|";
    case MemExpr::Op::Div: return to_string(*e.args[0]) + "/" + std::to_string(e.divisor);
    case MemExpr::Op::Max: return "max{" + to_string(*e.args[0]) + ", " + to_string(*e.args[1]) + "}";
    case MemExpr::Op::SumLayers: return "sum_l " + to_string(*e.args[0]);
    case MemExpr::Op::MaxLayers: return "max_l " + to_string(*e.args[0]);
    }
    return {};
}

/// Sizes in FP32 bytes: every symbol is 4 bytes per element.
inline Rational evaluate(const MemExpr& e, std::span<const LayerFootprint> layers,
                         const LayerFootprint* current = nullptr) {
    auto need_layer = [&] {
        if (!current) throw IntegrityError("per-layer symbol outside a layer reduction");
        return current;
    };
    switch (e.op) {
    case MemExpr::Op::TotalWeights: {
        Rational t;
        for (const auto& l : layers) t = t + Rational(4 * static_cast<std::int64_t>(l.weights));
        return t;
    }
    case MemExpr::Op::LayerWeights: return Rational(4 * static_cast<std::int64_t>(need_layer()->weights));
    case MemExpr::Op::LayerActs: return Rational(4 * static_cast<std::int64_t>(need_layer()->activations));
    case MemExpr::Op::Div: return evaluate(*e.args[0], layers, current) / e.divisor;
    case MemExpr::Op::Max: {
        const Rational a = evaluate(*e.args[0], layers, current);
        const Rational b = evaluate(*e.args[1], layers, current);
        return a < b ? b : a;
    }
    case MemExpr::Op::SumLayers: {
        Rational t;
        for (const auto& l : layers) t = t + evaluate(*e.args[0], layers, &l);
        return t;
    }
    case MemExpr::Op::MaxLayers: {
        Rational t;
        for (const auto& l : layers) {
            const Rational v = evaluate(*e.args[0], layers, &l);
            if (t < v) t = v;
        }
        return t;
    }
    }
    return {};
}

struct MemoryRow {
    std::string optimizer;
    MemExprPtr weight_expr;
    MemExprPtr dynamic_expr;
    Rational weight_bytes;
    Rational dynamic_bytes;

    Rational total_bytes() const { return weight_bytes + dynamic_bytes; }
};

inline const std::vector<std::string>& memory_optimizers() {
    static const std::vector<std::string> names{"fo-sgd", "mezo", "fo-8bit", "fo-4bit", "quzo-8bit", "quzo-4bit"};
    return names;
}

/// Weight and dynamic expressions for one optimizer configuration.
inline std::pair<MemExprPtr, MemExprPtr> memory_expressions(const std::string& optimizer) {
    using namespace mem;
    auto fo = [](std::int64_t k) {
        if (k == 1) return std::pair{w(), sum_l(max(al(), wl()))};
        return std::pair{div(w(), k), sum_l(max(div(al(), k), div(wl(), k)))};
    };
    auto zo = [](std::int64_t k) {
        if (k == 1) return std::pair{w(), max_l(wl())};
        return std::pair{div(w(), k), max_l(div(wl(), k))};
    };
    if (optimizer == "fo-sgd") return fo(1);
    if (optimizer == "mezo") return zo(1);
    if (optimizer == "fo-8bit") return fo(4);
    if (optimizer == "fo-4bit") return fo(8);
    if (optimizer == "quzo-8bit") return zo(4);
    if (optimizer == "quzo-4bit") return zo(8);
    throw ConfigError("unknown optimizer for memory report: " + optimizer);
}

inline MemoryRow memory_row(const std::string& optimizer, std::span<const LayerFootprint> layers) {
    auto [we, de] = memory_expressions(optimizer);
    MemoryRow r{optimizer, we, de, evaluate(*we, layers), evaluate(*de, layers)};
    return r;
}

inline std::vector<MemoryRow> memory_report(std::span<const LayerFootprint> layers) {
    std::vector<MemoryRow> rows;
    for (const auto& name : memory_optimizers()) rows.push_back(memory_row(name, layers));
    return rows;
}

inline std::vector<MemoryRow> memory_report(const ModelGraph& m, std::size_t examples) {
    const auto fp = layer_footprints(m, examples);
    return memory_report(fp);
}

inline void write_memory_csv(std::ostream& os, const std::vector<MemoryRow>& rows) {
    os << "optimizer,weight_expr,dynamic_expr,weight_bytes,dynamic_bytes,total_bytes\n";
    for (const auto& r : rows) {
        os << r.optimizer << ",\"" << to_string(*r.weight_expr) << "\",\"" << to_string(*r.dynamic_expr) << "\","
           << r.weight_bytes.str() << ',' << r.dynamic_bytes.str() << ',' << r.total_bytes().str() << '\n';
    }
}

inline nlohmann::ordered_json to_json(const std::vector<MemoryRow>& rows) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        j.push_back({{"optimizer", r.optimizer},
                     {"weight_expr", to_string(*r.weight_expr)},
                     {"dynamic_expr", to_string(*r.dynamic_expr)},
                     {"weight_bytes", r.weight_bytes.str()},
                     {"dynamic_bytes", r.dynamic_bytes.str()},
                     {"total_bytes", r.total_bytes().str()}});
    }
    return j;
}

} // namespace quzo
