#pragma once

// Randomized central-difference gradient estimators.
//
//   RGE     probe along u,   step along u
//   Q-RGE1  probe along Q(u), step along the same Q(u)
//   Q-RGE2  probe along Q1(u), step along Q2(u) (independent rounding)
//
// Directions are regenerated from their SeedPath; nothing per query is
// stored beyond (mu, path).

#include <cmath>
#include <exception>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "quzo/errors.hpp"
#include "quzo/model.hpp"
#include "quzo/quant.hpp"
#include "quzo/rng.hpp"

namespace quzo {

enum class EstimatorKind { Rge, QRge1, QRge2 };

inline std::string_view to_string(EstimatorKind k) {
    switch (k) {
    case EstimatorKind::Rge: return "rge";
    case EstimatorKind::QRge1: return "q-rge1";
    case EstimatorKind::QRge2: return "q-rge2";
    }
    return "rge";
}

inline EstimatorKind parse_estimator(std::string_view s) {
    if (s == "rge") return EstimatorKind::Rge;
    if (s == "q-rge1") return EstimatorKind::QRge1;
    if (s == "q-rge2") return EstimatorKind::QRge2;
    throw ConfigError("unknown estimator: " + std::string(s));
}

/// d i.i.d. standard normals for one query.
inline std::vector<double> sample_perturbation(const SeedPath& path, std::size_t d, std::size_t offset = 0) {
    const RngStream rng(path.with_role(Role::Perturbation), offset);
    std::vector<double> u(d);
    for (std::size_t i = 0; i < d; ++i) {
        u[i] = rng.normal(i);
    }
    return u;
}

/// Symmetric max-abs stochastic scheme for a perturbation segment.
inline QuantScheme perturbation_scheme(std::span<const double> u, const QuantFormat& format) {
    QuantScheme s = fit_scale(u, {u.size()}, format);
    s.rounding = Rounding::Stochastic;
    return s;
}

struct PerturbationPair {
    StochasticQuant u1;
    StochasticQuant u2;
};

/// Two stochastic roundings of the same u from independent streams. The
/// offset places this segment inside the query's global element index.
inline PerturbationPair quantize_perturbation_pair(std::span<const double> u, const QuantScheme& scheme,
                                                   const SeedPath& path, std::size_t offset = 0) {
    const Shape shape{u.size()};
    return {quantize_stochastic(u, shape, scheme, RngStream(path.with_role(Role::Round1), offset)),
            quantize_stochastic(u, shape, scheme, RngStream(path.with_role(Role::Round2), offset))};
}

/// Probe and step directions of one query restricted to one segment.
struct SegmentDirections {
    std::vector<double> probe;
    std::vector<double> step;
    std::optional<QuantTensor> probe_codes; // quantized probe, when a format is set
    std::size_t clamped = 0;
};

inline SegmentDirections segment_directions(const SeedPath& path, std::size_t offset, std::size_t size,
                                            EstimatorKind kind, const std::optional<QuantFormat>& format) {
    SegmentDirections out;
    std::vector<double> u = sample_perturbation(path, size, offset);
    if (kind == EstimatorKind::Rge || !format) {
        out.probe = u;
        out.step = std::move(u);
        return out;
    }
    const QuantScheme scheme = perturbation_scheme(u, *format);
    auto pair = quantize_perturbation_pair(u, scheme, path, offset);
    out.probe = dequantize(pair.u1.tensor);
    out.step = kind == EstimatorKind::QRge2 ? dequantize(pair.u2.tensor) : out.probe;
    out.clamped = pair.u1.clamped + (kind == EstimatorKind::QRge2 ? pair.u2.clamped : 0);
    out.probe_codes = std::move(pair.u1.tensor);
    return out;
}

/// Loss as a function of the flat trainable vector.
class Objective {
public:
    virtual ~Objective() = default;
    virtual std::vector<std::size_t> segments() const = 0;
    virtual std::vector<double> point() const = 0;
    virtual double loss(std::span<const double> w) const = 0;

    std::size_t dimension() const {
        std::size_t d = 0;
        for (std::size_t s : segments()) d += s;
        return d;
    }
};

/// L(w) = 0.5 * ||w - target||^2 (optionally + c^T w when linear is set).
class QuadraticObjective : public Objective {
public:
    QuadraticObjective(std::vector<double> w, std::vector<double> target, std::vector<double> linear = {})
        : w_(std::move(w)), target_(std::move(target)), linear_(std::move(linear)) {
        if (w_.size() != target_.size() || w_.empty()) {
            throw ConfigError("quadratic objective needs matching non-empty point and target");
        }
        if (!linear_.empty() && linear_.size() != w_.size()) {
            throw ConfigError("linear term must match the dimension");
        }
    }

    std::vector<std::size_t> segments() const override { return {w_.size()}; }
    std::vector<double> point() const override { return w_; }
    double loss(std::span<const double> w) const override {
        double l = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = w[i] - target_[i];
            l += 0.5 * d * d;
            if (!linear_.empty()) l += linear_[i] * w[i];
        }
        return l;
    }
    std::vector<double> gradient() const {
        std::vector<double> g(w_.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = w_[i] - target_[i] + (linear_.empty() ? 0.0 : linear_[i]);
        return g;
    }

private:
    std::vector<double> w_;
    std::vector<double> target_;
    std::vector<double> linear_;
};

/// Pure linear objective c^T w.
class LinearObjective : public Objective {
public:
    LinearObjective(std::vector<double> w, std::vector<double> c) : w_(std::move(w)), c_(std::move(c)) {}
    std::vector<std::size_t> segments() const override { return {w_.size()}; }
    std::vector<double> point() const override { return w_; }
    double loss(std::span<const double> w) const override {
        double l = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) l += c_[i] * w[i];
        return l;
    }

private:
    std::vector<double> w_;
    std::vector<double> c_;
};

/// Model loss on a fixed batch, over all trainable parameters.
class ModelObjective : public Objective {
public:
    ModelObjective(const ModelGraph& model, Batch batch)
        : model_(model), batch_(std::move(batch)), layout_(ParamLayout::of(model)) {}

    std::vector<std::size_t> segments() const override { return layout_.sizes; }
    std::vector<double> point() const override { return flatten(model_, layout_); }
    double loss(std::span<const double> w) const override {
        const WeightOverride o{&layout_, w};
        return forward(model_, batch_, &o);
    }

private:
    const ModelGraph& model_;
    Batch batch_;
    ParamLayout layout_;
};

struct ZoQuery {
    double mu = 0.0;
    SeedPath path;
};

struct EstimatorOptions {
    std::size_t queries = 1;
    double epsilon = 1e-3;
    std::optional<QuantFormat> perturbation_format;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::size_t threads = 1;
};

struct GradientEstimate {
    EstimatorKind kind = EstimatorKind::Rge;
    std::optional<QuantFormat> format;
    std::vector<std::size_t> segments;
    std::vector<ZoQuery> queries;
    std::vector<double> dense; // empty in compressed mode
    std::size_t clamp_events = 0;
    std::size_t quantized_elements = 0;

    std::size_t n() const { return queries.size(); }
    std::size_t dimension() const {
        std::size_t d = 0;
        for (std::size_t s : segments) d += s;
        return d;
    }
    double clamp_rate() const {
        return quantized_elements == 0 ? 0.0
                                       : static_cast<double>(clamp_events) / static_cast<double>(quantized_elements);
    }
};

namespace detail {

/// Sum of (mu_i / n) * step_i in query order.
inline std::vector<double> accumulate_steps(const GradientEstimate& e) {
    const std::size_t d = e.dimension();
    std::vector<double> g(d, 0.0);
    const double inv_n = 1.0 / static_cast<double>(e.queries.size());
    for (const ZoQuery& q : e.queries) {
        const double coef = q.mu * inv_n;
        std::size_t off = 0;
        for (std::size_t seg : e.segments) {
            const auto dirs = segment_directions(q.path, off, seg, e.kind, e.format);
            for (std::size_t j = 0; j < seg; ++j) {
                g[off + j] += coef * dirs.step[j];
            }
            off += seg;
        }
    }
    return g;
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace detail

/// Runs n queries (2n loss evaluations). Returns both the compressed
/// (mu, path) list and the dense estimate.
inline GradientEstimate estimate(const Objective& obj, EstimatorKind kind, const EstimatorOptions& opt) {
    if (opt.queries == 0) throw ConfigError("query count must be at least 1");
    if (!(opt.epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    GradientEstimate e;
    e.kind = kind;
    e.format = kind == EstimatorKind::Rge ? std::nullopt : opt.perturbation_format;
    e.segments = obj.segments();
    const std::vector<double> w = obj.point();
    const std::size_t d = w.size();
    if (d != e.dimension()) throw IntegrityError("objective point does not match its segments");
    e.queries.resize(opt.queries);
    std::vector<std::size_t> clamps(opt.queries, 0);
    detail::parallel_for(opt.queries, opt.threads, [&](std::size_t i) {
        const SeedPath path{opt.seed, opt.step, i, Role::Perturbation};
        std::vector<double> plus(w);
        std::vector<double> minus(w);
        std::size_t off = 0;
        for (std::size_t seg : e.segments) {
            const auto dirs = segment_directions(path, off, seg, kind, e.format);
            clamps[i] += dirs.clamped;
            for (std::size_t j = 0; j < seg; ++j) {
                plus[off + j] += opt.epsilon * dirs.probe[j];
                minus[off + j] -= opt.epsilon * dirs.probe[j];
            }
            off += seg;
        }
        const double mu = (obj.loss(plus) - obj.loss(minus)) / (2.0 * opt.epsilon);
        if (!std::isfinite(mu)) {
            throw RunError("query " + std::to_string(i) + ": non-finite sensitivity");
        }
        e.queries[i] = ZoQuery{mu, path};
    });
    for (std::size_t c : clamps) e.clamp_events += c;
    if (e.format) {
        e.quantized_elements = opt.queries * d * (kind == EstimatorKind::QRge2 ? 2 : 1);
    }
    e.dense = detail::accumulate_steps(e);
    return e;
}

inline GradientEstimate estimate_rge(const Objective& obj, EstimatorOptions opt) {
    opt.perturbation_format.reset();
    return estimate(obj, EstimatorKind::Rge, opt);
}

inline GradientEstimate estimate_qrge1(const Objective& obj, const EstimatorOptions& opt) {
    return estimate(obj, EstimatorKind::QRge1, opt);
}

inline GradientEstimate estimate_qrge2(const Objective& obj, const EstimatorOptions& opt) {
    return estimate(obj, EstimatorKind::QRge2, opt);
}

/// Expands the (mu, path) list into sum_i (mu_i / n) * step_i. `d` is the
/// current parameter count; a mismatch means the seeds no longer describe
/// this parameter set.
inline std::vector<double> densify(const GradientEstimate& e, std::size_t d) {
    if (d != e.dimension()) {
        throw IntegrityError("estimate covers " + std::to_string(e.dimension()) + " parameters, model has " +
                             std::to_string(d));
    }
    if (e.queries.empty()) {
        return std::vector<double>(d, 0.0);
    }
    return detail::accumulate_steps(e);
}

inline double relative_l2(std::span<const double> x, std::span<const double> ref) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - ref[i]) * (x[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

} // namespace quzo
