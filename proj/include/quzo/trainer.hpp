#pragma once

// Quantized zeroth-order training.
//
// Per query i of step t:
//   w += delta(eps * u1)     (integer code delta, clamped only on read)
//   L1 = F(w)
//   w -= 2 * delta
//   L2 = F(w)
//   w += delta               (exact: integer add/subtract)
//   mu = (L1 - L2) / (2 eps)
//   w  = clamp(w - SR(eta * mu / n * u2 / s_w))
//
// Perturbations are regenerated per parameter from the query's SeedPath,
// so no full-length direction or gradient buffer exists.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "quzo/data.hpp"
#include "quzo/errors.hpp"
#include "quzo/estimators.hpp"
#include "quzo/memory.hpp"
#include "quzo/model.hpp"
#include "quzo/quant.hpp"

namespace quzo {

enum class Optimizer { Quzo, QuzoRge1, SteFo, MezoFp };
enum class Schedule { Constant, Linear };

inline std::string_view to_string(Optimizer o) {
    switch (o) {
    case Optimizer::Quzo: return "quzo";
    case Optimizer::QuzoRge1: return "quzo-rge1";
    case Optimizer::SteFo: return "ste-fo";
    case Optimizer::MezoFp: return "mezo-fp";
    }
    return "quzo";
}

inline Optimizer parse_optimizer(std::string_view s) {
    if (s == "quzo") return Optimizer::Quzo;
    if (s == "quzo-rge1") return Optimizer::QuzoRge1;
    if (s == "ste-fo") return Optimizer::SteFo;
    if (s == "mezo-fp") return Optimizer::MezoFp;
    throw ConfigError("unknown optimizer: " + std::string(s));
}

inline std::string_view to_string(Schedule s) { return s == Schedule::Linear ? "linear" : "constant"; }

inline Schedule parse_schedule(std::string_view s) {
    if (s == "constant") return Schedule::Constant;
    if (s == "linear") return Schedule::Linear;
    throw ConfigError("unknown schedule: " + std::string(s));
}

struct LoraConfig {
    bool enabled = false;
    std::size_t rank = 8;
    double alpha = 1.0;
    std::optional<QuantFormat> format; // adapter storage
};

struct TrainConfig {
    std::size_t steps = 1000;
    double lr = 1e-3;
    Schedule schedule = Schedule::Constant;
    double epsilon = 1e-3;
    std::size_t queries = 1;
    std::size_t batch_size = 32;
    std::optional<QuantFormat> perturbation_format = QuantFormat::integer(8);
    Optimizer optimizer = Optimizer::Quzo;
    std::size_t accumulation_steps = 1;
    std::uint64_t seed = 0;
    LoraConfig lora;
    double weight_decay = 0.0;
    std::size_t eval_every = 0;
    double mu_limit = 1e6;

    void validate() const {
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite non-negative number");
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be positive");
        if (queries == 0) throw ConfigError("queries must be at least 1");
        if (accumulation_steps == 0) throw ConfigError("accumulation_steps must be at least 1");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
        if (!(mu_limit > 0.0)) throw ConfigError("mu_limit must be positive");
        if (lora.enabled && lora.rank == 0) throw ConfigError("lora rank must be at least 1");
    }

    double lr_at(std::size_t t) const {
        if (schedule == Schedule::Linear && steps > 0) {
            return lr * (1.0 - static_cast<double>(t) / static_cast<double>(steps));
        }
        return lr;
    }

    EstimatorKind estimator() const {
        switch (optimizer) {
        case Optimizer::QuzoRge1: return EstimatorKind::QRge1;
        case Optimizer::MezoFp: return EstimatorKind::Rge;
        default: return EstimatorKind::QRge2;
        }
    }
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;      // mean of (L1 + L2) / 2 over queries; plain loss for ste-fo
    double loss_plus = 0.0; // mean L1
    double mu = 0.0;        // mean sensitivity; gradient L2 norm for ste-fo
    std::size_t clamp_events = 0;
    std::size_t saturated = 0;
    std::size_t discarded = 0;
    std::size_t perturbed_elements = 0;
    std::size_t updated_elements = 0;
    double eval_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
    std::vector<StepRecord> records;
    std::vector<std::string> warnings;

    /// Mean loss over the last `window` records.
    double smoothed_final(std::size_t window) const {
        if (records.empty()) return std::numeric_limits<double>::quiet_NaN();
        window = std::min(window, records.size());
        double s = 0.0;
        for (std::size_t i = records.size() - window; i < records.size(); ++i) s += records[i].loss;
        return s / static_cast<double>(window);
    }
};

inline void write_log_csv(std::ostream& os, const TrainLog& log) {
    os << "step,loss,loss_plus,mu,clamp_events,saturated,discarded,eval_acc\n";
    for (const auto& r : log.records) {
        os << r.step << ',' << format_double(r.loss) << ',' << format_double(r.loss_plus) << ','
           << format_double(r.mu) << ',' << r.clamp_events << ',' << r.saturated << ',' << r.discarded << ','
           << (std::isnan(r.eval_acc) ? std::string() : format_double(r.eval_acc)) << '\n';
    }
}

/// FNV-1a over the codes of every trainable quantized parameter.
inline std::uint64_t code_checksum(const ModelGraph& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : m.params) {
        if (!p.trainable || !p.quantized()) continue;
        for (std::int32_t c : p.quant->codes) {
            auto v = static_cast<std::uint32_t>(c);
            for (int b = 0; b < 4; ++b) {
                h ^= (v >> (8 * b)) & 0xffU;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

struct UpdateStats {
    std::size_t saturated = 0;
    std::size_t changed = 0;
};

/// codes <- clamp(codes - SR(step / s_w)). `prob_up`, when given, receives
/// the Bernoulli parameter of rounding each scaled step up.
inline UpdateStats quantized_update(QuantTensor& w, std::span<const double> step, const RngStream& rng,
                                    std::vector<double>* prob_up = nullptr) {
    if (step.size() != w.codes.size()) {
        throw IntegrityError("update length does not match the weight tensor");
    }
    const QuantScheme& s = w.scheme;
    const std::size_t inner = s.inner_extent(w.shape);
    const bool is_int = s.format.is_int();
    const auto lmax = static_cast<std::int64_t>(s.format.max_code());
    UpdateStats st;
    if (prob_up) prob_up->assign(step.size(), 0.0);
    for (std::size_t i = 0; i < step.size(); ++i) {
        if (step[i] == 0.0) continue;
        const std::size_t ch = s.channel_of(i, w.shape, inner);
        std::int64_t next = 0;
        if (is_int) {
            const double y = step[i] / s.scales[ch];
            const double lo = std::floor(y);
            const double p = y - lo;
            if (prob_up) (*prob_up)[i] = p;
            const auto q = static_cast<std::int64_t>(lo) + (rng.uniform(i) < p ? 1 : 0);
            next = static_cast<std::int64_t>(w.codes[i]) - q;
        } else {
            // Minifloat weights: stochastic rounding of the updated value
            // onto the grid.
            const double cur = s.format.grid_value(clamp_code(s.format, w.codes[i]));
            const double target = cur - step[i] / s.scales[ch];
            const auto& grid = enumerate_grid(s.format);
            if (target >= grid.back()) {
                next = lmax + (target > grid.back() ? 1 : 0);
            } else if (target <= grid.front()) {
                next = -lmax - (target < grid.front() ? 1 : 0);
            } else {
                const auto hi = static_cast<std::int64_t>(std::upper_bound(grid.begin(), grid.end(), target) -
                                                          grid.begin());
                const double p = (target - grid[hi - 1]) / (grid[hi] - grid[hi - 1]);
                if (prob_up) (*prob_up)[i] = p;
                next = (rng.uniform(i) < p ? hi : hi - 1) - lmax;
            }
        }
        if (next > lmax || next < -lmax) {
            ++st.saturated;
            next = std::clamp(next, -lmax, lmax);
        }
        if (next != w.codes[i]) ++st.changed;
        w.codes[i] = static_cast<std::int32_t>(next);
    }
    return st;
}

/// Scaled-direction form: step = (eta * mu / n) * direction.
inline UpdateStats quantized_update(QuantTensor& w, std::span<const double> direction, double mu, double eta,
                                    std::size_t n, const RngStream& rng, std::vector<double>* prob_up = nullptr) {
    memory::TrackedBuffer<double> step(direction.size());
    const double coef = eta * mu / static_cast<double>(n);
    for (std::size_t i = 0; i < direction.size(); ++i) step[i] = coef * direction[i];
    return quantized_update(w, step.vec(), rng, prob_up);
}

inline std::vector<std::string> epsilon_warnings(const ModelGraph& m, double epsilon) {
    std::vector<std::string> out;
    for (const auto& p : m.params) {
        if (!p.trainable || !p.quantized()) continue;
        double smax = 0.0;
        for (double s : p.quant->scheme.scales) smax = std::max(smax, s);
        if (epsilon <= smax / 2.0) {
            out.push_back("epsilon " + format_double(epsilon) + " is at most half the weight step of " + p.id() +
                          " (" + format_double(smax) + "); perturbation deltas may round to zero");
        }
    }
    return out;
}

namespace detail {

struct Segment {
    std::size_t param;
    std::size_t offset;
};

inline std::vector<Segment> trainable_segments(const ModelGraph& m) {
    std::vector<Segment> segs;
    std::size_t off = 0;
    for (std::size_t id : m.trainable()) {
        segs.push_back({id, off});
        off += m.params[id].size();
    }
    return segs;
}

/// Adds sign * eps * probe to one parameter. Quantized parameters move by
/// integer code deltas round(eps * probe / s_w).
inline void shift_parameter(Parameter& p, const SegmentDirections& dirs, double eps, int sign) {
    if (p.quantized()) {
        QuantTensor& q = *p.quant;
        const QuantScheme& s = q.scheme;
        const std::size_t inner = s.inner_extent(q.shape);
        memory::TrackedBuffer<std::int32_t> delta(q.codes.size());
        for (std::size_t i = 0; i < delta.size(); ++i) {
            const std::size_t ch = s.channel_of(i, q.shape, inner);
            delta[i] = static_cast<std::int32_t>(round_half_even(eps * dirs.probe[i] / s.scales[ch]));
        }
        for (std::size_t i = 0; i < delta.size(); ++i) {
            q.codes[i] += sign * delta[i];
        }
    } else {
        for (std::size_t i = 0; i < p.values.size(); ++i) {
            p.values[i] += sign * eps * dirs.probe[i];
        }
    }
}

inline void shift_model(ModelGraph& m, const std::vector<Segment>& segs, const SeedPath& path, EstimatorKind kind,
                        const std::optional<QuantFormat>& fmt, double eps, int sign, std::size_t* clamped) {
    for (const Segment& sg : segs) {
        Parameter& p = m.params[sg.param];
        const auto dirs = segment_directions(path, sg.offset, p.size(), kind, fmt);
        const memory::ScopedCharge charge(p.size(), 2 * p.size() * sizeof(double));
        if (clamped) *clamped += dirs.clamped;
        shift_parameter(p, dirs, eps, sign);
    }
}

} // namespace detail

/// Sensitivity of one query on one batch. Leaves the weights bit-identical
/// (checked) for quantized parameters.
struct QueryProbe {
    double mu = 0.0;
    double l1 = 0.0;
    double l2 = 0.0;
    std::size_t clamped = 0;
};

inline QueryProbe probe_query(ModelGraph& m, const Batch& batch, const TrainConfig& cfg, const SeedPath& path) {
    const auto segs = detail::trainable_segments(m);
    const EstimatorKind kind = cfg.estimator();
    const auto fmt = kind == EstimatorKind::Rge ? std::nullopt : cfg.perturbation_format;
    const std::uint64_t before = code_checksum(m);
    QueryProbe q;
    detail::shift_model(m, segs, path, kind, fmt, cfg.epsilon, +1, &q.clamped);
    q.l1 = forward(m, batch);
    detail::shift_model(m, segs, path, kind, fmt, cfg.epsilon, -2, nullptr);
    q.l2 = forward(m, batch);
    detail::shift_model(m, segs, path, kind, fmt, cfg.epsilon, +1, nullptr);
    if (code_checksum(m) != before) {
        throw IntegrityError("weight codes differ after perturbation recovery");
    }
    q.mu = (q.l1 - q.l2) / (2.0 * cfg.epsilon);
    if (!std::isfinite(q.mu)) {
        throw RunError("non-finite sensitivity at step " + std::to_string(path.step) + ", query " +
                       std::to_string(path.query));
    }
    return q;
}

/// Applies w <- w - Q(eta * mu / n * u2 [+ eta * decay * w]) to every
/// trainable parameter, regenerating u2 one parameter at a time.
inline UpdateStats apply_query_update(ModelGraph& m, const TrainConfig& cfg, const SeedPath& path, double mu,
                                      double eta, std::size_t* updated_elements) {
    const auto segs = detail::trainable_segments(m);
    const EstimatorKind kind = cfg.estimator();
    const auto fmt = kind == EstimatorKind::Rge ? std::nullopt : cfg.perturbation_format;
    const double coef = eta * mu / static_cast<double>(cfg.queries);
    const double decay = eta * cfg.weight_decay / static_cast<double>(cfg.queries);
    UpdateStats total;
    for (const auto& sg : segs) {
        Parameter& p = m.params[sg.param];
        const auto dirs = segment_directions(path, sg.offset, p.size(), kind, fmt);
        const memory::ScopedCharge charge(p.size(), 2 * p.size() * sizeof(double));
        memory::TrackedBuffer<double> step(p.size());
        if (p.quantized()) {
            const std::vector<double> cur = decay > 0.0 ? p.read() : std::vector<double>{};
            for (std::size_t i = 0; i < step.size(); ++i) {
                step[i] = coef * dirs.step[i] + (decay > 0.0 ? decay * cur[i] : 0.0);
            }
            const RngStream rng(path.with_role(Role::Update), sg.offset);
            const auto st = quantized_update(*p.quant, step.vec(), rng);
            total.saturated += st.saturated;
            total.changed += st.changed;
        } else {
            for (std::size_t i = 0; i < step.size(); ++i) {
                p.values[i] -= coef * dirs.step[i] + decay * p.values[i];
            }
        }
        if (updated_elements) *updated_elements += p.size();
    }
    return total;
}

/// Gradient accumulation: query-outer, micro-batch-inner. Each query's
/// sensitivity is averaged over the micro-batches, then one update per
/// query is applied.
inline StepRecord accumulate_and_step(ModelGraph& m, std::span<const Batch> micro, const TrainConfig& cfg,
                                      std::size_t t) {
    if (micro.empty()) throw ConfigError("accumulation needs at least one micro-batch");
    StepRecord rec;
    rec.step = t;
    const double eta = cfg.lr_at(t);
    double mu_sum = 0.0;
    for (std::size_t i = 0; i < cfg.queries; ++i) {
        const SeedPath path{cfg.seed, t, i, Role::Perturbation};
        double mu = 0.0;
        for (const Batch& b : micro) {
            const QueryProbe q = probe_query(m, b, cfg, path);
            mu += q.mu;
            rec.loss += 0.5 * (q.l1 + q.l2);
            rec.loss_plus += q.l1;
            rec.clamp_events += q.clamped;
        }
        mu /= static_cast<double>(micro.size());
        if (cfg.estimator() != EstimatorKind::Rge && cfg.perturbation_format) {
            const std::size_t per = m.trainable_count() * (cfg.estimator() == EstimatorKind::QRge2 ? 2 : 1);
            rec.perturbed_elements += per * micro.size();
        }
        if (std::abs(mu) > cfg.mu_limit) {
            ++rec.discarded;
            continue;
        }
        mu_sum += mu;
        const auto st = apply_query_update(m, cfg, path, mu, eta, &rec.updated_elements);
        rec.saturated += st.saturated;
    }
    const double evals = static_cast<double>(cfg.queries * micro.size());
    rec.loss /= evals;
    rec.loss_plus /= evals;
    const std::size_t kept = cfg.queries - rec.discarded;
    rec.mu = kept > 0 ? mu_sum / static_cast<double>(kept) : 0.0;
    return rec;
}

inline StepRecord quzo_step(ModelGraph& m, const Batch& batch, const TrainConfig& cfg, std::size_t t) {
    return accumulate_and_step(m, std::span<const Batch>(&batch, 1), cfg, t);
}

/// First-order baseline: STE reverse pass, update applied through the same
/// stochastic-rounding quantized update as the ZO path.
inline StepRecord ste_fo_step(ModelGraph& m, const Batch& batch, const TrainConfig& cfg, std::size_t t) {
    StepRecord rec;
    rec.step = t;
    const double eta = cfg.lr_at(t);
    const std::size_t d = m.trainable_count();
    const memory::ScopedCharge dense_grad(d, d * sizeof(double));
    const LossAndGrad lg = loss_and_gradient(m, batch);
    rec.loss = lg.loss;
    rec.loss_plus = lg.loss;
    double norm = 0.0;
    for (std::size_t id : m.trainable()) {
        for (double g : lg.grads[id]) {
            if (!std::isfinite(g)) throw RunError("non-finite gradient in " + m.params[id].id());
            norm += g * g;
        }
    }
    rec.mu = std::sqrt(norm);
    std::size_t offset = 0;
    for (std::size_t id : m.trainable()) {
        Parameter& p = m.params[id];
        const auto& g = lg.grads[id];
        if (p.quantized()) {
            const std::vector<double> cur = p.read();
            std::vector<double> step(p.size());
            for (std::size_t i = 0; i < step.size(); ++i) step[i] = eta * (g[i] + cfg.weight_decay * cur[i]);
            const RngStream rng(SeedPath{cfg.seed, t, 0, Role::Update}, offset);
            const auto st = quantized_update(*p.quant, step, rng);
            rec.saturated += st.saturated;
        } else {
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                p.values[i] -= eta * (g[i] + cfg.weight_decay * p.values[i]);
            }
        }
        rec.updated_elements += p.size();
        offset += p.size();
    }
    return rec;
}

struct TrainResult {
    ModelGraph model;
    TrainLog log;
    double final_loss = 0.0;
    double final_accuracy = std::numeric_limits<double>::quiet_NaN();
    double clamp_rate = 0.0;
    double saturation_rate = 0.0;
    double wall_time = 0.0;
};

inline TrainResult train(ModelGraph model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    if (cfg.lora.enabled && model.adapters.empty()) {
        attach_lora(model, cfg.lora.rank, cfg.lora.alpha, cfg.seed, cfg.lora.format);
    }
    TrainResult r;
    r.log.warnings = cfg.optimizer == Optimizer::SteFo ? std::vector<std::string>{}
                                                       : epsilon_warnings(model, cfg.epsilon);
    const Batch full = data.all();
    const bool classify = model.loss == LossKind::CrossEntropy;
    std::size_t clamps = 0, perturbed = 0, saturated = 0, updated = 0;
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        const auto rows = sample_rows(data.size(), cfg.batch_size, cfg.seed, t);
        StepRecord rec;
        if (cfg.optimizer == Optimizer::SteFo) {
            rec = ste_fo_step(model, data.batch(rows), cfg, t);
        } else if (cfg.accumulation_steps == 1) {
            rec = quzo_step(model, data.batch(rows), cfg, t);
        } else {
            std::vector<Batch> micro;
            const std::size_t k = std::min(cfg.accumulation_steps, rows.size());
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t lo = rows.size() * j / k;
                const std::size_t hi = rows.size() * (j + 1) / k;
                micro.push_back(data.batch(std::span<const std::size_t>(rows.data() + lo, hi - lo)));
            }
            rec = accumulate_and_step(model, micro, cfg, t);
        }
        if (cfg.eval_every > 0 && classify && ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.steps)) {
            rec.eval_acc = accuracy(model, full);
        }
        clamps += rec.clamp_events;
        perturbed += rec.perturbed_elements;
        saturated += rec.saturated;
        updated += rec.updated_elements;
        r.log.records.push_back(rec);
    }
    r.final_loss = forward(model, full);
    if (classify) r.final_accuracy = accuracy(model, full);
    r.clamp_rate = perturbed ? static_cast<double>(clamps) / static_cast<double>(perturbed) : 0.0;
    r.saturation_rate = updated ? static_cast<double>(saturated) / static_cast<double>(updated) : 0.0;
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.model = std::move(model);
    return r;
}

} // namespace quzo
