#pragma once

// Forward-only model zoo used as the objective of the optimizers: an MLP,
// a pre-LN transformer encoder and a quadratic probe. Weights live either
// on a quantized grid (QuantTensor codes) or in full precision. Activations
// entering every linear layer are quantized per tensor (max-abs, nearest)
// when the model has an activation format; softmax and layer norm run in
// double. A reverse pass with straight-through quantizers backs the
// first-order baseline.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "quzo/errors.hpp"
#include "quzo/quant.hpp"
#include "quzo/rng.hpp"
#include "quzo/tensor.hpp"

namespace quzo {

enum class Activation { None, Relu, Gelu };
enum class LossKind { CrossEntropy, MeanSquared };

inline std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::None: return "none";
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
    }
    return "none";
}

inline Activation parse_activation(std::string_view s) {
    if (s == "none") return Activation::None;
    if (s == "relu") return Activation::Relu;
    if (s == "gelu") return Activation::Gelu;
    throw ConfigError("unknown activation: " + std::string(s));
}

struct Parameter {
    std::string layer;
    std::string name;
    Shape shape;
    std::optional<QuantTensor> quant;
    std::vector<double> values;
    bool trainable = true;

    std::string id() const { return layer + "." + name; }
    std::size_t size() const { return element_count(shape); }
    bool quantized() const { return quant.has_value(); }

    /// Effective weights as seen by the forward pass (codes clamped).
    std::vector<double> read() const { return quantized() ? dequantize_clamped(*quant) : values; }
};

/// Builds a parameter from real values. Rank-2 tensors are quantized per
/// output channel (axis 0), everything else per tensor.
inline Parameter make_parameter(std::string layer, std::string name, Shape shape, std::span<const double> values,
                                const std::optional<QuantFormat>& format) {
    Parameter p{std::move(layer), std::move(name), std::move(shape), std::nullopt, {}, true};
    if (values.size() != p.size()) {
        throw InputError("parameter " + p.id() + ": value count does not match shape");
    }
    if (format) {
        const auto gran = p.shape.size() == 2 ? Granularity::PerChannel : Granularity::PerTensor;
        const QuantScheme scheme = fit_scale(values, p.shape, *format, gran, 0);
        p.quant = quantize_nearest(values, p.shape, scheme);
    } else {
        p.values.assign(values.begin(), values.end());
    }
    return p;
}

struct DenseLayer {
    std::size_t weight = 0;
    Activation activation = Activation::None;
};

/// Token + learned position embedding.
struct EmbeddingLayer {
    std::size_t tokens = 0;
    std::size_t positions = 0;
};

/// Pre-LN encoder block: x + Attn(LN(x)), then x + FFN(LN(x)).
struct EncoderBlock {
    std::size_t wq = 0, wk = 0, wv = 0, wo = 0, w1 = 0, w2 = 0;
    std::size_t heads = 1;
    Activation activation = Activation::Gelu;
};

/// Layer norm without affine parameters.
struct NormLayer {};

/// L(w) = 0.5 * ||w - target||^2, independent of the batch.
struct ProbeLayer {
    std::size_t weight = 0;
    std::vector<double> target;
};

using Layer = std::variant<DenseLayer, EmbeddingLayer, EncoderBlock, NormLayer, ProbeLayer>;

/// Low-rank delta on a linear layer: y += alpha * (x A^T) B^T, with
/// A (rank x in) and B (out x rank), both read from their own storage.
struct LoraAdapter {
    std::size_t base = 0;
    std::size_t a = 0;
    std::size_t b = 0;
    std::size_t rank = 0;
    double alpha = 1.0;
};

struct ModelGraph {
    std::vector<Parameter> params;
    std::vector<Layer> layers;
    std::vector<LoraAdapter> adapters;
    LossKind loss = LossKind::CrossEntropy;
    std::optional<QuantFormat> activation_format;
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    std::size_t seq_len = 0; // > 0 for token models
    std::size_t vocab = 0;

    bool token_model() const { return seq_len > 0; }

    std::vector<std::size_t> trainable() const {
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].trainable) {
                ids.push_back(i);
            }
        }
        return ids;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : params) {
            if (p.trainable) {
                n += p.size();
            }
        }
        return n;
    }

    std::size_t index_of(std::string_view id) const {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].id() == id) {
                return i;
            }
        }
        throw ConfigError("no parameter named " + std::string(id));
    }
};

struct Batch {
    Matrix inputs;           // dense models: one row per example
    std::vector<int> tokens; // token models: examples x seq_len
    std::size_t seq_len = 0;
    std::vector<int> labels; // one class per output row
    Matrix targets;          // regression targets (mean-squared loss)

    std::size_t examples() const { return seq_len > 0 ? tokens.size() / seq_len : inputs.rows; }
};

/// Flat view over the trainable parameters, in registry order.
struct ParamLayout {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> sizes;
    std::size_t total = 0;

    static ParamLayout of(const ModelGraph& m) {
        ParamLayout l;
        for (std::size_t id : m.trainable()) {
            l.ids.push_back(id);
            l.offsets.push_back(l.total);
            l.sizes.push_back(m.params[id].size());
            l.total += m.params[id].size();
        }
        return l;
    }
};

inline std::vector<double> flatten(const ModelGraph& m, const ParamLayout& layout) {
    std::vector<double> flat;
    flat.reserve(layout.total);
    for (std::size_t id : layout.ids) {
        const auto v = m.params[id].read();
        flat.insert(flat.end(), v.begin(), v.end());
    }
    return flat;
}

/// Replaces the effective weights of the trainable parameters by real
/// values taken from a flat vector (analysis mode).
struct WeightOverride {
    const ParamLayout* layout = nullptr;
    std::span<const double> values;
};

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline double apply_activation(Activation a, double x) {
    switch (a) {
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Gelu: return gelu(x);
    case Activation::None: return x;
    }
    return x;
}

inline double activation_grad(Activation a, double x) {
    switch (a) {
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Gelu: return gelu_grad(x);
    case Activation::None: return 1.0;
    }
    return 1.0;
}

struct LinearCache {
    Matrix input;          // quantize-dequantized input actually multiplied
    std::vector<char> pass; // STE mask: 1 where the input quantizer did not clamp
    Matrix lora_mid;        // x A^T, when an adapter is attached
};

struct NormCache {
    Matrix out;
    std::vector<double> inv_std;
};

struct EncoderCache {
    Matrix x;
    NormCache ln1;
    LinearCache lq, lk, lv, lo, l1, l2;
    Matrix q, k, v;
    std::vector<Matrix> probs; // per (sequence, head): seq x seq
    Matrix attn;
    Matrix x1;
    NormCache ln2;
    Matrix f1;
    Matrix g;
};

struct DenseCache {
    LinearCache lin;
    Matrix pre;
};

struct EmbeddingCache {};
struct ProbeCache {};

using LayerCache = std::variant<DenseCache, EmbeddingCache, EncoderCache, NormCache, ProbeCache>;

struct Tape {
    std::vector<LayerCache> layers;
    Matrix output;
};

class Evaluator {
public:
    Evaluator(const ModelGraph& model, std::span<const LoraAdapter> adapters, const WeightOverride* override)
        : model_(model), adapters_(adapters), override_(override) {
        if (override_ != nullptr) {
            slot_.assign(model.params.size(), -1);
            for (std::size_t i = 0; i < override_->layout->ids.size(); ++i) {
                slot_[override_->layout->ids[i]] = static_cast<std::ptrdiff_t>(i);
            }
            if (override_->values.size() != override_->layout->total) {
                throw IntegrityError("weight override does not match the parameter layout");
            }
        }
        for (const auto& ad : adapters_) {
            check_adapter(ad);
        }
    }

    /// Effective real weights of a parameter.
    std::vector<double> weights(std::size_t pid) const {
        if (!slot_.empty() && slot_[pid] >= 0) {
            const auto s = static_cast<std::size_t>(slot_[pid]);
            const auto off = override_->layout->offsets[s];
            const auto n = override_->layout->sizes[s];
            return {override_->values.begin() + static_cast<std::ptrdiff_t>(off),
                    override_->values.begin() + static_cast<std::ptrdiff_t>(off + n)};
        }
        return model_.params[pid].read();
    }

    Matrix weight_matrix(std::size_t pid) const {
        const auto& p = model_.params[pid];
        return Matrix(p.shape[0], p.shape[1], weights(pid));
    }

    /// Quantized storage usable by the integer kernel, or null when the
    /// parameter is real-valued or overridden.
    const QuantTensor* integer_weights(std::size_t pid) const {
        if (!slot_.empty() && slot_[pid] >= 0) {
            return nullptr;
        }
        const auto& p = model_.params[pid];
        if (!p.quantized() || !p.quant->scheme.format.is_int()) {
            return nullptr;
        }
        return &*p.quant;
    }

    const LoraAdapter* adapter_for(std::size_t pid) const {
        for (const auto& ad : adapters_) {
            if (ad.base == pid) {
                return &ad;
            }
        }
        return nullptr;
    }

    /// y = q(x) W^T (+ LoRA delta).
    Matrix linear(std::size_t pid, const Matrix& x, LinearCache* cache) const {
        const auto& p = model_.params[pid];
        if (p.shape.size() != 2 || p.shape[1] != x.cols) {
            throw InputError("linear " + p.id() + ": input width " + std::to_string(x.cols) + " does not match weight");
        }
        const std::size_t out = p.shape[0];
        Matrix xin;
        std::vector<char> pass(x.data.size(), 1);
        Matrix y;
        const QuantTensor* wq = integer_weights(pid);
        if (model_.activation_format) {
            const QuantFormat& af = *model_.activation_format;
            const QuantScheme s = fit_scale(x.data, {x.rows, x.cols}, af);
            const QuantTensor xq = quantize_nearest(x.data, {x.rows, x.cols}, s);
            const double limit = s.scales[0] * af.max_value();
            for (std::size_t i = 0; i < x.data.size(); ++i) {
                pass[i] = std::abs(x.data[i]) <= limit ? 1 : 0;
            }
            xin = to_matrix(xq);
            if (wq != nullptr && af.is_int()) {
                y = int_linear(xq, *wq);
            } else {
                y = matmul_nt(xin, weight_matrix(pid));
            }
        } else {
            xin = x;
            y = matmul_nt(xin, weight_matrix(pid));
        }
        if (const LoraAdapter* ad = adapter_for(pid)) {
            const auto& pa = model_.params[ad->a];
            const auto& pb = model_.params[ad->b];
            const Matrix a(pa.shape[0], pa.shape[1], weights(ad->a));
            const Matrix b(pb.shape[0], pb.shape[1], weights(ad->b));
            Matrix mid = matmul_nt(xin, a);
            const Matrix delta = matmul_nt(mid, b);
            for (std::size_t i = 0; i < y.data.size(); ++i) {
                y.data[i] += ad->alpha * delta.data[i];
            }
            if (cache) {
                cache->lora_mid = std::move(mid);
            }
        }
        (void)out;
        if (cache) {
            cache->input = std::move(xin);
            cache->pass = std::move(pass);
        }
        return y;
    }

    Matrix norm(const Matrix& x, NormCache* cache) const {
        Matrix y(x.rows, x.cols);
        std::vector<double> inv(x.rows);
        for (std::size_t r = 0; r < x.rows; ++r) {
            const auto row = x.row(r);
            double mean = 0.0;
            for (double v : row) mean += v;
            mean /= static_cast<double>(x.cols);
            double var = 0.0;
            for (double v : row) var += (v - mean) * (v - mean);
            var /= static_cast<double>(x.cols);
            inv[r] = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t c = 0; c < x.cols; ++c) {
                y(r, c) = (row[c] - mean) * inv[r];
            }
        }
        if (cache) {
            cache->out = y;
            cache->inv_std = std::move(inv);
        }
        return y;
    }

    Matrix run(const Batch& batch, Tape* tape) const {
        Matrix x;
        if (model_.token_model()) {
            if (batch.seq_len != model_.seq_len || batch.tokens.size() % model_.seq_len != 0 || batch.tokens.empty()) {
                throw InputError("token batch does not match model sequence length");
            }
        } else if (!is_probe()) {
            if (batch.inputs.rows == 0 || batch.inputs.cols != model_.input_dim) {
                throw InputError("batch width " + std::to_string(batch.inputs.cols) + " does not match model input " +
                                 std::to_string(model_.input_dim));
            }
            x = batch.inputs;
        }
        for (std::size_t li = 0; li < model_.layers.size(); ++li) {
            const Layer& layer = model_.layers[li];
            if (const auto* d = std::get_if<DenseLayer>(&layer)) {
                DenseCache c;
                Matrix pre = linear(d->weight, x, tape ? &c.lin : nullptr);
                x = pre;
                for (double& v : x.data) v = apply_activation(d->activation, v);
                if (tape) {
                    c.pre = std::move(pre);
                    tape->layers.emplace_back(std::move(c));
                }
            } else if (const auto* e = std::get_if<EmbeddingLayer>(&layer)) {
                x = embed(*e, batch);
                if (tape) tape->layers.emplace_back(EmbeddingCache{});
            } else if (const auto* b = std::get_if<EncoderBlock>(&layer)) {
                EncoderCache c;
                x = encoder(*b, x, tape ? &c : nullptr);
                if (tape) tape->layers.emplace_back(std::move(c));
            } else if (std::holds_alternative<NormLayer>(layer)) {
                NormCache c;
                x = norm(x, tape ? &c : nullptr);
                if (tape) tape->layers.emplace_back(std::move(c));
            } else if (const auto* p = std::get_if<ProbeLayer>(&layer)) {
                x = Matrix(1, model_.params[p->weight].size(), weights(p->weight));
                if (tape) tape->layers.emplace_back(ProbeCache{});
            }
            for (double v : x.data) {
                if (!std::isfinite(v)) {
                    throw RunError("layer " + std::to_string(li) + " (" + layer_name(layer) +
                                   ") produced non-finite activations");
                }
            }
        }
        if (tape) tape->output = x;
        return x;
    }

    bool is_probe() const {
        return model_.layers.size() == 1 && std::holds_alternative<ProbeLayer>(model_.layers.front());
    }

    /// Loss of the network output, plus d loss / d output if requested.
    double loss(const Matrix& out, const Batch& batch, Matrix* grad) const {
        if (is_probe()) {
            const auto& probe = std::get<ProbeLayer>(model_.layers.front());
            double l = 0.0;
            if (grad) *grad = Matrix(out.rows, out.cols);
            for (std::size_t i = 0; i < out.data.size(); ++i) {
                const double d = out.data[i] - probe.target[i];
                l += 0.5 * d * d;
                if (grad) grad->data[i] = d;
            }
            return l;
        }
        if (model_.loss == LossKind::CrossEntropy) {
            if (batch.labels.size() != out.rows) {
                throw InputError("label count does not match output rows");
            }
            double total = 0.0;
            if (grad) *grad = Matrix(out.rows, out.cols);
            const double inv_rows = 1.0 / static_cast<double>(out.rows);
            for (std::size_t r = 0; r < out.rows; ++r) {
                const auto row = out.row(r);
                const int label = batch.labels[r];
                if (label < 0 || static_cast<std::size_t>(label) >= out.cols) {
                    throw InputError("label out of range");
                }
                double mx = row[0];
                for (double v : row) mx = std::max(mx, v);
                double z = 0.0;
                for (double v : row) z += std::exp(v - mx);
                const double lse = mx + std::log(z);
                total += lse - row[static_cast<std::size_t>(label)];
                if (grad) {
                    for (std::size_t c = 0; c < out.cols; ++c) {
                        const double sm = std::exp(row[c] - lse);
                        (*grad)(r, c) = (sm - (static_cast<int>(c) == label ? 1.0 : 0.0)) * inv_rows;
                    }
                }
            }
            const double l = total * inv_rows;
            if (!std::isfinite(l)) throw RunError("loss is not finite");
            return l;
        }
        if (batch.targets.rows != out.rows || batch.targets.cols != out.cols) {
            throw InputError("regression targets do not match output shape");
        }
        const double inv = 1.0 / static_cast<double>(out.data.size());
        double total = 0.0;
        if (grad) *grad = Matrix(out.rows, out.cols);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            const double d = out.data[i] - batch.targets.data[i];
            total += d * d;
            if (grad) grad->data[i] = 2.0 * d * inv;
        }
        const double l = total * inv;
        if (!std::isfinite(l)) throw RunError("loss is not finite");
        return l;
    }

    /// Gradients w.r.t. the effective weights of every parameter.
    std::vector<std::vector<double>> backward(const Batch& batch, const Tape& tape, Matrix dout) const {
        std::vector<std::vector<double>> grads(model_.params.size());
        for (std::size_t i = 0; i < model_.params.size(); ++i) {
            grads[i].assign(model_.params[i].size(), 0.0);
        }
        for (std::size_t li = model_.layers.size(); li-- > 0;) {
            const Layer& layer = model_.layers[li];
            const LayerCache& lc = tape.layers[li];
            if (const auto* d = std::get_if<DenseLayer>(&layer)) {
                const auto& c = std::get<DenseCache>(lc);
                for (std::size_t i = 0; i < dout.data.size(); ++i) {
                    dout.data[i] *= activation_grad(d->activation, c.pre.data[i]);
                }
                dout = linear_backward(d->weight, c.lin, dout, grads);
            } else if (const auto* e = std::get_if<EmbeddingLayer>(&layer)) {
                const std::size_t dm = model_.params[e->tokens].shape[1];
                for (std::size_t r = 0; r < dout.rows; ++r) {
                    const auto tok = static_cast<std::size_t>(batch.tokens[r]);
                    const std::size_t pos = r % model_.seq_len;
                    for (std::size_t c = 0; c < dm; ++c) {
                        grads[e->tokens][tok * dm + c] += dout(r, c);
                        grads[e->positions][pos * dm + c] += dout(r, c);
                    }
                }
            } else if (const auto* b = std::get_if<EncoderBlock>(&layer)) {
                dout = encoder_backward(*b, std::get<EncoderCache>(lc), dout, grads);
            } else if (std::holds_alternative<NormLayer>(layer)) {
                dout = norm_backward(std::get<NormCache>(lc), dout);
            } else if (const auto* p = std::get_if<ProbeLayer>(&layer)) {
                for (std::size_t i = 0; i < dout.data.size(); ++i) {
                    grads[p->weight][i] += dout.data[i];
                }
            }
        }
        return grads;
    }

private:
    static std::string layer_name(const Layer& layer) {
        if (std::holds_alternative<DenseLayer>(layer)) return "dense";
        if (std::holds_alternative<EmbeddingLayer>(layer)) return "embedding";
        if (std::holds_alternative<EncoderBlock>(layer)) return "encoder";
        if (std::holds_alternative<NormLayer>(layer)) return "norm";
        return "probe";
    }

    void check_adapter(const LoraAdapter& ad) const {
        const auto n = model_.params.size();
        if (ad.base >= n || ad.a >= n || ad.b >= n) {
            throw ConfigError("adapter refers to a missing parameter");
        }
        const auto& base = model_.params[ad.base];
        const auto& a = model_.params[ad.a];
        const auto& b = model_.params[ad.b];
        if (base.shape.size() != 2 || a.shape.size() != 2 || b.shape.size() != 2 || ad.rank == 0 ||
            a.shape[0] != ad.rank || a.shape[1] != base.shape[1] || b.shape[0] != base.shape[0] ||
            b.shape[1] != ad.rank) {
            throw ConfigError("adapter rank/shape mismatch on " + base.id());
        }
    }

    /// Integer kernel: y[r][o] = s_x * s_w[o] * sum_k x[r][k] * clamp(w[o][k]).
    static Matrix int_linear(const QuantTensor& x, const QuantTensor& w) {
        const std::size_t rows = x.shape[0];
        const std::size_t in = x.shape[1];
        const std::size_t out = w.shape[0];
        const auto& ws = w.scheme;
        const QuantFormat& wf = ws.format;
        std::vector<std::int32_t> wc(w.codes.size());
        for (std::size_t i = 0; i < wc.size(); ++i) {
            wc[i] = clamp_code(wf, w.codes[i]);
        }
        const bool per_row = ws.granularity == Granularity::PerChannel;
        Matrix y(rows, out);
        const auto zx = static_cast<std::int64_t>(x.scheme.zero_points[0]);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::int32_t* xr = x.codes.data() + r * in;
            for (std::size_t o = 0; o < out; ++o) {
                const std::int32_t* wr = wc.data() + o * in;
                const std::size_t ch = per_row ? o : 0;
                const auto zw = static_cast<std::int64_t>(ws.zero_points[ch]);
                std::int64_t acc = 0;
                for (std::size_t k = 0; k < in; ++k) {
                    acc += (static_cast<std::int64_t>(xr[k]) - zx) * (static_cast<std::int64_t>(wr[k]) - zw);
                }
                y(r, o) = x.scheme.scales[0] * ws.scales[ch] * static_cast<double>(acc);
            }
        }
        return y;
    }

    Matrix embed(const EmbeddingLayer& e, const Batch& batch) const {
        const auto& tok = model_.params[e.tokens];
        const std::size_t vocab = tok.shape[0];
        const std::size_t dm = tok.shape[1];
        const auto tw = weights(e.tokens);
        const auto pw = weights(e.positions);
        Matrix x(batch.tokens.size(), dm);
        for (std::size_t r = 0; r < batch.tokens.size(); ++r) {
            const int t = batch.tokens[r];
            if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
                throw InputError("token id out of range");
            }
            const std::size_t pos = r % model_.seq_len;
            for (std::size_t c = 0; c < dm; ++c) {
                x(r, c) = tw[static_cast<std::size_t>(t) * dm + c] + pw[pos * dm + c];
            }
        }
        return x;
    }

    Matrix encoder(const EncoderBlock& b, const Matrix& x, EncoderCache* c) const {
        const std::size_t n = x.rows;
        const std::size_t dm = x.cols;
        const std::size_t L = model_.seq_len;
        const std::size_t seqs = n / L;
        const std::size_t dh = dm / b.heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        NormCache ln1;
        const Matrix h1 = norm(x, c ? &ln1 : nullptr);
        Matrix q = linear(b.wq, h1, c ? &c->lq : nullptr);
        Matrix k = linear(b.wk, h1, c ? &c->lk : nullptr);
        Matrix v = linear(b.wv, h1, c ? &c->lv : nullptr);
        Matrix attn(n, dm);
        std::vector<Matrix> probs;
        if (c) probs.reserve(seqs * b.heads);
        for (std::size_t s = 0; s < seqs; ++s) {
            for (std::size_t h = 0; h < b.heads; ++h) {
                Matrix p(L, L);
                for (std::size_t i = 0; i < L; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < L; ++j) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < dh; ++t) {
                            acc += q(s * L + i, h * dh + t) * k(s * L + j, h * dh + t);
                        }
                        p(i, j) = acc * inv_sqrt;
                        mx = std::max(mx, p(i, j));
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j < L; ++j) {
                        p(i, j) = std::exp(p(i, j) - mx);
                        z += p(i, j);
                    }
                    for (std::size_t j = 0; j < L; ++j) {
                        p(i, j) /= z;
                    }
                    for (std::size_t t = 0; t < dh; ++t) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < L; ++j) {
                            acc += p(i, j) * v(s * L + j, h * dh + t);
                        }
                        attn(s * L + i, h * dh + t) = acc;
                    }
                }
                if (c) probs.push_back(std::move(p));
            }
        }
        const Matrix a = linear(b.wo, attn, c ? &c->lo : nullptr);
        Matrix x1 = x;
        for (std::size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += a.data[i];
        NormCache ln2;
        const Matrix h2 = norm(x1, c ? &ln2 : nullptr);
        Matrix f1 = linear(b.w1, h2, c ? &c->l1 : nullptr);
        Matrix g = f1;
        for (double& val : g.data) val = apply_activation(b.activation, val);
        const Matrix f2 = linear(b.w2, g, c ? &c->l2 : nullptr);
        Matrix out = x1;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += f2.data[i];
        if (c) {
            c->x = x;
            c->ln1 = std::move(ln1);
            c->q = std::move(q);
            c->k = std::move(k);
            c->v = std::move(v);
            c->probs = std::move(probs);
            c->attn = std::move(attn);
            c->x1 = std::move(x1);
            c->ln2 = std::move(ln2);
            c->f1 = std::move(f1);
            c->g = std::move(g);
        }
        return out;
    }

    Matrix linear_backward(std::size_t pid, const LinearCache& c, const Matrix& dy,
                           std::vector<std::vector<double>>& grads) const {
        const Matrix w = weight_matrix(pid);
        const Matrix dw = matmul_tn(dy, c.input); // out x in
        for (std::size_t i = 0; i < dw.data.size(); ++i) grads[pid][i] += dw.data[i];
        Matrix dx = matmul(dy, w); // rows x in
        if (const LoraAdapter* ad = adapter_for(pid)) {
            const auto& pa = model_.params[ad->a];
            const auto& pb = model_.params[ad->b];
            const Matrix a(pa.shape[0], pa.shape[1], weights(ad->a));
            const Matrix b(pb.shape[0], pb.shape[1], weights(ad->b));
            // y += alpha * mid B^T with mid = x A^T
            const Matrix db = matmul_tn(dy, c.lora_mid); // out x r
            for (std::size_t i = 0; i < db.data.size(); ++i) grads[ad->b][i] += ad->alpha * db.data[i];
            Matrix dmid = matmul(dy, b); // rows x r
            for (double& val : dmid.data) val *= ad->alpha;
            const Matrix da = matmul_tn(dmid, c.input); // r x in
            for (std::size_t i = 0; i < da.data.size(); ++i) grads[ad->a][i] += da.data[i];
            const Matrix dx2 = matmul(dmid, a);
            for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx2.data[i];
        }
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            if (!c.pass[i]) dx.data[i] = 0.0;
        }
        return dx;
    }

    static Matrix norm_backward(const NormCache& c, const Matrix& dy) {
        Matrix dx(dy.rows, dy.cols);
        const double inv_n = 1.0 / static_cast<double>(dy.cols);
        for (std::size_t r = 0; r < dy.rows; ++r) {
            double mean_dy = 0.0;
            double mean_dyy = 0.0;
            for (std::size_t col = 0; col < dy.cols; ++col) {
                mean_dy += dy(r, col);
                mean_dyy += dy(r, col) * c.out(r, col);
            }
            mean_dy *= inv_n;
            mean_dyy *= inv_n;
            for (std::size_t col = 0; col < dy.cols; ++col) {
                dx(r, col) = c.inv_std[r] * (dy(r, col) - mean_dy - c.out(r, col) * mean_dyy);
            }
        }
        return dx;
    }

    Matrix encoder_backward(const EncoderBlock& b, const EncoderCache& c, const Matrix& dout,
                            std::vector<std::vector<double>>& grads) const {
        const std::size_t n = dout.rows;
        const std::size_t dm = dout.cols;
        const std::size_t L = model_.seq_len;
        const std::size_t seqs = n / L;
        const std::size_t dh = dm / b.heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        // out = x1 + W2 act(W1 LN(x1))
        Matrix dg = linear_backward(b.w2, c.l2, dout, grads);
        for (std::size_t i = 0; i < dg.data.size(); ++i) dg.data[i] *= activation_grad(b.activation, c.f1.data[i]);
        const Matrix dh2 = linear_backward(b.w1, c.l1, dg, grads);
        Matrix dx1 = norm_backward(c.ln2, dh2);
        for (std::size_t i = 0; i < dx1.data.size(); ++i) dx1.data[i] += dout.data[i];

        // x1 = x + Wo attn(LN(x))
        const Matrix dattn = linear_backward(b.wo, c.lo, dx1, grads);
        Matrix dq(n, dm), dk(n, dm), dv(n, dm);
        for (std::size_t s = 0; s < seqs; ++s) {
            for (std::size_t h = 0; h < b.heads; ++h) {
                const Matrix& p = c.probs[s * b.heads + h];
                Matrix dp(L, L);
                for (std::size_t i = 0; i < L; ++i) {
                    for (std::size_t j = 0; j < L; ++j) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < dh; ++t) {
                            acc += dattn(s * L + i, h * dh + t) * c.v(s * L + j, h * dh + t);
                            dv(s * L + j, h * dh + t) += p(i, j) * dattn(s * L + i, h * dh + t);
                        }
                        dp(i, j) = acc;
                    }
                }
                for (std::size_t i = 0; i < L; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < L; ++j) dot += dp(i, j) * p(i, j);
                    for (std::size_t j = 0; j < L; ++j) {
                        const double ds = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
                        for (std::size_t t = 0; t < dh; ++t) {
                            dq(s * L + i, h * dh + t) += ds * c.k(s * L + j, h * dh + t);
                            dk(s * L + j, h * dh + t) += ds * c.q(s * L + i, h * dh + t);
                        }
                    }
                }
            }
        }
        Matrix dh1 = linear_backward(b.wq, c.lq, dq, grads);
        const Matrix dh1k = linear_backward(b.wk, c.lk, dk, grads);
        const Matrix dh1v = linear_backward(b.wv, c.lv, dv, grads);
        for (std::size_t i = 0; i < dh1.data.size(); ++i) dh1.data[i] += dh1k.data[i] + dh1v.data[i];
        Matrix dx = norm_backward(c.ln1, dh1);
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dx1.data[i];
        return dx;
    }

    const ModelGraph& model_;
    std::span<const LoraAdapter> adapters_;
    const WeightOverride* override_;
    std::vector<std::ptrdiff_t> slot_;
};

} // namespace detail

struct ForwardResult {
    double loss = 0.0;
    Matrix output;
};

inline ForwardResult evaluate(const ModelGraph& model, const Batch& batch, const WeightOverride* override = nullptr) {
    const detail::Evaluator ev(model, model.adapters, override);
    ForwardResult r;
    r.output = ev.run(batch, nullptr);
    r.loss = ev.loss(r.output, batch, nullptr);
    return r;
}

/// Scalar loss of the model on a batch (adapters attached to the model apply).
inline double forward(const ModelGraph& model, const Batch& batch, const WeightOverride* override = nullptr) {
    return evaluate(model, batch, override).loss;
}

/// Loss with an explicit adapter set in place of the model's own.
inline double forward_with_lora(const ModelGraph& model, std::span<const LoraAdapter> adapters, const Batch& batch) {
    const detail::Evaluator ev(model, adapters, nullptr);
    const Matrix out = ev.run(batch, nullptr);
    return ev.loss(out, batch, nullptr);
}

struct LossAndGrad {
    double loss = 0.0;
    std::vector<std::vector<double>> grads; // one per parameter, w.r.t. effective weights
};

/// Reverse pass with straight-through quantizers: identity inside the
/// activation clamp range, zero outside.
inline LossAndGrad loss_and_gradient(const ModelGraph& model, const Batch& batch) {
    const detail::Evaluator ev(model, model.adapters, nullptr);
    detail::Tape tape;
    const Matrix out = ev.run(batch, &tape);
    Matrix dout;
    LossAndGrad r;
    r.loss = ev.loss(out, batch, &dout);
    r.grads = ev.backward(batch, tape, std::move(dout));
    return r;
}

/// Classification accuracy (per row, so per token for token models).
inline double accuracy(const ModelGraph& model, const Batch& batch) {
    const auto r = evaluate(model, batch);
    if (batch.labels.size() != r.output.rows || r.output.rows == 0) {
        throw InputError("accuracy needs one label per output row");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < r.output.rows; ++i) {
        const auto row = r.output.row(i);
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.size(); ++c) {
            if (row[c] > row[best]) best = c;
        }
        if (static_cast<int>(best) == batch.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(r.output.rows);
}

// ---------------------------------------------------------------------------
// Builders

namespace detail {

inline std::vector<double> gaussian_init(std::uint64_t seed, std::uint64_t slot, std::size_t n, double stddev) {
    const RngStream rng(SeedPath{seed, 0, slot, Role::Init});
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = stddev * rng.normal(i);
    }
    return v;
}

} // namespace detail

struct MlpSpec {
    std::vector<std::size_t> dims; // input, hidden..., output
    Activation activation = Activation::Relu;
    LossKind loss = LossKind::CrossEntropy;
    std::optional<QuantFormat> weight_format;
    std::optional<QuantFormat> activation_format;
    std::uint64_t seed = 0;
    double init_gain = 1.0;
};

inline ModelGraph make_mlp(const MlpSpec& spec) {
    if (spec.dims.size() < 2) {
        throw ConfigError("mlp needs at least input and output widths");
    }
    ModelGraph m;
    m.loss = spec.loss;
    m.activation_format = spec.activation_format;
    m.input_dim = spec.dims.front();
    m.output_dim = spec.dims.back();
    for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
        const std::size_t in = spec.dims[l];
        const std::size_t out = spec.dims[l + 1];
        if (in == 0 || out == 0) throw ConfigError("mlp widths must be positive");
        const auto w = detail::gaussian_init(spec.seed, l, in * out, spec.init_gain / std::sqrt(static_cast<double>(in)));
        m.params.push_back(make_parameter("dense" + std::to_string(l), "weight", {out, in}, w, spec.weight_format));
        const bool last = l + 2 == spec.dims.size();
        m.layers.emplace_back(DenseLayer{l, last ? Activation::None : spec.activation});
    }
    return m;
}

struct EncoderSpec {
    std::size_t vocab = 8;
    std::size_t seq_len = 8;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t ffn = 256;
    std::size_t blocks = 1;
    Activation activation = Activation::Gelu;
    std::optional<QuantFormat> weight_format;
    std::optional<QuantFormat> activation_format;
    std::uint64_t seed = 0;
};

/// Token classifier: embedding, encoder blocks, final norm, linear head
/// over the vocabulary at every position.
inline ModelGraph make_encoder(const EncoderSpec& spec) {
    if (spec.heads == 0 || spec.d_model % spec.heads != 0) {
        throw ConfigError("d_model must be divisible by the head count");
    }
    if (spec.vocab < 2 || spec.seq_len == 0 || spec.blocks == 0 || spec.ffn == 0) {
        throw ConfigError("encoder sizes must be positive");
    }
    ModelGraph m;
    m.loss = LossKind::CrossEntropy;
    m.activation_format = spec.activation_format;
    m.seq_len = spec.seq_len;
    m.vocab = spec.vocab;
    m.input_dim = spec.vocab;
    m.output_dim = spec.vocab;
    const std::size_t d = spec.d_model;
    std::uint64_t slot = 0;
    auto add = [&](const std::string& layer, const std::string& name, Shape shape, double stddev) {
        const auto w = detail::gaussian_init(spec.seed, slot++, element_count(shape), stddev);
        m.params.push_back(make_parameter(layer, name, std::move(shape), w, spec.weight_format));
        return m.params.size() - 1;
    };
    const std::size_t tok = add("embed", "tokens", {spec.vocab, d}, 1.0);
    const std::size_t pos = add("embed", "positions", {spec.seq_len, d}, 1.0);
    m.layers.emplace_back(EmbeddingLayer{tok, pos});
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t b = 0; b < spec.blocks; ++b) {
        const std::string name = "block" + std::to_string(b);
        EncoderBlock blk;
        blk.heads = spec.heads;
        blk.activation = spec.activation;
        blk.wq = add(name, "wq", {d, d}, sd);
        blk.wk = add(name, "wk", {d, d}, sd);
        blk.wv = add(name, "wv", {d, d}, sd);
        blk.wo = add(name, "wo", {d, d}, sd);
        blk.w1 = add(name, "w1", {spec.ffn, d}, sd);
        blk.w2 = add(name, "w2", {d, spec.ffn}, 1.0 / std::sqrt(static_cast<double>(spec.ffn)));
        m.layers.emplace_back(blk);
    }
    m.layers.emplace_back(NormLayer{});
    const std::size_t head = add("head", "weight", {spec.vocab, d}, sd);
    m.layers.emplace_back(DenseLayer{head, Activation::None});
    return m;
}

inline ModelGraph make_quadratic_probe(std::span<const double> start, std::span<const double> target,
                                       const std::optional<QuantFormat>& format) {
    if (start.size() != target.size() || start.empty()) {
        throw ConfigError("probe start and target must have the same non-zero size");
    }
    ModelGraph m;
    m.loss = LossKind::MeanSquared;
    m.input_dim = 0;
    m.output_dim = start.size();
    m.params.push_back(make_parameter("probe", "w", {start.size()}, start, format));
    m.layers.emplace_back(ProbeLayer{0, std::vector<double>(target.begin(), target.end())});
    return m;
}

/// Linear weights eligible for adapters (everything but embeddings/probes).
inline std::vector<std::size_t> linear_weights(const ModelGraph& m) {
    std::vector<std::size_t> ids;
    for (const auto& layer : m.layers) {
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            ids.push_back(d->weight);
        } else if (const auto* b = std::get_if<EncoderBlock>(&layer)) {
            ids.insert(ids.end(), {b->wq, b->wk, b->wv, b->wo, b->w1, b->w2});
        }
    }
    return ids;
}

/// Freezes every base parameter and attaches a rank-r adapter to each
/// linear weight. A ~ N(0, 1/r), B = 0. Quantized adapters put B on the
/// same grid step as A, since an all-zero tensor gives no range to calibrate.
inline void attach_lora(ModelGraph& m, std::size_t rank, double alpha, std::uint64_t seed,
                        const std::optional<QuantFormat>& format) {
    if (!m.adapters.empty()) {
        throw ConfigError("model already carries adapters");
    }
    const auto targets = linear_weights(m);
    for (auto& p : m.params) p.trainable = false;
    std::uint64_t slot = 1000;
    for (std::size_t base : targets) {
        const Shape bs = m.params[base].shape;
        if (rank == 0 || rank > std::min(bs[0], bs[1])) {
            throw ConfigError("lora rank " + std::to_string(rank) + " does not fit " + m.params[base].id());
        }
        const std::string layer = "lora." + m.params[base].id();
        const auto a_init = detail::gaussian_init(seed, slot++, rank * bs[1], 1.0 / std::sqrt(static_cast<double>(rank)));
        Parameter a = make_parameter(layer, "A", {rank, bs[1]}, a_init, std::nullopt);
        Parameter b = make_parameter(layer, "B", {bs[0], rank}, std::vector<double>(bs[0] * rank, 0.0), std::nullopt);
        if (format) {
            const QuantScheme sa = fit_scale(a_init, a.shape, *format);
            a.quant = quantize_nearest(a_init, a.shape, sa);
            a.values.clear();
            b.quant = QuantTensor{b.shape, sa, std::vector<std::int32_t>(b.size(), 0)};
            b.values.clear();
        }
        m.params.push_back(std::move(a));
        m.params.push_back(std::move(b));
        m.adapters.push_back(LoraAdapter{base, m.params.size() - 2, m.params.size() - 1, rank, alpha});
    }
}

/// Element counts per weight-bearing layer: weights and the activations the
/// layer produces for a batch of `rows` output rows.
struct LayerFootprint {
    std::string id;
    std::size_t weights = 0;
    std::size_t activations = 0;
};

inline std::vector<LayerFootprint> layer_footprints(const ModelGraph& m, std::size_t examples) {
    std::vector<LayerFootprint> out;
    const std::size_t rows = m.token_model() ? examples * m.seq_len : examples;
    for (const auto& layer : m.layers) {
        if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            const auto& p = m.params[d->weight];
            out.push_back({p.id(), p.size(), rows * p.shape[0]});
        } else if (const auto* e = std::get_if<EmbeddingLayer>(&layer)) {
            const auto& t = m.params[e->tokens];
            const auto& p = m.params[e->positions];
            out.push_back({t.id(), t.size(), rows * t.shape[1]});
            out.push_back({p.id(), p.size(), rows * p.shape[1]});
        } else if (const auto* b = std::get_if<EncoderBlock>(&layer)) {
            for (std::size_t id : {b->wq, b->wk, b->wv, b->wo, b->w1, b->w2}) {
                const auto& p = m.params[id];
                out.push_back({p.id(), p.size(), rows * p.shape[0]});
            }
        } else if (const auto* pr = std::get_if<ProbeLayer>(&layer)) {
            const auto& p = m.params[pr->weight];
            out.push_back({p.id(), p.size(), p.size()});
        }
    }
    return out;
}

} // namespace quzo
