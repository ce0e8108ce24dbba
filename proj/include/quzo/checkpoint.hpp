#pragma once

// Model checkpoint:
//   "QZCK" | JSON topology block | one payload per parameter, in order.
// A payload is a QZT1 quant tensor for quantized parameters, otherwise
// u64 count followed by IEEE-754 doubles (little endian).

#include <bit>
#include <fstream>
#include <string>

#include "quzo/model.hpp"
#include "quzo/serialize.hpp"

namespace quzo {

namespace detail {

inline json layer_to_json(const Layer& layer) {
    return std::visit(
        [](const auto& l) -> json {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, DenseLayer>) {
                return {{"type", "dense"}, {"weight", l.weight}, {"activation", std::string(to_string(l.activation))}};
            } else if constexpr (std::is_same_v<T, EmbeddingLayer>) {
                return {{"type", "embedding"}, {"tokens", l.tokens}, {"positions", l.positions}};
            } else if constexpr (std::is_same_v<T, EncoderBlock>) {
                return {{"type", "encoder"}, {"wq", l.wq}, {"wk", l.wk}, {"wv", l.wv}, {"wo", l.wo},
                        {"w1", l.w1},        {"w2", l.w2}, {"heads", l.heads},
                        {"activation", std::string(to_string(l.activation))}};
            } else if constexpr (std::is_same_v<T, NormLayer>) {
                return {{"type", "norm"}};
            } else {
                return {{"type", "probe"}, {"weight", l.weight}, {"target", l.target}};
            }
        },
        layer);
}

inline Layer layer_from_json(const json& j, std::size_t nparams) {
    const auto type = j.at("type").get<std::string>();
    auto idx = [&](const char* key) {
        const auto v = j.at(key).get<std::size_t>();
        if (v >= nparams) throw InputError(std::string("checkpoint layer refers to missing parameter: ") + key);
        return v;
    };
    if (type == "dense") {
        return DenseLayer{idx("weight"), parse_activation(j.at("activation").get<std::string>())};
    }
    if (type == "embedding") return EmbeddingLayer{idx("tokens"), idx("positions")};
    if (type == "encoder") {
        return EncoderBlock{idx("wq"), idx("wk"), idx("wv"), idx("wo"), idx("w1"), idx("w2"),
                            j.at("heads").get<std::size_t>(),
                            parse_activation(j.at("activation").get<std::string>())};
    }
    if (type == "norm") return NormLayer{};
    if (type == "probe") return ProbeLayer{idx("weight"), j.at("target").get<std::vector<double>>()};
    throw InputError("unknown layer type in checkpoint: " + type);
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelGraph& m) {
    json top;
    top["loss"] = m.loss == LossKind::CrossEntropy ? "cross-entropy" : "mean-squared";
    top["activation_format"] = m.activation_format ? json(m.activation_format->name()) : json(nullptr);
    top["input_dim"] = m.input_dim;
    top["output_dim"] = m.output_dim;
    top["seq_len"] = m.seq_len;
    top["vocab"] = m.vocab;
    top["params"] = json::array();
    for (const auto& p : m.params) {
        top["params"].push_back({{"layer", p.layer},
                                 {"name", p.name},
                                 {"shape", p.shape},
                                 {"trainable", p.trainable},
                                 {"quantized", p.quantized()}});
    }
    top["layers"] = json::array();
    for (const auto& l : m.layers) top["layers"].push_back(detail::layer_to_json(l));
    top["adapters"] = json::array();
    for (const auto& a : m.adapters) {
        top["adapters"].push_back({{"base", a.base}, {"a", a.a}, {"b", a.b}, {"rank", a.rank}, {"alpha", a.alpha}});
    }
    detail::write_magic(os, "QZCK");
    detail::write_json_block(os, top);
    for (const auto& p : m.params) {
        if (p.quantized()) {
            write_quant_tensor(os, *p.quant);
        } else {
            detail::write_u64(os, p.values.size());
            for (double v : p.values) detail::write_u64(os, std::bit_cast<std::uint64_t>(v));
        }
    }
    if (!os) throw RunError("checkpoint write failed");
}

inline ModelGraph read_checkpoint(std::istream& is) {
    detail::expect_magic(is, "QZCK");
    const json top = detail::read_json_block(is);
    ModelGraph m;
    try {
        const auto loss = top.at("loss").get<std::string>();
        if (loss != "cross-entropy" && loss != "mean-squared") throw InputError("unknown loss: " + loss);
        m.loss = loss == "cross-entropy" ? LossKind::CrossEntropy : LossKind::MeanSquared;
        if (!top.at("activation_format").is_null()) {
            m.activation_format = QuantFormat::parse(top.at("activation_format").get<std::string>());
        }
        m.input_dim = top.at("input_dim").get<std::size_t>();
        m.output_dim = top.at("output_dim").get<std::size_t>();
        m.seq_len = top.at("seq_len").get<std::size_t>();
        m.vocab = top.at("vocab").get<std::size_t>();
        for (const auto& pj : top.at("params")) {
            Parameter p;
            p.layer = pj.at("layer").get<std::string>();
            p.name = pj.at("name").get<std::string>();
            p.shape = pj.at("shape").get<Shape>();
            p.trainable = pj.at("trainable").get<bool>();
            if (pj.at("quantized").get<bool>()) {
                p.quant = read_quant_tensor(is);
                if (p.quant->shape != p.shape) throw InputError("checkpoint tensor shape mismatch for " + p.id());
            } else {
                const std::uint64_t n = detail::read_u64(is);
                if (n != p.size()) throw InputError("checkpoint value count mismatch for " + p.id());
                p.values.resize(n);
                for (double& v : p.values) v = std::bit_cast<double>(detail::read_u64(is));
            }
            m.params.push_back(std::move(p));
        }
        for (const auto& lj : top.at("layers")) m.layers.push_back(detail::layer_from_json(lj, m.params.size()));
        for (const auto& aj : top.at("adapters")) {
            LoraAdapter a{aj.at("base").get<std::size_t>(), aj.at("a").get<std::size_t>(),
                          aj.at("b").get<std::size_t>(), aj.at("rank").get<std::size_t>(),
                          aj.at("alpha").get<double>()};
            if (a.base >= m.params.size() || a.a >= m.params.size() || a.b >= m.params.size()) {
                throw InputError("checkpoint adapter refers to a missing parameter");
            }
            m.adapters.push_back(a);
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed checkpoint topology: ") + e.what());
    }
    if (!is) throw InputError("truncated checkpoint");
    return m;
}

inline void save_checkpoint(const std::string& path, const ModelGraph& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RunError("cannot write " + path);
    write_checkpoint(os, m);
}

inline ModelGraph load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path);
    return read_checkpoint(is);
}

} // namespace quzo
