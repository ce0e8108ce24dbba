#pragma once

// QuantTensor wire format:
//   "QZT1" | u32 header length (LE) | JSON scheme header | int32 codes (LE)
// The header carries shape, format name, granularity, axis, scales,
// zero points and rounding mode.

#include <array>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "json.hpp"
#include "quzo/quant.hpp"

namespace quzo {

using nlohmann::json;

inline json scheme_to_json(const QuantScheme& s) {
    return json{{"format", s.format.name()},
                {"granularity", s.granularity == Granularity::PerTensor ? "per-tensor" : "per-channel"},
                {"axis", s.axis},
                {"scales", s.scales},
                {"zero_points", s.zero_points},
                {"rounding", s.rounding == Rounding::Nearest ? "nearest" : "stochastic"}};
}

inline QuantScheme scheme_from_json(const json& j) {
    QuantScheme s;
    s.format = QuantFormat::parse(j.at("format").get<std::string>());
    const auto g = j.at("granularity").get<std::string>();
    if (g == "per-tensor") {
        s.granularity = Granularity::PerTensor;
    } else if (g == "per-channel") {
        s.granularity = Granularity::PerChannel;
    } else {
        throw InputError("unknown granularity: " + g);
    }
    s.axis = j.at("axis").get<std::size_t>();
    s.scales = j.at("scales").get<std::vector<double>>();
    s.zero_points = j.at("zero_points").get<std::vector<double>>();
    const auto r = j.at("rounding").get<std::string>();
    if (r != "nearest" && r != "stochastic") {
        throw InputError("unknown rounding mode: " + r);
    }
    s.rounding = r == "nearest" ? Rounding::Nearest : Rounding::Stochastic;
    return s;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    }
    os.write(b.data(), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (!is) {
        throw InputError("truncated stream");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    }
    return v;
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    write_u32(os, static_cast<std::uint32_t>(v & 0xffffffffu));
    write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t read_u64(std::istream& is) {
    const std::uint64_t lo = read_u32(is);
    const std::uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
    std::array<char, 4> b{};
    is.read(b.data(), 4);
    if (!is || std::string(b.data(), 4) != std::string(magic, 4)) {
        throw InputError(std::string("bad magic, expected ") + magic);
    }
}

inline void write_json_block(std::ostream& os, const json& j) {
    const std::string text = j.dump();
    write_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline json read_json_block(std::istream& is) {
    const std::uint32_t len = read_u32(is);
    std::string text(len, '\0');
    is.read(text.data(), len);
    if (!is) {
        throw InputError("truncated header");
    }
    return json::parse(text);
}

} // namespace detail

inline void write_quant_tensor(std::ostream& os, const QuantTensor& q) {
    detail::write_magic(os, "QZT1");
    json header = scheme_to_json(q.scheme);
    header["shape"] = q.shape;
    detail::write_json_block(os, header);
    for (std::int32_t c : q.codes) {
        detail::write_u32(os, static_cast<std::uint32_t>(c));
    }
}

inline QuantTensor read_quant_tensor(std::istream& is) {
    detail::expect_magic(is, "QZT1");
    const json header = detail::read_json_block(is);
    QuantTensor q;
    q.shape = header.at("shape").get<Shape>();
    q.scheme = scheme_from_json(header);
    q.scheme.validate(q.shape);
    q.codes.resize(element_count(q.shape));
    for (auto& c : q.codes) {
        c = static_cast<std::int32_t>(detail::read_u32(is));
    }
    return q;
}

} // namespace quzo
