#pragma once

// Quantization formats, schemes, rounding and integer matmul.
//
// Conventions used throughout the library:
//   * A scheme's `scale` is the grid step in real units, so a code c maps
//     back to scale * (grid_value(c) - zero_point).
//   * Codes live in int32 even for 2..8-bit formats. Range enforcement
//     happens at explicit clamp points (quantizers, saturating updates,
//     clamped reads), never implicitly at storage.
//   * The integer grid is symmetric, [-(2^(b-1)-1), 2^(b-1)-1]; the most
//     negative two's-complement pattern is left free for outlier labels.
//   * Minifloat codes are signed indices into the sorted value grid with
//     code 0 mapping to 0.0, so INT4 and FP4 (E2M1) share the range [-7, 7].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "quzo/errors.hpp"
#include "quzo/rng.hpp"
#include "quzo/tensor.hpp"

namespace quzo {

struct QuantFormat {
    enum class Kind { Int, Fp };

    Kind kind = Kind::Int;
    int bits = 8;
    int exponent_bits = 0;
    int mantissa_bits = 0;

    static QuantFormat integer(int bits) {
        if (bits < 2 || bits > 16) {
            throw ConfigError("unsupported integer width: " + std::to_string(bits));
        }
        return {Kind::Int, bits, 0, 0};
    }

    static QuantFormat minifloat(int exponent_bits, int mantissa_bits) {
        const bool e4m3 = exponent_bits == 4 && mantissa_bits == 3;
        const bool e2m1 = exponent_bits == 2 && mantissa_bits == 1;
        if (!e4m3 && !e2m1) {
            throw ConfigError("unsupported minifloat layout E" + std::to_string(exponent_bits) + "M" +
                              std::to_string(mantissa_bits));
        }
        return {Kind::Fp, 1 + exponent_bits + mantissa_bits, exponent_bits, mantissa_bits};
    }

    static QuantFormat fp8_e4m3() { return minifloat(4, 3); }
    static QuantFormat fp4_e2m1() { return minifloat(2, 1); }

    bool is_int() const { return kind == Kind::Int; }

    /// Largest code (L_max). The code range is [-max_code(), max_code()].
    int max_code() const;
    int min_code() const { return -max_code(); }

    /// Largest representable magnitude on the unscaled grid.
    double max_value() const;

    /// Unscaled grid value of a code; the code must be in range.
    double grid_value(int code) const;

    std::string name() const {
        if (is_int()) {
            return "INT" + std::to_string(bits);
        }
        return "FP" + std::to_string(bits) + "_E" + std::to_string(exponent_bits) + "M" + std::to_string(mantissa_bits);
    }

    /// Accepts INT<b>, FP8, FP8_E4M3, FP4, FP4_E2M1 (case-sensitive).
    static QuantFormat parse(std::string_view text) {
        if (text.starts_with("INT")) {
            int b = 0;
            for (char ch : text.substr(3)) {
                if (ch < '0' || ch > '9') {
                    throw ConfigError("bad format name: " + std::string(text));
                }
                b = b * 10 + (ch - '0');
            }
            return integer(b);
        }
        if (text == "FP8" || text == "FP8_E4M3") {
            return fp8_e4m3();
        }
        if (text == "FP4" || text == "FP4_E2M1") {
            return fp4_e2m1();
        }
        throw ConfigError("unknown format name: " + std::string(text));
    }

    friend bool operator==(const QuantFormat&, const QuantFormat&) = default;
};

namespace detail {

/// Decodes one minifloat bit pattern (sign | exponent | mantissa).
/// Returns NaN for the E4M3 NaN pattern; E4M3 has no infinities and
/// E2M1 has neither infinities nor NaN.
inline double decode_minifloat(std::uint32_t pattern, int e_bits, int m_bits) {
    const std::uint32_t m_mask = (1u << m_bits) - 1;
    const std::uint32_t e_mask = (1u << e_bits) - 1;
    const bool negative = ((pattern >> (e_bits + m_bits)) & 1u) != 0;
    const std::uint32_t e = (pattern >> m_bits) & e_mask;
    const std::uint32_t m = pattern & m_mask;
    if (e_bits == 4 && m_bits == 3 && e == e_mask && m == m_mask) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const int bias = (1 << (e_bits - 1)) - 1;
    const double frac = static_cast<double>(m) / static_cast<double>(1u << m_bits);
    const double mag = e == 0 ? std::ldexp(frac, 1 - bias) : std::ldexp(1.0 + frac, static_cast<int>(e) - bias);
    return negative ? -mag : mag;
}

inline std::vector<double> build_minifloat_grid(int e_bits, int m_bits) {
    std::vector<double> grid;
    const std::uint32_t patterns = 1u << (1 + e_bits + m_bits);
    for (std::uint32_t p = 0; p < patterns; ++p) {
        const double v = decode_minifloat(p, e_bits, m_bits);
        if (std::isfinite(v)) {
            grid.push_back(v == 0.0 ? 0.0 : v);
        }
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

inline const std::vector<double>& minifloat_grid(int e_bits, int m_bits) {
    static const std::vector<double> e4m3 = build_minifloat_grid(4, 3);
    static const std::vector<double> e2m1 = build_minifloat_grid(2, 1);
    if (e_bits == 4 && m_bits == 3) {
        return e4m3;
    }
    if (e_bits == 2 && m_bits == 1) {
        return e2m1;
    }
    throw ConfigError("unsupported minifloat layout");
}

} // namespace detail

inline int QuantFormat::max_code() const {
    if (is_int()) {
        return (1 << (bits - 1)) - 1;
    }
    const auto& g = detail::minifloat_grid(exponent_bits, mantissa_bits);
    return static_cast<int>((g.size() - 1) / 2);
}

inline double QuantFormat::max_value() const {
    if (is_int()) {
        return static_cast<double>(max_code());
    }
    return detail::minifloat_grid(exponent_bits, mantissa_bits).back();
}

inline double QuantFormat::grid_value(int code) const {
    if (is_int()) {
        return static_cast<double>(code);
    }
    const auto& g = detail::minifloat_grid(exponent_bits, mantissa_bits);
    return g[static_cast<std::size_t>(code + max_code())];
}

/// Sorted, duplicate-free list of representable unscaled values.
inline std::vector<double> enumerate_grid(const QuantFormat& format) {
    if (format.is_int()) {
        std::vector<double> grid;
        for (int c = format.min_code(); c <= format.max_code(); ++c) {
            grid.push_back(static_cast<double>(c));
        }
        return grid;
    }
    return detail::minifloat_grid(format.exponent_bits, format.mantissa_bits);
}

enum class Granularity { PerTensor, PerChannel };
enum class Rounding { Nearest, Stochastic };

struct QuantScheme {
    QuantFormat format;
    Granularity granularity = Granularity::PerTensor;
    std::size_t axis = 0;
    std::vector<double> scales{1.0};
    std::vector<double> zero_points{0.0};
    Rounding rounding = Rounding::Nearest;

    static QuantScheme per_tensor(QuantFormat f, double scale, Rounding r = Rounding::Nearest) {
        QuantScheme s;
        s.format = f;
        s.scales = {scale};
        s.zero_points = {0.0};
        s.rounding = r;
        return s;
    }

    std::size_t channels() const { return scales.size(); }

    /// Size of the stride between consecutive channel indices.
    std::size_t inner_extent(const Shape& shape) const {
        std::size_t inner = 1;
        for (std::size_t d = axis + 1; d < shape.size(); ++d) {
            inner *= shape[d];
        }
        return inner;
    }

    std::size_t channel_of(std::size_t flat, const Shape& shape, std::size_t inner) const {
        if (granularity == Granularity::PerTensor) {
            return 0;
        }
        return (flat / inner) % shape[axis];
    }

    void validate(const Shape& shape) const {
        if (scales.empty() || scales.size() != zero_points.size()) {
            throw ConfigError("scheme needs one zero point per scale");
        }
        for (double s : scales) {
            if (!(s > 0.0) || !std::isfinite(s)) {
                throw ConfigError("scheme scale must be positive and finite");
            }
        }
        for (double z : zero_points) {
            if (z != std::nearbyint(z)) {
                throw ConfigError("zero points are code-space integers");
            }
            if (z != 0.0 && !format.is_int()) {
                throw ConfigError("minifloat schemes are symmetric");
            }
        }
        if (granularity == Granularity::PerTensor) {
            if (scales.size() != 1) {
                throw ConfigError("per-tensor scheme carries exactly one scale");
            }
        } else {
            if (axis >= shape.size() || shape[axis] != scales.size()) {
                throw ConfigError("per-channel scheme needs one scale per slice along its axis");
            }
        }
    }
};

struct QuantTensor {
    Shape shape;
    QuantScheme scheme;
    std::vector<std::int32_t> codes;

    std::size_t size() const { return codes.size(); }
};

inline std::int32_t clamp_code(const QuantFormat& f, std::int64_t code) {
    return static_cast<std::int32_t>(std::clamp<std::int64_t>(code, f.min_code(), f.max_code()));
}

/// Round half to even (the default IEEE rounding mode).
inline double round_half_even(double y) { return std::nearbyint(y); }

namespace detail {

inline void require_finite(std::span<const double> x, const char* what) {
    for (double v : x) {
        if (!std::isfinite(v)) {
            throw InputError(std::string(what) + ": non-finite input element");
        }
    }
}

/// Nearest grid index for an unscaled value on a sorted minifloat grid,
/// ties broken toward the even code.
inline int nearest_minifloat_code(double y, const std::vector<double>& grid, int max_code) {
    auto it = std::lower_bound(grid.begin(), grid.end(), y);
    if (it == grid.begin()) {
        return -max_code;
    }
    if (it == grid.end()) {
        return max_code;
    }
    const auto hi = static_cast<int>(it - grid.begin());
    const int lo = hi - 1;
    const double dlo = y - grid[lo];
    const double dhi = grid[hi] - y;
    int idx = hi;
    if (dlo < dhi) {
        idx = lo;
    } else if (dlo == dhi) {
        idx = ((lo - max_code) % 2 == 0) ? lo : hi;
    }
    return idx - max_code;
}

} // namespace detail

inline QuantTensor quantize_nearest(std::span<const double> x, const Shape& shape, const QuantScheme& scheme) {
    if (element_count(shape) != x.size()) {
        throw InputError("quantize_nearest: shape does not match data");
    }
    scheme.validate(shape);
    detail::require_finite(x, "quantize_nearest");
    QuantTensor q{shape, scheme, std::vector<std::int32_t>(x.size())};
    q.scheme.rounding = Rounding::Nearest;
    const QuantFormat& f = scheme.format;
    const std::size_t inner = scheme.inner_extent(shape);
    const std::vector<double>* grid = f.is_int() ? nullptr : &detail::minifloat_grid(f.exponent_bits, f.mantissa_bits);
    const int lmax = f.max_code();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t ch = scheme.channel_of(i, shape, inner);
        const double y = x[i] / scheme.scales[ch];
        if (f.is_int()) {
            const double r = round_half_even(y + scheme.zero_points[ch]);
            q.codes[i] = static_cast<std::int32_t>(std::clamp(r, -static_cast<double>(lmax), static_cast<double>(lmax)));
        } else {
            q.codes[i] = detail::nearest_minifloat_code(y, *grid, lmax);
        }
    }
    return q;
}

struct StochasticQuant {
    QuantTensor tensor;
    /// Bernoulli parameter of rounding up for every element (before clamping).
    std::vector<double> prob_up;
    /// Elements whose rounded value was pulled back into [L_min, L_max].
    std::size_t clamped = 0;
};

/// Stochastic rounding: code = floor(y) + Ber(y - floor(y)), y = x / scale,
/// then clamped. Element i draws uniform number i of `rng`.
inline StochasticQuant quantize_stochastic(std::span<const double> x, const Shape& shape, const QuantScheme& scheme,
                                           const RngStream& rng) {
    if (element_count(shape) != x.size()) {
        throw InputError("quantize_stochastic: shape does not match data");
    }
    scheme.validate(shape);
    detail::require_finite(x, "quantize_stochastic");
    StochasticQuant out{QuantTensor{shape, scheme, std::vector<std::int32_t>(x.size())},
                        std::vector<double>(x.size()), 0};
    out.tensor.scheme.rounding = Rounding::Stochastic;
    const QuantFormat& f = scheme.format;
    const std::size_t inner = scheme.inner_extent(shape);
    const int lmax = f.max_code();
    const double dmax = static_cast<double>(lmax);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t ch = scheme.channel_of(i, shape, inner);
        const double y = x[i] / scheme.scales[ch];
        const double u = rng.uniform(i);
        if (f.is_int()) {
            const double shifted = y + scheme.zero_points[ch];
            const double lo = std::floor(shifted);
            const double p = shifted - lo;
            out.prob_up[i] = p;
            double code = lo + (u < p ? 1.0 : 0.0);
            if (code > dmax || code < -dmax) {
                ++out.clamped;
                code = std::clamp(code, -dmax, dmax);
            }
            out.tensor.codes[i] = static_cast<std::int32_t>(code);
        } else {
            const auto& grid = detail::minifloat_grid(f.exponent_bits, f.mantissa_bits);
            if (y >= grid.back() || y <= grid.front()) {
                out.prob_up[i] = 0.0;
                if (y > grid.back() || y < grid.front()) {
                    ++out.clamped;
                }
                out.tensor.codes[i] = y > 0 ? lmax : -lmax;
                continue;
            }
            const auto hi = static_cast<int>(std::upper_bound(grid.begin(), grid.end(), y) - grid.begin());
            const int lo = hi - 1;
            const double p = (y - grid[lo]) / (grid[hi] - grid[lo]);
            out.prob_up[i] = p;
            out.tensor.codes[i] = (u < p ? hi : lo) - lmax;
        }
    }
    return out;
}

/// scale * (grid_value(code) - zero_point). Integer codes are used as
/// stored; minifloat codes are clamped onto the grid.
inline std::vector<double> dequantize(const QuantTensor& q) {
    std::vector<double> out(q.codes.size());
    const QuantScheme& s = q.scheme;
    const std::size_t inner = s.inner_extent(q.shape);
    const bool is_int = s.format.is_int();
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
        const std::size_t ch = s.channel_of(i, q.shape, inner);
        const double g = is_int ? static_cast<double>(q.codes[i]) : s.format.grid_value(clamp_code(s.format, q.codes[i]));
        out[i] = s.scales[ch] * (g - s.zero_points[ch]);
    }
    return out;
}

/// Dequantize after clamping every code into the format range. This is
/// the read path for weights whose codes carry a transient perturbation.
inline std::vector<double> dequantize_clamped(const QuantTensor& q) {
    std::vector<double> out(q.codes.size());
    const QuantScheme& s = q.scheme;
    const std::size_t inner = s.inner_extent(q.shape);
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
        const std::size_t ch = s.channel_of(i, q.shape, inner);
        out[i] = s.scales[ch] * (s.format.grid_value(clamp_code(s.format, q.codes[i])) - s.zero_points[ch]);
    }
    return out;
}

/// Symmetric max-abs calibration. All-zero slices get scale 1.
inline QuantScheme fit_scale(std::span<const double> x, const Shape& shape, const QuantFormat& format,
                             Granularity granularity = Granularity::PerTensor, std::size_t axis = 0) {
    if (x.empty()) {
        throw InputError("fit_scale: empty tensor");
    }
    if (element_count(shape) != x.size()) {
        throw InputError("fit_scale: shape does not match data");
    }
    detail::require_finite(x, "fit_scale");
    QuantScheme s;
    s.format = format;
    s.granularity = granularity;
    s.axis = axis;
    std::size_t channels = 1;
    if (granularity == Granularity::PerChannel) {
        if (axis >= shape.size()) {
            throw ConfigError("fit_scale: channel axis out of range");
        }
        channels = shape[axis];
    }
    std::vector<double> maxabs(channels, 0.0);
    const std::size_t inner = s.inner_extent(shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t ch = s.channel_of(i, shape, inner);
        maxabs[ch] = std::max(maxabs[ch], std::abs(x[i]));
    }
    s.scales.assign(channels, 1.0);
    s.zero_points.assign(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
        if (maxabs[c] > 0.0) {
            s.scales[c] = maxabs[c] / format.max_value();
        }
    }
    return s;
}

inline Matrix to_matrix(const QuantTensor& q) {
    if (q.shape.size() != 2) {
        throw InputError("expected a rank-2 tensor");
    }
    return Matrix(q.shape[0], q.shape[1], dequantize(q));
}

namespace detail {

inline bool integral_scheme(const QuantScheme& s) {
    return s.format.is_int();
}

} // namespace detail

/// a (m x k) times b (k x n). Two integer operands whose scales factor out
/// of the inner sum (a per-tensor or per-row, b per-tensor or per-column)
/// are multiplied in int64 and rescaled once per output element. Any other
/// combination is dequantized and multiplied in double.
inline Matrix qmatmul(const QuantTensor& a, const QuantTensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2) {
        throw InputError("qmatmul: operands must be rank 2");
    }
    if (a.shape[1] != b.shape[0]) {
        throw InputError("qmatmul: inner dimensions differ");
    }
    const std::size_t m = a.shape[0];
    const std::size_t k = a.shape[1];
    const std::size_t n = b.shape[1];
    const auto& sa = a.scheme;
    const auto& sb = b.scheme;
    const bool a_ok = sa.granularity == Granularity::PerTensor || sa.axis == 0;
    const bool b_ok = sb.granularity == Granularity::PerTensor || sb.axis == 1;
    if (!(detail::integral_scheme(sa) && detail::integral_scheme(sb) && a_ok && b_ok)) {
        return matmul(to_matrix(a), to_matrix(b));
    }
    Matrix c(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t ca = sa.granularity == Granularity::PerTensor ? 0 : i;
        const auto za = static_cast<std::int64_t>(sa.zero_points[ca]);
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t cb = sb.granularity == Granularity::PerTensor ? 0 : j;
            const auto zb = static_cast<std::int64_t>(sb.zero_points[cb]);
            std::int64_t acc = 0;
            for (std::size_t t = 0; t < k; ++t) {
                acc += (static_cast<std::int64_t>(a.codes[i * k + t]) - za) *
                       (static_cast<std::int64_t>(b.codes[t * n + j]) - zb);
            }
            c(i, j) = sa.scales[ca] * sb.scales[cb] * static_cast<double>(acc);
        }
    }
    return c;
}

} // namespace quzo
