#pragma once

// Synthetic datasets and the CSV format they are stored in.
//
// Dense tasks: header f0..f{d-1},label. Token tasks: tok_0..tok_{L-1},
// lbl_0..lbl_{L-1}.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "quzo/errors.hpp"
#include "quzo/model.hpp"
#include "quzo/rng.hpp"
#include "quzo/tensor.hpp"

namespace quzo {

struct Dataset {
    Matrix features;         // dense tasks
    std::vector<int> labels; // dense: one per row; token: one per position
    std::vector<int> tokens; // token tasks, row-major examples x seq_len
    std::size_t seq_len = 0;
    std::size_t classes = 0;

    bool token_task() const { return seq_len > 0; }
    std::size_t size() const { return token_task() ? tokens.size() / seq_len : features.rows; }

    Batch batch(std::span<const std::size_t> rows) const {
        Batch b;
        if (token_task()) {
            b.seq_len = seq_len;
            for (std::size_t r : rows) {
                b.tokens.insert(b.tokens.end(), tokens.begin() + static_cast<std::ptrdiff_t>(r * seq_len),
                                tokens.begin() + static_cast<std::ptrdiff_t>((r + 1) * seq_len));
                b.labels.insert(b.labels.end(), labels.begin() + static_cast<std::ptrdiff_t>(r * seq_len),
                                labels.begin() + static_cast<std::ptrdiff_t>((r + 1) * seq_len));
            }
            return b;
        }
        b.inputs = Matrix(rows.size(), features.cols);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto src = features.row(rows[i]);
            std::copy(src.begin(), src.end(), b.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * features.cols));
            b.labels.push_back(labels[rows[i]]);
        }
        return b;
    }

    Batch all() const {
        std::vector<std::size_t> rows(size());
        std::iota(rows.begin(), rows.end(), 0);
        return batch(rows);
    }
};

struct SyntheticSpec {
    std::string task = "two-gaussians";
    std::size_t n = 1000;
    std::uint64_t seed = 0;
    std::size_t dim = 8;
    double margin = 4.0;     // two-gaussians: class means at +/- margin * sigma
    std::size_t seq_len = 8; // token-copy
    std::size_t vocab = 8;   // token-copy
};

/// two-gaussians: balanced classes, unit covariance, means +/- margin along
/// a random unit direction. xor-clusters: four clusters at (+/-2, +/-2) in
/// the first two features, label = sign(x0) xor sign(x1). token-copy: the
/// target sequence is the input sequence reversed.
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
    if (spec.n == 0) {
        throw ConfigError("dataset size must be at least 1");
    }
    const RngStream rng(SeedPath{spec.seed, 0, 0, Role::Data});
    Dataset d;
    if (spec.task == "two-gaussians") {
        if (spec.dim == 0) throw ConfigError("two-gaussians needs dim >= 1");
        const RngStream dir_rng(SeedPath{spec.seed, 0, 1, Role::Data});
        std::vector<double> dir(spec.dim);
        double norm = 0.0;
        for (std::size_t j = 0; j < spec.dim; ++j) {
            dir[j] = dir_rng.normal(j);
            norm += dir[j] * dir[j];
        }
        norm = std::sqrt(norm);
        for (double& v : dir) v /= norm;
        d.classes = 2;
        d.features = Matrix(spec.n, spec.dim);
        for (std::size_t i = 0; i < spec.n; ++i) {
            const int y = static_cast<int>(i % 2);
            const double sign = y == 1 ? 1.0 : -1.0;
            for (std::size_t j = 0; j < spec.dim; ++j) {
                d.features(i, j) = sign * spec.margin * dir[j] + rng.normal(i * spec.dim + j);
            }
            d.labels.push_back(y);
        }
    } else if (spec.task == "xor-clusters") {
        if (spec.dim < 2) throw ConfigError("xor-clusters needs dim >= 2");
        d.classes = 2;
        d.features = Matrix(spec.n, spec.dim);
        for (std::size_t i = 0; i < spec.n; ++i) {
            const bool a = (i & 1) != 0;
            const bool b = (i & 2) != 0;
            for (std::size_t j = 0; j < spec.dim; ++j) {
                double centre = 0.0;
                if (j == 0) centre = a ? 2.0 : -2.0;
                if (j == 1) centre = b ? 2.0 : -2.0;
                d.features(i, j) = centre + 0.5 * rng.normal(i * spec.dim + j);
            }
            d.labels.push_back(a != b ? 1 : 0);
        }
    } else if (spec.task == "token-copy") {
        if (spec.vocab < 2 || spec.seq_len == 0) throw ConfigError("token-copy needs vocab >= 2 and seq_len >= 1");
        d.classes = spec.vocab;
        d.seq_len = spec.seq_len;
        for (std::size_t i = 0; i < spec.n; ++i) {
            std::vector<int> seq(spec.seq_len);
            for (std::size_t t = 0; t < spec.seq_len; ++t) {
                seq[t] = static_cast<int>(rng.bits(i * spec.seq_len + t) % spec.vocab);
            }
            d.tokens.insert(d.tokens.end(), seq.begin(), seq.end());
            d.labels.insert(d.labels.end(), seq.rbegin(), seq.rend());
        }
    } else {
        throw ConfigError("unknown task: " + spec.task);
    }
    return d;
}

/// Up to `batch_size` distinct row indices for a given step (partial
/// Fisher-Yates driven by the batch stream).
inline std::vector<std::size_t> sample_rows(std::size_t rows, std::size_t batch_size, std::uint64_t seed,
                                            std::uint64_t step) {
    std::vector<std::size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), 0);
    if (batch_size == 0 || batch_size >= rows) {
        return idx;
    }
    const RngStream rng(SeedPath{seed, step, 0, Role::Batch});
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.bits(i) % (rows - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(batch_size);
    return idx;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_csv(std::ostream& os, const Dataset& d) {
    if (d.token_task()) {
        for (std::size_t t = 0; t < d.seq_len; ++t) os << "tok_" << t << ',';
        for (std::size_t t = 0; t < d.seq_len; ++t) os << "lbl_" << t << (t + 1 < d.seq_len ? "," : "\n");
        for (std::size_t i = 0; i < d.size(); ++i) {
            for (std::size_t t = 0; t < d.seq_len; ++t) os << d.tokens[i * d.seq_len + t] << ',';
            for (std::size_t t = 0; t < d.seq_len; ++t) {
                os << d.labels[i * d.seq_len + t] << (t + 1 < d.seq_len ? "," : "\n");
            }
        }
        return;
    }
    for (std::size_t j = 0; j < d.features.cols; ++j) os << 'f' << j << ',';
    os << "label\n";
    for (std::size_t i = 0; i < d.features.rows; ++i) {
        for (std::size_t j = 0; j < d.features.cols; ++j) os << format_double(d.features(i, j)) << ',';
        os << d.labels[i] << '\n';
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        if (!cell.empty() && cell.back() == '\r') cell.pop_back();
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_number(const std::string& s, std::size_t line) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v)) {
        throw InputError("csv line " + std::to_string(line) + ": bad number '" + s + "'");
    }
    return v;
}

inline int parse_label(const std::string& s, std::size_t line) {
    const double v = parse_number(s, line);
    if (v != std::floor(v) || v < 0) {
        throw InputError("csv line " + std::to_string(line) + ": label must be a non-negative integer");
    }
    return static_cast<int>(v);
}

} // namespace detail

inline Dataset read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) {
        throw InputError("csv is empty");
    }
    const auto header = detail::split_csv_line(line);
    Dataset d;
    std::size_t toks = 0;
    std::size_t lbls = 0;
    for (const auto& h : header) {
        if (h.rfind("tok_", 0) == 0) ++toks;
        if (h.rfind("lbl_", 0) == 0) ++lbls;
    }
    const bool token = toks > 0;
    if (token && (toks != lbls || toks + lbls != header.size())) {
        throw InputError("token csv needs matching tok_/lbl_ columns");
    }
    if (!token && (header.size() < 2 || header.back() != "label")) {
        throw InputError("csv needs feature columns followed by a 'label' column");
    }
    std::vector<double> feats;
    std::size_t rows = 0;
    int max_label = -1;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw InputError("csv line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                             " columns");
        }
        if (token) {
            for (std::size_t t = 0; t < toks; ++t) d.tokens.push_back(detail::parse_label(cells[t], lineno));
            for (std::size_t t = 0; t < toks; ++t) {
                d.labels.push_back(detail::parse_label(cells[toks + t], lineno));
                max_label = std::max(max_label, d.labels.back());
            }
        } else {
            for (std::size_t j = 0; j + 1 < cells.size(); ++j) feats.push_back(detail::parse_number(cells[j], lineno));
            d.labels.push_back(detail::parse_label(cells.back(), lineno));
            max_label = std::max(max_label, d.labels.back());
        }
        ++rows;
    }
    if (rows == 0) {
        throw InputError("csv has no data rows");
    }
    if (token) {
        d.seq_len = toks;
        int max_tok = 0;
        for (int t : d.tokens) max_tok = std::max(max_tok, t);
        d.classes = static_cast<std::size_t>(std::max(max_label, max_tok) + 1);
    } else {
        d.features = Matrix(rows, header.size() - 1, std::move(feats));
        d.classes = static_cast<std::size_t>(max_label + 1);
    }
    return d;
}

inline void save_csv(const std::string& path, const Dataset& d) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RunError("cannot write " + path);
    write_csv(os, d);
}

inline Dataset load_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path);
    return read_csv(is);
}

} // namespace quzo
