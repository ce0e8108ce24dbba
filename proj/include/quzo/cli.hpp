#pragma once

// Command-line front end. Configuration is a JSON document merged onto
// the defaults below; unknown keys and mistyped values are rejected.
// Environment variables QUZO_<SECTION>__<KEY> override config keys, e.g.
// QUZO_TRAIN__LR=0.01 or QUZO_SEED=3. Values are parsed as JSON when
// possible, otherwise taken as strings.
//
// Exit codes: 0 success, 1 run error, 2 invalid or missing configuration.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "quzo/analysis.hpp"
#include "quzo/checkpoint.hpp"
#include "quzo/data.hpp"
#include "quzo/model.hpp"
#include "quzo/trainer.hpp"

extern char** environ;

namespace quzo::cli {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline ojson default_config() {
    return ojson::parse(R"({
  "seed": 0,
  "threads": 1,
  "out": null,
  "data": {
    "task": "two-gaussians",
    "path": null,
    "n": 1000,
    "seed": 0,
    "dim": 8,
    "margin": 4.0,
    "seq_len": 8,
    "vocab": 8
  },
  "model": {
    "kind": "auto",
    "checkpoint": null,
    "hidden": [16],
    "activation": "relu",
    "d_model": 64,
    "heads": 4,
    "ffn": 128,
    "blocks": 1,
    "weight_format": "INT8",
    "activation_format": "INT8"
  },
  "train": {
    "steps": 1000,
    "lr": 0.001,
    "schedule": "constant",
    "epsilon": 0.001,
    "queries": 1,
    "batch_size": 32,
    "perturbation_format": "INT8",
    "optimizer": "quzo",
    "accumulation_steps": 1,
    "weight_decay": 0.0,
    "eval_every": 0,
    "mu_limit": 1000000.0,
    "lora": {"enabled": false, "rank": 8, "alpha": 1.0, "format": "FP32"}
  },
  "bias_sweep": {"bits": [3, 4, 8], "n": 1000, "epsilon": 0.001, "batch_size": 16},
  "dtype_search": {"candidates": ["INT4", "FP4_E2M1"]},
  "mem_report": {"examples": 32},
  "bit_sweep": {"bits": [2, 4, 8]},
  "reports": {"checkpoint": true, "long_csv": true}
})");
}

namespace detail {

inline std::string join(const std::vector<std::string>& path) {
    std::string s;
    for (const auto& p : path) s += (s.empty() ? "" : ".") + p;
    return s;
}

/// Checks that `v` may replace default `d`. Nullable defaults take null
/// or a string.
inline void check_type(const ojson& d, const ojson& v, const std::vector<std::string>& path) {
    const std::string where = join(path);
    if (d.is_null()) {
        if (!v.is_null() && !v.is_string()) throw ConfigError(where + ": expected a string or null");
    } else if (d.is_boolean()) {
        if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
    } else if (d.is_number_integer()) {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
            throw ConfigError(where + ": expected a non-negative integer");
        }
    } else if (d.is_number()) {
        if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if (d.is_string()) {
        if (!v.is_string()) throw ConfigError(where + ": expected a string");
    } else if (d.is_array()) {
        if (!v.is_array()) throw ConfigError(where + ": expected an array");
        const ojson& proto = d.empty() ? ojson() : d.front();
        for (const auto& e : v) {
            if (!proto.is_null()) check_type(proto, e, path);
        }
    } else if (d.is_object()) {
        if (!v.is_object()) throw ConfigError(where + ": expected an object");
    }
}

inline void merge(ojson& base, const ojson& over, std::vector<std::string>& path) {
    if (!over.is_object()) throw ConfigError((path.empty() ? "config" : join(path)) + ": expected an object");
    for (auto it = over.begin(); it != over.end(); ++it) {
        path.push_back(it.key());
        if (!base.contains(it.key())) throw ConfigError("unknown config key: " + join(path));
        ojson& slot = base[it.key()];
        if (slot.is_object()) {
            merge(slot, it.value(), path);
        } else {
            check_type(slot, it.value(), path);
            slot = it.value();
        }
        path.pop_back();
    }
}

inline std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::optional<QuantFormat> format_or_none(const std::string& name) {
    if (name == "FP32") return std::nullopt;
    return QuantFormat::parse(name);
}

} // namespace detail

/// Applies QUZO_* environment overrides on top of `cfg`.
inline void apply_env(ojson& cfg, char** env) {
    std::vector<std::pair<std::string, std::string>> vars;
    for (char** e = env; e && *e; ++e) {
        const std::string kv(*e);
        if (!kv.starts_with("QUZO_")) continue;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        vars.emplace_back(kv.substr(5, eq - 5), kv.substr(eq + 1));
    }
    std::sort(vars.begin(), vars.end());
    for (const auto& [key, text] : vars) {
        std::vector<std::string> parts;
        std::size_t start = 0;
        while (true) {
            const auto pos = key.find("__", start);
            parts.push_back(detail::lower(key.substr(start, pos - start)));
            if (pos == std::string::npos) break;
            start = pos + 2;
        }
        ojson value = ojson::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        ojson patch = value;
        for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = ojson{{*it, patch}};
        std::vector<std::string> path;
        try {
            detail::merge(cfg, patch, path);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("environment QUZO_") + key + ": " + e.what());
        }
    }
}

inline ojson load_config(const std::string& path) {
    ojson cfg = default_config();
    if (path.empty()) return cfg;
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    ojson user = ojson::parse(is, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
    std::vector<std::string> p;
    detail::merge(cfg, user, p);
    return cfg;
}

/// Stable id over everything that affects results.
inline std::string run_id(const std::string& command, const ojson& cfg) {
    ojson c = cfg;
    c.erase("out");
    c.erase("threads");
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << detail::fnv1a(command + "\n" + c.dump());
    return os.str().substr(0, 12);
}

inline Dataset load_dataset(const ojson& cfg) {
    const auto& d = cfg["data"];
    if (!d["path"].is_null()) return load_csv(d["path"].get<std::string>());
    SyntheticSpec s;
    s.task = d["task"].get<std::string>();
    s.n = d["n"].get<std::size_t>();
    s.seed = d["seed"].get<std::uint64_t>();
    s.dim = d["dim"].get<std::size_t>();
    s.margin = d["margin"].get<double>();
    s.seq_len = d["seq_len"].get<std::size_t>();
    s.vocab = d["vocab"].get<std::size_t>();
    return gen_synthetic(s);
}

inline ModelGraph build_model(const ojson& cfg, const Dataset& data) {
    const auto& m = cfg["model"];
    if (!m["checkpoint"].is_null()) return load_checkpoint(m["checkpoint"].get<std::string>());
    std::string kind = m["kind"].get<std::string>();
    if (kind == "auto") kind = data.token_task() ? "encoder" : "mlp";
    const auto wf = detail::format_or_none(m["weight_format"].get<std::string>());
    const auto af = detail::format_or_none(m["activation_format"].get<std::string>());
    const auto seed = cfg["seed"].get<std::uint64_t>();
    if (kind == "mlp") {
        if (data.token_task()) throw ConfigError("model.kind mlp needs a dense dataset");
        MlpSpec s;
        s.dims.push_back(data.features.cols);
        for (const auto& h : m["hidden"]) s.dims.push_back(h.get<std::size_t>());
        s.dims.push_back(data.classes);
        s.activation = parse_activation(m["activation"].get<std::string>());
        s.weight_format = wf;
        s.activation_format = af;
        s.seed = seed;
        return make_mlp(s);
    }
    if (kind == "encoder") {
        if (!data.token_task()) throw ConfigError("model.kind encoder needs a token dataset");
        EncoderSpec s;
        s.vocab = data.classes;
        s.seq_len = data.seq_len;
        s.d_model = m["d_model"].get<std::size_t>();
        s.heads = m["heads"].get<std::size_t>();
        s.ffn = m["ffn"].get<std::size_t>();
        s.blocks = m["blocks"].get<std::size_t>();
        s.weight_format = wf;
        s.activation_format = af;
        s.seed = seed;
        return make_encoder(s);
    }
    throw ConfigError("model.kind must be auto, mlp or encoder");
}

inline TrainConfig train_config(const ojson& cfg) {
    const auto& t = cfg["train"];
    TrainConfig c;
    c.steps = t["steps"].get<std::size_t>();
    c.lr = t["lr"].get<double>();
    c.schedule = parse_schedule(t["schedule"].get<std::string>());
    c.epsilon = t["epsilon"].get<double>();
    c.queries = t["queries"].get<std::size_t>();
    c.batch_size = t["batch_size"].get<std::size_t>();
    c.perturbation_format = detail::format_or_none(t["perturbation_format"].get<std::string>());
    c.optimizer = parse_optimizer(t["optimizer"].get<std::string>());
    c.accumulation_steps = t["accumulation_steps"].get<std::size_t>();
    c.weight_decay = t["weight_decay"].get<double>();
    c.eval_every = t["eval_every"].get<std::size_t>();
    c.mu_limit = t["mu_limit"].get<double>();
    c.seed = cfg["seed"].get<std::uint64_t>();
    const auto& l = t["lora"];
    c.lora.enabled = l["enabled"].get<bool>();
    c.lora.rank = l["rank"].get<std::size_t>();
    c.lora.alpha = l["alpha"].get<double>();
    c.lora.format = detail::format_or_none(l["format"].get<std::string>());
    c.validate();
    return c;
}

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw RunError("cannot write " + p.string());
    os << text;
    if (!os) throw RunError("write failed for " + p.string());
}

template <typename Fn>
void write_with(const fs::path& p, Fn&& fn) {
    std::ostringstream os;
    fn(os);
    write_text(p, os.str());
}

inline ojson nullable(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

struct Context {
    std::string command;
    ojson cfg;
    fs::path out;
    std::string id;
    std::ostream* log = &std::cerr;
};

inline void cmd_train(const Context& ctx) {
    const Dataset data = load_dataset(ctx.cfg);
    const TrainConfig tc = train_config(ctx.cfg);
    const ModelGraph model = build_model(ctx.cfg, data);
    const TrainResult r = train(model, data, tc);
    for (const auto& w : r.log.warnings) *ctx.log << "warning: " << w << '\n';
    write_with(ctx.out / "train_log.csv", [&](std::ostream& os) { write_log_csv(os, r.log); });
    ojson s;
    s["run_id"] = ctx.id;
    s["final_loss"] = nullable(r.final_loss);
    s["final_acc"] = nullable(r.final_accuracy);
    s["clamp_rate"] = r.clamp_rate;
    s["saturation_rate"] = r.saturation_rate;
    s["wall_time"] = r.wall_time;
    s["warnings"] = r.log.warnings;
    write_text(ctx.out / "summary.json", s.dump(2) + "\n");
    if (ctx.cfg["reports"]["checkpoint"].get<bool>()) save_checkpoint((ctx.out / "model.ckpt").string(), r.model);
}

inline void cmd_bias_sweep(const Context& ctx) {
    const Dataset data = load_dataset(ctx.cfg);
    const ModelGraph model = build_model(ctx.cfg, data);
    const auto& b = ctx.cfg["bias_sweep"];
    BiasSweepOptions opt;
    opt.bits = b["bits"].get<std::vector<int>>();
    opt.n = b["n"].get<std::size_t>();
    opt.epsilon = b["epsilon"].get<double>();
    opt.seed = ctx.cfg["seed"].get<std::uint64_t>();
    opt.threads = ctx.cfg["threads"].get<std::size_t>();
    std::vector<std::size_t> rows(std::min(b["batch_size"].get<std::size_t>(), data.size()));
    std::iota(rows.begin(), rows.end(), 0);
    const auto r = bias_sweep(model, data.batch(rows), opt);
    write_with(ctx.out / "bias_sweep.csv", [&](std::ostream& os) { write_bias_csv(os, r); });
    if (ctx.cfg["reports"]["long_csv"].get<bool>()) {
        write_with(ctx.out / "bias_sweep_long.csv", [&](std::ostream& os) { write_bias_long_csv(os, r); });
    }
    write_text(ctx.out / "bias_sweep.json", to_json(r).dump(2) + "\n");
}

inline void cmd_dtype_search(const Context& ctx) {
    const Dataset data = load_dataset(ctx.cfg);
    ojson c = ctx.cfg;
    // Search runs on the real-valued weights.
    if (c["model"]["checkpoint"].is_null()) c["model"]["weight_format"] = "FP32";
    const ModelGraph model = build_model(c, data);
    std::vector<QuantFormat> cands;
    for (const auto& n : ctx.cfg["dtype_search"]["candidates"]) cands.push_back(QuantFormat::parse(n.get<std::string>()));
    if (cands.empty()) throw ConfigError("dtype_search.candidates must not be empty");
    const auto r = datatype_search(model, cands);
    write_with(ctx.out / "dtype_search.csv", [&](std::ostream& os) { write_dtype_csv(os, r); });
    write_text(ctx.out / "dtype_search.json", to_json(r).dump(2) + "\n");
}

inline void cmd_mem_report(const Context& ctx) {
    const Dataset data = load_dataset(ctx.cfg);
    const ModelGraph model = build_model(ctx.cfg, data);
    const auto rows = memory_report(model, ctx.cfg["mem_report"]["examples"].get<std::size_t>());
    write_with(ctx.out / "mem_report.csv", [&](std::ostream& os) { write_memory_csv(os, rows); });
    write_text(ctx.out / "mem_report.json", to_json(rows).dump(2) + "\n");
}

inline void cmd_gen_data(const Context& ctx) {
    const Dataset data = load_dataset(ctx.cfg);
    write_with(ctx.out / "data.csv", [&](std::ostream& os) { write_csv(os, data); });
}

inline void cmd_bit_sweep(const Context& ctx) {
    const Dataset data = load_dataset(ctx.cfg);
    const TrainConfig tc = train_config(ctx.cfg);
    const ModelGraph model = build_model(ctx.cfg, data);
    const auto bits = ctx.cfg["bit_sweep"]["bits"].get<std::vector<int>>();
    const auto r = perturbation_bit_sweep(model, data, bits, tc);
    write_with(ctx.out / "bit_sweep.csv", [&](std::ostream& os) { write_bit_sweep_csv(os, r); });
    ojson j;
    j["spread"] = r.spread;
    j["rows"] = ojson::array();
    for (const auto& row : r.rows) {
        j["rows"].push_back({{"perturbation_bits", row.bits},
                             {"final_accuracy", nullable(row.final_accuracy)},
                             {"final_loss", nullable(row.final_loss)}});
    }
    write_text(ctx.out / "bit_sweep.json", j.dump(2) + "\n");
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr,
               char** env = environ) {
    CLI::App app{"Quantized zeroth-order training experiments"};
    app.require_subcommand(1);
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    app.add_option("--config", config_path, "JSON config file")->required();
    app.add_option("--out", out_dir, "output directory (default runs/<run id>)");
    app.add_option("--seed", seed, "run seed");
    app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    const std::vector<std::pair<std::string, std::string>> commands{
        {"train", "train a model and write log, summary and checkpoint"},
        {"bias-sweep", "estimator error of Q-RGE1/Q-RGE2 vs full-precision RGE"},
        {"dtype-search", "per-layer MSE search over candidate formats"},
        {"mem-report", "memory expressions for six optimizer configurations"},
        {"gen-data", "write the configured dataset as CSV"},
        {"bit-sweep", "final accuracy across perturbation bit widths"},
    };
    for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    Context ctx;
    ctx.command = app.get_subcommands().front()->get_name();
    ctx.log = &err;
    try {
        ctx.cfg = load_config(config_path);
        apply_env(ctx.cfg, env);
        if (seed) ctx.cfg["seed"] = *seed;
        if (threads) ctx.cfg["threads"] = *threads;
        if (!out_dir.empty()) ctx.cfg["out"] = out_dir;
        if (ctx.command == "train" || ctx.command == "bit-sweep") train_config(ctx.cfg);
        ctx.id = run_id(ctx.command, ctx.cfg);
        ctx.out = ctx.cfg["out"].is_null() ? fs::path("runs") / ctx.id : fs::path(ctx.cfg["out"].get<std::string>());
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    }
    try {
        fs::create_directories(ctx.out);
        ojson resolved = ctx.cfg;
        resolved["command"] = ctx.command;
        resolved["run_id"] = ctx.id;
        write_text(ctx.out / "config.resolved.json", resolved.dump(2) + "\n");
        if (ctx.command == "train") cmd_train(ctx);
        if (ctx.command == "bias-sweep") cmd_bias_sweep(ctx);
        if (ctx.command == "dtype-search") cmd_dtype_search(ctx);
        if (ctx.command == "mem-report") cmd_mem_report(ctx);
        if (ctx.command == "gen-data") cmd_gen_data(ctx);
        if (ctx.command == "bit-sweep") cmd_bit_sweep(ctx);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "run error: " << e.what() << '\n';
        return 1;
    }
    out << ctx.id << ' ' << ctx.out.string() << '\n';
    return 0;
}

} // namespace quzo::cli
