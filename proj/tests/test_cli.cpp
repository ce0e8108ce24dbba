#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

std::string binary() {
    const char* p = std::getenv("TEST_QUZO_CLI");
    return p ? p : "quzo";
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("quzo_cli_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + binary() + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << text;
    return p;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* kSmallTrain = R"({"data": {"n": 200}, "train": {"steps": 30, "lr": 0.01, "epsilon": 0.01}})";

} // namespace

TEST(Cli, MissingConfigFileExitsTwo) {
    const auto dir = scratch("missing");
    EXPECT_EQ(run("train --config " + (dir / "nope.json").string() + " --out " + dir.string()), 2);
    EXPECT_EQ(run("train --out " + dir.string()), 2);
}

TEST(Cli, UnknownOrMistypedKeysExitTwo) {
    const auto dir = scratch("schema");
    auto cfg = write_config(dir, R"({"train": {"stepz": 10}})");
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string()), 2);
    cfg = write_config(dir, R"({"train": {"steps": "ten"}})");
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string()), 2);
    cfg = write_config(dir, R"({"train": {"optimizer": "adam"}})");
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string()), 2);
    cfg = write_config(dir, R"({"train": {"epsilon": 0}})");
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string()), 2);
    cfg = write_config(dir, "{not json");
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string()), 2);
}

TEST(Cli, UnknownSubcommandExitsTwo) {
    const auto dir = scratch("subcmd");
    const auto cfg = write_config(dir, "{}");
    EXPECT_EQ(run("fly --config " + cfg.string()), 2);
}

TEST(Cli, TrainWritesArtifactsAndIsDeterministic) {
    const auto dir = scratch("train");
    const auto cfg = write_config(dir, kSmallTrain);
    ASSERT_EQ(run("train --config " + cfg.string() + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run("train --config " + cfg.string() + " --out " + (dir / "b").string()), 0);
    for (const char* f : {"train_log.csv", "summary.json", "model.ckpt", "config.resolved.json"}) {
        EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    }
    EXPECT_EQ(slurp(dir / "a" / "train_log.csv"), slurp(dir / "b" / "train_log.csv"));
    EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
    EXPECT_EQ(lines(slurp(dir / "a" / "train_log.csv")), 31u);

    const auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
    for (const char* k : {"final_loss", "final_acc", "clamp_rate", "saturation_rate", "wall_time"}) {
        EXPECT_TRUE(summary.contains(k)) << k;
    }
    const auto resolved = nlohmann::json::parse(slurp(dir / "a" / "config.resolved.json"));
    EXPECT_EQ(resolved["train"]["steps"], 30);
    EXPECT_EQ(resolved["train"]["queries"], 1); // default filled in
    EXPECT_EQ(resolved["run_id"].get<std::string>().size(), 12u);
    EXPECT_EQ(resolved["run_id"], summary["run_id"]);
}

TEST(Cli, SeedFlagChangesRunId) {
    const auto dir = scratch("seed");
    const auto cfg = write_config(dir, kSmallTrain);
    ASSERT_EQ(run("gen-data --config " + cfg.string() + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run("gen-data --config " + cfg.string() + " --seed 9 --out " + (dir / "b").string()), 0);
    const auto a = nlohmann::json::parse(slurp(dir / "a" / "config.resolved.json"));
    const auto b = nlohmann::json::parse(slurp(dir / "b" / "config.resolved.json"));
    EXPECT_NE(a["run_id"], b["run_id"]);
    EXPECT_EQ(b["seed"], 9);
}

TEST(Cli, EnvironmentOverridesConfig) {
    const auto dir = scratch("env");
    const auto cfg = write_config(dir, kSmallTrain);
    ASSERT_EQ(run("train --config " + cfg.string() + " --out " + dir.string(), "QUZO_TRAIN__STEPS=5"), 0);
    EXPECT_EQ(lines(slurp(dir / "train_log.csv")), 6u);
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string(), "QUZO_TRAIN__NOPE=5"), 2);
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string(), "QUZO_TRAIN__STEPS=abc"), 2);
}

TEST(Cli, MissingDatasetIsARunError) {
    const auto dir = scratch("data");
    const auto cfg = write_config(dir, R"({"data": {"path": "/nonexistent/data.csv"}})");
    EXPECT_EQ(run("train --config " + cfg.string() + " --out " + dir.string()), 1);
}

TEST(Cli, GenDataIsDeterministic) {
    const auto dir = scratch("gen");
    const auto cfg = write_config(dir, R"({"data": {"n": 1000, "seed": 7}})");
    ASSERT_EQ(run("gen-data --config " + cfg.string() + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run("gen-data --config " + cfg.string() + " --out " + (dir / "b").string()), 0);
    const auto a = slurp(dir / "a" / "data.csv");
    EXPECT_EQ(a, slurp(dir / "b" / "data.csv"));
    EXPECT_EQ(lines(a), 1001u);

    // The written file trains like the synthetic one.
    const auto cfg2 = write_config(
        dir, R"({"data": {"path": ")" + (dir / "a" / "data.csv").string() + R"("}, "train": {"steps": 5}})");
    EXPECT_EQ(run("train --config " + cfg2.string() + " --out " + (dir / "c").string()), 0);
}

TEST(Cli, BiasSweepEmitsSixOrderedRows) {
    const auto dir = scratch("bias");
    const auto cfg = write_config(dir, R"({"data": {"task": "token-copy", "n": 16},
        "model": {"d_model": 8, "heads": 2, "ffn": 16, "weight_format": "FP32", "activation_format": "FP32"},
        "bias_sweep": {"n": 20, "batch_size": 4}})");
    ASSERT_EQ(run("bias-sweep --config " + cfg.string() + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run("bias-sweep --config " + cfg.string() + " --threads 2 --out " + (dir / "b").string()), 0);
    const auto csv = slurp(dir / "a" / "bias_sweep.csv");
    EXPECT_EQ(csv, slurp(dir / "b" / "bias_sweep.csv"));
    EXPECT_EQ(slurp(dir / "a" / "bias_sweep_long.csv"), slurp(dir / "b" / "bias_sweep_long.csv"));
    EXPECT_EQ(lines(csv), 7u);
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "estimator,bits,n,rel_l2_error,clamp_rate");
    const char* prefixes[] = {"q-rge1,3,", "q-rge2,3,", "q-rge1,4,", "q-rge2,4,", "q-rge1,8,", "q-rge2,8,"};
    for (const char* p : prefixes) {
        std::getline(is, line);
        EXPECT_EQ(line.rfind(p, 0), 0u) << line;
    }
    EXPECT_TRUE(fs::exists(dir / "a" / "bias_sweep.json"));
}

TEST(Cli, DtypeSearchSingleCandidate) {
    const auto dir = scratch("dtype");
    const auto cfg = write_config(dir, R"({"dtype_search": {"candidates": ["FP8_E4M3"]}})");
    ASSERT_EQ(run("dtype-search --config " + cfg.string() + " --out " + dir.string()), 0);
    const auto j = nlohmann::json::parse(slurp(dir / "dtype_search.json"));
    ASSERT_FALSE(j.empty());
    for (const auto& l : j) EXPECT_EQ(l["chosen"], "FP8_E4M3");
}

TEST(Cli, MemReportOnEncoderHasSixRows) {
    const auto dir = scratch("mem");
    const auto cfg = write_config(dir, R"({"data": {"task": "token-copy", "n": 8}})");
    ASSERT_EQ(run("mem-report --config " + cfg.string() + " --out " + dir.string()), 0);
    const auto csv = slurp(dir / "mem_report.csv");
    EXPECT_EQ(lines(csv), 7u);
    for (const char* name : {"fo-sgd,", "mezo,", "fo-8bit,", "fo-4bit,", "quzo-8bit,", "quzo-4bit,"}) {
        EXPECT_NE(csv.find(std::string("\n") + name), std::string::npos) << name;
    }
}

TEST(Cli, BitSweepWritesOneRowPerWidth) {
    const auto dir = scratch("bits");
    const auto cfg = write_config(dir, kSmallTrain);
    ASSERT_EQ(run("bit-sweep --config " + cfg.string() + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run("bit-sweep --config " + cfg.string() + " --out " + (dir / "b").string()), 0);
    const auto csv = slurp(dir / "a" / "bit_sweep.csv");
    EXPECT_EQ(lines(csv), 4u);
    EXPECT_EQ(csv, slurp(dir / "b" / "bit_sweep.csv"));
}
