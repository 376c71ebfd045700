// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "qexit/pipeline.hpp"

using namespace qexit;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(seed = 5
[model]
num_layers = 3
d_model = 16
num_heads = 2
d_ff = 32
exit_layers = 1, 2
exit_hidden = 8
lora_rank = 2
lora_alpha = 4
block_size = 16
[train]
pretrain_epochs = 2
finetune_epochs = 2
n_samples = 120
n_val_samples = 40
[eval]
n_episodes = 12
n_val_episodes = 6
max_steps = 40
seeds = 1, 2
[maps]
count = 3
width = 7
height = 7
)";

class Pipeline : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("qexit_pipeline_" + std::string(info->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        cfg_ = parse_run_config(std::string(kTinyConfig) + "dir = " + path("maps") + "\n");
        std::ofstream(path("tiny.ini")) << kTinyConfig << "dir = " << path("maps") << "\n";
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    int cli(const std::string& args) const {
        const std::string cmd = std::string(QEXIT_CLI_PATH) + " " + args + " > " + path("cli.log") + " 2>&1";
        const int rc = std::system(cmd.c_str());
        return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    }

    void train_all() {
        cmd_genmaps(cfg_, path("maps"), log_);
        cmd_pretrain(cfg_, path("maps"), path("dense.bin"), path("pre.csv"), log_);
        cmd_quantize(cfg_, path("dense.bin"), path("q.bin"), log_);
        cmd_finetune(cfg_, path("maps"), path("q.bin"), path("ft.bin"), path("ft.csv"), log_);
    }

    static std::string slurp(const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        return s.str();
    }

    static std::size_t lines(const std::string& p) {
        const std::string s = slurp(p);
        return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
    }

    fs::path dir_;
    RunConfig cfg_;
    std::ostringstream log_;
};

}  // namespace

TEST_F(Pipeline, GenmapsIsReproducibleAndReloads) {
    const auto paths = cmd_genmaps(cfg_, path("maps"), log_);
    ASSERT_EQ(paths.size(), 3u);
    EXPECT_EQ(fs::path(paths[0]).filename(), "map_000.txt");
    const std::string first = slurp(paths[2]);
    cmd_genmaps(cfg_, path("maps"), log_);
    EXPECT_EQ(slurp(paths[2]), first);
    const auto maps = load_maps(path("maps"));
    ASSERT_EQ(maps.size(), 3u);
    for (std::size_t i = 0; i < maps.size(); ++i) EXPECT_EQ(maps[i], make_config_map(cfg_.maps, i));
}

TEST_F(Pipeline, MissingMapsIsDataError) {
    EXPECT_THROW(load_maps(path("nope")), DataError);
    fs::create_directories(path("empty"));
    EXPECT_THROW(load_maps(path("empty")), DataError);
    EXPECT_EQ(cli("pretrain --config " + path("tiny.ini") + " --maps " + path("nope") + " --out " + path("x.bin")), 2);
    EXPECT_FALSE(fs::exists(path("x.bin")));
}

TEST_F(Pipeline, FullChain) {
    train_all();
    // One row per epoch and split plus the header.
    EXPECT_EQ(lines(path("pre.csv")), 1u + 2u * 2u);
    EXPECT_EQ(lines(path("ft.csv")), 1u + 2u * 2u);
    EXPECT_EQ(slurp(path("pre.csv")).substr(0, 47), "epoch,split,loss,acc_exit_1,acc_exit_2,acc_fina");

    const auto q = read_file_bytes(path("q.bin"));
    const auto ft = read_file_bytes(path("ft.bin"));
    EXPECT_EQ(base_payload_bytes(q), base_payload_bytes(ft));
    const auto tuned = deserialize_model<float>(ft);
    EXPECT_EQ(tuned.mode, ModelMode::quantized);
    double b_norm = 0.0;
    for (const auto& blk : tuned.blocks) {
        for (float v : blk.wq.lora->b.data()) b_norm += std::abs(v);
        for (float v : blk.wv.lora->b.data()) b_norm += std::abs(v);
    }
    EXPECT_GT(b_norm, 0.0);

    EXPECT_THROW(cmd_quantize(cfg_, path("q.bin"), path("qq.bin"), log_), DataError);
    EXPECT_THROW(cmd_finetune(cfg_, path("maps"), path("dense.bin"), path("x.bin"), "", log_), DataError);

    const EvalReport full = cmd_eval(cfg_, path("maps"), path("ft.bin"), kFullDepthTau, path("eval.csv"), log_);
    ASSERT_EQ(full.per_seed.size(), 2u);
    for (const auto& m : full.per_seed) {
        EXPECT_EQ(m.exit_ratio, 0.0);
        EXPECT_EQ(m.n_episodes, 12u);
    }
    EXPECT_EQ(lines(path("eval.csv")), 3u);
    const EvalReport cal = cmd_eval(cfg_, path("maps"), path("ft.bin"), std::nullopt, "", log_);
    EXPECT_TRUE(cal.calibrated);
    EXPECT_NE(std::find(cfg_.eval.tau_grid.begin(), cfg_.eval.tau_grid.end(), cal.tau), cfg_.eval.tau_grid.end());

    const SweepResult sw =
        cmd_sweep(cfg_, path("maps"), path("ft.bin"), path("dense.bin"), path("sweep.csv"), path("abl.csv"), log_);
    EXPECT_EQ(sw.sweep.size(), 19u);
    EXPECT_EQ(lines(path("sweep.csv")), 20u);
    ASSERT_EQ(sw.ablation.size(), 4u);
    EXPECT_EQ(sw.ablation[0].name, "baseline");
    EXPECT_EQ(sw.ablation[3].name, "quant_dee");
    EXPECT_EQ(sw.ablation[0].metrics.exit_ratio, 0.0);
    EXPECT_EQ(sw.ablation[1].metrics.exit_ratio, 0.0);
    EXPECT_EQ(lines(path("abl.csv")), 5u);
    EXPECT_THROW(cmd_sweep(cfg_, path("maps"), path("dense.bin"), path("dense.bin"), "", "", log_), DataError);
}

TEST_F(Pipeline, SameSeedSameBytesDifferentSeedDifferentBytes) {
    cmd_genmaps(cfg_, path("maps"), log_);
    cmd_pretrain(cfg_, path("maps"), path("a.bin"), path("a.csv"), log_);
    cmd_pretrain(cfg_, path("maps"), path("b.bin"), path("b.csv"), log_);
    EXPECT_EQ(slurp(path("a.bin")), slurp(path("b.bin")));
    EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
    RunConfig other = cfg_;
    other.seed = 6;
    cmd_pretrain(other, path("maps"), path("c.bin"), "", log_);
    EXPECT_NE(slurp(path("a.bin")), slurp(path("c.bin")));
}

TEST_F(Pipeline, CliExitCodes) {
    const std::string c = " --config " + path("tiny.ini");
    EXPECT_EQ(cli(""), 1);
    EXPECT_EQ(cli("bogus"), 1);
    EXPECT_EQ(cli("--help"), 0);
    EXPECT_EQ(cli("pretrain" + c), 1);  // --out is required
    EXPECT_EQ(cli("genmaps --config " + path("missing.ini")), 1);
    std::ofstream(path("bad.ini")) << "[model]\nbogus = 3\n";
    EXPECT_EQ(cli("genmaps --config " + path("bad.ini")), 1);
    EXPECT_EQ(cli("eval" + c + " --weights w.bin --tau 0.3 --full-depth"), 1);
    EXPECT_EQ(cli("genmaps" + c), 0);
    EXPECT_TRUE(fs::exists(path("maps/map_002.txt")));
    std::ofstream(path("junk.bin")) << "not a weight file";
    EXPECT_EQ(cli("eval" + c + " --weights " + path("junk.bin")), 2);
    EXPECT_EQ(cli("quantize" + c + " --in " + path("absent.bin") + " --out " + path("o.bin")), 2);
}

TEST_F(Pipeline, CliMatchesLibrary) {
    const std::string c = " --config " + path("tiny.ini");
    ASSERT_EQ(cli("genmaps" + c), 0);
    ASSERT_EQ(cli("pretrain" + c + " --out " + path("cli.bin") + " --csv " + path("cli.csv")), 0);
    cmd_pretrain(cfg_, path("maps"), path("lib.bin"), path("lib.csv"), log_);
    EXPECT_EQ(slurp(path("cli.bin")), slurp(path("lib.bin")));
    EXPECT_EQ(slurp(path("cli.csv")), slurp(path("lib.csv")));
    ASSERT_EQ(cli("pretrain" + c + " --seed 6 --out " + path("cli6.bin")), 0);
    EXPECT_NE(slurp(path("cli6.bin")), slurp(path("lib.bin")));
}
