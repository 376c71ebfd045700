// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include "qexit/config.hpp"

using namespace qexit;

TEST(Config, EmptyTextGivesDefaults) {
    const RunConfig c = parse_run_config(std::string());
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.model, ModelConfig{});
    EXPECT_EQ(c.eval.tau_grid.size(), 19u);
    EXPECT_DOUBLE_EQ(c.eval.tau_grid.front(), 0.05);
    EXPECT_DOUBLE_EQ(c.eval.tau_grid.back(), 0.95);
    EXPECT_EQ(c.eval.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
    EXPECT_TRUE(c.train.pretrain_exit_heads);
    EXPECT_EQ(c.quantize.scheme, QuantScheme::nf4);
}

TEST(Config, DeskFileMatchesDefaults) {
    const RunConfig c = load_run_config(QEXIT_SOURCE_DIR "/configs/desk.ini");
    const RunConfig d;
    EXPECT_EQ(c.model, d.model);
    EXPECT_EQ(c.eval.tau_grid, d.eval.tau_grid);
    EXPECT_EQ(c.train.n_samples, d.train.n_samples);
    EXPECT_EQ(c.maps.count, 20u);
    EXPECT_EQ(c.maps.width, 15);
}

TEST(Config, ParsesSectionsAndLists) {
    const RunConfig c = parse_run_config(
        "seed = 7\n[model]\nnum_layers = 4\nexit_layers = 1, 3\n[train]\nexit_alphas = 0.5,0.25\n"
        "pretrain_exit_heads = false\n[eval]\ntau_grid = 0.1, 0.2\nseeds = 9\n[quantize]\nscheme = uniform8\n"
        "all_projections = true\n");
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.model.num_layers, 4u);
    EXPECT_EQ(c.model.exit_layers, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(c.train.exit_alphas, (std::vector<double>{0.5, 0.25}));
    EXPECT_FALSE(c.train.pretrain_exit_heads);
    EXPECT_EQ(c.eval.tau_grid, (std::vector<double>{0.1, 0.2}));
    EXPECT_EQ(c.eval.seeds, (std::vector<std::uint64_t>{9}));
    EXPECT_EQ(c.quantize.scheme, QuantScheme::uniform8);
    EXPECT_TRUE(c.quantize.all_projections);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(parse_run_config("[model]\nbogus = 1\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[nosection]\nseed = 1\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[train]\nlr = fast\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[train]\nbatch_size = -3\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[train]\npretrain_exit_heads = maybe\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[quantize]\nscheme = int3\n"), StructuralError);
    EXPECT_THROW(load_run_config("/nonexistent/qexit.ini"), StructuralError);
}

TEST(Config, ValidationRejectsInconsistentValues) {
    EXPECT_THROW(parse_run_config("[maps]\nwall_density = 0.5\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[model]\nd_model = 30\nnum_heads = 4\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[model]\nexit_layers = 6\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[model]\nexit_layers = 4, 2\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[train]\nexit_alphas = 0.5\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[train]\nbatch_size = 0\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[train]\nperturb_prob = 1.5\n"), StructuralError);
    EXPECT_THROW(parse_run_config("[eval]\nmax_steps = 0\n"), StructuralError);
    EXPECT_NO_THROW(parse_run_config("[maps]\nwall_density = 0.4\n"));
}

TEST(Config, SeedsArePurposeSeparated) {
    RunConfig c;
    EXPECT_NE(c.seed_for("data.train"), c.seed_for("data.val"));
    EXPECT_EQ(c.seed_for("data.train"), derive_seed(42, "data.train"));
    c.seed = 43;
    EXPECT_NE(c.seed_for("data.train"), derive_seed(42, "data.train"));
}
