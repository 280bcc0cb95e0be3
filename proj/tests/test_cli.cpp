// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fqr/cli.hpp"

namespace fqr {
namespace {

namespace fs = std::filesystem;

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"fqr"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() / "fqr_cli_test";
        fs::remove_all(root_);
        fs::create_directories(root_);
        spec_path_ = (root_ / "spec.json").string();
        std::ofstream(spec_path_)
            << R"({"height":32,"width":32,"n_objects_min":1,"n_objects_max":2,"num_classes":3})";
    }
    void TearDown() override { fs::remove_all(root_); }

    std::string write_train_config(const std::string& dataset, const std::string& out_dir,
                                   int steps, const std::string& extra_model = "") {
        const std::string path = (root_ / "config.json").string();
        std::ofstream os(path);
        os << R"({"model":{"num_queries":6,"d_model":16,"fpn_channels":8,"n_stages":2,)"
           << R"("num_classes":3,"roi_size":3,"attn_heads":2,"seed":3)" << extra_model << "},"
           << R"("paths":{"dataset":")" << dataset << R"(","output_dir":")" << out_dir << R"("},)"
           << R"("run":{"steps":)" << steps << R"(,"batch_size":2,"eval_every":0,"seed":5}})";
        return path;
    }

    std::string make_dataset(const std::string& name, int count, int seed = 9) {
        const std::string dir = (root_ / name).string();
        EXPECT_EQ(run_cli({"gen-data", "--spec", spec_path_, "--out", dir, "--count",
                           std::to_string(count), "--seed", std::to_string(seed)}),
                  cli::kOk);
        return dir;
    }

    fs::path root_;
    std::string spec_path_;
};

TEST_F(CliTest, UnknownFlagIsUsageError) {
    EXPECT_EQ(run_cli({"gen-data", "--bogus", "1"}), cli::kUsage);
    EXPECT_EQ(run_cli({"no-such-command"}), cli::kUsage);
}

TEST_F(CliTest, GenDataZeroCountWritesEmptyJsonl) {
    const std::string dir = make_dataset("empty", 0);
    EXPECT_TRUE(fs::exists(fs::path(dir) / "scenes.jsonl"));
    EXPECT_EQ(read_file(fs::path(dir) / "scenes.jsonl"), "");
}

TEST_F(CliTest, GenDataIsIdempotentPerSeed) {
    const std::string d1 = make_dataset("a", 5, 7);
    const std::string d2 = make_dataset("b", 5, 7);
    EXPECT_EQ(read_file(fs::path(d1) / "scenes.jsonl"), read_file(fs::path(d2) / "scenes.jsonl"));
    // Every line references an existing pixmap.
    std::ifstream is(fs::path(d1) / "scenes.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        ++lines;
        const json j = json::parse(line);
        EXPECT_TRUE(fs::exists(fs::path(d1) / j.at("image_ppm").get<std::string>()));
    }
    EXPECT_EQ(lines, 5);
}

TEST_F(CliTest, GenDataRefusesNonEmptyDirWithoutForce) {
    const std::string dir = make_dataset("c", 1);
    EXPECT_EQ(run_cli({"gen-data", "--spec", spec_path_, "--out", dir, "--count", "1"}),
              cli::kValidation);
    EXPECT_EQ(run_cli({"gen-data", "--spec", spec_path_, "--out", dir, "--count", "1", "--force"}),
              cli::kOk);
}

TEST_F(CliTest, GenDataRejectsUnknownSpecKey) {
    const std::string bad = (root_ / "bad_spec.json").string();
    std::ofstream(bad) << R"({"height":32,"width":32,"wat":3})";
    EXPECT_EQ(run_cli({"gen-data", "--spec", bad, "--out", (root_ / "x").string(), "--count", "1"}),
              cli::kValidation);
}

TEST_F(CliTest, TrainZeroStepsWritesInitialCheckpoint) {
    const std::string data = make_dataset("d", 2);
    const std::string out = (root_ / "run0").string();
    const std::string cfg = write_train_config(data, out, 0);
    EXPECT_EQ(run_cli({"train", "--config", cfg}), cli::kOk);
    EXPECT_TRUE(fs::exists(fs::path(out) / "checkpoint.bin"));
    EXPECT_TRUE(fs::exists(fs::path(out) / "metrics.csv"));
}

TEST_F(CliTest, TrainRejectsUnknownConfigKeyWithPath) {
    const std::string data = make_dataset("e", 2);
    const std::string path = (root_ / "bad.json").string();
    std::ofstream(path) << R"({"model":{"num_queries":4,"bogus_key":1},"paths":{"dataset":")"
                        << data << R"("},"run":{"steps":1}})";
    EXPECT_EQ(run_cli({"train", "--config", path}), cli::kValidation);
}

TEST_F(CliTest, TrainIsByteReproducibleAndResumable) {
    const std::string data = make_dataset("f", 4);
    const std::string out1 = (root_ / "r1").string();
    const std::string out2 = (root_ / "r2").string();
    const std::string cfg1 = write_train_config(data, out1, 3);
    EXPECT_EQ(run_cli({"train", "--config", cfg1}), cli::kOk);
    const std::string cfg2 = write_train_config(data, out2, 3);
    EXPECT_EQ(run_cli({"train", "--config", cfg2}), cli::kOk);
    EXPECT_EQ(read_file(fs::path(out1) / "metrics.csv"), read_file(fs::path(out2) / "metrics.csv"));
    EXPECT_EQ(read_file(fs::path(out1) / "checkpoint.bin"),
              read_file(fs::path(out2) / "checkpoint.bin"));

    // Resume from the produced checkpoint: the step counter continues.
    const std::string out3 = (root_ / "r3").string();
    const std::string cfg3 = (root_ / "resume.json").string();
    std::ofstream(cfg3)
        << R"({"model":{"num_queries":6,"d_model":16,"fpn_channels":8,"n_stages":2,)"
        << R"("num_classes":3,"roi_size":3,"attn_heads":2,"seed":3},)"
        << R"("paths":{"dataset":")" << data << R"(","output_dir":")" << out3
        << R"(","checkpoint":")" << (fs::path(out1) / "checkpoint.bin").string() << R"("},)"
        << R"("run":{"steps":2,"batch_size":2,"eval_every":0,"seed":5}})";
    EXPECT_EQ(run_cli({"train", "--config", cfg3}), cli::kOk);
    const ModelConfig unused = checkpoint_config((fs::path(out3) / "checkpoint.bin").string());
    (void)unused;
    Detector det(checkpoint_config((fs::path(out3) / "checkpoint.bin").string()));
    AdamW opt(det.params(), det.config().optim);
    EXPECT_EQ(load_checkpoint((fs::path(out3) / "checkpoint.bin").string(), det, &opt), 5u);
}

TEST_F(CliTest, TrainSetOverridesApply) {
    const std::string data = make_dataset("g", 2);
    const std::string out = (root_ / "r4").string();
    const std::string cfg = write_train_config(data, out, 1);
    EXPECT_EQ(run_cli({"train", "--config", cfg, "--set", "model.n_stages=1"}), cli::kOk);
    const std::string header = read_file(fs::path(out) / "metrics.csv");
    EXPECT_NE(header.find("stage0_loss"), std::string::npos);
    EXPECT_EQ(header.find("stage1_loss"), std::string::npos);
    // Bad override path is a validation error.
    EXPECT_EQ(run_cli({"train", "--config", cfg, "--set", "model.not_a_key=1"}), cli::kValidation);
}

TEST_F(CliTest, EvalInferRecallBenchPipeline) {
    const std::string data = make_dataset("h", 3);
    const std::string out = (root_ / "r5").string();
    const std::string cfg = write_train_config(data, out, 1);
    ASSERT_EQ(run_cli({"train", "--config", cfg}), cli::kOk);
    const std::string ckpt = (fs::path(out) / "checkpoint.bin").string();

    // eval (with delta histograms)
    const std::string eval_csv = (root_ / "eval.csv").string();
    const std::string delta_csv = (root_ / "delta.csv").string();
    EXPECT_EQ(run_cli({"eval", "--checkpoint", ckpt, "--dataset", data, "--out-csv", eval_csv,
                       "--delta-csv", delta_csv}),
              cli::kOk);
    const std::string eval_content = read_file(eval_csv);
    EXPECT_NE(eval_content.find("ap50,"), std::string::npos);
    EXPECT_NE(eval_content.find("map5095,"), std::string::npos);
    EXPECT_NE(read_file(delta_csv).find("summary0,"), std::string::npos);

    // infer with overlays
    const std::string det_jsonl = (root_ / "dets.jsonl").string();
    const std::string ov_dir = (root_ / "overlays").string();
    EXPECT_EQ(run_cli({"infer", "--checkpoint", ckpt, "--dataset", data, "--out-jsonl", det_jsonl,
                       "--overlay-dir", ov_dir}),
              cli::kOk);
    int ppm_count = 0;
    for (const auto& e : fs::directory_iterator(ov_dir)) {
        if (e.path().extension() == ".ppm") ++ppm_count;
    }
    EXPECT_EQ(ppm_count, 3);
    std::ifstream dj(det_jsonl);
    std::string line;
    int det_lines = 0;
    while (std::getline(dj, line)) {
        const json j = json::parse(line);
        EXPECT_EQ(j.at("detections").size(), 6u); // num_queries
        ++det_lines;
    }
    EXPECT_EQ(det_lines, 3);

    // recall
    const std::string recall_csv = (root_ / "recall.csv").string();
    EXPECT_EQ(
        run_cli({"recall", "--checkpoint", ckpt, "--dataset", data, "--out-csv", recall_csv}),
        cli::kOk);
    EXPECT_NE(read_file(recall_csv).find("recall,0.5,"), std::string::npos);

    // bench from the checkpoint (small run count)
    const std::string bench_csv = (root_ / "bench.csv").string();
    EXPECT_EQ(run_cli({"bench", "--checkpoint", ckpt, "--out-csv", bench_csv, "--runs", "10",
                       "--warmup", "2", "--image-size", "32"}),
              cli::kOk);
    const std::string bench_content = read_file(bench_csv);
    EXPECT_NE(bench_content.find("backbone,"), std::string::npos);
    EXPECT_NE(bench_content.find("query_generation,"), std::string::npos);
    EXPECT_NE(bench_content.find("decoder_total,"), std::string::npos);

    // missing checkpoint rejected
    EXPECT_EQ(run_cli({"eval", "--checkpoint", (root_ / "nope.bin").string(), "--dataset", data,
                       "--out-csv", eval_csv}),
              cli::kValidation);
}

TEST_F(CliTest, EvalOnEmptyDatasetRejected) {
    const std::string data = make_dataset("i", 2);
    const std::string empty = make_dataset("j", 0);
    const std::string out = (root_ / "r6").string();
    const std::string cfg = write_train_config(data, out, 0);
    ASSERT_EQ(run_cli({"train", "--config", cfg}), cli::kOk);
    EXPECT_EQ(run_cli({"eval", "--checkpoint", (fs::path(out) / "checkpoint.bin").string(),
                       "--dataset", empty, "--out-csv", (root_ / "x.csv").string()}),
              cli::kValidation);
}

TEST_F(CliTest, GradcheckSubcommandPasses) {
    EXPECT_EQ(run_cli({"gradcheck", "--seeds", "1"}), cli::kOk);
}

} // namespace
} // namespace fqr
