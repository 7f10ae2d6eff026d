// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "lorsmerge/cli.hpp"
#include "test_util.hpp"

using namespace lors;
using lors::testing::random_model;
using lors::testing::TempDir;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

Run invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "lorsmerge");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    set_num_threads(0);
    return r;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p) << s;
}

/// base + five finetunes written under `dir`.
void write_models(const std::filesystem::path& dir) {
    const auto base = random_model(1, 80, 72);
    save_checkpoint(base, dir / "base.ckpt");
    std::uint64_t seed = 10;
    for (const char* id : {"ca", "de", "es", "fr", "it"})
        save_checkpoint(lors::testing::perturbed(base, seed++, 0.05f), dir / (std::string("asr-") + id + ".ckpt"));
}

std::string lors_recipe(const std::filesystem::path& dir) {
    std::string s = "plan:\n  name: ml\n  base: " + (dir / "base.ckpt").string() +
                    "\n  method: lors\n  lambda: 0.15\n  layer_filter: {min_dim: 8}\n  models:\n";
    const char* ids[] = {"ca", "de", "es", "fr", "it"};
    const char* rs[] = {"5", "3", "2", "1", "1"};
    const char* ps[] = {"40", "60", "40", "10", "10"};
    for (int i = 0; i < 5; ++i)
        s += std::string("    - {id: ") + ids[i] + ", path: " + (dir / (std::string("asr-") + ids[i] + ".ckpt")).string() +
             ", svp_r: " + rs[i] + ", mp_p: " + ps[i] + "}\n";
    return s;
}

}  // namespace

class HelpGolden : public ::testing::TestWithParam<std::string> {};

TEST_P(HelpGolden, MatchesFile) {
    std::vector<std::string> args;
    if (!GetParam().empty()) args.push_back(GetParam());
    args.push_back("--help");
    const auto r = invoke(args);
    EXPECT_EQ(r.code, 0);
    const auto file = std::filesystem::path(LORSMERGE_GOLDEN_DIR) /
                      ((GetParam().empty() ? std::string("main") : GetParam()) + ".help.txt");
    if (std::getenv("LORSMERGE_UPDATE_GOLDEN")) write_text(file, r.out);
    std::ifstream in(file);
    ASSERT_TRUE(in) << "missing golden file " << file;
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(r.out, ss.str());
}

INSTANTIATE_TEST_SUITE_P(Cli, HelpGolden,
                         ::testing::Values("", "merge", "diff", "inspect", "decompose", "score", "bootstrap", "bench",
                                           "workbench"),
                         [](const auto& info) { return info.param.empty() ? std::string("main") : info.param; });

TEST(Cli, ExitCodes) {
    TempDir dir;
    EXPECT_EQ(invoke({}).code, 1);
    EXPECT_EQ(invoke({"merge", "--bogus"}).code, 1);
    EXPECT_EQ(invoke({"inspect"}).code, 1);  // missing required option
    EXPECT_EQ(invoke({"inspect", "--in", (dir / "missing.ckpt").string()}).code, 2);
    write_text(dir / "junk.ckpt", "not a checkpoint");
    const auto junk = invoke({"inspect", "--in", (dir / "junk.ckpt").string()});
    EXPECT_EQ(junk.code, 2);
    EXPECT_NE(junk.err.find("error:"), std::string::npos);
    write_text(dir / "bad.yaml", "plan:\n  method: nope\n");
    EXPECT_EQ(invoke({"merge", "--recipe", (dir / "bad.yaml").string(), "--out", (dir / "o.ckpt").string()}).code, 1);
    EXPECT_EQ(invoke({"bench", "--shape", "12by4"}).code, 1);
    EXPECT_EQ(invoke({"inspect", "--in", "x", "--format", "json"}).code, 1);
    EXPECT_EQ(invoke({"--threads", "-1", "bench", "--count", "1", "--shape", "4x4"}).code, 1);
}

TEST(Cli, DiffThenUnitMergeReproducesFinetuned) {
    TempDir dir;
    write_models(dir.path());
    ASSERT_EQ(invoke({"diff", "--base", (dir / "base.ckpt").string(), "--model", (dir / "asr-ca.ckpt").string(), "--out",
                   (dir / "tau.ckpt").string()})
                  .code,
              0);
    const auto tau = load_checkpoint(dir / "tau.ckpt");
    EXPECT_TRUE(tau.is_delta());
    write_text(dir / "one.yaml", "plan:\n  name: one\n  base: " + (dir / "base.ckpt").string() +
                                     "\n  method: ta\n  lambda: 1\n  models:\n    - {id: ca, path: " +
                                     (dir / "asr-ca.ckpt").string() + "}\n");
    const auto r = invoke({"merge", "--recipe", (dir / "one.yaml").string(), "--out", (dir / "m.ckpt").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(load_checkpoint(dir / "m.ckpt").same_tensors(load_checkpoint(dir / "asr-ca.ckpt")));
}

TEST(Cli, LorsMergeRecordsConfiguration) {
    TempDir dir;
    write_models(dir.path());
    write_text(dir / "ml.yaml", lors_recipe(dir.path()));
    const auto out = dir / "ml.ckpt";
    const auto r = invoke({"merge", "--recipe", (dir / "ml.yaml").string(), "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = load_checkpoint(out);
    EXPECT_EQ(m.meta().at("merge.method"), "lors");
    EXPECT_EQ(m.meta().at("merge.lambda"), "0.15");
    EXPECT_EQ(m.meta().at("merge.model.de.svp_r"), "3");
    EXPECT_EQ(m.meta().at("merge.model.de.mp_p"), "60");
    EXPECT_EQ(m.meta().at("merge.model.it.mp_p"), "10");
    const auto first = read_file(out);
    ASSERT_EQ(invoke({"merge", "--recipe", (dir / "ml.yaml").string(), "--out", out.string()}).code, 0);
    EXPECT_EQ(read_file(out), first);
}

TEST(Cli, MergeIsThreadInvariant) {
    TempDir dir;
    write_models(dir.path());
    write_text(dir / "ml.yaml", lors_recipe(dir.path()));
    std::string ref;
    for (const char* t : {"1", "4", "8"}) {
        const auto out = dir / (std::string("m") + t + ".ckpt");
        ASSERT_EQ(invoke({"--threads", t, "merge", "--recipe", (dir / "ml.yaml").string(), "--out", out.string()}).code, 0);
        const auto bytes = read_file(out);
        if (ref.empty()) ref = bytes;
        EXPECT_EQ(bytes, ref) << t << " threads";
    }
}

TEST(Cli, ThreadsFromEnvironment) {
    ::setenv("LORSMERGE_THREADS", "3", 1);
    const auto r = invoke({"bench", "--shape", "8x8", "--count", "2", "--format", "csv"});
    ::unsetenv("LORSMERGE_THREADS");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("8x8,2,3,"), std::string::npos) << r.out;
    const auto flag = invoke({"--threads", "2", "bench", "--shape", "8x8", "--count", "2", "--format", "csv"});
    EXPECT_NE(flag.out.find("8x8,2,2,"), std::string::npos) << flag.out;
}

TEST(Cli, InspectFormats) {
    TempDir dir;
    save_checkpoint(random_model(1), dir / "m.ckpt");
    const auto csv = invoke({"inspect", "--in", (dir / "m.ckpt").string(), "--format", "csv"});
    ASSERT_EQ(csv.code, 0);
    EXPECT_EQ(csv.out.substr(0, csv.out.find('\n')), "name,shape,numel,frobenius,max_abs,nonzero");
    EXPECT_NE(csv.out.find("layer.0.weight,\"[8,6]\",48,"), std::string::npos) << csv.out;
    const auto plain = invoke({"inspect", "--in", (dir / "m.ckpt").string()});
    EXPECT_NE(plain.out.find("fingerprint"), std::string::npos);
    EXPECT_EQ(csv.out.find("fingerprint"), std::string::npos);
}

TEST(Cli, DecomposeWritesPrunedCheckpoint) {
    TempDir dir;
    save_checkpoint(random_model(2, 80, 72), dir / "m.ckpt");
    const auto r = invoke({"decompose", "--in", (dir / "m.ckpt").string(), "--svp-r", "5", "--mp-p", "40", "--report",
                        "--out", (dir / "p.ckpt").string(), "--format", "csv"});
    ASSERT_EQ(r.code, 0) << r.err;
    // 5% of 72 rounds to 4; 40% of the 5760 residual entries is 2304
    EXPECT_NE(r.out.find("layer.0.weight,\"[80,72]\",4,2304,"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("layer.0.bias,[80],-,-,-"), std::string::npos) << r.out;
    const auto p = load_checkpoint(dir / "p.ckpt");
    EXPECT_EQ(p.meta().at("decompose.mp_p"), "40");
    EXPECT_EQ(invoke({"decompose", "--in", (dir / "m.ckpt").string(), "--mp-p", "140"}).code, 1);
}

TEST(Cli, ScoreAndBootstrap) {
    TempDir dir;
    write_text(dir / "ref.txt", "the cat sat on the mat\n");
    write_text(dir / "hyp.txt", "the cat sat on mat\n");
    const auto wer = invoke({"score", "--metric", "wer", "--ref", (dir / "ref.txt").string(), "--hyp",
                          (dir / "hyp.txt").string(), "--format", "csv"});
    ASSERT_EQ(wer.code, 0) << wer.err;
    EXPECT_NE(wer.out.find("wer,16.6667,1,"), std::string::npos) << wer.out;
    const auto dn = invoke({"score", "--metric", "wer", "--ref", (dir / "ref.txt").string(), "--hyp",
                         (dir / "hyp.txt").string(), "--pretrained", "20", "--finetuned", "15", "--format", "csv"});
    EXPECT_NE(dn.out.find(",66.67"), std::string::npos) << dn.out;
    EXPECT_EQ(invoke({"score", "--metric", "wer", "--ref", (dir / "ref.txt").string(), "--hyp",
                   (dir / "hyp.txt").string(), "--pretrained", "20"})
                  .code,
              1);
    EXPECT_EQ(invoke({"score", "--metric", "cer", "--ref", "a", "--hyp", "b"}).code, 1);

    std::string scores;
    for (int i = 0; i < 50; ++i) scores += std::to_string(i % 7) + "\n";
    write_text(dir / "a.txt", scores);
    const auto b = invoke({"bootstrap", "--a", (dir / "a.txt").string(), "--b", (dir / "a.txt").string(), "--sample", "50"});
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(b.out, "p=1.000\n");
}

TEST(Cli, WorkbenchReport) {
    TempDir dir;
    write_text(dir / "wb.yaml", R"(experiment:
  seeds: [0]
  tasks: 2
  task: {n_train: 200}
  train: {epochs: 3, lr_grid: [0.1]}
  lambda_grid: [0.5]
  lors_grid: [{svp_r: 25, mp_p: 20}]
  settings: [pretrained, merge:ta]
)");
    const auto out = dir / "r.csv";
    const auto r = invoke({"workbench", "--config", (dir / "wb.yaml").string(), "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = read_file(out);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), bench::kReportHeader);
    const auto again = invoke({"workbench", "--config", (dir / "wb.yaml").string(), "--format", "csv"});
    EXPECT_EQ(again.out, csv);
    EXPECT_EQ(invoke({"workbench", "--config", (dir / "none.yaml").string()}).code, 2);
}
