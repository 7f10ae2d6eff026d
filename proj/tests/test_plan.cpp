// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <regex>

#include <gtest/gtest.h>

#include "lorsmerge/checkpoint.hpp"
#include "lorsmerge/plan.hpp"
#include "test_util.hpp"

using namespace lors;
using lors::testing::perturbed;
using lors::testing::random_model;
using lors::testing::TempDir;

namespace {

const std::vector<std::string> kLangs = {"ca", "de", "es", "fr", "it"};

/// base.ckpt plus asr_<lang>.ckpt and st_<lang>.ckpt for every language.
struct Fixture {
    TempDir dir;
    TensorMap base = random_model(1, 80, 72);

    Fixture() {
        save_checkpoint(base, dir / "base.ckpt");
        for (std::size_t i = 0; i < kLangs.size(); ++i) {
            save_checkpoint(perturbed(base, 100 + i, 0.05f), dir / ("asr_" + kLangs[i] + ".ckpt"));
            save_checkpoint(perturbed(base, 200 + i, 0.05f), dir / ("st_" + kLangs[i] + ".ckpt"));
        }
    }

    std::filesystem::path write(const std::string& name, const std::string& text) {
        const auto p = dir / name;
        std::ofstream(p) << text;
        return p;
    }
};

std::string five_lang_lors() {
    return R"(plan:
  name: ml
  base: base.ckpt
  method: lors
  lambda: 0.15
  models:
    - {id: ca, path: asr_ca.ckpt, svp_r: 5, mp_p: 40}
    - {id: de, path: asr_de.ckpt, svp_r: 3, mp_p: 60}
    - {id: es, path: asr_es.ckpt, svp_r: 2, mp_p: 40}
    - {id: fr, path: asr_fr.ckpt, svp_r: 1, mp_p: 10}
    - {id: it, path: asr_it.ckpt, svp_r: 1, mp_p: 10}
)";
}

/// MT merges per language feeding one ML merge, or the reverse.
std::string two_level(bool mt_first, const std::string& method) {
    std::ostringstream s;
    s << "plan:\n  name: root\n  base: base.ckpt\n  method: " << method << "\n  lambda: 0.5\n  children:\n";
    if (mt_first) {
        for (const auto& l : kLangs)
            s << "    - name: " << l << "\n      base: base.ckpt\n      method: ta\n      lambda: 0.5\n      models:\n"
              << "        - {id: asr, path: asr_" << l << ".ckpt}\n        - {id: st, path: st_" << l << ".ckpt}\n";
    } else {
        for (const char* task : {"asr", "st"}) {
            s << "    - name: " << task << "\n      base: base.ckpt\n      method: ta\n      lambda: 0.3\n      models:\n";
            for (const auto& l : kLangs) s << "        - {id: " << l << ", path: " << task << "_" << l << ".ckpt}\n";
        }
    }
    return s.str();
}

std::string error_of(const std::string& text, const std::filesystem::path& dir) {
    try {
        parse_recipe(text, dir);
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Recipe, FiveLanguageLors) {
    Fixture f;
    const auto plan = parse_recipe(five_lang_lors(), f.dir.path());
    EXPECT_EQ(plan.root.depth(), 1u);
    EXPECT_EQ(plan.root.leaf_count(), 5u);
    const auto& r = plan.root.step().recipe;
    EXPECT_EQ(r.method, MergeMethod::PREPROC_TA);
    EXPECT_DOUBLE_EQ(r.lambda, 0.15);
    EXPECT_DOUBLE_EQ(r.prune_for("de").svp_retain_r, 3);
    EXPECT_DOUBLE_EQ(r.prune_for("de").mp_retain_p, 60);
}

TEST(Recipe, TwoLevelTree) {
    Fixture f;
    const auto plan = parse_recipe(two_level(true, "ta"), f.dir.path());
    EXPECT_EQ(plan.root.depth(), 2u);
    EXPECT_EQ(plan.root.leaf_count(), 10u);
    EXPECT_EQ(plan.root.step().children.size(), 5u);
}

TEST(Recipe, Errors) {
    Fixture f;
    const auto& d = f.dir.path();
    EXPECT_NE(error_of("plan:\n  name: x\n  base: base.ckpt\n  method: ta\n  children: []\n", d).find("at least one"),
              std::string::npos);
    const auto unknown = error_of("plan:\n  name: x\n  base: base.ckpt\n  method: ta\n  colour: red\n", d);
    EXPECT_NE(unknown.find("line 5"), std::string::npos) << unknown;
    EXPECT_NE(unknown.find("plan.colour"), std::string::npos) << unknown;
    EXPECT_NE(error_of("plan:\n  name: x\n  base: base.ckpt\n  method: avg\n  models: [{id: a, path: asr_ca.ckpt}]\n", d)
                  .find("unknown method"),
              std::string::npos);
    EXPECT_NE(error_of("plan:\n  name: x\n  base: missing.ckpt\n  method: ta\n  models: [{id: a, path: asr_ca.ckpt}]\n", d)
                  .find("does not exist"),
              std::string::npos);
    EXPECT_NE(error_of("plan:\n  name: x\n  base: base.ckpt\n  method: ta\n  models: [{id: a, path: asr_ca.ckpt, svp_r: 3}]\n", d)
                  .find("only valid"),
              std::string::npos);
    EXPECT_NE(error_of("plan:\n  name: x\n  base: base.ckpt\n  method: lors\n  models: [{id: a, path: asr_ca.ckpt, svp_r: 3}]\n", d)
                  .find("needs svp_r and mp_p"),
              std::string::npos);
    EXPECT_NE(error_of("plan:\n  name: x\n  base: base.ckpt\n  method: ta\n  lambda: abc\n  models: [{id: a, path: asr_ca.ckpt}]\n", d)
                  .find("expected a number"),
              std::string::npos);
    EXPECT_NE(error_of("plan:\n  name: x\n  base: base.ckpt\n  method: ta\n  models:\n    - {id: a, path: asr_ca.ckpt}\n    - {id: a, path: asr_de.ckpt}\n", d)
                  .find("duplicate member id"),
              std::string::npos);
    EXPECT_NE(error_of("plan: [1, 2\n", d).find("recipe line"), std::string::npos);
    EXPECT_NE(error_of("other: 1\n", d).find("unknown top-level key"), std::string::npos);
}

TEST(Recipe, MpAndSvpMethods) {
    Fixture f;
    const auto mp = parse_recipe("plan:\n  name: x\n  base: base.ckpt\n  method: mp\n  mp_p: 20\n  models: [{id: a, path: asr_ca.ckpt}]\n",
                                 f.dir.path());
    EXPECT_DOUBLE_EQ(mp.root.step().recipe.prune_for("a").svp_retain_r, 0);
    EXPECT_DOUBLE_EQ(mp.root.step().recipe.prune_for("a").mp_retain_p, 20);
    const auto svp = parse_recipe("plan:\n  name: x\n  base: base.ckpt\n  method: svp\n  svp_r: 7\n  models: [{id: a, path: asr_ca.ckpt}]\n",
                                  f.dir.path());
    EXPECT_DOUBLE_EQ(svp.root.step().recipe.prune_for("a").mp_retain_p, 0);
    EXPECT_DOUBLE_EQ(svp.root.step().recipe.prune_for("a").svp_retain_r, 7);
}

TEST(Execute, SingleLeafIdentity) {
    Fixture f;
    const auto plan = parse_recipe("plan:\n  name: x\n  base: base.ckpt\n  method: ta\n  lambda: 1\n  models: [{id: a, path: asr_ca.ckpt}]\n",
                                   f.dir.path());
    EXPECT_TRUE(execute_plan(plan).same_tensors(load_checkpoint(f.dir / "asr_ca.ckpt")));
}

TEST(Execute, TwoLevelAverageOfIdenticalModels) {
    Fixture f;
    const auto leaf = f.dir / "asr_ca.ckpt";
    const auto plan = parse_recipe(
        "plan:\n  name: root\n  base: base.ckpt\n  method: wa\n  children:\n"
        "    - {name: g1, base: base.ckpt, method: wa, models: [{id: a, path: asr_ca.ckpt}, {id: b, path: asr_ca.ckpt}]}\n"
        "    - {name: g2, base: base.ckpt, method: wa, models: [{id: a, path: asr_ca.ckpt}, {id: b, path: asr_ca.ckpt}]}\n",
        f.dir.path());
    EXPECT_TRUE(execute_plan(plan).same_tensors(load_checkpoint(leaf)));
}

TEST(Execute, OrderOfHierarchyMattersAndIsReproducible) {
    Fixture f;
    const auto mt_ml = parse_recipe(two_level(true, "lors\n  svp_r: 10\n  mp_p: 30"), f.dir.path());
    const auto ml_mt = parse_recipe(two_level(false, "lors\n  svp_r: 10\n  mp_p: 30"), f.dir.path());
    const auto a1 = serialize_checkpoint(execute_plan(mt_ml));
    const auto a2 = serialize_checkpoint(execute_plan(mt_ml));
    const auto b1 = serialize_checkpoint(execute_plan(ml_mt));
    const auto b2 = serialize_checkpoint(execute_plan(ml_mt));
    EXPECT_EQ(a1, a2);
    EXPECT_EQ(b1, b2);
    EXPECT_NE(parse_checkpoint(a1).entries(), parse_checkpoint(b1).entries());
}

TEST(Execute, RecordsProvenanceAndPersists) {
    Fixture f;
    auto text = two_level(true, "ta");
    text.insert(text.find("      models:"), "      persist: mid_ca.ckpt\n");
    const auto plan = parse_recipe(text, f.dir.path());
    const auto out = execute_plan(plan);
    EXPECT_EQ(out.meta().at("merge.method"), "ta");
    EXPECT_EQ(out.meta().at("plan.node"), "root");
    EXPECT_EQ(out.meta().at("merge.models"), "ca,de,es,fr,it");
    ASSERT_TRUE(std::filesystem::exists(f.dir / "mid_ca.ckpt"));
    EXPECT_EQ(load_checkpoint(f.dir / "mid_ca.ckpt").meta().at("plan.node"), "root/ca");

    std::filesystem::remove(f.dir / "mid_ca.ckpt");
    execute_plan(plan, ExecuteOptions{false});
    EXPECT_FALSE(std::filesystem::exists(f.dir / "mid_ca.ckpt"));
}

TEST(Execute, ErrorsNameTheNode) {
    Fixture f;
    TensorMap odd = random_model(9, 4, 4);
    save_checkpoint(odd, f.dir / "odd.ckpt");
    const auto plan = parse_recipe(
        "plan:\n  name: root\n  base: base.ckpt\n  method: ta\n  children:\n"
        "    - {name: inner, base: base.ckpt, method: ta, models: [{id: bad, path: odd.ckpt}]}\n",
        f.dir.path());
    try {
        execute_plan(plan);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("root/inner"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos) << e.what();
    }
}

TEST(Execute, DocsRecipesRun) {
    std::size_t seen = 0;
    for (const auto& e : std::filesystem::directory_iterator(LORSMERGE_RECIPE_DIR)) {
        if (e.path().extension() != ".yaml") continue;
        SCOPED_TRACE(e.path().string());
        ++seen;
        std::ifstream in(e.path());
        std::stringstream ss;
        ss << in.rdbuf();
        const auto text = ss.str();
        // materialise every referenced checkpoint next to a copy of the recipe
        TempDir dir;
        const auto base = random_model(1, 96, 80);
        const std::regex ref(R"((base|path):\s*([^\s,}]+))");
        std::size_t k = 0;
        for (std::sregex_iterator it(text.begin(), text.end(), ref), end; it != end; ++it) {
            const auto target = dir / (*it)[2].str();
            if (std::filesystem::exists(target)) continue;
            std::filesystem::create_directories(target.parent_path());
            save_checkpoint((*it)[1] == "base" ? base : perturbed(base, 50 + k++, 0.05f), target);
        }
        std::ofstream(dir / "recipe.yaml") << text;
        const auto plan = load_recipe(dir / "recipe.yaml");
        const auto out = execute_plan(plan, ExecuteOptions{false});
        EXPECT_EQ(out.size(), base.size());
    }
    EXPECT_GE(seen, 3u);
}
