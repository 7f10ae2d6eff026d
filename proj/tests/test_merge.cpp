// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "lorsmerge/merge.hpp"
#include "test_util.hpp"

using namespace lors;
using lors::testing::perturbed;
using lors::testing::random_model;

namespace {

TensorMap scalar_map(float v) {
    TensorMap m;
    m.insert("w", DenseTensor::matrix(1, 1, {v}));
    return m;
}

TensorMap row_map(std::vector<float> v) {
    TensorMap m;
    const auto n = v.size();
    m.insert("w", DenseTensor::matrix(1, n, std::move(v)));
    return m;
}

double max_rel(const TensorMap& a, const TensorMap& b) {
    double worst = 0.0;
    for (const auto& [name, t] : a) worst = std::max(worst, frobenius_distance(t, b.at(name)) / std::max(1e-30, frobenius_norm(b.at(name))));
    return worst;
}

}  // namespace

TEST(WeightAverage, Midpoint) {
    const std::vector<TensorMap> ms = {scalar_map(0.0f), scalar_map(2.0f)};
    EXPECT_EQ(weight_average(ms).at("w")[0], 1.0f);
}

TEST(WeightAverage, IdenticalModels) {
    const auto m = random_model(1);
    const std::vector<TensorMap> ms(4, m);
    EXPECT_TRUE(weight_average(ms).same_tensors(m));
}

TEST(WeightAverage, MatchesMeanDeltaIdentity) {
    const auto base = random_model(1);
    std::vector<TensorMap> models, deltas;
    for (int i = 0; i < 5; ++i) {
        models.push_back(perturbed(base, 10 + i, 0.1f));
        deltas.push_back(diff(models.back(), base));
    }
    const auto wa = weight_average(models);
    const auto via = task_arithmetic(base, deltas, 1.0 / 5.0);
    for (const auto& [name, t] : wa)
        for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t[i], via.at(name)[i], 1e-6);
}

TEST(TaskArithmetic, Examples) {
    const auto base = random_model(2);
    const auto ft = perturbed(base, 3, 0.05f);
    const std::vector<TensorMap> one = {diff(ft, base)};
    EXPECT_TRUE(task_arithmetic(base, one, 1.0).same_tensors(ft));
    EXPECT_TRUE(task_arithmetic(base, one, 0.0).same_tensors(base));

    const std::vector<TensorMap> ds = {scalar_map(1.0f), scalar_map(3.0f)};
    EXPECT_FLOAT_EQ(task_arithmetic(scalar_map(0.0f), ds, 0.15).at("w")[0], 0.6f);
}

TEST(TaskArithmetic, RejectsMismatch) {
    const std::vector<TensorMap> ds = {random_model(1, 4, 4)};
    EXPECT_THROW(task_arithmetic(random_model(1), ds, 1.0), ValidationError);
    const std::vector<TensorMap> none;
    EXPECT_THROW(task_arithmetic(random_model(1), none, 1.0), ValidationError);
}

TEST(Ties, HandEnumeratedElection) {
    const std::vector<TensorMap> ds = {row_map({1, -2}), row_map({3, 1})};
    const auto out = ties_merge(row_map({0, 0}), ds, 1.0, 100);
    EXPECT_EQ(out.at("w")[0], 2.0f);
    EXPECT_EQ(out.at("w")[1], -2.0f);
}

TEST(Ties, SingleDeltaIsTaskArithmetic) {
    const auto base = random_model(4);
    const std::vector<TensorMap> one = {diff(perturbed(base, 5), base)};
    EXPECT_TRUE(ties_merge(base, one, 0.7, 100).same_tensors(task_arithmetic(base, one, 0.7)));
}

TEST(Ties, UnanimousDeltas) {
    const auto base = random_model(6);
    const auto d = diff(perturbed(base, 7), base);
    const std::vector<TensorMap> same(3, d);
    const std::vector<TensorMap> one = {d};
    EXPECT_TRUE(ties_merge(base, same, 1.0, 100).same_tensors(task_arithmetic(base, one, 1.0)));
}

TEST(Ties, SignTieGivesZero) {
    const std::vector<TensorMap> ds = {row_map({1}), row_map({-1})};
    EXPECT_EQ(ties_merge(row_map({5}), ds, 1.0, 100).at("w")[0], 5.0f);
}

TEST(Dare, ZeroRateIsIdentity) {
    const auto d = random_model(8);
    EXPECT_TRUE(dare_drop(d, 0.0, 1).same_tensors(d));
}

TEST(Dare, SeededAndRescaled) {
    const auto d = random_model(9, 32, 32);
    const auto a = dare_drop(d, 0.5, 11);
    EXPECT_EQ(a, dare_drop(d, 0.5, 11));
    EXPECT_FALSE(a.same_tensors(dare_drop(d, 0.5, 12)));
    std::size_t kept = 0, total = 0;
    for (const auto& [name, t] : a)
        for (std::size_t i = 0; i < t.size(); ++i) {
            ++total;
            if (t[i] != 0.0f) {
                ++kept;
                EXPECT_EQ(t[i], static_cast<float>(static_cast<double>(d.at(name)[i]) / 0.5));
            }
        }
    EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(total), 0.5, 0.05);
}

TEST(Dare, IndependentOfThreads) {
    const auto d = random_model(10, 64, 64);
    set_num_threads(1);
    const auto a = dare_drop(d, 0.9, 3);
    set_num_threads(4);
    const auto b = dare_drop(d, 0.9, 3);
    set_num_threads(0);
    EXPECT_EQ(a, b);
}

TEST(Preprocessor, NoPruningIsTaskArithmetic) {
    const auto base = random_model(11, 16, 12);
    std::vector<TensorMap> ds;
    for (int i = 0; i < 3; ++i) ds.push_back(diff(perturbed(base, 20 + i, 0.1f), base));
    MergeRecipe r;
    r.method = MergeMethod::PREPROC_TA;
    r.lambda = 0.3;
    r.layer_filter = LayerFilter::all_matrices();
    r.default_prune = {100, 100};
    EXPECT_LE(max_rel(merge(base, ds, r), task_arithmetic(base, ds, 0.3)), 1e-4);
}

TEST(Preprocessor, SingleModelRecoversFinetuned) {
    const auto base = random_model(12, 16, 12);
    const auto ft = perturbed(base, 13, 0.1f);
    const std::vector<TensorMap> ds = {diff(ft, base)};
    MergeRecipe r;
    r.method = MergeMethod::PREPROC_TA;
    r.layer_filter = LayerFilter::all_matrices();
    r.default_prune = {100, 100};
    EXPECT_LE(max_rel(merge(base, ds, r), ft), 1e-4);
}

TEST(Preprocessor, PerModelConfigsAppliedAndRecorded) {
    const auto base = random_model(14, 100, 80);
    std::vector<TensorMap> ds;
    const std::vector<std::string> ids = {"ca", "de", "es", "fr", "it"};
    for (std::size_t i = 0; i < ids.size(); ++i) ds.push_back(diff(perturbed(base, 30 + i, 0.1f), base));
    MergeRecipe r;
    r.method = MergeMethod::PREPROC_TA;
    r.lambda = 0.15;
    r.layer_filter = LayerFilter::all_matrices();
    r.per_model_prune = {{"ca", {40, 5}}, {"de", {60, 3}}, {"es", {40, 2}}, {"fr", {10, 1}}, {"it", {10, 1}}};
    const auto out = merge(base, ds, r, ids);
    EXPECT_EQ(out.meta().at("merge.method"), "preproc");
    EXPECT_EQ(out.meta().at("merge.lambda"), "0.15");
    EXPECT_EQ(out.meta().at("merge.model.ca.svp_r"), "5");
    EXPECT_EQ(out.meta().at("merge.model.ca.mp_p"), "40");
    EXPECT_EQ(out.meta().at("merge.model.fr.svp_r"), "1");
    EXPECT_EQ(out.meta().at("merge.model.fr.mp_p"), "10");

    std::vector<TensorMap> pre;
    for (std::size_t i = 0; i < ids.size(); ++i)
        pre.push_back(preprocess_delta(ds[i], r.per_model_prune.at(ids[i]), r.layer_filter));
    EXPECT_TRUE(out.same_tensors(task_arithmetic(base, pre, 0.15)));
    // vectors are exempt
    EXPECT_EQ(pre[3].at("layer.0.bias"), ds[3].at("layer.0.bias"));
}

TEST(Preprocessor, DefaultFilterSkipsSmallAndEmbeddings) {
    TensorMap d;
    d.insert("encoder.embed_tokens.weight", lors::testing::random_matrix(64, 64, 1));
    d.insert("encoder.layer.fc1.weight", lors::testing::random_matrix(64, 64, 2));
    d.insert("small.weight", lors::testing::random_matrix(8, 64, 3));
    const auto out = preprocess_delta(d, {10, 5}, LayerFilter{});
    EXPECT_EQ(out.at("encoder.embed_tokens.weight"), d.at("encoder.embed_tokens.weight"));
    EXPECT_EQ(out.at("small.weight"), d.at("small.weight"));
    EXPECT_NE(out.at("encoder.layer.fc1.weight"), d.at("encoder.layer.fc1.weight"));
}

TEST(Recipe, Validation) {
    MergeRecipe r;
    r.lambda = -1;
    EXPECT_THROW(r.validate(1), ValidationError);
    r = {};
    r.dare_drop_rate = 1.0;
    EXPECT_THROW(r.validate(1), ValidationError);
    r = {};
    r.per_delta_lambda = {1, 2};
    EXPECT_THROW(r.validate(3), ValidationError);
    r = {};
    r.per_model_prune["zz"] = {};
    const std::vector<std::string> ids = {"a"};
    EXPECT_THROW(r.validate(1, ids), ValidationError);
}

TEST(Merge, ThreadCountDoesNotChangeBytes) {
    const auto base = random_model(15, 70, 90);
    std::vector<TensorMap> ds;
    for (int i = 0; i < 4; ++i) ds.push_back(diff(perturbed(base, 40 + i, 0.1f), base));
    for (auto m : {MergeMethod::WA, MergeMethod::TA, MergeMethod::TIES, MergeMethod::DARE_TA, MergeMethod::PREPROC_TA}) {
        MergeRecipe r;
        r.method = m;
        r.lambda = 0.4;
        r.default_prune = {30, 10};
        r.layer_filter = LayerFilter::all_matrices();
        set_num_threads(1);
        const auto a = merge(base, ds, r);
        set_num_threads(3);
        const auto b = merge(base, ds, r);
        set_num_threads(0);
        EXPECT_EQ(a, b) << to_string(m);
    }
}
