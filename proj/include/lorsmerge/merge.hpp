// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "lorsmerge/common.hpp"
#include "lorsmerge/pruning.hpp"
#include "lorsmerge/tensor.hpp"

namespace lors {

enum class MergeMethod { WA, TA, TIES, DARE_TA, PREPROC_TA };

inline std::string to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::WA: return "wa";
        case MergeMethod::TA: return "ta";
        case MergeMethod::TIES: return "ties";
        case MergeMethod::DARE_TA: return "dare";
        case MergeMethod::PREPROC_TA: return "preproc";
    }
    return "?";
}

/// Shortest round-trip decimal form; used wherever numbers land in files.
inline std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Chooses which tensors the pruning preprocessor touches.
struct LayerFilter {
    std::size_t min_dim = 64;
    /// ECMAScript regex searched (case-insensitively) in the tensor name; empty disables.
    std::string exclude = "embed";

    /// Every rank-2 tensor.
    static LayerFilter all_matrices() { return {1, ""}; }

    bool accepts(const std::string& name, const DenseTensor& t) const {
        if (!t.is_matrix() || t.rows() < min_dim || t.cols() < min_dim) return false;
        if (exclude.empty()) return true;
        const std::regex re(exclude, std::regex::ECMAScript | std::regex::icase);
        return !std::regex_search(name, re);
    }
};

struct MergeRecipe {
    MergeMethod method = MergeMethod::TA;
    double lambda = 1.0;
    /// Optional per-delta scaling (one entry per delta); overrides `lambda` when non-empty.
    std::vector<double> per_delta_lambda;
    std::map<std::string, PruneConfig> per_model_prune;
    /// Used for deltas without an entry in per_model_prune.
    PruneConfig default_prune;
    double ties_trim_k = 20.0;
    double dare_drop_rate = 0.9;
    std::uint64_t seed = 0;
    LayerFilter layer_filter;

    void validate(std::size_t n_tasks, std::span<const std::string> ids = {}) const {
        if (n_tasks < 1) throw ValidationError("merge needs at least one model");
        if (!std::isfinite(lambda) || lambda < 0.0)
            throw ValidationError("lambda must be finite and >= 0, got " + format_number(lambda));
        if (!per_delta_lambda.empty() && per_delta_lambda.size() != n_tasks)
            throw ValidationError("per-delta lambda has " + std::to_string(per_delta_lambda.size()) +
                                  " entries for " + std::to_string(n_tasks) + " models");
        for (double l : per_delta_lambda)
            if (!std::isfinite(l)) throw ValidationError("per-delta lambda must be finite");
        if (!(ties_trim_k > 0.0 && ties_trim_k <= 100.0))
            throw ValidationError("ties_trim_k must lie in (0, 100], got " + format_number(ties_trim_k));
        if (!(dare_drop_rate >= 0.0 && dare_drop_rate < 1.0))
            throw ValidationError("dare_drop_rate must lie in [0, 1), got " + format_number(dare_drop_rate));
        default_prune.validate();
        for (const auto& [id, cfg] : per_model_prune) {
            cfg.validate();
            if (!ids.empty() && std::find(ids.begin(), ids.end(), id) == ids.end())
                throw ValidationError("prune config given for unknown model id '" + id + "'");
        }
    }

    double lambda_for(std::size_t task) const { return per_delta_lambda.empty() ? lambda : per_delta_lambda[task]; }

    const PruneConfig& prune_for(const std::string& id) const {
        auto it = per_model_prune.find(id);
        return it == per_model_prune.end() ? default_prune : it->second;
    }
};

namespace detail {

inline void require_same_layout(const TensorMap& base, std::span<const TensorMap> deltas, const char* op) {
    for (std::size_t t = 0; t < deltas.size(); ++t)
        require_compatible(base, deltas[t], std::string(op) + " (model " + std::to_string(t) + ")");
}

inline void warn_on_foreign_base(const TensorMap& base, std::span<const TensorMap> deltas) {
    bool any = false;
    for (const auto& d : deltas) any = any || d.meta().contains(kMetaBaseFingerprint);
    if (!any) return;
    const auto fp = fingerprint(base);
    for (std::size_t t = 0; t < deltas.size(); ++t)
        check_base_fingerprint(deltas[t], fp, "delta " + std::to_string(t));
}

inline std::vector<std::string> default_ids(std::size_t n) {
    std::vector<std::string> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
    return ids;
}

/// Same selection rule as magnitude_prune, for tensors of any rank.
inline DenseTensor trim_any(const DenseTensor& t, double k) {
    const auto keep = magnitude_keep_indices(t.data(), retained_count(k, t.size()));
    std::vector<float> out(t.size(), 0.0f);
    for (auto i : keep) out[i] = t[i] + 0.0f;
    return DenseTensor(t.shape(), std::move(out));
}

}  // namespace detail

/// Element-wise mean, summed in ascending model order.
inline TensorMap weight_average(std::span<const TensorMap> models) {
    if (models.empty()) throw ValidationError("weight_average: at least one model required");
    for (std::size_t t = 1; t < models.size(); ++t)
        require_compatible(models[0], models[t], "weight_average (model " + std::to_string(t) + ")");
    const double n = static_cast<double>(models.size());
    return map_tensors(models[0], [&](const std::string& name, std::size_t) {
        const auto& first = models[0].at(name);
        std::vector<double> acc(first.size(), 0.0);
        for (const auto& m : models) {
            const auto& t = m.at(name);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t[i];
        }
        std::vector<float> out(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / n);
        return DenseTensor(first.shape(), std::move(out));
    });
}

/// base + sum_t lambda_t * delta_t, accumulated in double in ascending task order.
inline TensorMap task_arithmetic(const TensorMap& base, std::span<const TensorMap> deltas,
                                 std::span<const double> lambdas) {
    if (deltas.empty()) throw ValidationError("task_arithmetic: at least one delta required");
    if (lambdas.size() != deltas.size()) throw ValidationError("task_arithmetic: one lambda per delta required");
    for (double l : lambdas)
        if (!std::isfinite(l)) throw ValidationError("task_arithmetic: lambda must be finite");
    detail::require_same_layout(base, deltas, "task_arithmetic");
    detail::warn_on_foreign_base(base, deltas);
    return map_tensors(base, [&](const std::string& name, std::size_t) {
        const auto& b = base.at(name);
        std::vector<double> acc(b.size(), 0.0);
        for (std::size_t t = 0; t < deltas.size(); ++t) {
            const auto& d = deltas[t].at(name);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += lambdas[t] * static_cast<double>(d[i]);
        }
        std::vector<float> out(b.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(static_cast<double>(b[i]) + acc[i]);
        return DenseTensor(b.shape(), std::move(out));
    });
}

inline TensorMap task_arithmetic(const TensorMap& base, std::span<const TensorMap> deltas, double lambda) {
    std::vector<double> lambdas(deltas.size(), lambda);
    return task_arithmetic(base, deltas, lambdas);
}

/// TIES: trim each delta to its top trim_k% entries, elect a per-coordinate sign
/// from the sum of trimmed values (the side with larger total magnitude), then
/// average the trimmed values agreeing with that sign.
inline TensorMap ties_merge(const TensorMap& base, std::span<const TensorMap> deltas, double lambda, double trim_k) {
    if (deltas.empty()) throw ValidationError("ties_merge: at least one delta required");
    if (!std::isfinite(lambda)) throw ValidationError("ties_merge: lambda must be finite");
    if (!(trim_k > 0.0 && trim_k <= 100.0)) throw ValidationError("ties_merge: trim_k must lie in (0, 100]");
    detail::require_same_layout(base, deltas, "ties_merge");
    detail::warn_on_foreign_base(base, deltas);
    return map_tensors(base, [&](const std::string& name, std::size_t) {
        const auto& b = base.at(name);
        std::vector<DenseTensor> trimmed;
        trimmed.reserve(deltas.size());
        for (const auto& d : deltas) trimmed.push_back(detail::trim_any(d.at(name), trim_k));
        std::vector<float> out(b.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            double total = 0.0;
            for (const auto& t : trimmed) total += t[i];
            double sum = 0.0;
            std::size_t count = 0;
            if (total != 0.0) {
                for (const auto& t : trimmed) {
                    const float v = t[i];
                    if ((total > 0.0 && v > 0.0f) || (total < 0.0 && v < 0.0f)) {
                        sum += v;
                        ++count;
                    }
                }
            }
            const double merged = count ? sum / static_cast<double>(count) : 0.0;
            out[i] = static_cast<float>(static_cast<double>(b[i]) + lambda * merged);
        }
        return DenseTensor(b.shape(), std::move(out));
    });
}

/// Uniform in [0,1) for one (seed, tensor, element) triple.
inline double dare_uniform(std::uint64_t seed, std::uint64_t name_hash, std::size_t index) {
    return to_unit(hash_combine(hash_combine(seed, name_hash), static_cast<std::uint64_t>(index)));
}

/// DARE: zero each element with probability drop_rate, rescale survivors by 1/(1-drop_rate).
inline TensorMap dare_drop(const TensorMap& delta, double drop_rate, std::uint64_t seed) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw ValidationError("dare_drop: drop_rate must lie in [0, 1)");
    const double keep = 1.0 - drop_rate;
    TensorMap out = map_tensors(delta, [&](const std::string& name, std::size_t) {
        const auto& d = delta.at(name);
        const auto h = fnv1a(name);
        std::vector<float> v(d.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = dare_uniform(seed, h, i) < drop_rate ? 0.0f : static_cast<float>(static_cast<double>(d[i]) / keep);
        return DenseTensor(d.shape(), std::move(v));
    });
    out.meta() = delta.meta();
    return out;
}

/// Replaces every filter-accepted matrix of `delta` by dense(lors(., cfg)).
/// With p = 100 every residual entry is kept, so the matrix passes through as is.
inline TensorMap preprocess_delta(const TensorMap& delta, const PruneConfig& cfg, const LayerFilter& filter) {
    cfg.validate();
    TensorMap out = map_tensors(delta, [&](const std::string& name, std::size_t) {
        const auto& t = delta.at(name);
        if (!filter.accepts(name, t) || cfg.mp_retain_p >= 100.0) return t;
        try {
            return lors(t, cfg).dense();
        } catch (const ValidationError& e) {
            throw ValidationError("tensor '" + name + "': " + e.what());
        }
    });
    out.meta() = delta.meta();
    return out;
}

namespace detail {

inline void record_provenance(TensorMap& out, const MergeRecipe& r, std::span<const std::string> ids) {
    auto& m = out.meta();
    m["merge.method"] = to_string(r.method);
    m["merge.models"] = [&] {
        std::string s;
        for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + ids[i];
        return s;
    }();
    if (r.method != MergeMethod::WA) m["merge.lambda"] = format_number(r.lambda);
    if (!r.per_delta_lambda.empty())
        for (std::size_t i = 0; i < ids.size(); ++i)
            m["merge.model." + ids[i] + ".lambda"] = format_number(r.per_delta_lambda[i]);
    if (r.method == MergeMethod::TIES) m["merge.ties_trim_k"] = format_number(r.ties_trim_k);
    if (r.method == MergeMethod::DARE_TA) {
        m["merge.dare_drop_rate"] = format_number(r.dare_drop_rate);
        m["merge.seed"] = std::to_string(r.seed);
    }
    if (r.method == MergeMethod::PREPROC_TA) {
        for (const auto& id : ids) {
            const auto& cfg = r.prune_for(id);
            m["merge.model." + id + ".svp_r"] = format_number(cfg.svp_retain_r);
            m["merge.model." + id + ".mp_p"] = format_number(cfg.mp_retain_p);
        }
        m["merge.layer_filter.min_dim"] = std::to_string(r.layer_filter.min_dim);
        m["merge.layer_filter.exclude"] = r.layer_filter.exclude;
    }
}

inline std::vector<double> lambdas_of(const MergeRecipe& r, std::size_t n) {
    std::vector<double> l(n);
    for (std::size_t t = 0; t < n; ++t) l[t] = r.lambda_for(t);
    return l;
}

}  // namespace detail

/// Task arithmetic over preprocessed deltas: base + lambda * sum_t LoRS(delta_t).
/// Degenerate configs give MP-merging (r = 0) or SVP-merging (p = 0).
inline TensorMap merge_with_preprocessor(const TensorMap& base, std::span<const TensorMap> deltas,
                                         const MergeRecipe& recipe, std::span<const std::string> ids = {}) {
    const auto fallback = detail::default_ids(deltas.size());
    if (ids.empty()) ids = fallback;
    if (ids.size() != deltas.size()) throw ValidationError("merge: one id per delta required");
    recipe.validate(deltas.size(), ids);
    detail::require_same_layout(base, deltas, "merge");

    std::vector<TensorMap> pruned;
    pruned.reserve(deltas.size());
    for (std::size_t t = 0; t < deltas.size(); ++t) {
        try {
            pruned.push_back(preprocess_delta(deltas[t], recipe.prune_for(ids[t]), recipe.layer_filter));
        } catch (const ValidationError& e) {
            throw ValidationError("model '" + ids[t] + "': " + e.what());
        }
    }
    TensorMap out = task_arithmetic(base, pruned, detail::lambdas_of(recipe, deltas.size()));
    detail::record_provenance(out, recipe, ids);
    return out;
}

/// Dispatches on recipe.method. Weight averaging is computed as base + mean(delta).
inline TensorMap merge(const TensorMap& base, std::span<const TensorMap> deltas, const MergeRecipe& recipe,
                       std::span<const std::string> ids = {}) {
    const auto fallback = detail::default_ids(deltas.size());
    if (ids.empty()) ids = fallback;
    if (ids.size() != deltas.size()) throw ValidationError("merge: one id per delta required");
    recipe.validate(deltas.size(), ids);
    TensorMap out;
    switch (recipe.method) {
        case MergeMethod::WA:
            out = task_arithmetic(base, deltas, 1.0 / static_cast<double>(deltas.size()));
            break;
        case MergeMethod::TA:
            out = task_arithmetic(base, deltas, detail::lambdas_of(recipe, deltas.size()));
            break;
        case MergeMethod::TIES:
            out = ties_merge(base, deltas, recipe.lambda, recipe.ties_trim_k);
            break;
        case MergeMethod::DARE_TA: {
            std::vector<TensorMap> dropped;
            dropped.reserve(deltas.size());
            for (std::size_t t = 0; t < deltas.size(); ++t)
                dropped.push_back(dare_drop(deltas[t], recipe.dare_drop_rate, hash_combine(recipe.seed, t)));
            out = task_arithmetic(base, dropped, detail::lambdas_of(recipe, deltas.size()));
            break;
        }
        case MergeMethod::PREPROC_TA:
            return merge_with_preprocessor(base, deltas, recipe, ids);
    }
    detail::record_provenance(out, recipe, ids);
    return out;
}

}  // namespace lors
