// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Declarative merge plans. A plan is a tree: leaves are checkpoint files and
// every internal node merges its members' task vectors (relative to the node's
// own base) with one recipe. See docs/recipes.md for the document schema.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "lorsmerge/checkpoint.hpp"
#include "lorsmerge/common.hpp"
#include "lorsmerge/merge.hpp"
#include "lorsmerge/tensor.hpp"

namespace lors {

struct PlanNode;

struct MergeStep {
    /// Method name as written in the recipe: wa, ta, ties, dare, lors, mp, svp.
    std::string method;
    MergeRecipe recipe;
    std::filesystem::path base;
    std::vector<PlanNode> children;
    std::optional<std::filesystem::path> persist;
};

struct PlanNode {
    std::string name;
    std::variant<std::filesystem::path, MergeStep> body;

    bool is_leaf() const { return std::holds_alternative<std::filesystem::path>(body); }
    const std::filesystem::path& leaf_path() const { return std::get<std::filesystem::path>(body); }
    const MergeStep& step() const { return std::get<MergeStep>(body); }

    std::size_t depth() const {
        if (is_leaf()) return 0;
        std::size_t d = 0;
        for (const auto& c : step().children) d = std::max(d, c.depth());
        return d + 1;
    }
    std::size_t leaf_count() const {
        if (is_leaf()) return 1;
        std::size_t n = 0;
        for (const auto& c : step().children) n += c.leaf_count();
        return n;
    }
};

struct MergePlan {
    PlanNode root;
};

namespace detail {

class RecipeParser {
public:
    explicit RecipeParser(std::filesystem::path dir) : dir_(std::move(dir)) {}

    PlanNode parse_plan(const YAML::Node& node, const std::string& field) {
        expect_map(node, field);
        static const std::set<std::string> allowed = {"name", "base",  "method",      "lambda",         "seed",
                                                      "ties_trim_k", "dare_drop_rate", "models", "children",
                                                      "svp_r", "mp_p", "layer_filter", "persist", "lambdas"};
        reject_unknown(node, field, allowed);

        PlanNode out;
        out.name = required_string(node, "name", field);
        MergeStep step;
        step.base = existing_path(node["base"], field + ".base", true);
        step.method = required_string(node, "method", field);
        static const std::set<std::string> methods = {"wa", "ta", "ties", "dare", "lors", "mp", "svp"};
        if (!methods.contains(step.method))
            throw error(node["method"], field + ".method", "unknown method '" + step.method +
                                                              "' (expected wa, ta, ties, dare, lors, mp or svp)");
        auto& r = step.recipe;
        r.method = step.method == "wa"     ? MergeMethod::WA
                   : step.method == "ta"   ? MergeMethod::TA
                   : step.method == "ties" ? MergeMethod::TIES
                   : step.method == "dare" ? MergeMethod::DARE_TA
                                           : MergeMethod::PREPROC_TA;
        if (node["lambda"]) r.lambda = number(node["lambda"], field + ".lambda");
        if (node["seed"]) r.seed = integer(node["seed"], field + ".seed");
        if (node["ties_trim_k"]) r.ties_trim_k = number(node["ties_trim_k"], field + ".ties_trim_k");
        if (node["dare_drop_rate"]) r.dare_drop_rate = number(node["dare_drop_rate"], field + ".dare_drop_rate");
        if (node["layer_filter"]) r.layer_filter = layer_filter(node["layer_filter"], field + ".layer_filter");
        if (node["persist"]) step.persist = resolve(scalar(node["persist"], field + ".persist"));

        const std::optional<double> def_r =
            node["svp_r"] ? std::optional(number(node["svp_r"], field + ".svp_r")) : std::nullopt;
        const std::optional<double> def_p =
            node["mp_p"] ? std::optional(number(node["mp_p"], field + ".mp_p")) : std::nullopt;

        std::set<std::string> ids;
        auto add_member = [&](PlanNode member, const YAML::Node& at, const std::string& mfield,
                              std::optional<double> mr, std::optional<double> mp) {
            if (!ids.insert(member.name).second)
                throw error(at, mfield, "duplicate member id '" + member.name + "'");
            if (r.method == MergeMethod::PREPROC_TA)
                r.per_model_prune[member.name] = prune_config(step.method, mr ? mr : def_r, mp ? mp : def_p, at, mfield);
            else if (mr || mp)
                throw error(at, mfield, "svp_r/mp_p are only valid for methods lors, mp and svp");
            step.children.push_back(std::move(member));
        };

        if (node["models"]) {
            const auto& models = node["models"];
            if (!models.IsSequence()) throw error(models, field + ".models", "expected a list");
            for (std::size_t i = 0; i < models.size(); ++i) {
                const auto& m = models[i];
                const std::string mf = field + ".models[" + std::to_string(i) + "]";
                expect_map(m, mf);
                reject_unknown(m, mf, {"id", "path", "svp_r", "mp_p"});
                PlanNode leaf;
                leaf.name = required_string(m, "id", mf);
                leaf.body = existing_path(m["path"], mf + ".path", true);
                add_member(std::move(leaf), m, mf,
                           m["svp_r"] ? std::optional(number(m["svp_r"], mf + ".svp_r")) : std::nullopt,
                           m["mp_p"] ? std::optional(number(m["mp_p"], mf + ".mp_p")) : std::nullopt);
            }
        }
        if (node["children"]) {
            const auto& kids = node["children"];
            if (!kids.IsSequence()) throw error(kids, field + ".children", "expected a list");
            for (std::size_t i = 0; i < kids.size(); ++i) {
                const std::string cf = field + ".children[" + std::to_string(i) + "]";
                add_member(parse_plan(kids[i], cf), kids[i], cf, std::nullopt, std::nullopt);
            }
        }
        if (step.children.empty())
            throw error(node, field, "a merge node needs at least one entry in models or children");

        if (node["lambdas"]) {
            const auto& ls = node["lambdas"];
            if (!ls.IsSequence()) throw error(ls, field + ".lambdas", "expected a list");
            for (std::size_t i = 0; i < ls.size(); ++i)
                r.per_delta_lambda.push_back(number(ls[i], field + ".lambdas[" + std::to_string(i) + "]"));
        }
        std::vector<std::string> id_list;
        for (const auto& c : step.children) id_list.push_back(c.name);
        try {
            r.validate(step.children.size(), id_list);
        } catch (const ValidationError& e) {
            throw error(node, field, e.what());
        }
        out.body = std::move(step);
        return out;
    }

    static ValidationError error(const YAML::Node& at, const std::string& field, const std::string& msg) {
        std::string where = "recipe";
        if (at.IsDefined() && at.Mark().line >= 0) where += " line " + std::to_string(at.Mark().line + 1);
        return ValidationError(where + ", field " + field + ": " + msg);
    }

private:
    static void expect_map(const YAML::Node& n, const std::string& field) {
        if (!n.IsMap()) throw error(n, field, "expected a mapping");
    }

    static void reject_unknown(const YAML::Node& n, const std::string& field, const std::set<std::string>& allowed) {
        for (const auto& kv : n) {
            const auto key = kv.first.as<std::string>();
            if (!allowed.contains(key)) throw error(kv.first, field + "." + key, "unknown key");
        }
    }

    static std::string scalar(const YAML::Node& n, const std::string& field) {
        if (!n.IsScalar()) throw error(n, field, "expected a scalar");
        return n.Scalar();
    }

    static std::string required_string(const YAML::Node& n, const char* key, const std::string& field) {
        if (!n[key]) throw error(n, field + "." + key, "missing required key");
        auto s = scalar(n[key], field + "." + key);
        if (s.empty()) throw error(n[key], field + "." + key, "must be non-empty");
        return s;
    }

    static double number(const YAML::Node& n, const std::string& field) {
        try {
            if (!n.IsScalar()) throw YAML::BadConversion(n.Mark());
            return n.as<double>();
        } catch (const YAML::Exception&) {
            throw error(n, field, "expected a number");
        }
    }

    static std::uint64_t integer(const YAML::Node& n, const std::string& field) {
        try {
            if (!n.IsScalar()) throw YAML::BadConversion(n.Mark());
            return n.as<std::uint64_t>();
        } catch (const YAML::Exception&) {
            throw error(n, field, "expected a non-negative integer");
        }
    }

    std::filesystem::path resolve(const std::string& p) const {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : dir_ / path;
    }

    std::filesystem::path existing_path(const YAML::Node& n, const std::string& field, bool required) const {
        if (!n) {
            if (required) throw ValidationError("recipe, field " + field + ": missing required key");
            return {};
        }
        auto path = resolve(scalar(n, field));
        if (!std::filesystem::is_regular_file(path))
            throw error(n, field, "file '" + path.string() + "' does not exist");
        return path;
    }

    static LayerFilter layer_filter(const YAML::Node& n, const std::string& field) {
        expect_map(n, field);
        reject_unknown(n, field, {"min_dim", "exclude"});
        LayerFilter f;
        if (n["min_dim"]) f.min_dim = static_cast<std::size_t>(integer(n["min_dim"], field + ".min_dim"));
        if (n["exclude"]) f.exclude = n["exclude"].IsNull() ? "" : scalar(n["exclude"], field + ".exclude");
        try {
            std::regex probe(f.exclude, std::regex::ECMAScript | std::regex::icase);
        } catch (const std::regex_error& e) {
            throw error(n["exclude"], field + ".exclude", std::string("invalid pattern: ") + e.what());
        }
        return f;
    }

    static PruneConfig prune_config(const std::string& method, std::optional<double> r, std::optional<double> p,
                                    const YAML::Node& at, const std::string& field) {
        PruneConfig cfg;
        if (method == "lors") {
            if (!r || !p) throw error(at, field, "method lors needs svp_r and mp_p (per model or as plan defaults)");
            cfg.svp_retain_r = *r;
            cfg.mp_retain_p = *p;
        } else if (method == "mp") {
            if (!p) throw error(at, field, "method mp needs mp_p");
            cfg.svp_retain_r = 0.0;
            cfg.mp_retain_p = *p;
        } else {
            if (!r) throw error(at, field, "method svp needs svp_r");
            if (*r <= 0.0) throw error(at, field, "method svp needs svp_r > 0");
            cfg.svp_retain_r = *r;
            cfg.mp_retain_p = 0.0;
        }
        try {
            cfg.validate();
        } catch (const ValidationError& e) {
            throw error(at, field, e.what());
        }
        return cfg;
    }

    std::filesystem::path dir_;
};

}  // namespace detail

/// Parses a recipe document. Relative paths resolve against `base_dir`; every
/// referenced file must already exist.
inline MergePlan parse_recipe(const std::string& text, const std::filesystem::path& base_dir = ".") {
    YAML::Node doc;
    try {
        doc = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ValidationError("recipe line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (!doc.IsMap()) throw ValidationError("recipe: top level must be a mapping with a 'plan' key");
    for (const auto& kv : doc)
        if (kv.first.as<std::string>() != "plan")
            throw detail::RecipeParser::error(kv.first, kv.first.as<std::string>(), "unknown top-level key");
    if (!doc["plan"]) throw ValidationError("recipe: missing top-level key 'plan'");
    detail::RecipeParser parser(base_dir);
    return {parser.parse_plan(doc["plan"], "plan")};
}

inline MergePlan load_recipe(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open recipe '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_recipe(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

struct ExecuteOptions {
    /// Write nodes that carry a `persist` path.
    bool persist_intermediates = true;
};

namespace detail {

class PlanExecutor {
public:
    explicit PlanExecutor(ExecuteOptions opt) : opt_(opt) {}

    TensorMap run(const PlanNode& node, const std::string& path) {
        if (node.is_leaf()) return load_checkpoint(node.leaf_path());
        const auto& step = node.step();
        try {
            const auto base = load(step.base);
            std::vector<TensorMap> members;
            std::vector<std::string> ids;
            members.reserve(step.children.size());
            for (const auto& c : step.children) {
                members.push_back(run(c, path + "/" + c.name));
                ids.push_back(c.name);
            }
            TensorMap out;
            if (step.recipe.method == MergeMethod::WA) {
                for (std::size_t i = 0; i < members.size(); ++i)
                    require_compatible(*base, members[i], "member '" + ids[i] + "' vs base");
                out = weight_average(members);
                detail::record_provenance(out, step.recipe, ids);
            } else {
                std::vector<TensorMap> deltas;
                deltas.reserve(members.size());
                for (std::size_t i = 0; i < members.size(); ++i) {
                    try {
                        deltas.push_back(diff(members[i], *base));
                    } catch (const ValidationError& e) {
                        throw ValidationError("member '" + ids[i] + "': " + e.what());
                    }
                }
                members.clear();
                out = merge(*base, deltas, step.recipe, ids);
            }
            out.meta()["merge.method"] = step.method;
            out.meta()["plan.node"] = path;
            out.meta()[kMetaBaseFingerprint] = fingerprint(*base);
            if (step.persist && opt_.persist_intermediates) save_checkpoint(out, *step.persist);
            return out;
        } catch (const ValidationError& e) {
            throw ValidationError("plan node " + path + ": " + e.what());
        } catch (const FormatError& e) {
            throw FormatError("plan node " + path + ": " + e.what());
        } catch (const IoError& e) {
            throw IoError("plan node " + path + ": " + e.what());
        }
    }

private:
    std::shared_ptr<const TensorMap> load(const std::filesystem::path& p) {
        const auto key = std::filesystem::weakly_canonical(p).string();
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        auto t = std::make_shared<const TensorMap>(load_checkpoint(p));
        cache_.emplace(key, t);
        return t;
    }

    ExecuteOptions opt_;
    std::map<std::string, std::shared_ptr<const TensorMap>> cache_;
};

}  // namespace detail

/// Depth-first evaluation; returns the root's merged checkpoint.
inline TensorMap execute_plan(const MergePlan& plan, ExecuteOptions opt = {}) {
    detail::PlanExecutor exec(opt);
    return exec.run(plan.root, plan.root.name);
}

}  // namespace lors
