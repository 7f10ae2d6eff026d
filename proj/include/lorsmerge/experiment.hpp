// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Workbench experiment configs (YAML, same conventions as merge recipes).
//
//   experiment:
//     name: toy5
//     seeds: {start: 0, count: 10}      # or an explicit list [0, 1, 2]
//     tasks: 5
//     multitask: false
//     task: {input_dim: 16, hidden_dim: 32, n_classes: 8, label_noise: 0.0, ...}
//     train: {epochs: 40, batch_size: 32, lr_grid: [0.05, 0.1, 0.2]}
//     lambda_grid: [0.1, 0.2, 0.5, 1.0]
//     lors_grid: [{svp_r: 25, mp_p: 20}]
//     settings: [pretrained, finetune, merge:ta, merge:lors]

#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "lorsmerge/common.hpp"
#include "lorsmerge/workbench.hpp"

namespace lors::bench {

namespace detail {

class ConfigReader {
public:
    static ValidationError error(const YAML::Node& at, const std::string& field, const std::string& msg) {
        std::string where = "config";
        if (at.IsDefined() && at.Mark().line >= 0) where += " line " + std::to_string(at.Mark().line + 1);
        return ValidationError(where + ", field " + field + ": " + msg);
    }

    static void expect_map(const YAML::Node& n, const std::string& field, const std::set<std::string>& allowed) {
        if (!n.IsMap()) throw error(n, field, "expected a mapping");
        for (const auto& kv : n) {
            const auto key = kv.first.as<std::string>();
            if (!allowed.contains(key)) throw error(kv.first, field + "." + key, "unknown key");
        }
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

    static bool boolean(const YAML::Node& n, const std::string& field) {
        try {
            if (!n.IsScalar()) throw YAML::BadConversion(n.Mark());
            return n.as<bool>();
        } catch (const YAML::Exception&) {
            throw error(n, field, "expected true or false");
        }
    }

    static std::string string(const YAML::Node& n, const std::string& field) {
        if (!n.IsScalar()) throw error(n, field, "expected a scalar");
        return n.Scalar();
    }

    template <typename T, typename Fn>
    static std::vector<T> list(const YAML::Node& n, const std::string& field, Fn&& item) {
        if (!n.IsSequence()) throw error(n, field, "expected a list");
        if (n.size() == 0) throw error(n, field, "must be non-empty");
        std::vector<T> out;
        for (std::size_t i = 0; i < n.size(); ++i) out.push_back(item(n[i], field + "[" + std::to_string(i) + "]"));
        return out;
    }

    static std::vector<double> numbers(const YAML::Node& n, const std::string& field) {
        return list<double>(n, field, [](const YAML::Node& x, const std::string& f) { return number(x, f); });
    }
    static std::vector<std::size_t> counts(const YAML::Node& n, const std::string& field) {
        return list<std::size_t>(n, field,
                                 [](const YAML::Node& x, const std::string& f) { return static_cast<std::size_t>(integer(x, f)); });
    }

    static void task(const YAML::Node& n, TaskSpec& t) {
        expect_map(n, "experiment.task",
                   {"n_train", "n_dev", "n_test", "input_dim", "hidden_dim", "n_classes", "delta_rank",
                    "delta_sparsity", "delta_scale", "label_noise"});
        auto cnt = [&](const char* key, std::size_t& dst) {
            if (n[key]) dst = static_cast<std::size_t>(integer(n[key], std::string("experiment.task.") + key));
        };
        auto num = [&](const char* key, double& dst) {
            if (n[key]) dst = number(n[key], std::string("experiment.task.") + key);
        };
        cnt("n_train", t.n_train);
        cnt("n_dev", t.n_dev);
        cnt("n_test", t.n_test);
        cnt("input_dim", t.input_dim);
        cnt("hidden_dim", t.hidden_dim);
        cnt("n_classes", t.n_classes);
        cnt("delta_rank", t.delta_rank);
        num("delta_sparsity", t.delta_sparsity);
        num("delta_scale", t.delta_scale);
        num("label_noise", t.label_noise);
    }

    static ExperimentConfig parse(const YAML::Node& e) {
        expect_map(e, "experiment",
                   {"name", "seeds", "tasks", "multitask", "task", "train", "lambda_grid", "lors_grid", "mp_p",
                    "svp_r", "ties_trim_k", "dare_drop_rate", "settings", "sweep"});
        ExperimentConfig c;
        if (e["name"]) c.name = string(e["name"], "experiment.name");
        if (const auto s = e["seeds"]) {
            if (s.IsMap()) {
                expect_map(s, "experiment.seeds", {"start", "count"});
                const std::uint64_t start = s["start"] ? integer(s["start"], "experiment.seeds.start") : 0;
                if (!s["count"]) throw error(s, "experiment.seeds.count", "missing required key");
                const auto count = integer(s["count"], "experiment.seeds.count");
                if (count < 1) throw error(s["count"], "experiment.seeds.count", "must be >= 1");
                c.seeds.clear();
                for (std::uint64_t i = 0; i < count; ++i) c.seeds.push_back(start + i);
            } else {
                c.seeds = list<std::uint64_t>(s, "experiment.seeds",
                                              [](const YAML::Node& x, const std::string& f) { return integer(x, f); });
            }
        }
        if (e["tasks"]) c.tasks = static_cast<std::size_t>(integer(e["tasks"], "experiment.tasks"));
        if (e["multitask"]) c.multitask = boolean(e["multitask"], "experiment.multitask");
        if (e["task"]) task(e["task"], c.task);
        if (const auto t = e["train"]) {
            expect_map(t, "experiment.train", {"epochs", "batch_size", "lr_grid"});
            if (t["epochs"]) c.train.epochs = static_cast<std::size_t>(integer(t["epochs"], "experiment.train.epochs"));
            if (t["batch_size"])
                c.train.batch_size = static_cast<std::size_t>(integer(t["batch_size"], "experiment.train.batch_size"));
            if (t["lr_grid"]) c.lr_grid = numbers(t["lr_grid"], "experiment.train.lr_grid");
        }
        if (e["lambda_grid"]) c.lambda_grid = numbers(e["lambda_grid"], "experiment.lambda_grid");
        if (e["lors_grid"]) {
            c.lors_grid = list<PruneConfig>(e["lors_grid"], "experiment.lors_grid", [](const YAML::Node& x, const std::string& f) {
                expect_map(x, f, {"svp_r", "mp_p"});
                if (!x["svp_r"] || !x["mp_p"]) throw error(x, f, "needs svp_r and mp_p");
                return PruneConfig{number(x["mp_p"], f + ".mp_p"), number(x["svp_r"], f + ".svp_r")};
            });
        }
        if (e["mp_p"]) c.mp_p = number(e["mp_p"], "experiment.mp_p");
        if (e["svp_r"]) c.svp_r = number(e["svp_r"], "experiment.svp_r");
        if (e["ties_trim_k"]) c.ties_trim_k = number(e["ties_trim_k"], "experiment.ties_trim_k");
        if (e["dare_drop_rate"]) c.dare_drop_rate = number(e["dare_drop_rate"], "experiment.dare_drop_rate");
        if (e["settings"])
            c.settings = list<std::string>(e["settings"], "experiment.settings",
                                           [](const YAML::Node& x, const std::string& f) { return string(x, f); });
        if (const auto s = e["sweep"]) {
            expect_map(s, "experiment.sweep", {"tasks", "data", "retain"});
            if (s["tasks"]) c.sweep_tasks = counts(s["tasks"], "experiment.sweep.tasks");
            if (s["data"]) c.sweep_data = counts(s["data"], "experiment.sweep.data");
            if (s["retain"]) c.sweep_retain = numbers(s["retain"], "experiment.sweep.retain");
        }
        return c;
    }
};

}  // namespace detail

inline ExperimentConfig parse_experiment(const std::string& text) {
    YAML::Node doc;
    try {
        doc = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ValidationError("config line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (!doc.IsMap()) throw ValidationError("config: top level must be a mapping with an 'experiment' key");
    for (const auto& kv : doc)
        if (kv.first.as<std::string>() != "experiment")
            throw detail::ConfigReader::error(kv.first, kv.first.as<std::string>(), "unknown top-level key");
    if (!doc["experiment"]) throw ValidationError("config: missing top-level key 'experiment'");
    auto cfg = detail::ConfigReader::parse(doc["experiment"]);
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_experiment(ss.str());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

}  // namespace lors::bench
