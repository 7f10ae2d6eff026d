// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. run_cli is callable in-process so the test suite can
// drive every subcommand without spawning the binary.
//
// Exit codes: 0 success, 1 invalid input or usage, 2 file or stream failure.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lorsmerge/checkpoint.hpp"
#include "lorsmerge/common.hpp"
#include "lorsmerge/experiment.hpp"
#include "lorsmerge/linalg.hpp"
#include "lorsmerge/merge.hpp"
#include "lorsmerge/metrics.hpp"
#include "lorsmerge/plan.hpp"
#include "lorsmerge/pruning.hpp"
#include "lorsmerge/tensor.hpp"
#include "lorsmerge/workbench.hpp"

namespace lors::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

/// Rows rendered either as CSV or as space-aligned columns.
class Table {
public:
    explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

    void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

    void write(std::ostream& out, const std::string& format) const {
        if (format == "csv") {
            write_csv_row(out, header_);
            for (const auto& r : rows_) write_csv_row(out, r);
            return;
        }
        std::vector<std::size_t> width(header_.size());
        for (std::size_t c = 0; c < header_.size(); ++c) width[c] = header_[c].size();
        for (const auto& r : rows_)
            for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
        auto line = [&](const std::vector<std::string>& r) {
            std::string s;
            for (std::size_t c = 0; c < r.size(); ++c) {
                s += r[c];
                if (c + 1 < r.size()) s += std::string(width[c] - r[c].size() + 2, ' ');
            }
            out << s << '\n';
        };
        line(header_);
        for (const auto& r : rows_) line(r);
    }

private:
    static void write_csv_row(std::ostream& out, const std::vector<std::string>& r) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            const auto& v = r[c];
            if (v.find_first_of(",\"\n") != std::string::npos) {
                out << '"';
                for (char ch : v) out << (ch == '"' ? "\"\"" : std::string(1, ch));
                out << '"';
            } else {
                out << v;
            }
            out << (c + 1 < r.size() ? "," : "\n");
        }
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

inline std::string fmt(double v, int digits = 6) {
    std::ostringstream os;
    os << std::setprecision(digits) << v;
    return os.str();
}

inline std::string fixed(double v, int digits) { return bench::fixed(v, digits); }

/// "768x3072" -> {768, 3072}.
inline std::pair<std::size_t, std::size_t> parse_shape(const std::string& s) {
    const auto x = s.find('x');
    auto num = [&](std::string_view part) {
        std::size_t v = 0;
        auto res = std::from_chars(part.data(), part.data() + part.size(), v);
        if (part.empty() || res.ec != std::errc() || res.ptr != part.data() + part.size() || v == 0)
            throw ValidationError("--shape must look like ROWSxCOLS with positive integers, got '" + s + "'");
        return v;
    };
    if (x == std::string::npos) throw ValidationError("--shape must look like ROWSxCOLS, got '" + s + "'");
    return {num(std::string_view(s).substr(0, x)), num(std::string_view(s).substr(x + 1))};
}

namespace detail {

struct Options {
    int threads = 0;

    std::string recipe, out;
    bool no_persist = false;

    std::string base, model;

    std::string in;
    std::string format = "plain";

    double svp_r = 5.0, mp_p = 40.0;
    bool report = false;
    std::size_t min_dim = 64;
    std::string exclude = "embed";
    bool all_matrices = false;

    std::string metric, ref, hyp;
    std::optional<double> pretrained, finetuned;

    std::string a, b;
    std::size_t iters = 1000, sample = 300;
    std::uint64_t seed = 0;
    bool lower_is_better = false;

    std::string shape = "768x3072";
    std::size_t count = 100;

    std::string config;
};

inline void add_format(CLI::App* app, Options& o) {
    app->add_option("--format", o.format, "Output format")
        ->check(CLI::IsMember({"plain", "csv"}))
        ->default_val("plain");
}

inline LayerFilter layer_filter_of(const Options& o) {
    if (o.all_matrices) return LayerFilter::all_matrices();
    LayerFilter f;
    f.min_dim = o.min_dim;
    f.exclude = o.exclude;
    try {
        std::regex probe(f.exclude, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
        throw ValidationError("--exclude: invalid pattern: " + std::string(e.what()));
    }
    return f;
}

inline int cmd_merge(const Options& o, std::ostream& out) {
    const auto plan = load_recipe(o.recipe);
    ExecuteOptions eo;
    eo.persist_intermediates = !o.no_persist;
    const auto merged = execute_plan(plan, eo);
    save_checkpoint(merged, o.out);
    out << "wrote " << o.out << ": " << merged.size() << " tensors, " << plan.root.leaf_count()
        << " source checkpoints, fingerprint " << fingerprint(merged) << '\n';
    return kExitOk;
}

inline int cmd_diff(const Options& o, std::ostream& out) {
    const auto base = load_checkpoint(o.base);
    const auto model = load_checkpoint(o.model);
    const auto tau = diff(model, base);
    save_checkpoint(tau, o.out);
    out << "wrote " << o.out << ": " << tau.size() << " tensors, base fingerprint "
        << tau.meta().at(kMetaBaseFingerprint) << '\n';
    return kExitOk;
}

inline int cmd_inspect(const Options& o, std::ostream& out) {
    const auto t = load_checkpoint(o.in);
    Table table({"name", "shape", "numel", "frobenius", "max_abs", "nonzero"});
    for (const auto& [name, tensor] : t) {
        double mx = 0.0;
        std::size_t nz = 0;
        for (float v : tensor.data()) {
            mx = std::max(mx, static_cast<double>(std::abs(v)));
            nz += v != 0.0f;
        }
        table.add({name, shape_str(tensor.shape()), std::to_string(tensor.size()), fmt(frobenius_norm(tensor)), fmt(mx),
                   std::to_string(nz)});
    }
    table.write(out, o.format);
    if (o.format == "plain") {
        out << "\nfingerprint " << fingerprint(t) << '\n';
        for (const auto& [k, v] : t.meta()) out << "meta " << k << " = " << v << '\n';
    }
    return kExitOk;
}

inline int cmd_decompose(const Options& o, std::ostream& out) {
    const PruneConfig cfg{o.mp_p, o.svp_r};
    cfg.validate();
    const auto filter = layer_filter_of(o);
    const auto t = load_checkpoint(o.in);
    const auto names = t.names();

    struct Row {
        bool pruned = false;
        std::size_t rank = 0, nnz = 0;
        double rel_error = 0.0;
        DenseTensor dense;
    };
    std::vector<Row> rows(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& w = t.at(names[i]);
        Row& r = rows[i];
        if (!filter.accepts(names[i], w)) {
            r.dense = w;
            return;
        }
        const auto d = lors(w, cfg);
        r.pruned = true;
        r.rank = static_cast<std::size_t>(d.low_rank.rank());
        r.nnz = d.sparse.size();
        r.dense = cfg.mp_retain_p == 100.0 ? w : d.dense();
        const double norm = frobenius_norm(w);
        r.rel_error = norm > 0.0 ? frobenius_distance(w, r.dense) / norm : 0.0;
    });

    if (!o.out.empty()) {
        TensorMap result;
        result.meta() = t.meta();
        for (std::size_t i = 0; i < names.size(); ++i) result.insert(names[i], rows[i].dense);
        result.meta()["decompose.svp_r"] = format_number(cfg.svp_retain_r);
        result.meta()["decompose.mp_p"] = format_number(cfg.mp_retain_p);
        save_checkpoint(result, o.out);
    }
    if (o.report || o.out.empty()) {
        Table table({"name", "shape", "rank", "nnz", "rel_error"});
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto& r = rows[i];
            if (!r.pruned) {
                table.add({names[i], shape_str(t.at(names[i]).shape()), "-", "-", "-"});
                continue;
            }
            table.add({names[i], shape_str(t.at(names[i]).shape()), std::to_string(r.rank), std::to_string(r.nnz),
                       fmt(r.rel_error)});
        }
        table.write(out, o.format);
    }
    if (!o.out.empty() && o.format == "plain") out << "wrote " << o.out << '\n';
    return kExitOk;
}

inline int cmd_score(const Options& o, std::ostream& out) {
    const auto refs = read_corpus(o.ref);
    const auto hyps = read_corpus(o.hyp);
    const double score = o.metric == "wer" ? wer(refs, hyps) : bleu(refs, hyps);
    if (o.pretrained.has_value() != o.finetuned.has_value())
        throw ValidationError("--pretrained and --finetuned must be given together");
    std::optional<double> dn;
    if (o.pretrained) dn = normalized_delta({score, *o.pretrained, *o.finetuned, o.metric == "wer"});
    Table table({"metric", "score", "sentences", "delta_norm"});
    table.add({o.metric, fixed(score, 4), std::to_string(refs.size()), dn ? fixed(*dn, 2) : ""});
    table.write(out, o.format);
    return kExitOk;
}

inline int cmd_bootstrap(const Options& o, std::ostream& out) {
    const auto a = read_scores(o.a);
    const auto b = read_scores(o.b);
    BootstrapOptions bo;
    bo.iterations = o.iters;
    bo.sample_size = o.sample;
    bo.seed = o.seed;
    bo.lower_is_better = o.lower_is_better;
    const double p = paired_bootstrap(a, b, bo);
    if (o.format == "csv") {
        Table table({"p", "iterations", "sample", "seed"});
        table.add({fixed(p, 3), std::to_string(o.iters), std::to_string(o.sample), std::to_string(o.seed)});
        table.write(out, o.format);
    } else {
        out << "p=" << fixed(p, 3) << '\n';
    }
    return kExitOk;
}

/// Times LoRS (SVD, low-rank reconstruction, magnitude pruning of the residual)
/// over `count` seeded Gaussian matrices.
inline int cmd_bench(const Options& o, std::ostream& out) {
    const auto [rows, cols] = parse_shape(o.shape);
    if (o.count < 1) throw ValidationError("--count must be >= 1");
    const PruneConfig cfg{o.mp_p, o.svp_r};
    cfg.validate();
    std::vector<std::size_t> nnz(o.count);
    std::vector<double> err(o.count);
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(o.count, [&](std::size_t i) {
        std::mt19937_64 rng(hash_combine(o.seed, i));
        std::normal_distribution<float> normal(0.0f, 0.02f);
        DenseTensor w({rows, cols});
        for (auto& v : w.values()) v = normal(rng);
        const auto d = lors(w, cfg);
        nnz[i] = d.sparse.size();
        err[i] = frobenius_distance(w, d.dense()) / frobenius_norm(w);
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double mean_err = 0.0;
    for (double e : err) mean_err += e;
    mean_err /= static_cast<double>(o.count);
    Table table({"shape", "count", "threads", "svp_r", "mp_p", "rank", "nnz", "mean_rel_error", "seconds",
                 "ms_per_matrix"});
    table.add({o.shape, std::to_string(o.count), std::to_string(num_threads()), format_number(cfg.svp_retain_r),
               format_number(cfg.mp_retain_p), std::to_string(retained_rank(cfg.svp_retain_r, rows, cols)),
               std::to_string(nnz[0]), fmt(mean_err), fixed(secs, 3),
               fixed(1000.0 * secs / static_cast<double>(o.count), 2)});
    table.write(out, o.format);
    return kExitOk;
}

inline int cmd_workbench(const Options& o, std::ostream& out) {
    const auto cfg = bench::load_experiment(o.config);
    const auto rows = bench::run_experiment(cfg);
    std::ostringstream csv;
    bench::write_report_csv(rows, csv);
    if (!o.out.empty()) {
        write_file_atomic(o.out, csv.str());
        out << "wrote " << o.out << ": " << rows.size() << " rows\n";
        return kExitOk;
    }
    if (o.format == "csv") {
        out << csv.str();
        return kExitOk;
    }
    Table table({"setting", "task", "seed", "grid", "lambda", "accuracy", "loss", "delta_norm"});
    for (const auto& r : rows)
        table.add({r.setting, r.task, std::to_string(r.seed), r.grid, r.lambda ? format_number(*r.lambda) : "",
                   fixed(r.accuracy, 2), fixed(r.loss, 4), r.delta_norm ? fixed(*r.delta_norm, 1) : ""});
    table.write(out, o.format);
    return kExitOk;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    detail::Options o;
    CLI::App app("Checkpoint merging with low-rank and sparse pruning of task vectors.", "lorsmerge");
    app.require_subcommand(1);
    app.set_version_flag("--version", "lorsmerge 0.1.0");
    app.add_option("--threads", o.threads,
                   std::string("Worker threads (default: $") + kThreadsEnv + ", else all cores)")
        ->check(CLI::PositiveNumber);
    app.fallthrough();

    auto* merge = app.add_subcommand("merge", "Execute a merge recipe and write the root checkpoint");
    merge->add_option("--recipe", o.recipe, "Recipe file (YAML)")->required();
    merge->add_option("--out", o.out, "Output checkpoint")->required();
    merge->add_flag("--no-persist", o.no_persist, "Skip writing intermediate checkpoints named by 'persist'");

    auto* diffc = app.add_subcommand("diff", "Write the task vector model - base");
    diffc->add_option("--base", o.base, "Pretrained checkpoint")->required();
    diffc->add_option("--model", o.model, "Finetuned checkpoint")->required();
    diffc->add_option("--out", o.out, "Output delta checkpoint")->required();

    auto* inspect = app.add_subcommand("inspect", "List tensors, shapes, norms and metadata of a checkpoint");
    inspect->add_option("--in", o.in, "Checkpoint")->required();
    detail::add_format(inspect, o);

    auto* decompose = app.add_subcommand("decompose", "Split each matrix into low-rank plus sparse parts");
    decompose->add_option("--in", o.in, "Checkpoint or delta")->required();
    decompose->add_option("--svp-r", o.svp_r, "SVP retain ratio r in percent (0 = no low-rank part)")
        ->default_val(5.0);
    decompose->add_option("--mp-p", o.mp_p, "MP retain ratio p in percent")->default_val(40.0);
    decompose->add_flag("--report", o.report, "Print per-tensor rank, nnz and reconstruction error");
    decompose->add_option("--out", o.out, "Write the pruned checkpoint (L + S per matrix)");
    decompose->add_option("--min-dim", o.min_dim, "Only matrices with both dimensions >= this")->default_val(64);
    decompose->add_option("--exclude", o.exclude, "Skip tensors whose name matches this regex (case-insensitive)")
        ->default_val("embed");
    decompose->add_flag("--all-matrices", o.all_matrices, "Decompose every matrix (overrides --min-dim/--exclude)");
    detail::add_format(decompose, o);

    auto* score = app.add_subcommand("score", "Corpus WER or BLEU of a hypothesis file");
    score->add_option("--metric", o.metric, "Metric")->required()->check(CLI::IsMember({"wer", "bleu"}));
    score->add_option("--ref", o.ref, "Reference text, one sentence per line")->required();
    score->add_option("--hyp", o.hyp, "Hypothesis text, one sentence per line")->required();
    score->add_option("--pretrained", o.pretrained, "Pretrained model's score, for delta_norm");
    score->add_option("--finetuned", o.finetuned, "Finetuned model's score, for delta_norm");
    detail::add_format(score, o);

    auto* boot = app.add_subcommand("bootstrap", "Paired bootstrap test on per-example scores");
    boot->add_option("--a", o.a, "Scores of system A, one per line")->required();
    boot->add_option("--b", o.b, "Scores of system B, one per line")->required();
    boot->add_option("--iters", o.iters, "Resampling iterations")->default_val(1000);
    boot->add_option("--sample", o.sample, "Examples per resample")->default_val(300);
    boot->add_option("--seed", o.seed, "Random seed")->default_val(0);
    boot->add_flag("--lower-is-better", o.lower_is_better, "Smaller scores are better (e.g. per-sentence errors)");
    detail::add_format(boot, o);

    auto* benchc = app.add_subcommand("bench", "Time LoRS decomposition on random matrices");
    benchc->add_option("--shape", o.shape, "Matrix shape ROWSxCOLS")->default_val("768x3072");
    benchc->add_option("--count", o.count, "Number of matrices")->default_val(100);
    benchc->add_option("--svp-r", o.svp_r, "SVP retain ratio r in percent")->default_val(5.0);
    benchc->add_option("--mp-p", o.mp_p, "MP retain ratio p in percent")->default_val(40.0);
    benchc->add_option("--seed", o.seed, "Random seed")->default_val(0);
    detail::add_format(benchc, o);

    auto* wb = app.add_subcommand("workbench", "Run a toy merging experiment and report per-task results");
    wb->add_option("--config", o.config, "Experiment config (YAML)")->required();
    wb->add_option("--out", o.out, "Write the CSV report here instead of stdout");
    detail::add_format(wb, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }

    set_num_threads(o.threads);
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (name == "merge") return detail::cmd_merge(o, out);
        if (name == "diff") return detail::cmd_diff(o, out);
        if (name == "inspect") return detail::cmd_inspect(o, out);
        if (name == "decompose") return detail::cmd_decompose(o, out);
        if (name == "score") return detail::cmd_score(o, out);
        if (name == "bootstrap") return detail::cmd_bootstrap(o, out);
        if (name == "bench") return detail::cmd_bench(o, out);
        if (name == "workbench") return detail::cmd_workbench(o, out);
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const bench::TrainingError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitIo;
    }
    err << "error: unknown subcommand " << name << '\n';
    return kExitValidation;
}

}  // namespace lors::cli
