// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Desk-scale merging workbench.
//
// A random two-layer network plays the pretrained model. Each synthetic task is
// defined by a teacher network: the pretrained weights plus a planted
// low-rank + sparse delta on both weight matrices. Labels are the teacher's
// argmax class (optionally remapped by a fixed label permutation, which gives
// a second task per family, and optionally corrupted by label noise on the
// training split). Students are finetuned from the pretrained model with
// minibatch SGD, and their task vectors go through the same merge code as real
// checkpoints.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lorsmerge/common.hpp"
#include "lorsmerge/linalg.hpp"
#include "lorsmerge/merge.hpp"
#include "lorsmerge/metrics.hpp"
#include "lorsmerge/pruning.hpp"
#include "lorsmerge/tensor.hpp"

namespace lors::bench {

inline constexpr const char* kW1 = "fc1.weight";
inline constexpr const char* kB1 = "fc1.bias";
inline constexpr const char* kW2 = "fc2.weight";
inline constexpr const char* kB2 = "fc2.bias";

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TaskSpec {
    std::string task_id = "task";
    std::uint64_t seed = 0;
    std::size_t n_train = 2000;
    std::size_t n_dev = 500;
    std::size_t n_test = 500;
    std::size_t input_dim = 16;
    std::size_t hidden_dim = 32;
    std::size_t n_classes = 8;
    std::size_t delta_rank = 2;
    /// Percent of entries carrying a sparse spike.
    double delta_sparsity = 5.0;
    double delta_scale = 1.0;
    /// Probability that a training label is replaced by a uniformly drawn class.
    double label_noise = 0.0;
    /// Optional class relabelling applied to every split (a sibling task).
    std::vector<int> label_permutation;

    void validate() const {
        if (n_train < 1 || n_dev < 1 || n_test < 1) throw ValidationError("task " + task_id + ": split sizes must be >= 1");
        if (input_dim < 1 || hidden_dim < 1 || n_classes < 2)
            throw ValidationError("task " + task_id + ": dimensions must be positive and n_classes >= 2");
        if (delta_rank > std::min(input_dim, hidden_dim) || delta_rank > std::min(hidden_dim, n_classes))
            throw ValidationError("task " + task_id + ": delta_rank exceeds the smallest layer dimension");
        if (!(delta_sparsity >= 0.0 && delta_sparsity <= 100.0))
            throw ValidationError("task " + task_id + ": delta_sparsity must lie in [0, 100]");
        if (!std::isfinite(delta_scale)) throw ValidationError("task " + task_id + ": delta_scale must be finite");
        if (!(label_noise >= 0.0 && label_noise <= 1.0))
            throw ValidationError("task " + task_id + ": label_noise must lie in [0, 1]");
        if (!label_permutation.empty()) {
            std::vector<int> sorted = label_permutation;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < sorted.size(); ++i)
                if (sorted[i] != static_cast<int>(i) || sorted.size() != n_classes)
                    throw ValidationError("task " + task_id + ": label_permutation is not a permutation of the classes");
        }
    }
};

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
    Matrix x;  // one example per row
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
};

struct TaskData {
    TaskSpec spec;
    Dataset train, dev, test;
    TensorMap teacher;
};

// ---------------------------------------------------------------------------
// Model

/// softmax(W2 tanh(W1 x + b1) + b2), parameters stored as a checkpoint.
struct ToyModel {
    TensorMap params;

    std::size_t input_dim() const { return params.at(kW1).cols(); }
    std::size_t hidden_dim() const { return params.at(kW1).rows(); }
    std::size_t n_classes() const { return params.at(kW2).rows(); }

    /// Logits, one row per example.
    Matrix logits(const Matrix& x) const {
        const auto w1 = as_matrix(params.at(kW1));
        const auto w2 = as_matrix(params.at(kW2));
        const Eigen::Map<const Eigen::RowVectorXf> b1(params.at(kB1).data().data(), static_cast<Eigen::Index>(hidden_dim()));
        const Eigen::Map<const Eigen::RowVectorXf> b2(params.at(kB2).data().data(), static_cast<Eigen::Index>(n_classes()));
        Matrix h = (x * w1.transpose()).rowwise() + b1;
        h = h.array().tanh();
        Matrix z = (h * w2.transpose()).rowwise() + b2;
        return z;
    }
};

inline ToyModel zero_model(std::size_t input_dim, std::size_t hidden_dim, std::size_t n_classes) {
    ToyModel m;
    m.params.insert(kW1, DenseTensor({hidden_dim, input_dim}));
    m.params.insert(kB1, DenseTensor({hidden_dim}));
    m.params.insert(kW2, DenseTensor({n_classes, hidden_dim}));
    m.params.insert(kB2, DenseTensor({n_classes}));
    return m;
}

/// Random network standing in for the pretrained model. Weights ~ N(0, gain^2/fan_in);
/// the small first-layer gain keeps tanh near its linear range, so the tasks are
/// learnable from a few thousand examples.
inline ToyModel make_pretrained(std::size_t input_dim, std::size_t hidden_dim, std::size_t n_classes, std::uint64_t seed) {
    std::mt19937_64 rng(hash_combine(seed, 0x70726574ull));
    std::normal_distribution<double> normal(0.0, 1.0);
    ToyModel m = zero_model(input_dim, hidden_dim, n_classes);
    auto fill = [&](const char* name, double stddev) {
        for (auto& v : m.params.at(name).values()) v = static_cast<float>(normal(rng) * stddev);
    };
    fill(kW1, 0.05 / std::sqrt(static_cast<double>(input_dim)));
    fill(kB1, 0.1);
    fill(kW2, 2.0 / std::sqrt(static_cast<double>(hidden_dim)));
    fill(kB2, 0.1);
    return m;
}

/// Planted rank-`rank` plus sparse perturbation for a rows x cols matrix, entries
/// on the order of `unit`.
inline DenseTensor planted_delta(std::size_t rows, std::size_t cols, std::size_t rank, double sparsity, double unit,
                                 std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    DenseTensor out({rows, cols});
    if (rank > 0) {
        MatrixD u(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(rank));
        MatrixD v(static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(rank));
        for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = normal(rng);
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = normal(rng);
        const MatrixD l = u * v.transpose() * (unit / std::sqrt(static_cast<double>(rank)));
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                out.at(r, c) = static_cast<float>(l(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    }
    const std::size_t nnz = retained_count(sparsity, rows * cols);
    std::vector<std::size_t> idx(rows * cols);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < nnz; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
        out[idx[i]] += static_cast<float>(normal(rng) * 3.0 * unit);
    }
    return out;
}

inline std::vector<int> argmax_rows(const Matrix& z) {
    std::vector<int> out(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < z.cols(); ++j)
            if (z(i, j) > z(i, best)) best = j;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

/// Teacher network and its train/dev/test splits; fully determined by spec.seed.
inline TaskData gen_task(const TaskSpec& spec, const ToyModel& pretrained) {
    spec.validate();
    if (pretrained.input_dim() != spec.input_dim || pretrained.hidden_dim() != spec.hidden_dim ||
        pretrained.n_classes() != spec.n_classes)
        throw ValidationError("task " + spec.task_id + ": pretrained model dimensions do not match the spec");
    std::mt19937_64 rng(hash_combine(spec.seed, 0x7461736bull));
    TaskData out;
    out.spec = spec;
    out.teacher = pretrained.params;
    for (const char* name : {kW1, kW2}) {
        auto& w = out.teacher.at(name);
        const double unit = spec.delta_scale * frobenius_norm(w) / std::sqrt(static_cast<double>(w.size()));
        const auto delta = planted_delta(w.rows(), w.cols(), spec.delta_rank, spec.delta_sparsity, unit, rng);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += delta[i];
    }
    const ToyModel teacher{out.teacher};

    std::normal_distribution<float> normal(0.0f, 1.0f);
    auto make = [&](std::size_t n, bool noisy) {
        Dataset d;
        d.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(spec.input_dim));
        for (Eigen::Index i = 0; i < d.x.size(); ++i) d.x.data()[i] = normal(rng);
        d.y = argmax_rows(teacher.logits(d.x));
        if (!spec.label_permutation.empty())
            for (auto& y : d.y) y = spec.label_permutation[static_cast<std::size_t>(y)];
        if (noisy && spec.label_noise > 0.0) {
            std::uniform_real_distribution<double> coin(0.0, 1.0);
            std::uniform_int_distribution<int> cls(0, static_cast<int>(spec.n_classes) - 1);
            for (auto& y : d.y)
                if (coin(rng) < spec.label_noise) y = cls(rng);
        }
        return d;
    };
    out.train = make(spec.n_train, true);
    out.dev = make(spec.n_dev, false);
    out.test = make(spec.n_test, false);
    return out;
}

struct EvalResult {
    double accuracy = 0.0;  // percent
    double loss = 0.0;      // mean cross-entropy
};

/// Argmax accuracy (ties go to the lowest class index) and mean cross-entropy.
inline EvalResult evaluate(const ToyModel& model, const Dataset& data) {
    if (data.x.cols() != static_cast<Eigen::Index>(model.input_dim()))
        throw ValidationError("evaluate: input dimension mismatch");
    if (data.size() == 0) return {};
    const Matrix z = model.logits(data.x);
    double loss = 0.0;
    std::size_t correct = 0;
    const auto pred = argmax_rows(z);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const auto label = data.y[static_cast<std::size_t>(i)];
        const double mx = z.row(i).maxCoeff();
        double s = 0.0;
        for (Eigen::Index j = 0; j < z.cols(); ++j) s += std::exp(static_cast<double>(z(i, j)) - mx);
        loss += std::log(s) + mx - z(i, label);
        correct += pred[static_cast<std::size_t>(i)] == label;
    }
    const auto n = static_cast<double>(data.size());
    return {100.0 * static_cast<double>(correct) / n, loss / n};
}

enum class TrainMode { Single, Joint, Sequential };

struct TrainOptions {
    double lr = 0.1;
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::Single;
};

namespace detail {

inline void sgd_epoch(Matrix& w1, Eigen::RowVectorXf& b1, Matrix& w2, Eigen::RowVectorXf& b2, const Matrix& x,
                      std::span<const int> y, std::span<const std::size_t> order, const TrainOptions& opt,
                      double& loss_sum) {
    const auto n = order.size();
    const auto in = x.cols();
    const auto classes = w2.rows();
    Matrix xb, h, z;
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
        const auto bs = static_cast<Eigen::Index>(std::min(opt.batch_size, n - start));
        xb.resize(bs, in);
        for (Eigen::Index i = 0; i < bs; ++i) xb.row(i) = x.row(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(i)]));
        h = ((xb * w1.transpose()).rowwise() + b1).array().tanh();
        z = (h * w2.transpose()).rowwise() + b2;
        // softmax in place, z becomes dL/dz
        for (Eigen::Index i = 0; i < bs; ++i) {
            const float mx = z.row(i).maxCoeff();
            z.row(i) = (z.row(i).array() - mx).exp();
            const float s = z.row(i).sum();
            z.row(i) /= s;
            const int label = y[order[start + static_cast<std::size_t>(i)]];
            loss_sum -= std::log(std::max(z(i, label), 1e-30f));
            z(i, label) -= 1.0f;
        }
        z /= static_cast<float>(bs);
        Matrix dh = z * w2;
        dh.array() *= (1.0f - h.array().square());
        const auto step = static_cast<float>(opt.lr);
        w2.noalias() -= step * (z.transpose() * h);
        b2.noalias() -= step * z.colwise().sum();
        w1.noalias() -= step * (dh.transpose() * xb);
        b1.noalias() -= step * dh.colwise().sum();
        (void)classes;
    }
}

}  // namespace detail

/// Minibatch SGD on cross-entropy. Single and Joint modes train on the
/// concatenation of `data` (shuffled every epoch); Sequential trains each
/// dataset for `epochs` epochs in the given order.
inline ToyModel train(const ToyModel& init, std::span<const Dataset* const> data, const TrainOptions& opt) {
    if (!(opt.lr > 0.0) || !std::isfinite(opt.lr)) throw ValidationError("train: lr must be positive");
    if (opt.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    if (data.empty()) throw ValidationError("train: no data");
    if (opt.mode == TrainMode::Single && data.size() != 1) throw ValidationError("train: single mode takes one dataset");
    if (opt.epochs == 0) return init;

    Matrix w1 = as_matrix(init.params.at(kW1));
    Matrix w2 = as_matrix(init.params.at(kW2));
    Eigen::RowVectorXf b1 = Eigen::Map<const Eigen::RowVectorXf>(init.params.at(kB1).data().data(),
                                                                 static_cast<Eigen::Index>(init.hidden_dim()));
    Eigen::RowVectorXf b2 = Eigen::Map<const Eigen::RowVectorXf>(init.params.at(kB2).data().data(),
                                                                 static_cast<Eigen::Index>(init.n_classes()));
    std::mt19937_64 rng(hash_combine(opt.seed, 0x7472616eull));

    auto run_phase = [&](const Dataset& d, std::size_t phase) {
        std::vector<std::size_t> order(d.size());
        for (std::size_t e = 0; e < opt.epochs; ++e) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            double loss = 0.0;
            detail::sgd_epoch(w1, b1, w2, b2, d.x, d.y, order, opt, loss);
            if (!std::isfinite(loss) || !w1.allFinite() || !w2.allFinite())
                throw TrainingError("training diverged in phase " + std::to_string(phase) + ", epoch " +
                                    std::to_string(e + 1) + " (lr " + format_number(opt.lr) + ")");
        }
    };

    if (opt.mode == TrainMode::Sequential) {
        for (std::size_t p = 0; p < data.size(); ++p) run_phase(*data[p], p);
    } else if (data.size() == 1) {
        run_phase(*data[0], 0);
    } else {
        Dataset all;
        std::size_t total = 0;
        for (const auto* d : data) total += d->size();
        all.x.resize(static_cast<Eigen::Index>(total), data[0]->x.cols());
        Eigen::Index row = 0;
        for (const auto* d : data) {
            all.x.middleRows(row, d->x.rows()) = d->x;
            row += d->x.rows();
            all.y.insert(all.y.end(), d->y.begin(), d->y.end());
        }
        run_phase(all, 0);
    }

    ToyModel out = init;
    out.params.at(kW1) = to_tensor(w1);
    out.params.at(kW2) = to_tensor(w2);
    out.params.at(kB1) = DenseTensor::vector(std::vector<float>(b1.data(), b1.data() + b1.size()));
    out.params.at(kB2) = DenseTensor::vector(std::vector<float>(b2.data(), b2.data() + b2.size()));
    return out;
}

inline ToyModel train(const ToyModel& init, const Dataset& data, const TrainOptions& opt) {
    const Dataset* one[] = {&data};
    return train(init, one, opt);
}

/// Trains once per learning rate and keeps the model with the lowest dev loss
/// (mean over `dev`). Ties keep the earlier grid entry.
struct LrSearchResult {
    ToyModel model;
    double lr = 0.0;
    double dev_loss = 0.0;
};

inline LrSearchResult train_best_lr(const ToyModel& init, std::span<const Dataset* const> data,
                                    std::span<const Dataset* const> dev, std::span<const double> lr_grid,
                                    TrainOptions opt) {
    if (lr_grid.empty()) throw ValidationError("train: empty learning-rate grid");
    std::optional<LrSearchResult> best;
    for (double lr : lr_grid) {
        opt.lr = lr;
        ToyModel m;
        try {
            m = train(init, data, opt);
        } catch (const TrainingError&) {
            continue;
        }
        double loss = 0.0;
        for (const auto* d : dev) loss += evaluate(m, *d).loss;
        loss /= static_cast<double>(dev.size());
        if (!best || loss < best->dev_loss) best = LrSearchResult{std::move(m), lr, loss};
    }
    if (!best) throw TrainingError("training diverged for every learning rate in the grid");
    return *best;
}

// ---------------------------------------------------------------------------
// Merging helpers

inline TensorMap task_vector(const ToyModel& finetuned, const ToyModel& pretrained) {
    return diff(finetuned.params, pretrained.params);
}

/// Merge recipe for toy models: every weight matrix is eligible for pruning.
inline MergeRecipe toy_recipe(MergeMethod method, double lambda) {
    MergeRecipe r;
    r.method = method;
    r.lambda = lambda;
    r.layer_filter = LayerFilter::all_matrices();
    return r;
}

struct MergeSelection {
    ToyModel model;
    double lambda = 0.0;
    PruneConfig prune;
    double dev_loss = 0.0;
};

/// Picks lambda (and for preprocessed merges the prune config) minimising the
/// mean dev loss over `dev`. Ties keep the earlier grid point.
inline MergeSelection select_merge(const ToyModel& pretrained, std::span<const TensorMap> deltas,
                                   std::span<const Dataset* const> dev, MergeRecipe recipe,
                                   std::span<const double> lambda_grid, std::span<const PruneConfig> prune_grid) {
    if (deltas.empty()) throw ValidationError("select_merge: no task vectors");
    std::vector<double> lambdas(lambda_grid.begin(), lambda_grid.end());
    if (recipe.method == MergeMethod::WA || lambdas.empty()) lambdas = {recipe.lambda};
    std::vector<PruneConfig> prunes(prune_grid.begin(), prune_grid.end());
    if (recipe.method != MergeMethod::PREPROC_TA || prunes.empty()) prunes = {recipe.default_prune};

    std::optional<MergeSelection> best;
    for (const auto& cfg : prunes) {
        std::vector<TensorMap> pre;
        std::span<const TensorMap> use = deltas;
        if (recipe.method == MergeMethod::PREPROC_TA) {
            for (const auto& d : deltas) pre.push_back(preprocess_delta(d, cfg, recipe.layer_filter));
            use = pre;
        }
        for (double lambda : lambdas) {
            MergeRecipe r = recipe;
            r.lambda = lambda;
            ToyModel m;
            if (r.method == MergeMethod::PREPROC_TA) m.params = task_arithmetic(pretrained.params, use, lambda);
            else m.params = merge(pretrained.params, use, r);
            double loss = 0.0;
            for (const auto* d : dev) loss += evaluate(m, *d).loss;
            loss /= static_cast<double>(dev.size());
            if (!best || loss < best->dev_loss) best = MergeSelection{std::move(m), lambda, cfg, loss};
        }
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Experiments

struct WorkbenchDefaults {
    static std::vector<double> lambda_grid() { return {0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0}; }
    static std::vector<double> lr_grid() { return {0.05, 0.1, 0.2}; }
    /// svp r in {10, 25, 50} x mp p in {10, 20, 40}.
    static std::vector<PruneConfig> lors_grid() {
        std::vector<PruneConfig> g;
        for (double r : {10.0, 25.0, 50.0})
            for (double p : {10.0, 20.0, 40.0}) g.push_back(PruneConfig{p, r});
        return g;
    }
    static std::vector<double> retain_grid() {
        std::vector<double> g;
        for (int r = 5; r <= 100; r += 5) g.push_back(r);
        return g;
    }
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::vector<std::uint64_t> seeds = {0};
    std::size_t tasks = 5;
    bool multitask = false;
    TaskSpec task;
    TrainOptions train;
    std::vector<double> lr_grid = WorkbenchDefaults::lr_grid();
    std::vector<double> lambda_grid = WorkbenchDefaults::lambda_grid();
    std::vector<PruneConfig> lors_grid = WorkbenchDefaults::lors_grid();
    double mp_p = 20.0;
    double svp_r = 25.0;
    double ties_trim_k = 20.0;
    double dare_drop_rate = 0.5;
    std::vector<std::string> settings = {"pretrained", "finetune", "merge:ta", "merge:lors"};
    std::vector<std::size_t> sweep_tasks = {2, 3, 4, 5};
    std::vector<std::size_t> sweep_data = {250, 500, 1000, 2000};
    std::vector<double> sweep_retain = WorkbenchDefaults::retain_grid();

    void validate() const;
};

struct ReportRow {
    std::string setting;
    std::string task;
    std::uint64_t seed = 0;
    std::string grid;
    std::optional<double> lambda;
    double accuracy = 0.0;
    double loss = 0.0;
    std::optional<double> delta_norm;
};

inline constexpr const char* kReportHeader = "setting,task,seed,grid,lambda,accuracy,loss,delta_norm";

inline std::string fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

inline void write_report_csv(std::span<const ReportRow> rows, std::ostream& out) {
    out << kReportHeader << '\n';
    for (const auto& r : rows) {
        out << r.setting << ',' << r.task << ',' << r.seed << ',' << r.grid << ','
            << (r.lambda ? format_number(*r.lambda) : "") << ',' << fixed(r.accuracy, 4) << ',' << fixed(r.loss, 6)
            << ',' << (r.delta_norm ? fixed(*r.delta_norm, 4) : "") << '\n';
    }
}

/// All models and data for one seed.
class SeedRun {
public:
    SeedRun(const ExperimentConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
        pretrained_ = make_pretrained(cfg.task.input_dim, cfg.task.hidden_dim, cfg.task.n_classes, seed);
        build_tasks(cfg.task.n_train);
    }

    const ToyModel& pretrained() const { return pretrained_; }
    const std::vector<TaskData>& tasks() const { return tasks_; }

    /// Per-task finetuned model (lr chosen on the task's dev split), computed on first use.
    const ToyModel& finetuned(std::size_t t) {
        if (!finetuned_[t]) {
            const Dataset* tr[] = {&tasks_[t].train};
            const Dataset* dv[] = {&tasks_[t].dev};
            auto opt = cfg_.train;
            opt.mode = TrainMode::Single;
            opt.seed = hash_combine(seed_, 1000 + t);
            finetuned_[t] = train_best_lr(pretrained_, tr, dv, cfg_.lr_grid, opt).model;
        }
        return *finetuned_[t];
    }

    std::vector<TensorMap> task_vectors(std::size_t count) {
        std::vector<TensorMap> out;
        for (std::size_t t = 0; t < count; ++t) out.push_back(task_vector(finetuned(t), pretrained_));
        return out;
    }

    std::vector<const Dataset*> devs(std::size_t count) const {
        std::vector<const Dataset*> out;
        for (std::size_t t = 0; t < count; ++t) out.push_back(&tasks_[t].dev);
        return out;
    }

    MergeSelection merged(const std::string& method, std::size_t count) {
        const auto deltas = task_vectors(count);
        return merge_deltas(method, deltas, devs(count));
    }

    MergeSelection merge_deltas(const std::string& method, std::span<const TensorMap> deltas,
                                std::span<const Dataset* const> dev) const {
        MergeRecipe r = toy_recipe(MergeMethod::TA, 1.0);
        r.ties_trim_k = cfg_.ties_trim_k;
        r.dare_drop_rate = cfg_.dare_drop_rate;
        r.seed = seed_;
        std::vector<PruneConfig> grid;
        if (method == "wa") r.method = MergeMethod::WA;
        else if (method == "ta") r.method = MergeMethod::TA;
        else if (method == "ties") r.method = MergeMethod::TIES;
        else if (method == "dare") r.method = MergeMethod::DARE_TA;
        else if (method == "lors") {
            r.method = MergeMethod::PREPROC_TA;
            grid = cfg_.lors_grid;
        } else if (method == "mp") {
            r.method = MergeMethod::PREPROC_TA;
            grid = {PruneConfig{cfg_.mp_p, 0.0}};
        } else if (method == "svp") {
            r.method = MergeMethod::PREPROC_TA;
            grid = {PruneConfig{0.0, cfg_.svp_r}};
        } else {
            throw ValidationError("unknown merge method '" + method + "'");
        }
        return select_merge(pretrained_, deltas, dev, r, cfg_.lambda_grid, grid);
    }

    TrainOptions uniform_options(std::uint64_t salt) const {
        auto opt = cfg_.train;
        opt.seed = hash_combine(seed_, salt);
        return opt;
    }

private:
    void build_tasks(std::size_t n_train) {
        const std::size_t families = cfg_.tasks;
        for (std::size_t f = 0; f < families; ++f) {
            TaskSpec spec = cfg_.task;
            spec.n_train = n_train;
            spec.seed = hash_combine(seed_, f);
            spec.task_id = "t" + std::to_string(f);
            if (!cfg_.multitask) {
                tasks_.push_back(gen_task(spec, pretrained_));
                continue;
            }
            spec.task_id = "t" + std::to_string(f) + ".a";
            tasks_.push_back(gen_task(spec, pretrained_));
            std::vector<int> perm(spec.n_classes);
            std::iota(perm.begin(), perm.end(), 0);
            std::mt19937_64 rng(hash_combine(spec.seed, 0x7065726dull));
            std::shuffle(perm.begin(), perm.end(), rng);
            spec.task_id = "t" + std::to_string(f) + ".b";
            spec.label_permutation = perm;
            tasks_.push_back(gen_task(spec, pretrained_));
        }
        finetuned_.assign(tasks_.size(), std::nullopt);
    }

    const ExperimentConfig& cfg_;
    std::uint64_t seed_;
    ToyModel pretrained_;
    std::vector<TaskData> tasks_;
    std::vector<std::optional<ToyModel>> finetuned_;
};

namespace detail {

inline std::optional<double> delta_norm_of(double m, double pre, double ft) {
    if (ft == pre) return std::nullopt;
    return normalized_delta({m, pre, ft, false});
}

class SeedReporter {
public:
    SeedReporter(const ExperimentConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed), run_(cfg, seed) {}

    std::vector<ReportRow> run() {
        std::vector<ReportRow> rows;
        for (const auto& s : cfg_.settings) setting(s, rows);
        return rows;
    }

private:
    std::size_t n_tasks() const { return run_.tasks().size(); }

    const std::vector<EvalResult>& pretrained_evals() {
        if (pre_.empty())
            for (const auto& t : run_.tasks()) pre_.push_back(evaluate(run_.pretrained(), t.test));
        return pre_;
    }
    const std::vector<EvalResult>& finetuned_evals() {
        if (ft_.empty())
            for (std::size_t t = 0; t < n_tasks(); ++t) ft_.push_back(evaluate(run_.finetuned(t), run_.tasks()[t].test));
        return ft_;
    }

    /// Per-task rows for `model` plus an "avg" row over the first `count` tasks.
    void emit(const std::string& setting, const std::string& grid, std::optional<double> lambda,
              const std::vector<EvalResult>& evals, std::vector<ReportRow>& rows, bool per_task = true) {
        const auto& pre = pretrained_evals();
        const auto& ft = finetuned_evals();
        double acc = 0, loss = 0, pacc = 0, facc = 0;
        for (std::size_t t = 0; t < evals.size(); ++t) {
            if (per_task)
                rows.push_back({setting, run_.tasks()[t].spec.task_id, seed_, grid, lambda, evals[t].accuracy,
                                evals[t].loss, delta_norm_of(evals[t].accuracy, pre[t].accuracy, ft[t].accuracy)});
            acc += evals[t].accuracy;
            loss += evals[t].loss;
            pacc += pre[t].accuracy;
            facc += ft[t].accuracy;
        }
        const double n = static_cast<double>(evals.size());
        rows.push_back({setting, "avg", seed_, grid, lambda, acc / n, loss / n, delta_norm_of(acc / n, pacc / n, facc / n)});
    }

    std::vector<EvalResult> eval_on(const ToyModel& m, std::size_t count) {
        std::vector<EvalResult> out;
        for (std::size_t t = 0; t < count; ++t) out.push_back(evaluate(m, run_.tasks()[t].test));
        return out;
    }

    std::vector<const Dataset*> splits(std::span<const std::size_t> ids, bool dev) const {
        std::vector<const Dataset*> out;
        for (auto t : ids) out.push_back(dev ? &run_.tasks()[t].dev : &run_.tasks()[t].train);
        return out;
    }

    /// Jointly trains one model per group (uniform lr chosen on the group's dev splits).
    ToyModel joint_model(std::span<const std::size_t> ids, std::uint64_t salt) {
        const auto tr = splits(ids, false);
        const auto dv = splits(ids, true);
        auto opt = run_.uniform_options(salt);
        opt.mode = TrainMode::Joint;
        return train_best_lr(run_.pretrained(), tr, dv, cfg_.lr_grid, opt).model;
    }

    void setting(const std::string& s, std::vector<ReportRow>& rows) {
        const auto n = n_tasks();
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        if (s == "pretrained") {
            emit(s, "", std::nullopt, pretrained_evals(), rows);
        } else if (s == "finetune") {
            emit(s, "", std::nullopt, finetuned_evals(), rows);
        } else if (s == "joint") {
            emit(s, "", std::nullopt, eval_on(joint_model(all, 2000), n), rows);
        } else if (s == "sequential") {
            // Every cyclic rotation of the task order; keep the best mean dev accuracy.
            std::optional<std::pair<double, ToyModel>> best;
            for (std::size_t rot = 0; rot < n; ++rot) {
                ToyModel m = run_.pretrained();
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t t = (rot + k) % n;
                    auto opt = run_.uniform_options(3000 + rot * n + k);
                    const Dataset* dv[] = {&run_.tasks()[t].dev};
                    const Dataset* tr[] = {&run_.tasks()[t].train};
                    m = train_best_lr(m, tr, dv, cfg_.lr_grid, opt).model;
                }
                double dev_acc = 0.0;
                for (std::size_t t = 0; t < n; ++t) dev_acc += evaluate(m, run_.tasks()[t].dev).accuracy;
                if (!best || dev_acc > best->first) best = std::make_pair(dev_acc, std::move(m));
            }
            emit(s, "", std::nullopt, eval_on(best->second, n), rows);
        } else if (s.starts_with("merge:")) {
            const auto method = s.substr(6);
            auto sel = run_.merged(method, n);
            emit(s, prune_label(method, sel.prune), lambda_of(method, sel.lambda), eval_on(sel.model, n), rows);
        } else if (s.starts_with("mt_train+ml_merge:") || s.starts_with("ml_train+mt_merge:")) {
            if (!cfg_.multitask) throw ValidationError("setting " + s + " requires multitask: true");
            const bool by_family = s.starts_with("mt_train");
            const auto method = s.substr(s.find(':') + 1);
            std::vector<std::vector<std::size_t>> groups;
            if (by_family) {
                for (std::size_t f = 0; f < n / 2; ++f) groups.push_back({2 * f, 2 * f + 1});
            } else {
                groups.resize(2);
                for (std::size_t t = 0; t < n; ++t) groups[t % 2].push_back(t);
            }
            std::vector<TensorMap> deltas;
            for (std::size_t g = 0; g < groups.size(); ++g)
                deltas.push_back(task_vector(joint_model(groups[g], 4000 + g), run_.pretrained()));
            const auto dv = splits(all, true);
            auto sel = run_.merge_deltas(method, deltas, dv);
            emit(s, prune_label(method, sel.prune), lambda_of(method, sel.lambda), eval_on(sel.model, n), rows);
        } else if (s == "sweep:tasks") {
            for (auto k : cfg_.sweep_tasks) {
                if (k > n || k < 1) throw ValidationError("sweep:tasks entry " + std::to_string(k) + " out of range");
                for (const char* method : {"ta", "lors"}) {
                    auto sel = run_.merged(method, k);
                    emit(std::string("sweep:tasks/") + method, std::to_string(k), sel.lambda, eval_on(sel.model, k),
                         rows, false);
                }
            }
        } else if (s == "sweep:data") {
            for (auto size : cfg_.sweep_data) {
                ExperimentConfig sub = cfg_;
                sub.task.n_train = size;
                SeedRun r(sub, seed_);
                std::vector<EvalResult> ft;
                for (std::size_t t = 0; t < n; ++t) ft.push_back(evaluate(r.finetuned(t), r.tasks()[t].test));
                const auto grid = std::to_string(size);
                emit_plain("sweep:data/finetune", grid, std::nullopt, ft, rows);
                for (const char* method : {"ta", "lors"}) {
                    auto sel = r.merged(method, n);
                    std::vector<EvalResult> ev;
                    for (std::size_t t = 0; t < n; ++t) ev.push_back(evaluate(sel.model, r.tasks()[t].test));
                    emit_plain(std::string("sweep:data/") + method, grid, sel.lambda, ev, rows);
                }
            }
        } else if (s == "sweep:retain_mp" || s == "sweep:retain_svp") {
            const bool mp = s == "sweep:retain_mp";
            for (std::size_t t = 0; t < n; ++t) {
                const auto tau = task_vector(run_.finetuned(t), run_.pretrained());
                for (double ratio : cfg_.sweep_retain) {
                    const auto m = pruned_model(run_.pretrained(), tau, mp, ratio);
                    const auto ev = evaluate(m, run_.tasks()[t].test);
                    rows.push_back({s, run_.tasks()[t].spec.task_id, seed_, format_number(ratio), 1.0, ev.accuracy,
                                    ev.loss,
                                    delta_norm_of(ev.accuracy, pretrained_evals()[t].accuracy,
                                                  finetuned_evals()[t].accuracy)});
                }
            }
        } else {
            throw ValidationError("unknown setting '" + s + "'");
        }
    }

    void emit_plain(const std::string& setting, const std::string& grid, std::optional<double> lambda,
                    const std::vector<EvalResult>& evals, std::vector<ReportRow>& rows) {
        double acc = 0, loss = 0;
        for (const auto& e : evals) {
            acc += e.accuracy;
            loss += e.loss;
        }
        const double n = static_cast<double>(evals.size());
        rows.push_back({setting, "avg", seed_, grid, lambda, acc / n, loss / n, std::nullopt});
    }

    static std::optional<double> lambda_of(const std::string& method, double lambda) {
        if (method == "wa") return std::nullopt;
        return lambda;
    }

    static std::string prune_label(const std::string& method, const PruneConfig& p) {
        if (method != "lors" && method != "mp" && method != "svp") return "";
        return "r=" + format_number(p.svp_retain_r) + ";p=" + format_number(p.mp_retain_p);
    }

public:
    static ToyModel pruned_model(const ToyModel& pretrained, const TensorMap& tau, bool mp, double ratio) {
        const PruneConfig cfg = mp ? PruneConfig{ratio, 0.0} : PruneConfig{0.0, ratio};
        const auto pruned = preprocess_delta(tau, cfg, LayerFilter::all_matrices());
        return ToyModel{apply_delta(pretrained.params, pruned, 1.0)};
    }

private:
    const ExperimentConfig& cfg_;
    std::uint64_t seed_;
    SeedRun run_;
    std::vector<EvalResult> pre_, ft_;
};

}  // namespace detail

/// θ0 + prune(τ) with MP (mp = true) or SVP at the given retain ratio, λ = 1.
inline ToyModel pruned_model(const ToyModel& pretrained, const TensorMap& tau, bool mp, double ratio) {
    return detail::SeedReporter::pruned_model(pretrained, tau, mp, ratio);
}

struct ForgettingTrial {
    double acc_after_first = 0.0;   // task A accuracy right after phase A
    double acc_after_second = 0.0;  // task A accuracy after phase B
    bool forgot() const { return acc_after_second < acc_after_first; }
};

/// Sequential training on two fresh tasks A then B, measuring task A test accuracy.
inline ForgettingTrial forgetting_trial(const TaskSpec& base, const TrainOptions& opt, std::uint64_t seed) {
    const auto pre = make_pretrained(base.input_dim, base.hidden_dim, base.n_classes, seed);
    TaskSpec a = base, b = base;
    a.seed = hash_combine(seed, 0);
    a.task_id = "A";
    b.seed = hash_combine(seed, 1);
    b.task_id = "B";
    const auto ta = gen_task(a, pre);
    const auto tb = gen_task(b, pre);
    auto o = opt;
    o.mode = TrainMode::Single;
    o.seed = hash_combine(seed, 10);
    const auto after_a = train(pre, ta.train, o);
    o.seed = hash_combine(seed, 11);
    const auto after_b = train(after_a, tb.train, o);
    return {evaluate(after_a, ta.test).accuracy, evaluate(after_b, ta.test).accuracy};
}

struct RetainCurve {
    std::vector<double> ratios;
    std::vector<double> accuracy;

    /// Retain ratio with the highest accuracy; ties go to the larger ratio.
    double peak() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < accuracy.size(); ++i)
            if (accuracy[i] > accuracy[best] || (accuracy[i] == accuracy[best] && ratios[i] > ratios[best])) best = i;
        return ratios[best];
    }
};

/// Test accuracy of theta0 + prune(tau) over the retain grid, for one finetuned task.
inline RetainCurve retain_curve(const ToyModel& pretrained, const ToyModel& finetuned, const Dataset& test, bool mp,
                                std::span<const double> grid) {
    RetainCurve c;
    const auto tau = task_vector(finetuned, pretrained);
    for (double r : grid) {
        c.ratios.push_back(r);
        c.accuracy.push_back(evaluate(pruned_model(pretrained, tau, mp, r), test).accuracy);
    }
    return c;
}

inline void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ValidationError("experiment: at least one seed required");
    if (tasks < 1) throw ValidationError("experiment: tasks must be >= 1");
    task.validate();
    if (lr_grid.empty()) throw ValidationError("experiment: lr_grid must be non-empty");
    for (double lr : lr_grid)
        if (!(lr > 0.0)) throw ValidationError("experiment: learning rates must be positive");
    if (lambda_grid.empty()) throw ValidationError("experiment: lambda_grid must be non-empty");
    for (const auto& p : lors_grid) p.validate();
    if (lors_grid.empty()) throw ValidationError("experiment: lors grid must be non-empty");
    if (settings.empty()) throw ValidationError("experiment: no settings requested");
    static const std::vector<std::string> methods = {"wa", "ta", "ties", "dare", "lors", "mp", "svp"};
    for (const auto& s : settings) {
        auto method_ok = [&](std::string_view prefix) {
            if (!s.starts_with(prefix)) return false;
            const auto m = s.substr(prefix.size());
            if (std::find(methods.begin(), methods.end(), m) == methods.end())
                throw ValidationError("experiment: unknown merge method in setting '" + s + "'");
            return true;
        };
        if (s == "pretrained" || s == "finetune" || s == "joint" || s == "sequential" || s == "sweep:tasks" ||
            s == "sweep:data" || s == "sweep:retain_mp" || s == "sweep:retain_svp")
            continue;
        if (method_ok("merge:") || method_ok("mt_train+ml_merge:") || method_ok("ml_train+mt_merge:")) {
            if (!s.starts_with("merge:") && !multitask)
                throw ValidationError("experiment: setting '" + s + "' requires multitask: true");
            continue;
        }
        throw ValidationError("experiment: unknown setting '" + s + "'");
    }
    // the default task sweep assumes five tasks, so only check it when it will run
    const bool task_sweep = std::find(settings.begin(), settings.end(), "sweep:tasks") != settings.end();
    for (auto k : task_sweep ? sweep_tasks : std::vector<std::size_t>{})
        if (k < 1 || k > tasks * (multitask ? 2 : 1))
            throw ValidationError("experiment: sweep.tasks entry " + std::to_string(k) + " out of range");
    for (auto d : sweep_data)
        if (d < 1) throw ValidationError("experiment: sweep.data entries must be >= 1");
    for (double r : sweep_retain)
        if (!(r > 0.0 && r <= 100.0)) throw ValidationError("experiment: sweep.retain entries must lie in (0, 100]");
}

/// Runs every (seed, setting) cell; seeds run in parallel, rows come back in seed order.
inline std::vector<ReportRow> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    std::vector<std::vector<ReportRow>> per_seed(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), [&](std::size_t i) { per_seed[i] = detail::SeedReporter(cfg, cfg.seeds[i]).run(); });
    std::vector<ReportRow> rows;
    for (auto& p : per_seed) rows.insert(rows.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    return rows;
}

}  // namespace lors::bench
