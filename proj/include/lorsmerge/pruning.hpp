// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Per-matrix pruning of weight or delta matrices:
//
//   magnitude pruning (MP)      keep the top p% entries by |w|
//   singular value pruning (SVP) keep the top r% singular triplets
//   LoRS                         L = SVP_r(W), S = MP_p(W - L), W ~ L + S
//
// p and r are retain percentages. Vectors are never pruned; callers exempt them.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lorsmerge/common.hpp"
#include "lorsmerge/linalg.hpp"
#include "lorsmerge/tensor.hpp"

namespace lors {

struct PruneConfig {
    /// MP retain ratio p, percent of entries.
    double mp_retain_p = 100.0;
    /// SVP retain ratio r, percent of min(d, k) singular values. 0 disables the low-rank part.
    double svp_retain_r = 100.0;

    void validate() const {
        if (!(mp_retain_p >= 0.0 && mp_retain_p <= 100.0))
            throw ValidationError("MP retain ratio p must lie in [0, 100], got " + std::to_string(mp_retain_p));
        if (!(svp_retain_r >= 0.0 && svp_retain_r <= 100.0))
            throw ValidationError("SVP retain ratio r must lie in [0, 100], got " + std::to_string(svp_retain_r));
    }
};

/// ceil(p/100 * n), snapping products that are integral up to rounding noise.
inline std::size_t retained_count(double p, std::size_t n) {
    const double x = p * static_cast<double>(n) / 100.0;
    const double nearest = std::round(x);
    if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, x)) return static_cast<std::size_t>(nearest);
    return std::min(n, static_cast<std::size_t>(std::ceil(x)));
}

/// max(1, round(r/100 * min(d, k))); r = 0 maps to 0.
inline std::size_t retained_rank(double r, std::size_t d, std::size_t k) {
    if (r == 0.0) return 0;
    const std::size_t m = std::min(d, k);
    const auto rank = static_cast<std::size_t>(std::llround(r * static_cast<double>(m) / 100.0));
    return std::clamp<std::size_t>(rank, 1, m);
}

/// Flat indices of the n_keep largest |w|, ties broken by lower index; ascending.
inline std::vector<std::size_t> magnitude_keep_indices(std::span<const float> w, std::size_t n_keep) {
    std::vector<std::size_t> keep;
    if (n_keep == 0) return keep;
    if (n_keep >= w.size()) {
        keep.resize(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) keep[i] = i;
        return keep;
    }
    std::vector<float> mags(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) mags[i] = std::abs(w[i]);
    std::vector<float> scratch = mags;
    auto nth = scratch.begin() + static_cast<std::ptrdiff_t>(n_keep - 1);
    std::nth_element(scratch.begin(), nth, scratch.end(), std::greater<>());
    const float threshold = *nth;

    std::size_t above = 0;
    for (float m : mags) above += m > threshold;
    std::size_t ties_left = n_keep - above;
    keep.reserve(n_keep);
    for (std::size_t i = 0; i < mags.size(); ++i) {
        if (mags[i] > threshold) {
            keep.push_back(i);
        } else if (mags[i] == threshold && ties_left > 0) {
            keep.push_back(i);
            --ties_left;
        }
    }
    return keep;
}

namespace detail {
inline void require_matrix(const DenseTensor& w, const char* op) {
    if (!w.is_matrix())
        throw ValidationError(std::string(op) + ": rank-2 tensor required, got shape " + shape_str(w.shape()) +
                              " (vectors must be exempted by the caller)");
}
}  // namespace detail

/// Keeps exactly ceil(p/100 * d*k) entries with the largest magnitude and zeroes
/// the rest. Kept zeros are written as +0.0 so the operation is idempotent bitwise.
inline DenseTensor magnitude_prune(const DenseTensor& w, double p) {
    detail::require_matrix(w, "magnitude_prune");
    if (!(p >= 0.0 && p <= 100.0)) throw ValidationError("magnitude_prune: p must lie in [0, 100]");
    const auto keep = magnitude_keep_indices(w.data(), retained_count(p, w.size()));
    std::vector<float> out(w.size(), 0.0f);
    for (auto i : keep) out[i] = w[i] + 0.0f;
    return DenseTensor(w.shape(), std::move(out));
}

/// Rank-max(1, round(r/100 * min(d,k))) reconstruction.
inline DenseTensor singular_value_prune(const DenseTensor& w, double r) {
    detail::require_matrix(w, "singular_value_prune");
    if (!(r > 0.0 && r <= 100.0)) throw ValidationError("singular_value_prune: r must lie in (0, 100]");
    const auto rank = retained_rank(r, w.rows(), w.cols());
    return reconstruct(detail::svd_leading(w, static_cast<Eigen::Index>(rank)));
}

struct SparseEntry {
    std::uint32_t row;
    std::uint32_t col;
    float value;
};

/// W ~ L + S with L a truncated SVD and S a coordinate list.
struct LoRSDecomposition {
    SVDFactors low_rank;
    std::vector<SparseEntry> sparse;
    std::size_t rows = 0;
    std::size_t cols = 0;

    DenseTensor low_rank_dense() const {
        if (low_rank.rank() == 0) return DenseTensor({rows, cols});
        return reconstruct(low_rank);
    }

    DenseTensor sparse_dense() const {
        DenseTensor s({rows, cols});
        for (const auto& e : sparse) s.at(e.row, e.col) = e.value;
        return s;
    }

    /// dense(L) + dense(S).
    DenseTensor dense() const {
        DenseTensor out = low_rank_dense();
        for (const auto& e : sparse) out.at(e.row, e.col) += e.value;
        return out;
    }
};

/// Low-rank plus sparse split: L keeps the leading singular triplets, S keeps the
/// largest residual entries. Every sparse value equals (W - dense(L)) exactly.
inline LoRSDecomposition lors(const DenseTensor& w, const PruneConfig& cfg) {
    detail::require_matrix(w, "lors");
    cfg.validate();
    LoRSDecomposition out;
    out.rows = w.rows();
    out.cols = w.cols();
    const auto rank = retained_rank(cfg.svp_retain_r, w.rows(), w.cols());

    DenseTensor residual = w;
    if (rank > 0) {
        out.low_rank = detail::svd_leading(w, static_cast<Eigen::Index>(rank));
        const DenseTensor l = reconstruct(out.low_rank);
        for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = w[i] - l[i];
    } else {
        if (!w.all_finite()) throw ValidationError("lors: input contains non-finite entries");
        out.low_rank = SVDFactors{MatrixF(w.rows(), 0), VectorF(0), MatrixF(w.cols(), 0)};
    }

    const auto keep = magnitude_keep_indices(residual.data(), retained_count(cfg.mp_retain_p, residual.size()));
    out.sparse.reserve(keep.size());
    for (auto i : keep)
        out.sparse.push_back({static_cast<std::uint32_t>(i / out.cols), static_cast<std::uint32_t>(i % out.cols),
                              residual[i] + 0.0f});
    return out;
}

}  // namespace lors
