// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lorsmerge/common.hpp"
#include "lorsmerge/tensor.hpp"

namespace lors {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

/// Thin SVD W = U diag(sigma) V^T with W of shape d x k.
/// U is d x q, V is k x q, sigma has q entries (q = min(d,k) unless truncated),
/// sorted non-increasing. The first nonzero entry of every U column is >= 0.
struct SVDFactors {
    MatrixF U;
    VectorF sigma;
    MatrixF V;

    Eigen::Index rank() const { return sigma.size(); }
    std::size_t rows() const { return static_cast<std::size_t>(U.rows()); }
    std::size_t cols() const { return static_cast<std::size_t>(V.rows()); }
};

inline Eigen::Map<const RowMatrixF> as_matrix(const DenseTensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline DenseTensor to_tensor(const RowMatrixF& m) {
    return DenseTensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                               std::vector<float>(m.data(), m.data() + m.size()));
}

namespace detail {

inline void require_svd_input(const DenseTensor& w) {
    if (!w.is_matrix())
        throw ValidationError("svd: rank-2 tensor required, got shape " + shape_str(w.shape()));
    if (!w.all_finite()) throw ValidationError("svd: input contains non-finite entries");
}

inline void canonicalize_signs(SVDFactors& f) {
    for (Eigen::Index j = 0; j < f.U.cols(); ++j) {
        for (Eigen::Index i = 0; i < f.U.rows(); ++i) {
            const float v = f.U(i, j);
            if (v == 0.0f) continue;
            if (v < 0.0f) {
                f.U.col(j) = -f.U.col(j);
                f.V.col(j) = -f.V.col(j);
            }
            break;
        }
    }
}

/// Leading `keep` singular triplets plus the full spectrum, in double.
/// Tall or wide inputs are reduced to a square triangular factor by Householder
/// QR first; the square core goes through Eigen's divide-and-conquer SVD.
inline SVDFactors svd_leading(const DenseTensor& w, Eigen::Index keep, VectorF* full_sigma = nullptr) {
    require_svd_input(w);
    const MatrixD a = as_matrix(w).cast<double>();
    const Eigen::Index d = a.rows();
    const Eigen::Index k = a.cols();
    const Eigen::Index m = std::min(d, k);
    keep = std::clamp<Eigen::Index>(keep, 0, m);

    constexpr int kOpts = Eigen::ComputeThinU | Eigen::ComputeThinV;
    MatrixD u, v;
    Eigen::VectorXd s;
    if (d == k) {
        Eigen::BDCSVD<MatrixD> svd(a, kOpts);
        s = svd.singularValues();
        u = svd.matrixU().leftCols(keep);
        v = svd.matrixV().leftCols(keep);
    } else {
        const bool tall = d > k;
        Eigen::HouseholderQR<MatrixD> qr;
        if (tall) qr.compute(a);
        else qr.compute(a.transpose());
        const MatrixD r = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
        Eigen::BDCSVD<MatrixD> svd(r, kOpts);
        s = svd.singularValues();
        MatrixD lifted = MatrixD::Zero(std::max(d, k), keep);
        lifted.topRows(m) = svd.matrixU().leftCols(keep);
        lifted.applyOnTheLeft(qr.householderQ());
        if (tall) {
            u = std::move(lifted);
            v = svd.matrixV().leftCols(keep);
        } else {
            u = svd.matrixV().leftCols(keep);
            v = std::move(lifted);
        }
    }

    SVDFactors f;
    f.U = u.cast<float>();
    f.V = v.cast<float>();
    f.sigma = s.head(keep).cast<float>();
    if (full_sigma) *full_sigma = s.cast<float>();
    canonicalize_signs(f);
    return f;
}

}  // namespace detail

/// Full thin SVD; deterministic for a given input.
inline SVDFactors svd(const DenseTensor& w) {
    detail::require_svd_input(w);
    return detail::svd_leading(w, static_cast<Eigen::Index>(std::min(w.rows(), w.cols())));
}

/// Singular values only (full spectrum), non-increasing.
inline VectorF singular_values(const DenseTensor& w) {
    VectorF s;
    detail::svd_leading(w, 0, &s);
    return s;
}

/// The first r triplets of f; 0 <= r <= rank.
inline SVDFactors truncate(const SVDFactors& f, Eigen::Index r) {
    if (r < 0 || r > f.rank())
        throw ValidationError("truncate: rank " + std::to_string(r) + " outside [0, " + std::to_string(f.rank()) + "]");
    return {f.U.leftCols(r), f.sigma.head(r), f.V.leftCols(r)};
}

/// U_r diag(sigma_r) V_r^T accumulated in double, rounded to float. r = 0 gives zeros.
inline DenseTensor reconstruct(const SVDFactors& f) {
    const MatrixD us = f.U.cast<double>() * f.sigma.cast<double>().asDiagonal();
    const RowMatrixD out = us * f.V.cast<double>().transpose();
    return to_tensor(out.cast<float>());
}

/// Rank-r truncated reconstruction, 1 <= r <= rank(f).
inline DenseTensor low_rank_approx(const SVDFactors& f, Eigen::Index r) {
    if (r < 1 || r > f.rank())
        throw ValidationError("low_rank_approx: rank " + std::to_string(r) + " outside [1, " +
                              std::to_string(f.rank()) + "]");
    return reconstruct(truncate(f, r));
}

/// max |U^T U - I| and max |V^T V - I|, whichever is larger.
inline double orthonormality_residual(const SVDFactors& f) {
    const MatrixD u = f.U.cast<double>();
    const MatrixD v = f.V.cast<double>();
    const auto eye = MatrixD::Identity(f.rank(), f.rank());
    const double ru = f.rank() ? (u.transpose() * u - eye).cwiseAbs().maxCoeff() : 0.0;
    const double rv = f.rank() ? (v.transpose() * v - eye).cwiseAbs().maxCoeff() : 0.0;
    return std::max(ru, rv);
}

}  // namespace lors
