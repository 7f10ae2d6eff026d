// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorsmerge/common.hpp"

namespace lors {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major float32 tensor of rank 1 or 2.
class DenseTensor {
public:
    DenseTensor() : shape_{1}, data_(1, 0.0f) {}

    explicit DenseTensor(Shape shape) : DenseTensor(shape, std::vector<float>(checked_numel(shape), 0.0f)) {}

    DenseTensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_))
            throw ValidationError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                  shape_str(shape_));
    }

    static DenseTensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data) {
        return DenseTensor({rows, cols}, std::move(data));
    }
    static DenseTensor vector(std::vector<float> data) {
        const std::size_t n = data.size();
        return DenseTensor({n}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool is_matrix() const { return shape_.size() == 2; }
    std::size_t rows() const { return shape_[0]; }
    /// Columns for a matrix, 1 for a vector.
    std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    std::vector<float>& values() { return data_; }
    const std::vector<float>& values() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads).
    friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
        return a.shape_ == b.shape_ &&
               std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), b.data_.end(), [](float x, float y) {
                   return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
               });
    }

private:
    static std::size_t checked_numel(const Shape& shape) {
        if (shape.empty() || shape.size() > 2)
            throw ValidationError("tensor rank must be 1 or 2, got shape " + shape_str(shape));
        for (auto d : shape)
            if (d == 0) throw ValidationError("tensor dimensions must be >= 1, got shape " + shape_str(shape));
        return shape_numel(shape);
    }

    Shape shape_;
    std::vector<float> data_;
};

inline double frobenius_norm(const DenseTensor& t) {
    double s = 0.0;
    for (float v : t.data()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

/// Frobenius norm of a - b, accumulated in double.
inline double frobenius_distance(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape() != b.shape()) throw ValidationError("frobenius_distance: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Well-known metadata keys.
inline constexpr const char* kMetaKind = "kind";
inline constexpr const char* kMetaBaseFingerprint = "base_fingerprint";
inline constexpr const char* kKindDelta = "delta";

/// Named tensors in lexicographic name order plus free-form string metadata.
/// Holds full checkpoints as well as task vectors (kind=delta).
class TensorMap {
public:
    using Entries = std::map<std::string, DenseTensor>;
    using Meta = std::map<std::string, std::string>;

    TensorMap() = default;

    void insert(std::string name, DenseTensor t) {
        if (name.empty()) throw ValidationError("tensor name must be non-empty");
        if (entries_.contains(name)) throw ValidationError("duplicate tensor name '" + name + "'");
        entries_.emplace(std::move(name), std::move(t));
    }
    /// Insert or overwrite.
    void set(const std::string& name, DenseTensor t) {
        if (name.empty()) throw ValidationError("tensor name must be non-empty");
        entries_.insert_or_assign(name, std::move(t));
    }

    bool contains(const std::string& name) const { return entries_.contains(name); }
    const DenseTensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("no tensor named '" + name + "'");
        return it->second;
    }
    DenseTensor& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("no tensor named '" + name + "'");
        return it->second;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    const Entries& entries() const { return entries_; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, _] : entries_) out.push_back(k);
        return out;
    }

    Meta& meta() { return meta_; }
    const Meta& meta() const { return meta_; }

    bool is_delta() const {
        auto it = meta_.find(kMetaKind);
        return it != meta_.end() && it->second == kKindDelta;
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.size();
        return n;
    }

    /// Tensors only; metadata is ignored.
    bool same_tensors(const TensorMap& other) const { return entries_ == other.entries_; }

    friend bool operator==(const TensorMap& a, const TensorMap& b) {
        return a.entries_ == b.entries_ && a.meta_ == b.meta_;
    }

private:
    Entries entries_;
    Meta meta_;
};

/// Content hash over names, shapes and raw bytes (metadata excluded).
inline std::string fingerprint(const TensorMap& t) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, tensor] : t) {
        h = fnv1a(name, h);
        h = fnv1a("\0", 1, h);
        for (auto d : tensor.shape()) {
            const std::uint64_t d64 = d;
            h = fnv1a(&d64, sizeof d64, h);
        }
        h = fnv1a(tensor.data().data(), tensor.size() * sizeof(float), h);
    }
    return hex64(h);
}

/// Throws naming the first tensor whose name or shape differs.
inline void require_compatible(const TensorMap& a, const TensorMap& b, std::string_view what) {
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
        if (ia->first != ib->first) {
            const auto& missing = ia->first < ib->first ? ia->first : ib->first;
            throw ValidationError(std::string(what) + ": name-set mismatch at tensor '" + missing + "'");
        }
        if (ia->second.shape() != ib->second.shape())
            throw ValidationError(std::string(what) + ": shape mismatch for tensor '" + ia->first + "': " +
                                  shape_str(ia->second.shape()) + " vs " + shape_str(ib->second.shape()));
    }
    if (ia != a.end()) throw ValidationError(std::string(what) + ": name-set mismatch at tensor '" + ia->first + "'");
    if (ib != b.end()) throw ValidationError(std::string(what) + ": name-set mismatch at tensor '" + ib->first + "'");
}

/// Builds a map with the same names as `like`, computing each tensor with fn(name, index).
/// Tensors are processed in parallel; fn must only touch its own tensor.
template <typename Fn>
TensorMap map_tensors(const TensorMap& like, Fn&& fn) {
    const auto names = like.names();
    std::vector<DenseTensor> out(names.size());
    parallel_for(names.size(), [&](std::size_t i) { out[i] = fn(names[i], i); });
    TensorMap result;
    for (std::size_t i = 0; i < names.size(); ++i) result.insert(names[i], std::move(out[i]));
    return result;
}

/// Task vector: finetuned - base, tagged with the base fingerprint.
inline TensorMap diff(const TensorMap& finetuned, const TensorMap& base) {
    require_compatible(finetuned, base, "diff");
    TensorMap out = map_tensors(base, [&](const std::string& name, std::size_t) {
        const auto& f = finetuned.at(name);
        const auto& b = base.at(name);
        std::vector<float> d(f.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = f[i] - b[i];
        return DenseTensor(f.shape(), std::move(d));
    });
    out.meta()[kMetaKind] = kKindDelta;
    out.meta()[kMetaBaseFingerprint] = fingerprint(base);
    return out;
}

/// Warns when a delta records a base fingerprint different from `base`.
inline void check_base_fingerprint(const TensorMap& delta, const std::string& base_fp, std::string_view label) {
    auto it = delta.meta().find(kMetaBaseFingerprint);
    if (it != delta.meta().end() && it->second != base_fp)
        warn(std::string(label) + " was computed against base " + it->second + " but is applied to base " + base_fp);
}

/// base + lambda * delta, one rounding per element.
inline TensorMap apply_delta(const TensorMap& base, const TensorMap& delta, double lambda) {
    if (!std::isfinite(lambda)) throw ValidationError("apply_delta: lambda must be finite");
    require_compatible(base, delta, "apply_delta");
    check_base_fingerprint(delta, fingerprint(base), "delta");
    TensorMap out = map_tensors(base, [&](const std::string& name, std::size_t) {
        const auto& b = base.at(name);
        const auto& d = delta.at(name);
        std::vector<float> r(b.size());
        for (std::size_t i = 0; i < r.size(); ++i)
            r[i] = static_cast<float>(static_cast<double>(b[i]) + lambda * static_cast<double>(d[i]));
        return DenseTensor(b.shape(), std::move(r));
    });
    return out;
}

}  // namespace lors
