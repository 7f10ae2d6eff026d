// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Scoring and statistics.
//
// Tokenisation for WER and BLEU is plain whitespace splitting, case-sensitive,
// with no normalisation; pre-normalise text if a tool-compatible score is needed.
// The scores are self-contained definitions and are not bit-compatible with
// Sclite or SacreBLEU.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lorsmerge/common.hpp"

namespace lors {

using Tokens = std::vector<std::string>;

inline Tokens tokenize(std::string_view line) {
    Tokens out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) out.emplace_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

/// Unit-cost Levenshtein distance between token sequences.
inline std::size_t edit_distance(const Tokens& ref, const Tokens& hyp) {
    std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
    for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[hyp.size()];
}

/// Corpus WER in percent: 100 * sum(S + D + I) / sum(reference tokens).
inline double wer(const std::vector<Tokens>& refs, const std::vector<Tokens>& hyps) {
    if (refs.size() != hyps.size())
        throw ValidationError("wer: " + std::to_string(refs.size()) + " references vs " + std::to_string(hyps.size()) +
                              " hypotheses");
    std::size_t edits = 0, n = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        edits += edit_distance(refs[i], hyps[i]);
        n += refs[i].size();
    }
    if (n == 0) throw ValidationError("wer: reference corpus has no tokens");
    return 100.0 * static_cast<double>(edits) / static_cast<double>(n);
}

inline constexpr int kBleuMaxOrder = 4;
inline constexpr double kBleuEpsilon = 1e-9;

struct BleuStats {
    std::array<double, kBleuMaxOrder> precisions{};
    std::array<std::size_t, kBleuMaxOrder> matches{};
    std::array<std::size_t, kBleuMaxOrder> totals{};
    std::size_t hyp_length = 0;
    std::size_t ref_length = 0;
    double brevity_penalty = 0.0;
    double score = 0.0;
};

/// Corpus BLEU-4: clipped n-gram counts pooled over the corpus, geometric mean of
/// the precisions, brevity penalty exp(1 - r/c) when c <= r. A zero match count
/// is replaced by 1e-9. Orders for which the hypotheses contain no n-grams at
/// all are left out of the mean.
inline BleuStats bleu_stats(const std::vector<Tokens>& refs, const std::vector<Tokens>& hyps) {
    if (refs.size() != hyps.size())
        throw ValidationError("bleu: " + std::to_string(refs.size()) + " references vs " + std::to_string(hyps.size()) +
                              " hypotheses");
    if (refs.empty()) throw ValidationError("bleu: empty corpus");
    BleuStats st;
    for (std::size_t s = 0; s < refs.size(); ++s) {
        const auto& ref = refs[s];
        const auto& hyp = hyps[s];
        st.hyp_length += hyp.size();
        st.ref_length += ref.size();
        for (int n = 1; n <= kBleuMaxOrder; ++n) {
            auto count = [n](const Tokens& toks) {
                std::map<std::vector<std::string_view>, std::size_t> c;
                for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
                    ++c[std::vector<std::string_view>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                                      toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
                return c;
            };
            const auto hc = count(hyp);
            const auto rc = count(ref);
            for (const auto& [gram, c] : hc) {
                auto it = rc.find(gram);
                st.matches[n - 1] += std::min(c, it == rc.end() ? std::size_t{0} : it->second);
                st.totals[n - 1] += c;
            }
        }
    }
    double log_sum = 0.0;
    int orders = 0;
    for (int n = 0; n < kBleuMaxOrder; ++n) {
        if (st.totals[n] == 0) {
            st.precisions[n] = 0.0;
            continue;
        }
        const double m = st.matches[n] ? static_cast<double>(st.matches[n]) : kBleuEpsilon;
        st.precisions[n] = m / static_cast<double>(st.totals[n]);
        log_sum += std::log(st.precisions[n]);
        ++orders;
    }
    if (st.hyp_length == 0) st.brevity_penalty = 0.0;
    else if (st.hyp_length > st.ref_length) st.brevity_penalty = 1.0;
    else st.brevity_penalty = std::exp(1.0 - static_cast<double>(st.ref_length) / static_cast<double>(st.hyp_length));
    st.score = orders ? 100.0 * st.brevity_penalty * std::exp(log_sum / orders) : 0.0;
    return st;
}

inline double bleu(const std::vector<Tokens>& refs, const std::vector<Tokens>& hyps) {
    return bleu_stats(refs, hyps).score;
}

/// Target metric with its pretrained (baseline) and finetuned (topline) values.
struct MetricTriple {
    double m = 0.0;
    double m_pretrained = 0.0;
    double m_finetuned = 0.0;
    bool lower_is_better = false;
};

/// 100 * |m - pretrained| / |finetuned - pretrained|. In signed mode the result is
/// negated when m moved away from the direction pretrained -> finetuned.
inline double normalized_delta(const MetricTriple& t, bool signed_result = true) {
    const double gap = t.m_finetuned - t.m_pretrained;
    if (gap == 0.0 || !std::isfinite(gap) || !std::isfinite(t.m))
        throw ValidationError("normalized_delta: finetuned and pretrained metrics must differ and be finite");
    const double moved = t.m - t.m_pretrained;
    const double magnitude = std::abs(moved) / std::abs(gap) * 100.0;
    if (!signed_result) return magnitude;
    return moved * gap < 0.0 ? -magnitude : magnitude;
}

struct BootstrapOptions {
    std::size_t iterations = 1000;
    std::size_t sample_size = 300;
    std::uint64_t seed = 0;
    bool lower_is_better = false;
};

/// Paired bootstrap: fraction of resamples (paired indices, with replacement) in
/// which system A's mean score does not strictly beat system B's.
inline double paired_bootstrap(std::span<const double> a, std::span<const double> b, const BootstrapOptions& opt = {}) {
    if (a.size() != b.size())
        throw ValidationError("paired_bootstrap: score lists differ in length (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    if (opt.sample_size < 1 || a.size() < opt.sample_size)
        throw ValidationError("paired_bootstrap: need 1 <= sample size <= number of examples (" +
                              std::to_string(opt.sample_size) + " vs " + std::to_string(a.size()) + ")");
    if (opt.iterations < 1) throw ValidationError("paired_bootstrap: iterations must be >= 1");
    const std::size_t n = a.size();
    std::vector<unsigned char> not_beaten(opt.iterations, 0);
    parallel_for(opt.iterations, [&](std::size_t it) {
        const std::uint64_t stream = hash_combine(opt.seed, it);
        double sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < opt.sample_size; ++j) {
            const auto idx = std::min(n - 1, static_cast<std::size_t>(to_unit(hash_combine(stream, j)) * static_cast<double>(n)));
            sa += a[idx];
            sb += b[idx];
        }
        const bool a_wins = opt.lower_is_better ? sa < sb : sa > sb;
        not_beaten[it] = a_wins ? 0 : 1;
    });
    std::size_t count = 0;
    for (auto v : not_beaten) count += v;
    return static_cast<double>(count) / static_cast<double>(opt.iterations);
}

// ---------------------------------------------------------------------------
// Text inputs

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
    return lines;
}

inline std::vector<Tokens> read_corpus(const std::filesystem::path& path) {
    std::vector<Tokens> out;
    for (const auto& l : read_lines(path)) out.push_back(tokenize(l));
    return out;
}

/// One number per line; blank lines are skipped.
inline std::vector<double> read_scores(const std::filesystem::path& path) {
    std::vector<double> out;
    std::size_t lineno = 0;
    for (const auto& raw : read_lines(path)) {
        ++lineno;
        const auto toks = tokenize(raw);
        if (toks.empty()) continue;
        double v = 0.0;
        const auto& s = toks.front();
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (toks.size() != 1 || res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v))
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected one finite number, got '" +
                                  raw + "'");
        out.push_back(v);
    }
    return out;
}

}  // namespace lors
