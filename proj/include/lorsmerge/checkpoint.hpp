// Copyright 2026 The lorsmerge Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file tensor container (the layout used by public model hubs):
//
//   [u64 little-endian N][N bytes of UTF-8 JSON header][raw little-endian data]
//
// The header maps each tensor name to {"dtype","shape","data_offsets"} with
// offsets relative to the start of the data region, plus an optional
// "__metadata__" string map. Only F32 tensors of rank 1 or 2 are accepted.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "lorsmerge/common.hpp"
#include "lorsmerge/tensor.hpp"

namespace lors {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr const char* kMetadataKey = "__metadata__";
inline constexpr std::size_t kHeaderAlign = 8;

/// Deterministic container bytes: names sorted, compact JSON, header padded with
/// spaces to a multiple of 8 bytes.
inline std::string serialize_checkpoint(const TensorMap& t) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : t) {
        const std::uint64_t bytes = tensor.size() * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", tensor.shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!t.meta().empty()) {
        nlohmann::json meta = nlohmann::json::object();
        for (const auto& [k, v] : t.meta()) meta[k] = v;
        header[kMetadataKey] = std::move(meta);
    }
    std::string text = header.dump();
    text.append((kHeaderAlign - text.size() % kHeaderAlign) % kHeaderAlign, ' ');

    std::string out;
    out.reserve(8 + text.size() + offset);
    const std::uint64_t n = text.size();
    out.append(reinterpret_cast<const char*>(&n), sizeof n);
    out += text;
    for (const auto& [_, tensor] : t)
        out.append(reinterpret_cast<const char*>(tensor.data().data()), tensor.size() * sizeof(float));
    return out;
}

/// Parses container bytes. `source` labels error messages.
inline TensorMap parse_checkpoint(std::string_view bytes, std::string_view source = "<memory>") {
    const std::string where(source);
    auto fail = [&](const std::string& msg) -> FormatError { return FormatError(where + ": " + msg); };

    if (bytes.size() < 8) throw fail("file is " + std::to_string(bytes.size()) + " bytes, shorter than the 8-byte header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), sizeof header_len);
    if (header_len > bytes.size() - 8)
        throw fail("header length " + std::to_string(header_len) + " exceeds remaining file size " +
                   std::to_string(bytes.size() - 8));
    const std::string_view header_text = bytes.substr(8, header_len);
    const std::string_view data = bytes.substr(8 + header_len);

    std::set<std::string> seen;
    std::string duplicate;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(
            header_text.begin(), header_text.end(),
            [&](int depth, nlohmann::json::parse_event_t ev, nlohmann::json& parsed) {
                if (ev == nlohmann::json::parse_event_t::key && depth == 1) {
                    auto key = parsed.get<std::string>();
                    if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
                }
                return true;
            });
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("malformed header: ") + e.what());
    }
    if (!duplicate.empty()) throw fail("duplicate tensor name '" + duplicate + "' in header");
    if (!header.is_object()) throw fail("malformed header: top level is not a JSON object");

    struct Span {
        std::uint64_t begin, end;
        std::string name;
    };
    std::vector<Span> spans;
    TensorMap out;
    std::vector<std::pair<std::string, Shape>> pending;

    for (const auto& [name, info] : header.items()) {
        if (name == kMetadataKey) {
            if (!info.is_object()) throw fail("__metadata__ must be an object of strings");
            for (const auto& [k, v] : info.items()) {
                if (!v.is_string()) throw fail("__metadata__ value for '" + k + "' is not a string");
                out.meta()[k] = v.get<std::string>();
            }
            continue;
        }
        const std::string tname = "tensor '" + name + "'";
        if (name.empty()) throw fail("empty tensor name in header");
        if (!info.is_object()) throw fail(tname + ": entry is not an object");
        if (!info.contains("dtype") || !info["dtype"].is_string()) throw fail(tname + ": missing dtype");
        const auto dtype = info["dtype"].get<std::string>();
        if (dtype != "F32") throw fail(tname + ": unsupported element type " + dtype + " (only F32 is accepted)");
        if (!info.contains("shape") || !info["shape"].is_array()) throw fail(tname + ": missing shape");
        Shape shape;
        for (const auto& d : info["shape"]) {
            if (!d.is_number_unsigned() && !(d.is_number_integer() && d.get<std::int64_t>() >= 0))
                throw fail(tname + ": shape entries must be non-negative integers");
            shape.push_back(d.get<std::size_t>());
        }
        if (shape.empty() || shape.size() > 2)
            throw fail(tname + ": unsupported rank " + std::to_string(shape.size()) + " (rank 1 or 2 required)");
        if (std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end())
            throw fail(tname + ": zero-sized dimension in shape " + shape_str(shape));
        const auto& offs = info.contains("data_offsets") ? info["data_offsets"] : nlohmann::json();
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned())
            throw fail(tname + ": data_offsets must be [begin, end]");
        const auto b = offs[0].get<std::uint64_t>();
        const auto e = offs[1].get<std::uint64_t>();
        if (e < b) throw fail(tname + ": data_offsets end " + std::to_string(e) + " precedes begin " + std::to_string(b));
        const std::uint64_t need = shape_numel(shape) * sizeof(float);
        if (e - b != need)
            throw fail(tname + ": data_offsets span " + std::to_string(e - b) + " bytes but shape " + shape_str(shape) +
                       " needs " + std::to_string(need));
        if (e > data.size())
            throw fail("truncated data region: " + tname + " ends at byte " + std::to_string(e) +
                       " but the data region holds " + std::to_string(data.size()) + " bytes");
        spans.push_back({b, e, name});
        pending.emplace_back(name, std::move(shape));
    }

    std::sort(spans.begin(), spans.end(), [](const Span& x, const Span& y) { return x.begin < y.begin; });
    std::uint64_t cursor = 0;
    for (const auto& s : spans) {
        if (s.begin < cursor) throw fail("tensor '" + s.name + "' overlaps the previous tensor at offset " + std::to_string(s.begin));
        if (s.begin > cursor) throw fail("hole in data region before tensor '" + s.name + "' at offset " + std::to_string(cursor));
        cursor = s.end;
    }
    if (cursor != data.size())
        throw fail("data region has " + std::to_string(data.size() - cursor) + " trailing bytes after offset " +
                   std::to_string(cursor));

    std::size_t i = 0;
    std::sort(spans.begin(), spans.end(), [](const Span& x, const Span& y) { return x.name < y.name; });
    std::sort(pending.begin(), pending.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    for (auto& [name, shape] : pending) {
        const auto& s = spans[i++];
        std::vector<float> values(shape_numel(shape));
        std::memcpy(values.data(), data.data() + s.begin, s.end - s.begin);
        out.insert(name, DenseTensor(std::move(shape), std::move(values)));
    }
    return out;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
    return bytes;
}

/// Writes to a sibling temp file and renames it into place, so readers never
/// observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    namespace fs = std::filesystem;
    std::random_device rd;
    const fs::path tmp = path.string() + ".tmp-" + hex64((std::uint64_t{rd()} << 32) | rd()).substr(8);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ec;
            fs::remove(tmp, ec);
            throw IoError("write failure on '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        std::error_code ignore;
        fs::remove(tmp, ignore);
        throw IoError("cannot move output into place at '" + path.string() + "': " + ec.message());
    }
}

inline TensorMap load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(read_file(path), path.string());
}

inline void save_checkpoint(const TensorMap& t, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(t));
}

}  // namespace lors
