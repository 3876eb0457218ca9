#pragma once

// Binary trace format (.vlt) and unembedding format (.vlu).
//
// Trace layout, all integers and floats little-endian:
//   "VLTRACE1" | u32 header_len | UTF-8 JSON header |
//   per record: u32 id_len | id | L*d f32 hidden | u32 T | T*|V| f32 logits |
//               T*u32 token ids | u8 label_flag | u8 label |
//   u32 CRC32 of every byte between the magic and the checksum.
//
// Unembedding layout:
//   "VLUNEMB1" | u32 header_len | JSON header | |V|*d f32 row-major |
//   optional norm gain (d f32) and bias (d f32) | u32 CRC32 (same coverage rule).

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "groundprobe/error.hpp"

namespace groundprobe::trace {

inline constexpr std::string_view kTraceMagic = "VLTRACE1";
inline constexpr std::string_view kUnembeddingMagic = "VLUNEMB1";
inline constexpr int kFormatVersion = 1;

enum class Setting { TextOnly, Visual, FullInfo };

inline std::string to_string(Setting s) {
    switch (s) {
        case Setting::TextOnly: return "TextOnly";
        case Setting::Visual: return "Visual";
        case Setting::FullInfo: return "FullInfo";
    }
    return "?";
}

inline Setting setting_from_string(std::string_view s) {
    if (s == "TextOnly") return Setting::TextOnly;
    if (s == "Visual") return Setting::Visual;
    if (s == "FullInfo") return Setting::FullInfo;
    throw FormatError("unknown evaluation setting '" + std::string(s) + "'");
}

struct TraceHeader {
    std::string model_id;
    Setting setting = Setting::Visual;
    std::uint32_t num_layers = 0;
    std::uint32_t hidden_dim = 0;
    std::uint32_t vocab_size = 0;
    std::uint64_t num_records = 0;
    int format_version = kFormatVersion;

    bool operator==(const TraceHeader&) const = default;
};

/// One datapoint. hidden_states[l-1] is the last input token's state after layer l.
/// correctness_label == true means the answer was graded correct (linking success).
struct TraceRecord {
    std::string datapoint_id;
    std::vector<std::vector<float>> hidden_states;
    std::vector<std::vector<float>> step_logits;
    std::vector<std::uint32_t> generated_token_ids;
    std::optional<bool> correctness_label;

    bool operator==(const TraceRecord&) const = default;
};

struct TraceSet {
    TraceHeader header;
    std::vector<TraceRecord> records;

    bool operator==(const TraceSet&) const = default;
};

/// Optional final normalization applied before unembedding.
struct FinalNorm {
    enum class Kind { LayerNorm, RmsNorm };
    Kind kind = Kind::RmsNorm;
    double eps = 1e-6;
    std::vector<float> gain;
    std::vector<float> bias;  // empty for RmsNorm

    bool operator==(const FinalNorm&) const = default;
};

/// |V| x d row-major matrix mapping hidden space to vocabulary logits.
struct Unembedding {
    std::string model_id;
    std::uint32_t vocab_size = 0;
    std::uint32_t hidden_dim = 0;
    std::vector<float> matrix;
    std::optional<FinalNorm> final_norm;

    std::span<const float> row(std::size_t token) const {
        return std::span<const float>(matrix).subspan(token * hidden_dim, hidden_dim);
    }

    bool operator==(const Unembedding&) const = default;
};

struct Violation {
    std::optional<std::size_t> record;  // nullopt for header-level problems
    std::string field;
    std::string message;
};

using ValidationReport = std::vector<Violation>;

namespace detail {

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f32s(std::span<const float> vs) {
        for (float v : vs) f32(v);
    }
    const std::string& data() const { return buf_; }
    std::string& data() { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

    std::string_view bytes(std::size_t n, const char* field) {
        need(n, field);
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::uint8_t u8(const char* field) {
        need(1, field);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32(const char* field) {
        need(4, field);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
    void f32s(std::span<float> out, const char* field) {
        need(out.size() * 4, field);
        for (auto& v : out) v = f32(field);
    }

private:
    void need(std::size_t n, const char* field) {
        if (remaining() < n)
            throw CorruptionError(what_ + " truncated while reading " + field, pos_);
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large files.
    constexpr std::size_t kChunk = 1u << 30;
    for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
        auto len = std::min(kChunk, bytes.size() - off);
        crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), static_cast<uInt>(len));
    }
    return static_cast<std::uint32_t>(crc);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
    return data;
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void finish_with_crc(ByteWriter& w, std::size_t magic_len) {
    auto crc = crc32_of(std::string_view(w.data()).substr(magic_len));
    w.u32(crc);
}

inline void verify_crc(std::string_view data, std::size_t magic_len, const std::string& what) {
    if (data.size() < magic_len + 4) throw CorruptionError(what + " too short for checksum", data.size());
    auto body = data.substr(magic_len, data.size() - magic_len - 4);
    ByteReader tail(data.substr(data.size() - 4), what);
    auto stored = tail.u32("checksum");
    if (stored != crc32_of(body))
        throw CorruptionError(what + " checksum mismatch", data.size() - 4);
}

inline nlohmann::json header_to_json(const TraceHeader& h) {
    return nlohmann::json{{"format_version", h.format_version},
                          {"model_id", h.model_id},
                          {"setting", to_string(h.setting)},
                          {"num_layers", h.num_layers},
                          {"hidden_dim", h.hidden_dim},
                          {"vocab_size", h.vocab_size},
                          {"num_records", h.num_records},
                          {"endianness", "little"}};
}

inline TraceHeader header_from_json(const nlohmann::json& j) {
    TraceHeader h;
    try {
        h.format_version = j.at("format_version").get<int>();
        if (h.format_version != kFormatVersion)
            throw FormatError("unsupported trace format_version " + std::to_string(h.format_version));
        if (j.at("endianness").get<std::string>() != "little")
            throw FormatError("unsupported endianness tag");
        h.model_id = j.at("model_id").get<std::string>();
        h.setting = setting_from_string(j.at("setting").get<std::string>());
        h.num_layers = j.at("num_layers").get<std::uint32_t>();
        h.hidden_dim = j.at("hidden_dim").get<std::uint32_t>();
        h.vocab_size = j.at("vocab_size").get<std::uint32_t>();
        h.num_records = j.at("num_records").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trace header: ") + e.what());
    }
    if (h.num_layers == 0 || h.hidden_dim == 0 || h.vocab_size == 0)
        throw FormatError("trace header dimensions must be positive");
    return h;
}

inline bool all_finite(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace detail

/// Reports every invariant violation; an empty report means the trace is valid.
inline ValidationReport validate_trace(const TraceHeader& header, std::span<const TraceRecord> records) {
    ValidationReport report;
    auto add = [&](std::optional<std::size_t> rec, std::string field, std::string msg) {
        report.push_back({rec, std::move(field), std::move(msg)});
    };

    if (header.num_layers == 0) add(std::nullopt, "num_layers", "must be >= 1");
    if (header.hidden_dim == 0) add(std::nullopt, "hidden_dim", "must be >= 1");
    if (header.vocab_size == 0) add(std::nullopt, "vocab_size", "must be >= 1");
    if (header.format_version != kFormatVersion)
        add(std::nullopt, "format_version", "unrecognized version " + std::to_string(header.format_version));
    if (header.num_records != records.size())
        add(std::nullopt, "num_records",
            "header declares " + std::to_string(header.num_records) + " records, found " +
                std::to_string(records.size()));

    std::set<std::string_view> seen;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.datapoint_id.empty()) add(i, "datapoint_id", "empty id");
        if (!seen.insert(r.datapoint_id).second)
            add(i, "datapoint_id", "duplicate id '" + r.datapoint_id + "'");

        if (r.hidden_states.size() != header.num_layers)
            add(i, "hidden_states",
                "expected " + std::to_string(header.num_layers) + " layers, found " +
                    std::to_string(r.hidden_states.size()));
        for (std::size_t l = 0; l < r.hidden_states.size(); ++l) {
            const auto& h = r.hidden_states[l];
            auto field = "hidden_states[layer " + std::to_string(l + 1) + "]";
            if (h.size() != header.hidden_dim)
                add(i, field, "expected " + std::to_string(header.hidden_dim) + " values, found " +
                                  std::to_string(h.size()));
            if (!detail::all_finite(h)) add(i, field, "non-finite value");
        }

        if (r.step_logits.size() != r.generated_token_ids.size())
            add(i, "step_logits",
                std::to_string(r.step_logits.size()) + " logit steps for " +
                    std::to_string(r.generated_token_ids.size()) + " generated tokens");
        for (std::size_t t = 0; t < r.step_logits.size(); ++t) {
            auto field = "step_logits[" + std::to_string(t) + "]";
            if (r.step_logits[t].size() != header.vocab_size)
                add(i, field, "expected " + std::to_string(header.vocab_size) + " values, found " +
                                  std::to_string(r.step_logits[t].size()));
            if (!detail::all_finite(r.step_logits[t])) add(i, field, "non-finite value");
        }
        for (std::size_t t = 0; t < r.generated_token_ids.size(); ++t) {
            if (r.generated_token_ids[t] >= header.vocab_size)
                add(i, "generated_token_ids[" + std::to_string(t) + "]",
                    "token id " + std::to_string(r.generated_token_ids[t]) + " outside [0, " +
                        std::to_string(header.vocab_size) + ")");
        }
    }
    return report;
}

inline ValidationReport validate_trace(const TraceSet& set) { return validate_trace(set.header, set.records); }

inline std::string describe(const Violation& v) {
    std::string s = v.record ? "record " + std::to_string(*v.record) + ": " : std::string("header: ");
    return s + v.field + ": " + v.message;
}

/// Serializes to the in-memory .vlt byte layout. Structural violations
/// (shape, counts, token range) are rejected; non-finite values are not.
inline std::string encode_trace(const TraceHeader& header, std::span<const TraceRecord> records) {
    for (const auto& v : validate_trace(header, records)) {
        if (v.message == "non-finite value") continue;
        throw DimensionError("cannot write trace: " + describe(v));
    }

    detail::ByteWriter w;
    w.bytes(kTraceMagic);
    auto header_json = detail::header_to_json(header).dump();
    w.u32(static_cast<std::uint32_t>(header_json.size()));
    w.bytes(header_json);
    for (const auto& r : records) {
        w.u32(static_cast<std::uint32_t>(r.datapoint_id.size()));
        w.bytes(r.datapoint_id);
        for (const auto& h : r.hidden_states) w.f32s(h);
        w.u32(static_cast<std::uint32_t>(r.generated_token_ids.size()));
        for (const auto& step : r.step_logits) w.f32s(step);
        for (auto id : r.generated_token_ids) w.u32(id);
        w.u8(r.correctness_label.has_value() ? 1 : 0);
        w.u8(r.correctness_label.value_or(false) ? 1 : 0);
    }
    detail::finish_with_crc(w, kTraceMagic.size());
    return std::move(w.data());
}

inline TraceSet decode_trace(std::string_view data) {
    detail::ByteReader rd(data, "trace");
    if (data.size() < kTraceMagic.size() || data.substr(0, kTraceMagic.size()) != kTraceMagic)
        throw FormatError("not a trace file: bad magic bytes");
    rd.bytes(kTraceMagic.size(), "magic");

    TraceSet set;
    auto header_len = rd.u32("header length");
    auto header_text = rd.bytes(header_len, "header");
    nlohmann::json header_json;
    try {
        header_json = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("trace header is not valid JSON: ") + e.what());
    }
    set.header = detail::header_from_json(header_json);
    const auto& h = set.header;

    // Guard against absurd counts before reserving.
    set.records.reserve(std::min<std::uint64_t>(h.num_records, rd.remaining()));
    for (std::uint64_t i = 0; i < h.num_records; ++i) {
        TraceRecord r;
        auto id_len = rd.u32("record id length");
        r.datapoint_id = std::string(rd.bytes(id_len, "record id"));
        r.hidden_states.assign(h.num_layers, std::vector<float>(h.hidden_dim));
        for (auto& layer : r.hidden_states) rd.f32s(layer, "hidden states");
        auto steps = rd.u32("step count");
        if (static_cast<std::uint64_t>(steps) * h.vocab_size * 4 > rd.remaining())
            throw CorruptionError("trace truncated while reading logits", rd.offset());
        r.step_logits.assign(steps, std::vector<float>(h.vocab_size));
        for (auto& step : r.step_logits) rd.f32s(step, "logits");
        r.generated_token_ids.resize(steps);
        for (auto& id : r.generated_token_ids) id = rd.u32("token ids");
        auto flag = rd.u8("label flag");
        auto label = rd.u8("label");
        if (flag > 1 || label > 1) throw CorruptionError("invalid label byte", rd.offset() - 2);
        if (flag) r.correctness_label = label == 1;
        set.records.push_back(std::move(r));
    }
    if (rd.remaining() < 4) throw CorruptionError("trace truncated before checksum", rd.offset());
    if (rd.remaining() > 4) throw CorruptionError("unexpected bytes after last record", rd.offset());
    detail::verify_crc(data, kTraceMagic.size(), "trace");
    return set;
}

inline void write_trace(const TraceHeader& header, std::span<const TraceRecord> records,
                        const std::filesystem::path& path) {
    auto bytes = encode_trace(header, records);
    detail::write_file(path, bytes);
}

inline void write_trace(const TraceSet& set, const std::filesystem::path& path) {
    write_trace(set.header, set.records, path);
}

inline TraceSet read_trace(const std::filesystem::path& path) {
    auto data = detail::read_file(path);
    try {
        return decode_trace(data);
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what(), e.offset());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Index of each FullInfo record matching the Visual record at the same position.
/// Throws PairingError unless model, shapes and datapoint id sets agree.
inline std::vector<std::size_t> pair_records(const TraceSet& visual, const TraceSet& fullinfo) {
    const auto& a = visual.header;
    const auto& b = fullinfo.header;
    if (a.model_id != b.model_id)
        throw PairingError("model_id differs: '" + a.model_id + "' vs '" + b.model_id + "'");
    if (a.num_layers != b.num_layers || a.hidden_dim != b.hidden_dim || a.vocab_size != b.vocab_size)
        throw PairingError("trace dimensions differ between visual and full-info runs");

    std::vector<std::pair<std::string_view, std::size_t>> index;
    index.reserve(fullinfo.records.size());
    for (std::size_t i = 0; i < fullinfo.records.size(); ++i)
        index.emplace_back(fullinfo.records[i].datapoint_id, i);
    std::sort(index.begin(), index.end());

    if (visual.records.size() != fullinfo.records.size())
        throw PairingError("record counts differ: " + std::to_string(visual.records.size()) + " vs " +
                           std::to_string(fullinfo.records.size()));
    std::vector<std::size_t> match;
    match.reserve(visual.records.size());
    for (const auto& r : visual.records) {
        auto it = std::lower_bound(index.begin(), index.end(), std::pair<std::string_view, std::size_t>{r.datapoint_id, 0});
        if (it == index.end() || it->first != r.datapoint_id)
            throw PairingError("datapoint '" + r.datapoint_id + "' missing from full-info trace");
        match.push_back(it->second);
    }
    return match;
}

inline std::string encode_unembedding(const Unembedding& u) {
    if (u.vocab_size == 0 || u.hidden_dim == 0)
        throw DimensionError("unembedding dimensions must be positive");
    if (u.matrix.size() != static_cast<std::size_t>(u.vocab_size) * u.hidden_dim)
        throw DimensionError("unembedding matrix has " + std::to_string(u.matrix.size()) + " entries, expected " +
                             std::to_string(static_cast<std::size_t>(u.vocab_size) * u.hidden_dim));
    nlohmann::json header{{"format_version", kFormatVersion},
                          {"model_id", u.model_id},
                          {"vocab_size", u.vocab_size},
                          {"hidden_dim", u.hidden_dim},
                          {"endianness", "little"}};
    if (u.final_norm) {
        const auto& n = *u.final_norm;
        if (n.gain.size() != u.hidden_dim)
            throw DimensionError("final norm gain must have hidden_dim entries");
        if (n.kind == FinalNorm::Kind::LayerNorm && n.bias.size() != u.hidden_dim)
            throw DimensionError("layer norm bias must have hidden_dim entries");
        header["final_norm"] = {{"kind", n.kind == FinalNorm::Kind::LayerNorm ? "layer_norm" : "rms_norm"},
                                {"eps", n.eps}};
    }
    detail::ByteWriter w;
    w.bytes(kUnembeddingMagic);
    auto text = header.dump();
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.bytes(text);
    w.f32s(u.matrix);
    if (u.final_norm) {
        w.f32s(u.final_norm->gain);
        if (u.final_norm->kind == FinalNorm::Kind::LayerNorm) w.f32s(u.final_norm->bias);
    }
    detail::finish_with_crc(w, kUnembeddingMagic.size());
    return std::move(w.data());
}

inline Unembedding decode_unembedding(std::string_view data) {
    if (data.size() < kUnembeddingMagic.size() || data.substr(0, kUnembeddingMagic.size()) != kUnembeddingMagic)
        throw FormatError("not an unembedding file: bad magic bytes");
    detail::ByteReader rd(data, "unembedding");
    rd.bytes(kUnembeddingMagic.size(), "magic");
    auto len = rd.u32("header length");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(rd.bytes(len, "header"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("unembedding header is not valid JSON: ") + e.what());
    }
    Unembedding u;
    std::optional<FinalNorm> norm;
    try {
        if (header.at("format_version").get<int>() != kFormatVersion)
            throw FormatError("unsupported unembedding format_version");
        u.model_id = header.at("model_id").get<std::string>();
        u.vocab_size = header.at("vocab_size").get<std::uint32_t>();
        u.hidden_dim = header.at("hidden_dim").get<std::uint32_t>();
        if (header.contains("final_norm")) {
            FinalNorm n;
            auto kind = header["final_norm"].at("kind").get<std::string>();
            if (kind == "layer_norm") n.kind = FinalNorm::Kind::LayerNorm;
            else if (kind == "rms_norm") n.kind = FinalNorm::Kind::RmsNorm;
            else throw FormatError("unknown final norm kind '" + kind + "'");
            n.eps = header["final_norm"].at("eps").get<double>();
            norm = std::move(n);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed unembedding header: ") + e.what());
    }
    if (u.vocab_size == 0 || u.hidden_dim == 0) throw FormatError("unembedding dimensions must be positive");
    auto count = static_cast<std::uint64_t>(u.vocab_size) * u.hidden_dim;
    if (count * 4 > rd.remaining()) throw CorruptionError("unembedding truncated in matrix", rd.offset());
    u.matrix.resize(count);
    rd.f32s(u.matrix, "matrix");
    if (norm) {
        norm->gain.resize(u.hidden_dim);
        rd.f32s(norm->gain, "norm gain");
        if (norm->kind == FinalNorm::Kind::LayerNorm) {
            norm->bias.resize(u.hidden_dim);
            rd.f32s(norm->bias, "norm bias");
        }
        u.final_norm = std::move(norm);
    }
    if (rd.remaining() != 4) throw CorruptionError("unembedding length mismatch before checksum", rd.offset());
    detail::verify_crc(data, kUnembeddingMagic.size(), "unembedding");
    if (!detail::all_finite(u.matrix)) throw DataError("unembedding contains non-finite entries");
    return u;
}

inline void write_unembedding(const Unembedding& u, const std::filesystem::path& path) {
    detail::write_file(path, encode_unembedding(u));
}

inline Unembedding read_unembedding(const std::filesystem::path& path) {
    auto data = detail::read_file(path);
    try {
        return decode_unembedding(data);
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what(), e.offset());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace groundprobe::trace
