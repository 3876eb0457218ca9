#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "support.hpp"

using namespace gp_test;
using trace::Setting;
using trace::TraceHeader;
using trace::TraceRecord;
using trace::TraceSet;

namespace {

TraceSet small_trace() {
    TraceSet s;
    s.header = {"m", Setting::Visual, 2, 3, 5, 1, trace::kFormatVersion};
    TraceRecord r;
    r.datapoint_id = "tench-0";
    r.hidden_states = {{0.5f, -1.25f, 3.0f}, {1e-30f, -0.0f, 7.75f}};
    r.step_logits = {{0, 1, 2, 3, 4}};
    r.generated_token_ids = {4};
    r.correctness_label = true;
    s.records.push_back(r);
    return s;
}

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t reference_crc32(std::string_view bytes) {
    std::uint32_t crc = 0xFFFFFFFFu;
    for (unsigned char b : bytes) {
        crc ^= b;
        for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
    }
    return ~crc;
}

bool bit_equal(const TraceSet& a, const TraceSet& b) {
    if (!(a.header == b.header) || a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto& x = a.records[i];
        const auto& y = b.records[i];
        if (x.datapoint_id != y.datapoint_id || x.generated_token_ids != y.generated_token_ids ||
            x.correctness_label != y.correctness_label || x.hidden_states.size() != y.hidden_states.size() ||
            x.step_logits.size() != y.step_logits.size())
            return false;
        auto same = [](const std::vector<float>& p, const std::vector<float>& q) {
            return p.size() == q.size() && std::memcmp(p.data(), q.data(), p.size() * sizeof(float)) == 0;
        };
        for (std::size_t l = 0; l < x.hidden_states.size(); ++l)
            if (!same(x.hidden_states[l], y.hidden_states[l])) return false;
        for (std::size_t t = 0; t < x.step_logits.size(); ++t)
            if (!same(x.step_logits[t], y.step_logits[t])) return false;
    }
    return true;
}

}  // namespace

TEST(TraceStore, RoundTripSmallTrace) {
    TempDir dir;
    auto s = small_trace();
    trace::write_trace(s, dir / "a.vlt");
    auto back = trace::read_trace(dir / "a.vlt");
    EXPECT_TRUE(bit_equal(s, back));
    EXPECT_TRUE(std::signbit(back.records[0].hidden_states[1][1]));
}

TEST(TraceStore, RoundTripIsBitExactOnRandomTraces) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto s = random_trace(1 + seed % 5, 1 + seed % 7, 2 + seed % 11, seed % 6, seed);
        auto back = trace::decode_trace(trace::encode_trace(s.header, s.records));
        EXPECT_TRUE(bit_equal(s, back)) << "seed " << seed;
    }
}

TEST(TraceStore, SpecialFloatBitPatternsSurvive) {
    auto s = small_trace();
    s.records[0].hidden_states[0] = {std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(),
                                     std::bit_cast<float>(0x3F800001u)};
    auto back = trace::decode_trace(trace::encode_trace(s.header, s.records));
    EXPECT_TRUE(bit_equal(s, back));
}

TEST(TraceStore, RewritingIdenticalInputIsByteIdentical) {
    TempDir dir;
    auto s = random_trace(3, 4, 6, 5, 99);
    trace::write_trace(s, dir / "a.vlt");
    trace::write_trace(s, dir / "b.vlt");
    EXPECT_EQ(trace::detail::read_file(dir / "a.vlt"), trace::detail::read_file(dir / "b.vlt"));
}

TEST(TraceStore, LayoutStartsWithMagicAndLengthPrefixedJsonHeader) {
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    ASSERT_GE(bytes.size(), 12u);
    EXPECT_EQ(bytes.substr(0, 8), "VLTRACE1");
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    auto header = nlohmann::json::parse(bytes.substr(12, len));
    EXPECT_EQ(header.at("num_layers"), 2);
    EXPECT_EQ(header.at("endianness"), "little");

    // First hidden value sits after the id; it must be little-endian IEEE-754.
    const std::size_t first = 12 + len + 4 + std::string("tench-0").size();
    std::uint32_t raw = 0;
    for (int i = 0; i < 4; ++i)
        raw |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[first + i])) << (8 * i);
    EXPECT_EQ(raw, std::bit_cast<std::uint32_t>(0.5f));
}

TEST(TraceStore, ChecksumMatchesIndependentCrc) {
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    const auto body = std::string_view(bytes).substr(8, bytes.size() - 12);
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[bytes.size() - 4 + i])) << (8 * i);
    EXPECT_EQ(stored, reference_crc32(body));
    EXPECT_EQ(reference_crc32("123456789"), 0xCBF43926u);
}

TEST(TraceStore, EmptyTraceIsValidAndReadable) {
    TempDir dir;
    TraceSet s;
    s.header = {"m", Setting::TextOnly, 4, 8, 16, 0, trace::kFormatVersion};
    EXPECT_TRUE(trace::validate_trace(s).empty());
    trace::write_trace(s, dir / "empty.vlt");
    auto back = trace::read_trace(dir / "empty.vlt");
    EXPECT_EQ(back.header, s.header);
    EXPECT_TRUE(back.records.empty());
}

TEST(TraceStore, DimensionMismatchRejectedBeforeWriting) {
    TempDir dir;
    auto s = small_trace();
    s.records[0].hidden_states[0].push_back(1.0f);
    EXPECT_THROW(trace::write_trace(s, dir / "bad.vlt"), DimensionError);
    EXPECT_FALSE(fs::exists(dir / "bad.vlt"));
}

TEST(TraceStore, FlippedMagicIsFormatError) {
    TempDir dir;
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    bytes[0] = 'X';
    trace::detail::write_file(dir / "x.vlt", bytes);
    EXPECT_THROW(trace::read_trace(dir / "x.vlt"), FormatError);
}

TEST(TraceStore, UnknownVersionIsFormatError) {
    auto s = small_trace();
    auto bytes = trace::encode_trace(s.header, s.records);
    auto pos = bytes.find("\"format_version\":1");
    ASSERT_NE(pos, std::string::npos);
    bytes[pos + std::string("\"format_version\":").size()] = '7';
    EXPECT_THROW(trace::decode_trace(bytes), FormatError);
}

TEST(TraceStore, TruncationAtEveryOffsetIsCorruptionWithOffset) {
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    for (std::size_t cut = 13; cut < bytes.size(); ++cut) {
        try {
            trace::decode_trace(std::string_view(bytes).substr(0, cut));
            FAIL() << "no error at cut " << cut;
        } catch (const CorruptionError& e) {
            EXPECT_LE(e.offset(), cut);
            EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
        } catch (const FormatError&) {
            // Cuts inside the JSON header surface as malformed header text.
        }
    }
}

TEST(TraceStore, TruncatedFileNamesPathAndOffset) {
    TempDir dir;
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    trace::detail::write_file(dir / "t.vlt", std::string_view(bytes).substr(0, bytes.size() - 20));
    try {
        trace::read_trace(dir / "t.vlt");
        FAIL();
    } catch (const CorruptionError& e) {
        EXPECT_NE(std::string(e.what()).find("t.vlt"), std::string::npos);
    }
}

TEST(TraceStore, FlippedPayloadBitFailsChecksum) {
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    bytes[bytes.size() - 12] ^= 0x01;
    EXPECT_THROW(trace::decode_trace(bytes), CorruptionError);
}

TEST(TraceStore, TrailingBytesAreCorruption) {
    auto bytes = trace::encode_trace(small_trace().header, small_trace().records);
    bytes.insert(bytes.size() - 4, "zz");
    EXPECT_THROW(trace::decode_trace(bytes), CorruptionError);
}

TEST(TraceStore, MissingFileIsIoError) {
    EXPECT_THROW(trace::read_trace("/nonexistent/dir/none.vlt"), IoError);
}

TEST(ValidateTrace, ValidTraceHasEmptyReport) {
    EXPECT_TRUE(trace::validate_trace(small_trace()).empty());
    EXPECT_TRUE(trace::validate_trace(random_trace(4, 5, 7, 9, 3)).empty());
}

TEST(ValidateTrace, NanHiddenValueGivesOneViolationNamingRecordAndLayer) {
    auto s = random_trace(3, 4, 5, 3, 11);
    s.records[1].hidden_states[2][0] = std::numeric_limits<float>::quiet_NaN();
    s.records[1].hidden_states[2][3] = std::numeric_limits<float>::infinity();
    auto report = trace::validate_trace(s);
    ASSERT_EQ(report.size(), 1u);
    EXPECT_EQ(report[0].record, 1u);
    EXPECT_NE(report[0].field.find("layer 3"), std::string::npos);
}

TEST(ValidateTrace, TokenIdEqualToVocabSizeIsOneViolation) {
    auto s = small_trace();
    s.records[0].generated_token_ids[0] = 5;
    auto report = trace::validate_trace(s);
    ASSERT_EQ(report.size(), 1u);
    EXPECT_EQ(report[0].record, 0u);
    EXPECT_NE(report[0].field.find("generated_token_ids"), std::string::npos);
}

TEST(ValidateTrace, ReportsEveryViolation) {
    auto s = random_trace(2, 3, 4, 3, 5);
    s.header.num_records = 7;
    s.records[0].hidden_states.pop_back();
    s.records[1].step_logits.clear();
    s.records[2].datapoint_id = s.records[0].datapoint_id;
    auto report = trace::validate_trace(s);
    EXPECT_EQ(report.size(), 4u);
    EXPECT_FALSE(report[0].record.has_value());
}

TEST(ValidateTrace, HeaderDimensionsMustBePositive) {
    TraceSet s;
    s.header = {"m", Setting::Visual, 0, 0, 0, 0, trace::kFormatVersion};
    EXPECT_EQ(trace::validate_trace(s).size(), 3u);
}

TEST(PairRecords, MatchesByIdRegardlessOfOrder) {
    auto v = random_trace(2, 3, 4, 5, 1);
    auto f = random_trace(2, 3, 4, 5, 2, Setting::FullInfo);
    std::reverse(f.records.begin(), f.records.end());
    auto match = trace::pair_records(v, f);
    for (std::size_t i = 0; i < match.size(); ++i)
        EXPECT_EQ(v.records[i].datapoint_id, f.records[match[i]].datapoint_id);
}

TEST(PairRecords, MismatchesThrowPairingError) {
    auto v = random_trace(2, 3, 4, 5, 1);
    auto f = random_trace(2, 3, 4, 5, 2, Setting::FullInfo);
    f.records[3].datapoint_id = "other";
    EXPECT_THROW(trace::pair_records(v, f), PairingError);
    auto g = random_trace(2, 3, 4, 5, 2, Setting::FullInfo);
    g.header.model_id = "another-model";
    EXPECT_THROW(trace::pair_records(v, g), PairingError);
    auto h = random_trace(2, 4, 4, 5, 2, Setting::FullInfo);
    EXPECT_THROW(trace::pair_records(v, h), PairingError);
}

TEST(Unembedding, RoundTripWithAndWithoutFinalNorm) {
    TempDir dir;
    trace::Unembedding u{"m", 3, 2, {1, 2, 3, 4, 5, 6}, std::nullopt};
    trace::write_unembedding(u, dir / "u.vlu");
    EXPECT_EQ(trace::read_unembedding(dir / "u.vlu"), u);
    u.final_norm = trace::FinalNorm{trace::FinalNorm::Kind::LayerNorm, 1e-5, {1.5f, 0.5f}, {0.1f, -0.1f}};
    trace::write_unembedding(u, dir / "u.vlu");
    EXPECT_EQ(trace::read_unembedding(dir / "u.vlu"), u);
}

TEST(Unembedding, RejectsBadShapesAndNonFinite) {
    trace::Unembedding u{"m", 3, 2, {1, 2, 3}, std::nullopt};
    EXPECT_THROW(trace::encode_unembedding(u), DimensionError);
    u.matrix = {1, 2, 3, 4, 5, std::numeric_limits<float>::quiet_NaN()};
    EXPECT_THROW(trace::decode_unembedding(trace::encode_unembedding(u)), DataError);
    auto bytes = trace::encode_unembedding({"m", 1, 1, {1}, std::nullopt});
    bytes[3] = '?';
    EXPECT_THROW(trace::decode_unembedding(bytes), FormatError);
}

TEST(Setting, NamesRoundTrip) {
    for (auto s : {Setting::TextOnly, Setting::Visual, Setting::FullInfo})
        EXPECT_EQ(trace::setting_from_string(trace::to_string(s)), s);
    EXPECT_THROW(trace::setting_from_string("Audio"), FormatError);
}
