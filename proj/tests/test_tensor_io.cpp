// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/error.hpp"
#include "ckptmerge/safetensors.hpp"
#include "support.hpp"

using namespace ckptmerge;
using testsupport::TempDir;

namespace {

float bits_to_float(std::uint32_t b) {
    float f;
    std::memcpy(&f, &b, 4);
    return f;
}

// Reference narrowing: pick the nearer of the two bracketing half values by
// exact comparison in double, ties to the even pattern.
std::uint16_t f16_reference(float value) {
    if (std::isnan(value)) return 0x7e00;
    const double v = value;
    std::uint16_t best = 0;
    double best_err = INFINITY;
    for (std::uint32_t b = 0; b < 0x10000; ++b) {
        const float h = f16_to_f32(static_cast<std::uint16_t>(b));
        if (std::isnan(h)) continue;
        if (std::signbit(h) != std::signbit(value)) continue;
        const double err = std::fabs(static_cast<double>(h) - v);
        if (err < best_err || (err == best_err && (b & 1) == 0)) {
            best = static_cast<std::uint16_t>(b);
            best_err = err;
        }
    }
    // beyond the largest finite half plus half an ulp, rounding goes to inf
    if (std::fabs(v) >= 65520.0) return std::signbit(value) ? 0xfc00 : 0x7c00;
    return best;
}

} // namespace

TEST_CASE("half precision decode/encode round-trips every finite pattern") {
    for (std::uint32_t b = 0; b < 0x10000; ++b) {
        const auto bits = static_cast<std::uint16_t>(b);
        const float f = f16_to_f32(bits);
        if (std::isnan(f)) {
            CHECK(std::isnan(f16_to_f32(f32_to_f16(f))));
            continue;
        }
        CHECK(f32_to_f16(f) == bits);
    }
}

TEST_CASE("bfloat16 decode/encode round-trips every finite pattern") {
    for (std::uint32_t b = 0; b < 0x10000; ++b) {
        const auto bits = static_cast<std::uint16_t>(b);
        const float f = bf16_to_f32(bits);
        if (std::isnan(f)) {
            CHECK(std::isnan(bf16_to_f32(f32_to_bf16(f))));
            continue;
        }
        CHECK(f32_to_bf16(f) == bits);
    }
}

TEST_CASE("half narrowing rounds to nearest even") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::uint32_t> any;
    for (int i = 0; i < 300; ++i) {
        // magnitudes spanning the half range, including subnormals
        float v = bits_to_float((any(rng) & 0x807fffffu) | ((100u + any(rng) % 50u) << 23));
        CHECK(f32_to_f16(v) == f16_reference(v));
    }
    // exact midpoint between 1 and the next half rounds down to the even 1
    CHECK(f32_to_f16(1.0f + 0x1.0p-11f) == 0x3c00);
    CHECK(f32_to_f16(1.0f + 3 * 0x1.0p-11f) == 0x3c02);
}

TEST_CASE("bfloat16 narrowing rounds to nearest even") {
    CHECK(f32_to_bf16(1.0f) == 0x3f80);
    CHECK(f32_to_bf16(bits_to_float(0x3f808000u)) == 0x3f80); // tie, even stays
    CHECK(f32_to_bf16(bits_to_float(0x3f818000u)) == 0x3f82); // tie, odd rounds up
    CHECK(f32_to_bf16(bits_to_float(0x3f808001u)) == 0x3f81);
}

TEST_CASE("single-shard checkpoint opens with one record") {
    TempDir dir;
    write_sharded({{"w", Tensor({2, 2}, {1.0f, -2.0f, 3.5f, 0.25f})}}, dir.path(), 1 << 20, DType::F32);
    CHECK(fs::exists(dir / "model.safetensors"));
    CHECK_FALSE(fs::exists(dir / "model.safetensors.index.json"));

    const auto ckpt = open_checkpoint(dir.path());
    REQUIRE(ckpt.records().size() == 1);
    CHECK(ckpt.record("w").shape == Shape{2, 2});
    const auto w = load_tensor(ckpt, "w");
    CHECK(w.bit_equal(Tensor({2, 2}, {1.0f, -2.0f, 3.5f, 0.25f})));
    CHECK_THROWS_AS(load_tensor(ckpt, "zzz"), KeyError);
}

TEST_CASE("three tensors over two shards") {
    TempDir dir;
    std::vector<std::pair<std::string, Tensor>> tensors = {
        {"a", Tensor({2}, {1, 2})}, {"b", Tensor({2}, {3, 4})}, {"c", Tensor({2}, {5, 6})}};
    const auto index = write_sharded(tensors, dir.path(), 16, DType::F32);
    CHECK(fs::exists(dir / "model-00001-of-00002.safetensors"));
    CHECK(fs::exists(dir / "model-00002-of-00002.safetensors"));
    CHECK(fs::exists(dir / "model.safetensors.index.json"));
    CHECK(index["metadata"]["total_size"] == 24);
    CHECK(index["weight_map"]["a"] == "model-00001-of-00002.safetensors");
    CHECK(index["weight_map"]["b"] == "model-00001-of-00002.safetensors");
    CHECK(index["weight_map"]["c"] == "model-00002-of-00002.safetensors");

    const auto ckpt = open_checkpoint(dir.path());
    CHECK(ckpt.records().size() == 3);
    CHECK(ckpt.shards().size() == 2);
    for (const auto& [name, t] : tensors) CHECK(ckpt.load_tensor(name).bit_equal(t));
}

TEST_CASE("bfloat16 storage widens exactly") {
    TempDir dir;
    write_sharded({{"one", Tensor({3}, {1.0f, -0.5f, 2.0f})}}, dir.path(), 1 << 20, DType::BF16);
    const auto ckpt = open_checkpoint(dir.path());
    CHECK(ckpt.record("one").dtype == DType::BF16);
    CHECK(ckpt.record("one").byte_length == 6);
    CHECK(ckpt.load_tensor("one").bit_equal(Tensor({3}, {1.0f, -0.5f, 2.0f})));
}

TEST_CASE("open rejects missing or malformed checkpoints") {
    TempDir dir;
    CHECK_THROWS_AS(open_checkpoint(dir.path()), FormatError);
    CHECK_THROWS_AS(open_checkpoint(dir / "nope"), FormatError);

    SUBCASE("header length past end of file") {
        testsupport::write_text(dir / "model.safetensors", std::string("\xff\x00\x00\x00\x00\x00\x00\x00{}", 10));
        CHECK_THROWS_AS(open_checkpoint(dir.path()), FormatError);
    }
    SUBCASE("index naming a tensor its shard lacks") {
        write_sharded({{"a", Tensor({1}, {1})}, {"b", Tensor({1}, {2})}}, dir.path(), 4, DType::F32);
        auto index = nlohmann::json::parse(testsupport::read_text(dir / "model.safetensors.index.json"));
        index["weight_map"]["ghost"] = "model-00001-of-00002.safetensors";
        testsupport::write_json(dir / "model.safetensors.index.json", index);
        CHECK_THROWS_AS(open_checkpoint(dir.path()), FormatError);
    }
    SUBCASE("same tensor in two shards") {
        write_sharded({{"a", Tensor({1}, {1})}, {"b", Tensor({1}, {2})}}, dir.path(), 4, DType::F32);
        // overwrite the second shard with one that also holds "a"
        TempDir other;
        write_sharded({{"a", Tensor({1}, {9})}, {"b", Tensor({1}, {2})}}, other.path(), 64, DType::F32);
        fs::copy_file(other / "model.safetensors", dir / "model-00002-of-00002.safetensors",
                      fs::copy_options::overwrite_existing);
        CHECK_THROWS_AS(open_checkpoint(dir.path()), FormatError);
    }
}

TEST_CASE("payload range past end of file is a FormatError at load") {
    TempDir dir;
    write_sharded({{"w", Tensor({4}, {1, 2, 3, 4})}}, dir.path(), 1 << 20, DType::F32);
    const auto path = dir / "model.safetensors";
    fs::resize_file(path, fs::file_size(path) - 4);
    const auto ckpt = open_checkpoint(dir.path());
    CHECK_THROWS_AS(ckpt.load_tensor("w"), FormatError);
}

TEST_CASE("packing follows greedy in-order first fit") {
    const std::vector<OutputTensorSpec> specs = {{"a", {2}}, {"b", {2}}, {"c", {2}}};
    CHECK(pack_shards(specs, DType::F32, 16) == std::vector<std::size_t>{0, 0, 1});
    CHECK(pack_shards(specs, DType::F32, 8) == std::vector<std::size_t>{0, 1, 2});
    CHECK(pack_shards(specs, DType::F32, 1000) == std::vector<std::size_t>{0, 0, 0});
    CHECK(pack_shards(specs, DType::BF16, 8) == std::vector<std::size_t>{0, 0, 1});
    CHECK_THROWS_AS(pack_shards(specs, DType::F32, 7), CapacityError);
    CHECK(shard_file_name(0, 3) == "model-00001-of-00003.safetensors");

    // property: against an independent greedy count on random sizes
    std::mt19937_64 rng(11);
    for (int round = 0; round < 200; ++round) {
        std::vector<OutputTensorSpec> s;
        const auto n = 1 + rng() % 20;
        for (std::size_t i = 0; i < n; ++i) s.push_back({"t" + std::to_string(i), {1 + rng() % 10}});
        const std::uint64_t cap = 40 + rng() % 60;
        std::size_t expect_shards = 1;
        std::uint64_t fill = 0;
        for (const auto& t : s) {
            const auto bytes = t.shape[0] * 4;
            if (fill + bytes > cap) {
                ++expect_shards;
                fill = 0;
            }
            fill += bytes;
        }
        const auto got = pack_shards(s, DType::F32, cap);
        CHECK(got.back() + 1 == expect_shards);
    }
}

TEST_CASE("writer rejects duplicates and oversize tensors") {
    TempDir dir;
    CHECK_THROWS_AS(write_sharded({{"a", Tensor({1}, {1})}, {"a", Tensor({1}, {2})}}, dir.path(), 64, DType::F32),
                    ConfigError);
    CHECK_THROWS_AS(write_sharded({{"big", Tensor({100})}}, dir.path(), 64, DType::F32), CapacityError);
}

TEST_CASE("round trip is bitwise for random tensor sets") {
    std::mt19937_64 rng(3);
    for (int round = 0; round < 20; ++round) {
        TempDir dir;
        const DType dtype = std::array{DType::F32, DType::F16, DType::BF16}[round % 3];
        std::vector<std::pair<std::string, Tensor>> tensors;
        const auto n = 1 + rng() % 8;
        for (std::size_t i = 0; i < n; ++i) {
            Shape shape;
            const auto rank = rng() % 3;
            for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + rng() % 5);
            auto t = testsupport::random_tensor(shape, rng, 3.0f);
            // quantize to what the storage dtype holds so the round trip is exact
            std::vector<std::byte> raw(t.size() * dtype_size(dtype));
            encode_from_f32(dtype, t.values(), raw);
            decode_to_f32(dtype, raw, t.values());
            tensors.emplace_back("t." + std::to_string(i), std::move(t));
        }
        write_sharded(tensors, dir.path(), 64 + rng() % 128, dtype, {{"k", "v"}});
        const auto ckpt = open_checkpoint(dir.path());
        REQUIRE(ckpt.records().size() == tensors.size());
        CHECK(ckpt.header_metadata().at("k") == "v");
        for (const auto& [name, t] : tensors) {
            CHECK(ckpt.record(name).dtype == dtype);
            CHECK(ckpt.load_tensor(name).bit_equal(t));
        }
    }
}

TEST_CASE("open reads headers only; load reads exactly the tensor's bytes") {
    TempDir dir;
    std::mt19937_64 rng(5);
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (int i = 0; i < 6; ++i) tensors.emplace_back("t" + std::to_string(i), testsupport::random_tensor({4, 3}, rng));
    write_sharded(tensors, dir.path(), 100, DType::F16);

    auto rec = std::make_shared<RecordingFileReader>();
    const auto ckpt = open_checkpoint(dir.path(), rec);
    for (const auto& a : rec->accesses()) {
        const auto it = std::find_if(ckpt.shards().begin(), ckpt.shards().end(),
                                     [&](const ShardInfo& s) { return s.path == a.path; });
        if (it == ckpt.shards().end()) continue; // json side files are not shards
        CHECK(a.offset + a.length <= it->data_start);
    }

    rec->clear();
    const auto& r = ckpt.record("t4");
    ckpt.load_tensor("t4");
    const auto accesses = rec->accesses();
    REQUIRE(accesses.size() == 1);
    CHECK(accesses[0].path == ckpt.shards()[r.shard].path);
    CHECK(accesses[0].offset == ckpt.shards()[r.shard].data_start + r.byte_offset);
    CHECK(accesses[0].length == r.byte_length);
}

TEST_CASE("header encoding is aligned and parseable") {
    std::vector<HeaderEntry> entries = {{"x", DType::F32, {3}, 0, 12}, {"y", DType::BF16, {2, 2}, 12, 20}};
    const auto bytes = encode_safetensors_header(entries, {{"format", "pt"}});
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data(), 8);
    CHECK(len + 8 == bytes.size());
    CHECK(bytes.size() % 8 == 0);
    const auto doc = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(bytes.data()) + 8, len));
    CHECK(doc["x"]["dtype"] == "F32");
    CHECK(doc["y"]["data_offsets"] == nlohmann::json::array({12, 20}));
    CHECK(doc["__metadata__"]["format"] == "pt");
}
