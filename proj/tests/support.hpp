// SPDX-License-Identifier: Apache-2.0
// Fixture helpers shared by the unit and acceptance tests.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptmerge/architecture.hpp"
#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/tensor.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using ckptmerge::DType;
using ckptmerge::Shape;
using ckptmerge::Tensor;
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        for (;;) {
            path_ = fs::temp_directory_path() / ("ckptmerge-test-" + std::to_string(rd()) + std::to_string(rd()));
            if (fs::create_directory(path_)) break;
        }
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& child) const { return path_ / child; }

private:
    fs::path path_;
};

inline fs::path arch_dir() { return CKPTMERGE_TEST_ARCH_DIR; }

inline ckptmerge::ArchitectureRegistry registry() { return ckptmerge::load_architecture_defs(arch_dir()); }

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> dist(0.0f, scale);
    std::vector<float> v(ckptmerge::element_count(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

struct LlamaDims {
    int layers = 2;
    std::uint64_t hidden = 8;
    std::uint64_t intermediate = 12;
    std::uint64_t vocab = 16;
    bool lm_head = true;
};

/// Tensor names and shapes of a llama-style checkpoint, in canonical order.
inline std::vector<std::pair<std::string, Shape>> llama_layout(const LlamaDims& d) {
    std::vector<std::pair<std::string, Shape>> out;
    out.push_back({"model.embed_tokens.weight", {d.vocab, d.hidden}});
    for (int i = 0; i < d.layers; ++i) {
        const std::string p = "model.layers." + std::to_string(i) + ".";
        out.push_back({p + "input_layernorm.weight", {d.hidden}});
        out.push_back({p + "self_attn.q_proj.weight", {d.hidden, d.hidden}});
        out.push_back({p + "self_attn.k_proj.weight", {d.hidden, d.hidden}});
        out.push_back({p + "self_attn.v_proj.weight", {d.hidden, d.hidden}});
        out.push_back({p + "self_attn.o_proj.weight", {d.hidden, d.hidden}});
        out.push_back({p + "post_attention_layernorm.weight", {d.hidden}});
        out.push_back({p + "mlp.gate_proj.weight", {d.intermediate, d.hidden}});
        out.push_back({p + "mlp.up_proj.weight", {d.intermediate, d.hidden}});
        out.push_back({p + "mlp.down_proj.weight", {d.hidden, d.intermediate}});
    }
    out.push_back({"model.norm.weight", {d.hidden}});
    if (d.lm_head) out.push_back({"lm_head.weight", {d.vocab, d.hidden}});
    return out;
}

inline NamedTensors llama_tensors(const LlamaDims& d, std::mt19937_64& rng, float scale = 1.0f) {
    NamedTensors out;
    for (auto& [name, shape] : llama_layout(d)) out.emplace_back(name, random_tensor(shape, rng, scale));
    return out;
}

inline nlohmann::json llama_config(const LlamaDims& d, const std::string& torch_dtype = "float32") {
    return {{"model_type", "llama"},
            {"num_hidden_layers", d.layers},
            {"hidden_size", d.hidden},
            {"intermediate_size", d.intermediate},
            {"vocab_size", d.vocab},
            {"torch_dtype", torch_dtype}};
}

inline void write_json(const fs::path& path, const nlohmann::json& doc) {
    std::ofstream out(path);
    out << doc.dump(2);
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes a checkpoint directory: shards, config.json and a tokenizer file.
inline void write_model(const fs::path& dir, const NamedTensors& tensors, const nlohmann::json& config,
                        DType dtype = DType::F32, std::uint64_t max_shard_bytes = 1ull << 40) {
    fs::create_directories(dir);
    ckptmerge::write_sharded(tensors, dir, max_shard_bytes, dtype);
    if (!config.is_null()) write_json(dir / "config.json", config);
    write_text(dir / "tokenizer.json", "{\"model\": \"" + dir.filename().string() + "\"}");
}

/// Every regular file under `dir`, keyed by relative path, with its bytes.
inline std::map<std::string, std::string> directory_contents(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_text(e.path());
    }
    return out;
}

inline std::map<std::string, Tensor> load_all(const fs::path& dir) {
    const auto ckpt = ckptmerge::open_checkpoint(dir);
    std::map<std::string, Tensor> out;
    for (const auto& [name, _] : ckpt.records()) out.emplace(name, ckpt.load_tensor(name));
    return out;
}

} // namespace testsupport
