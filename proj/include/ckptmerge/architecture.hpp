// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ckptmerge {

class LazyCheckpoint;

enum class WeightKind { Pre, Layer, Post };

struct WeightTemplate {
    std::string name;
    bool optional = false; // e.g. an output head that tied-embedding models omit

    bool operator==(const WeightTemplate&) const = default;
};

/// Weight naming scheme of one model family, loaded from a JSON file:
///
///   {"family": "llama", "num_layers_key": "num_hidden_layers",
///    "pre_weights": ["model.embed_tokens.weight"],
///    "layer_templates": ["model.layers.{idx}.self_attn.q_proj.weight", ...],
///    "post_weights": ["model.norm.weight", {"name": "lm_head.weight", "optional": true}]}
///
/// A def with `"fallback": true` has no templates; it matches any family not in
/// the registry and aligns checkpoints by exact tensor name.
struct ArchitectureDef {
    std::string family;
    std::string num_layers_key;
    std::vector<WeightTemplate> pre_weights;
    std::vector<WeightTemplate> layer_templates;
    std::vector<WeightTemplate> post_weights;
    bool fallback = false;
};

struct WeightInfo {
    std::string name;
    WeightKind kind = WeightKind::Pre;
    std::optional<int> layer_index; // set iff kind == Layer
    bool optional = false;
    std::size_t template_index = 0; // position within its template list
};

class ArchitectureRegistry {
public:
    /// Throws FormatError if the family is already registered.
    void add(ArchitectureDef def);
    const ArchitectureDef* find(const std::string& family) const;
    const ArchitectureDef* fallback() const;
    std::size_t size() const noexcept { return defs_.size(); }
    bool empty() const noexcept { return defs_.empty(); }

private:
    std::map<std::string, ArchitectureDef> defs_;
};

/// Validates and converts one JSON document. Throws FormatError.
ArchitectureDef parse_architecture_def(const nlohmann::json& doc, const std::string& source = "<json>");

/// Every `*.json` file in `dir`, keyed by family.
ArchitectureRegistry load_architecture_defs(const std::filesystem::path& dir);

std::string expand_layer_template(const std::string& name_template, int layer_index);

/// Pre weights, then each layer's templates in order, then post weights.
std::vector<WeightInfo> enumerate_weights(const ArchitectureDef& def, int num_layers);

struct InferredArchitecture {
    const ArchitectureDef* def = nullptr;
    int num_layers = 1;
};

/// Looks up `model_type` from the checkpoint's config document.
InferredArchitecture infer_architecture(const LazyCheckpoint& ckpt, const ArchitectureRegistry& registry);

} // namespace ckptmerge
