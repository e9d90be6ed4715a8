// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptmerge/architecture.hpp"
#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/config.hpp"
#include "ckptmerge/graph.hpp"

namespace ckptmerge {

inline constexpr const char* kToolName = "ckptmerge";
inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRecipeFileName = "mergekit_recipe.yaml";

/// Opened inputs keyed by the model reference string used in the recipe.
using CheckpointSet = std::map<std::string, std::shared_ptr<const LazyCheckpoint>>;

/// Every model the recipe mentions, in first-mention order.
std::vector<std::string> referenced_models(const MergeConfig& config);

/// Opens every referenced model. A reference that is not a directory is a
/// ConfigError: the recipe points at something that does not exist.
CheckpointSet open_inputs(const MergeConfig& config,
                          std::shared_ptr<const FileReader> reader = default_file_reader());

struct PlanOptions {
    bool truncate_vocab = false;
    std::optional<std::uint64_t> seed; // overrides the recipe's seed
    std::string recipe_text;           // recorded in the output metadata
};

struct OutputManifest {
    std::vector<OutputTensorSpec> tensors; // canonical order
    DType dtype = DType::F32;
    nlohmann::json model_config = nlohmann::json::object();
    std::map<std::string, std::string> metadata; // safetensors __metadata__
    std::vector<std::filesystem::path> tokenizer_files;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;
};

struct MergePlan {
    TaskGraph graph;
    OutputManifest manifest;
};

/// Compiles a recipe into one task cone per output tensor. Dispatches to
/// plan_passthrough for passthrough recipes.
MergePlan plan_merge(const MergeConfig& config, const CheckpointSet& inputs, const ArchitectureRegistry& registry,
                     const PlanOptions& options = {});

/// Layer stacking: output layers are renamed copies of source layers.
MergePlan plan_passthrough(const MergeConfig& config, const CheckpointSet& inputs,
                           const ArchitectureRegistry& registry, const PlanOptions& options = {});

struct WriteOptions {
    unsigned threads = 1;
    std::uint64_t max_shard_bytes = 5ull << 30;
    std::function<void(const Task&)> on_commit;
    std::function<void(std::size_t index, std::size_t total, const std::string& name)> on_output;
};

/// Schedules and executes the plan, streaming outputs into shards under
/// `out_dir`, then writes config.json, tokenizer files and `recipe_text`.
ExecutionStats write_merge(const MergePlan& plan, const std::filesystem::path& out_dir, const std::string& recipe_text,
                           const WriteOptions& options = {});

} // namespace ckptmerge
