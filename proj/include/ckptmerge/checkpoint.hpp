// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckptmerge/safetensors.hpp"
#include "ckptmerge/tensor.hpp"

namespace ckptmerge {

inline constexpr const char* kSingleShardName = "model.safetensors";
inline constexpr const char* kShardIndexName = "model.safetensors.index.json";
inline constexpr const char* kModelConfigName = "config.json";

struct TensorRecord {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t byte_offset = 0; // relative to the shard's data region
    std::uint64_t byte_length = 0;
    std::size_t shard = 0;         // index into LazyCheckpoint::shards()
};

struct ShardInfo {
    fs::path path;
    std::uint64_t data_start = 0;
    std::map<std::string, std::string> metadata; // the shard's __metadata__
};

/// Index over a checkpoint directory. Opening reads shard headers and the
/// small JSON side files only; tensor payloads are read on demand by
/// load_tensor. Immutable after open, so concurrent loads are safe.
class LazyCheckpoint {
public:
    const fs::path& root() const noexcept { return root_; }
    const std::map<std::string, TensorRecord>& records() const noexcept { return records_; }
    const std::vector<ShardInfo>& shards() const noexcept { return shards_; }
    /// Parsed `config.json`, or an empty object when the directory has none.
    const nlohmann::json& model_config() const noexcept { return model_config_; }
    /// `__metadata__` of the first shard.
    const std::map<std::string, std::string>& header_metadata() const;
    const std::vector<fs::path>& tokenizer_files() const noexcept { return tokenizer_files_; }

    bool contains(const std::string& name) const { return records_.count(name) != 0; }
    /// Throws KeyError for unknown names.
    const TensorRecord& record(const std::string& name) const;
    /// Tensor names in file order: shard by shard, then by offset.
    std::vector<std::string> names_in_file_order() const;

    /// Reads exactly the tensor's byte range and widens it to F32.
    Tensor load_tensor(const std::string& name) const;
    /// Same, but keeps only the first `rows` entries of dimension 0.
    Tensor load_tensor_rows(const std::string& name, std::uint64_t rows) const;
    /// Raw storage bytes of one tensor, no dtype conversion.
    std::vector<std::byte> load_raw(const std::string& name) const;

private:
    friend LazyCheckpoint open_checkpoint(const fs::path&, std::shared_ptr<const FileReader>);

    fs::path root_;
    std::map<std::string, TensorRecord> records_;
    std::vector<ShardInfo> shards_;
    nlohmann::json model_config_ = nlohmann::json::object();
    std::vector<fs::path> tokenizer_files_;
    std::shared_ptr<const FileReader> reader_;
};

/// Opens a directory holding either `model.safetensors` or
/// `model.safetensors.index.json` plus its shards.
LazyCheckpoint open_checkpoint(const fs::path& dir, std::shared_ptr<const FileReader> reader = default_file_reader());

/// Free-function spelling of LazyCheckpoint::load_tensor.
Tensor load_tensor(const LazyCheckpoint& ckpt, const std::string& name);

/// Auxiliary files copied alongside merged weights.
bool is_tokenizer_file(const std::string& filename);

struct OutputTensorSpec {
    std::string name;
    Shape shape;
};

/// Greedy in-order packing: a new shard starts whenever the next tensor would
/// push the current shard past `max_shard_bytes`. Returns the shard number of
/// every tensor. Throws CapacityError if a single tensor exceeds the cap.
std::vector<std::size_t> pack_shards(const std::vector<OutputTensorSpec>& specs, DType dtype,
                                     std::uint64_t max_shard_bytes);

std::string shard_file_name(std::size_t index, std::size_t count);

/// Streams tensors into shard files. The full manifest is known up front, so
/// each shard header is written before its payload and no tensor is buffered
/// beyond the one being written.
class ShardedWriter {
public:
    ShardedWriter(fs::path out_dir, std::vector<OutputTensorSpec> manifest, DType out_dtype,
                  std::uint64_t max_shard_bytes, std::map<std::string, std::string> metadata = {});
    ~ShardedWriter();
    ShardedWriter(const ShardedWriter&) = delete;
    ShardedWriter& operator=(const ShardedWriter&) = delete;

    /// Tensors must arrive in manifest order with matching shapes.
    void write(const std::string& name, const Tensor& tensor);

    /// Closes the last shard and writes the index (multi-shard only).
    /// Returns the index document; for a single shard it is still returned but not written.
    nlohmann::json finish();

    std::size_t shard_count() const noexcept { return shard_count_; }

private:
    void open_shard(std::size_t shard);

    struct File;
    fs::path out_dir_;
    std::vector<OutputTensorSpec> manifest_;
    DType dtype_;
    std::map<std::string, std::string> metadata_;
    std::vector<std::size_t> assignment_;
    std::size_t shard_count_ = 0;
    std::size_t next_ = 0;
    std::size_t open_shard_ = static_cast<std::size_t>(-1);
    std::unique_ptr<File> file_;
    bool finished_ = false;
};

/// Convenience wrapper over ShardedWriter for in-memory tensor lists.
nlohmann::json write_sharded(const std::vector<std::pair<std::string, Tensor>>& tensors, const fs::path& out_dir,
                             std::uint64_t max_shard_bytes, DType out_dtype,
                             const std::map<std::string, std::string>& metadata = {});

} // namespace ckptmerge
