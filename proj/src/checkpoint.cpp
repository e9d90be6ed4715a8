// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "ckptmerge/error.hpp"

namespace ckptmerge {

namespace {

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(fmt::format("cannot open '{}'", path.string()));
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
    }
}

const std::set<std::string>& tokenizer_file_names() {
    static const std::set<std::string> names = {
        "tokenizer.json",     "tokenizer_config.json", "tokenizer.model",   "special_tokens_map.json",
        "added_tokens.json",  "vocab.json",            "vocab.txt",         "merges.txt",
        "generation_config.json",
    };
    return names;
}

} // namespace

bool is_tokenizer_file(const std::string& filename) {
    return tokenizer_file_names().count(filename) != 0;
}

const std::map<std::string, std::string>& LazyCheckpoint::header_metadata() const {
    static const std::map<std::string, std::string> empty;
    return shards_.empty() ? empty : shards_.front().metadata;
}

const TensorRecord& LazyCheckpoint::record(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) {
        throw KeyError(fmt::format("tensor '{}' not found in checkpoint '{}'", name, root_.string()));
    }
    return it->second;
}

std::vector<std::string> LazyCheckpoint::names_in_file_order() const {
    std::vector<const TensorRecord*> recs;
    recs.reserve(records_.size());
    for (const auto& [_, r] : records_) recs.push_back(&r);
    std::sort(recs.begin(), recs.end(), [](const TensorRecord* a, const TensorRecord* b) {
        return a->shard != b->shard ? a->shard < b->shard : a->byte_offset < b->byte_offset;
    });
    std::vector<std::string> names;
    names.reserve(recs.size());
    for (const auto* r : recs) names.push_back(r->name);
    return names;
}

std::vector<std::byte> LazyCheckpoint::load_raw(const std::string& name) const {
    const auto& rec = record(name);
    const auto& shard = shards_.at(rec.shard);
    const std::uint64_t begin = shard.data_start + rec.byte_offset;
    const std::uint64_t size = reader_->file_size(shard.path);
    if (begin + rec.byte_length > size) {
        throw FormatError(fmt::format("tensor '{}' spans bytes [{}, {}) but '{}' is only {} bytes", name, begin,
                                      begin + rec.byte_length, shard.path.string(), size));
    }
    std::vector<std::byte> bytes(rec.byte_length);
    reader_->read(shard.path, begin, bytes);
    return bytes;
}

Tensor LazyCheckpoint::load_tensor(const std::string& name) const {
    const auto& rec = record(name);
    const auto bytes = load_raw(name);
    std::vector<float> values(element_count(rec.shape));
    decode_to_f32(rec.dtype, bytes, values);
    return Tensor(rec.shape, std::move(values));
}

Tensor LazyCheckpoint::load_tensor_rows(const std::string& name, std::uint64_t rows) const {
    const auto& rec = record(name);
    if (rec.shape.empty() || rows >= rec.shape[0]) return load_tensor(name);

    Shape shape = rec.shape;
    shape[0] = rows;
    const std::uint64_t count = element_count(shape);
    const auto& shard = shards_.at(rec.shard);
    std::vector<std::byte> bytes(count * dtype_size(rec.dtype));
    const std::uint64_t begin = shard.data_start + rec.byte_offset;
    if (begin + rec.byte_length > reader_->file_size(shard.path)) {
        throw FormatError(fmt::format("tensor '{}' extends past the end of '{}'", name, shard.path.string()));
    }
    reader_->read(shard.path, begin, bytes);
    std::vector<float> values(count);
    decode_to_f32(rec.dtype, bytes, values);
    return Tensor(std::move(shape), std::move(values));
}

Tensor load_tensor(const LazyCheckpoint& ckpt, const std::string& name) {
    return ckpt.load_tensor(name);
}

LazyCheckpoint open_checkpoint(const fs::path& dir, std::shared_ptr<const FileReader> reader) {
    if (!fs::is_directory(dir)) throw FormatError(fmt::format("'{}' is not a directory", dir.string()));

    LazyCheckpoint ckpt;
    ckpt.root_ = dir;
    ckpt.reader_ = std::move(reader);

    const fs::path index_path = dir / kShardIndexName;
    const fs::path single_path = dir / kSingleShardName;

    // expected shard file name -> names the index assigns to it
    std::map<std::string, std::set<std::string>> expected;
    if (fs::exists(index_path)) {
        const auto index = read_json_file(index_path);
        if (!index.is_object() || !index.contains("weight_map") || !index["weight_map"].is_object()) {
            throw FormatError(fmt::format("'{}' has no weight_map object", index_path.string()));
        }
        for (const auto& [name, file] : index["weight_map"].items()) {
            if (!file.is_string()) throw FormatError(fmt::format("weight_map entry '{}' is not a string", name));
            expected[file.get<std::string>()].insert(name);
        }
        if (expected.empty()) throw FormatError(fmt::format("'{}' lists no tensors", index_path.string()));
    } else if (fs::exists(single_path)) {
        expected[kSingleShardName];
    } else {
        throw FormatError(fmt::format("'{}' contains neither {} nor {}", dir.string(), kSingleShardName,
                                      kShardIndexName));
    }

    for (const auto& [file, names] : expected) {
        const fs::path path = dir / file;
        if (!fs::exists(path)) throw FormatError(fmt::format("shard '{}' is missing", path.string()));
        auto header = read_safetensors_header(path, *ckpt.reader_);
        const std::size_t shard_index = ckpt.shards_.size();
        ckpt.shards_.push_back({path, header.data_start(), std::move(header.metadata)});
        for (auto& e : header.entries) {
            TensorRecord rec{e.name, e.dtype, std::move(e.shape), e.begin, e.end - e.begin, shard_index};
            if (!ckpt.records_.emplace(e.name, std::move(rec)).second) {
                throw FormatError(fmt::format("tensor '{}' appears in more than one shard of '{}'", e.name,
                                              dir.string()));
            }
        }
        for (const auto& name : names) {
            auto it = ckpt.records_.find(name);
            if (it == ckpt.records_.end() || it->second.shard != shard_index) {
                throw FormatError(fmt::format("index maps '{}' to '{}' but that shard does not hold it", name, file));
            }
        }
    }

    const fs::path config_path = dir / kModelConfigName;
    if (fs::exists(config_path)) {
        ckpt.model_config_ = read_json_file(config_path);
        if (!ckpt.model_config_.is_object()) {
            throw FormatError(fmt::format("'{}' is not a JSON object", config_path.string()));
        }
    }

    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_tokenizer_file(entry.path().filename().string())) {
            ckpt.tokenizer_files_.push_back(entry.path());
        }
    }
    std::sort(ckpt.tokenizer_files_.begin(), ckpt.tokenizer_files_.end());
    return ckpt;
}

std::vector<std::size_t> pack_shards(const std::vector<OutputTensorSpec>& specs, DType dtype,
                                     std::uint64_t max_shard_bytes) {
    std::vector<std::size_t> assignment;
    assignment.reserve(specs.size());
    std::size_t shard = 0;
    std::uint64_t used = 0;
    for (const auto& spec : specs) {
        const std::uint64_t bytes = element_count(spec.shape) * dtype_size(dtype);
        if (bytes > max_shard_bytes) {
            throw CapacityError(fmt::format("tensor '{}' needs {} bytes, more than the shard limit of {}", spec.name,
                                            bytes, max_shard_bytes));
        }
        if (used > 0 && used + bytes > max_shard_bytes) {
            ++shard;
            used = 0;
        }
        used += bytes;
        assignment.push_back(shard);
    }
    return assignment;
}

std::string shard_file_name(std::size_t index, std::size_t count) {
    return fmt::format("model-{:05d}-of-{:05d}.safetensors", index + 1, count);
}

struct ShardedWriter::File {
    std::ofstream out;
    fs::path path;
};

ShardedWriter::ShardedWriter(fs::path out_dir, std::vector<OutputTensorSpec> manifest, DType out_dtype,
                             std::uint64_t max_shard_bytes, std::map<std::string, std::string> metadata)
    : out_dir_(std::move(out_dir)), manifest_(std::move(manifest)), dtype_(out_dtype), metadata_(std::move(metadata)) {
    std::set<std::string> seen;
    for (const auto& spec : manifest_) {
        if (!seen.insert(spec.name).second) throw ConfigError(fmt::format("duplicate output tensor '{}'", spec.name));
    }
    assignment_ = pack_shards(manifest_, dtype_, max_shard_bytes);
    shard_count_ = assignment_.empty() ? 1 : assignment_.back() + 1;
    fs::create_directories(out_dir_);
}

ShardedWriter::~ShardedWriter() = default;

void ShardedWriter::open_shard(std::size_t shard) {
    if (file_) file_->out.close();

    std::vector<HeaderEntry> entries;
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < manifest_.size(); ++i) {
        if (assignment_[i] != shard) continue;
        const std::uint64_t bytes = element_count(manifest_[i].shape) * dtype_size(dtype_);
        entries.push_back({manifest_[i].name, dtype_, manifest_[i].shape, offset, offset + bytes});
        offset += bytes;
    }
    const auto header = encode_safetensors_header(entries, metadata_);

    file_ = std::make_unique<File>();
    file_->path = out_dir_ / (shard_count_ == 1 ? std::string(kSingleShardName) : shard_file_name(shard, shard_count_));
    file_->out.open(file_->path, std::ios::binary | std::ios::trunc);
    if (!file_->out) throw FormatError(fmt::format("cannot create '{}'", file_->path.string()));
    file_->out.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
    open_shard_ = shard;
}

void ShardedWriter::write(const std::string& name, const Tensor& tensor) {
    if (finished_) throw Error(ErrorKind::Internal, "ShardedWriter::write after finish");
    if (next_ >= manifest_.size() || manifest_[next_].name != name) {
        throw Error(ErrorKind::Internal, fmt::format("tensor '{}' written out of manifest order", name));
    }
    if (manifest_[next_].shape != tensor.shape()) {
        throw ShapeMismatch(fmt::format("tensor '{}' has shape {} but the manifest declares {}", name,
                                        shape_to_string(tensor.shape()), shape_to_string(manifest_[next_].shape)));
    }
    if (assignment_[next_] != open_shard_) open_shard(assignment_[next_]);

    std::vector<std::byte> bytes(tensor.size() * dtype_size(dtype_));
    encode_from_f32(dtype_, tensor.values(), bytes);
    file_->out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!file_->out) throw FormatError(fmt::format("write to '{}' failed", file_->path.string()));
    ++next_;
}

nlohmann::json ShardedWriter::finish() {
    if (finished_) throw Error(ErrorKind::Internal, "ShardedWriter::finish called twice");
    if (next_ != manifest_.size()) {
        throw Error(ErrorKind::Internal,
                    fmt::format("writer finished after {} of {} tensors", next_, manifest_.size()));
    }
    if (manifest_.empty()) open_shard(0);
    file_->out.close();
    if (!file_->out) throw FormatError(fmt::format("closing '{}' failed", file_->path.string()));
    file_.reset();
    finished_ = true;

    std::uint64_t total = 0;
    nlohmann::json weight_map = nlohmann::json::object();
    for (std::size_t i = 0; i < manifest_.size(); ++i) {
        total += element_count(manifest_[i].shape) * dtype_size(dtype_);
        weight_map[manifest_[i].name] =
            shard_count_ == 1 ? std::string(kSingleShardName) : shard_file_name(assignment_[i], shard_count_);
    }
    nlohmann::json index = {{"metadata", {{"total_size", total}}}, {"weight_map", std::move(weight_map)}};
    if (shard_count_ > 1) {
        std::ofstream out(out_dir_ / kShardIndexName, std::ios::binary | std::ios::trunc);
        out << index.dump(2) << '\n';
        if (!out) throw FormatError("failed to write the shard index");
    }
    return index;
}

nlohmann::json write_sharded(const std::vector<std::pair<std::string, Tensor>>& tensors, const fs::path& out_dir,
                             std::uint64_t max_shard_bytes, DType out_dtype,
                             const std::map<std::string, std::string>& metadata) {
    std::vector<OutputTensorSpec> manifest;
    manifest.reserve(tensors.size());
    for (const auto& [name, t] : tensors) manifest.push_back({name, t.shape()});
    ShardedWriter writer(out_dir, std::move(manifest), out_dtype, max_shard_bytes, metadata);
    for (const auto& [name, t] : tensors) writer.write(name, t);
    return writer.finish();
}

} // namespace ckptmerge
