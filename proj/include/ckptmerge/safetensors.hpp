// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "ckptmerge/tensor.hpp"

namespace ckptmerge {

namespace fs = std::filesystem;

/// Positional reads from files. Checkpoints route every byte they read through
/// one of these, so tests can observe exactly which ranges were touched.
class FileReader {
public:
    virtual ~FileReader() = default;
    /// Read exactly `out.size()` bytes at `offset`; throws FormatError on short reads.
    virtual void read(const fs::path& path, std::uint64_t offset, std::span<std::byte> out) const = 0;
    virtual std::uint64_t file_size(const fs::path& path) const;
};

class PosixFileReader final : public FileReader {
public:
    void read(const fs::path& path, std::uint64_t offset, std::span<std::byte> out) const override;
};

std::shared_ptr<const FileReader> default_file_reader();

/// Wraps another reader and logs every (path, offset, length) request.
class RecordingFileReader final : public FileReader {
public:
    struct Access {
        fs::path path;
        std::uint64_t offset;
        std::uint64_t length;
    };

    explicit RecordingFileReader(std::shared_ptr<const FileReader> inner = default_file_reader())
        : inner_(std::move(inner)) {}

    void read(const fs::path& path, std::uint64_t offset, std::span<std::byte> out) const override;

    std::vector<Access> accesses() const;
    void clear();

private:
    std::shared_ptr<const FileReader> inner_;
    mutable std::mutex mutex_;
    mutable std::vector<Access> accesses_;
};

/// One tensor entry of a safetensors header. Offsets are relative to the start
/// of the data region, i.e. to `8 + header_length`.
struct HeaderEntry {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
};

struct SafetensorsHeader {
    std::uint64_t header_length = 0;
    std::vector<HeaderEntry> entries; // sorted by begin offset
    std::map<std::string, std::string> metadata;

    std::uint64_t data_start() const { return 8 + header_length; }
};

/// Reads the 8-byte length prefix and the JSON header, nothing past it.
/// Validates dtypes, shape/byte-length agreement and that ranges do not overlap.
SafetensorsHeader read_safetensors_header(const fs::path& path, const FileReader& reader);

/// Serializes a header (length prefix included). `entries` keep the offsets
/// already assigned; the JSON is padded with spaces to an 8-byte boundary.
std::vector<std::byte> encode_safetensors_header(const std::vector<HeaderEntry>& entries,
                                                 const std::map<std::string, std::string>& metadata);

} // namespace ckptmerge
