// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/safetensors.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>

#include <fcntl.h>
#include <unistd.h>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ckptmerge/error.hpp"

namespace ckptmerge {

namespace {

// Same ceiling the reference implementation enforces.
constexpr std::uint64_t kMaxHeaderLength = 100'000'000;

class FdGuard {
public:
    explicit FdGuard(int fd) : fd_(fd) {}
    ~FdGuard() {
        if (fd_ >= 0) ::close(fd_);
    }
    FdGuard(const FdGuard&) = delete;
    FdGuard& operator=(const FdGuard&) = delete;
    int get() const { return fd_; }

private:
    int fd_;
};

} // namespace

std::uint64_t FileReader::file_size(const fs::path& path) const {
    std::error_code ec;
    auto size = fs::file_size(path, ec);
    if (ec) throw FormatError(fmt::format("cannot stat '{}': {}", path.string(), ec.message()));
    return size;
}

void PosixFileReader::read(const fs::path& path, std::uint64_t offset, std::span<std::byte> out) const {
    FdGuard fd(::open(path.c_str(), O_RDONLY | O_CLOEXEC));
    if (fd.get() < 0) {
        throw FormatError(fmt::format("cannot open '{}': {}", path.string(), std::strerror(errno)));
    }
    std::size_t done = 0;
    while (done < out.size()) {
        const ssize_t n = ::pread(fd.get(), out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw FormatError(fmt::format("read error on '{}': {}", path.string(), std::strerror(errno)));
        }
        if (n == 0) {
            throw FormatError(fmt::format("unexpected end of file in '{}' at byte {} (wanted {} bytes at {})",
                                          path.string(), offset + done, out.size(), offset));
        }
        done += static_cast<std::size_t>(n);
    }
}

std::shared_ptr<const FileReader> default_file_reader() {
    static const auto reader = std::make_shared<const PosixFileReader>();
    return reader;
}

void RecordingFileReader::read(const fs::path& path, std::uint64_t offset, std::span<std::byte> out) const {
    {
        std::lock_guard lock(mutex_);
        accesses_.push_back({path, offset, out.size()});
    }
    inner_->read(path, offset, out);
}

std::vector<RecordingFileReader::Access> RecordingFileReader::accesses() const {
    std::lock_guard lock(mutex_);
    return accesses_;
}

void RecordingFileReader::clear() {
    std::lock_guard lock(mutex_);
    accesses_.clear();
}

SafetensorsHeader read_safetensors_header(const fs::path& path, const FileReader& reader) {
    SafetensorsHeader header;
    std::uint64_t length = 0;
    reader.read(path, 0, std::as_writable_bytes(std::span(&length, 1)));
    if (length == 0 || length > kMaxHeaderLength) {
        throw FormatError(fmt::format("'{}': implausible header length {}", path.string(), length));
    }
    header.header_length = length;

    std::string text(length, '\0');
    reader.read(path, 8, std::as_writable_bytes(std::span(text.data(), text.size())));

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("'{}': header is not valid JSON: {}", path.string(), e.what()));
    }
    if (!doc.is_object()) throw FormatError(fmt::format("'{}': header is not a JSON object", path.string()));

    for (const auto& [key, value] : doc.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) throw FormatError(fmt::format("'{}': __metadata__ must be an object", path.string()));
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) {
                    throw FormatError(fmt::format("'{}': __metadata__ value for '{}' is not a string", path.string(), mk));
                }
                header.metadata.emplace(mk, mv.get<std::string>());
            }
            continue;
        }
        HeaderEntry entry;
        entry.name = key;
        try {
            const auto dtype_str = value.at("dtype").get<std::string>();
            auto dtype = parse_dtype(dtype_str);
            if (!dtype) {
                throw FormatError(fmt::format("'{}': tensor '{}' has unsupported dtype {}", path.string(), key, dtype_str));
            }
            entry.dtype = *dtype;
            entry.shape = value.at("shape").get<Shape>();
            const auto offsets = value.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2 || offsets[0] > offsets[1]) {
                throw FormatError(fmt::format("'{}': tensor '{}' has malformed data_offsets", path.string(), key));
            }
            entry.begin = offsets[0];
            entry.end = offsets[1];
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(fmt::format("'{}': malformed entry for tensor '{}': {}", path.string(), key, e.what()));
        }
        if (entry.end - entry.begin != element_count(entry.shape) * dtype_size(entry.dtype)) {
            throw FormatError(fmt::format("'{}': tensor '{}' byte length {} does not match shape {} of {}", path.string(),
                                          key, entry.end - entry.begin, shape_to_string(entry.shape),
                                          dtype_name(entry.dtype)));
        }
        header.entries.push_back(std::move(entry));
    }

    std::sort(header.entries.begin(), header.entries.end(), [](const HeaderEntry& a, const HeaderEntry& b) {
        return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
    });
    for (std::size_t i = 1; i < header.entries.size(); ++i) {
        const auto& prev = header.entries[i - 1];
        const auto& cur = header.entries[i];
        if (cur.begin < prev.end) {
            throw FormatError(fmt::format("'{}': tensors '{}' and '{}' overlap", path.string(), prev.name, cur.name));
        }
    }
    return header;
}

std::vector<std::byte> encode_safetensors_header(const std::vector<HeaderEntry>& entries,
                                                 const std::map<std::string, std::string>& metadata) {
    nlohmann::json doc = nlohmann::json::object();
    if (!metadata.empty()) doc["__metadata__"] = metadata;
    for (const auto& e : entries) {
        doc[e.name] = {
            {"dtype", std::string(dtype_name(e.dtype))},
            {"shape", e.shape},
            {"data_offsets", {e.begin, e.end}},
        };
    }
    std::string text = doc.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    const std::uint64_t length = text.size();
    std::vector<std::byte> out(8 + text.size());
    std::memcpy(out.data(), &length, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    return out;
}

} // namespace ckptmerge
