#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lev::io {

std::uint32_t crc32c(std::span<const std::uint8_t> bytes);

/// Little-endian byte sink for the on-disk container formats.
class ByteWriter {
public:
    void put_bytes(std::string_view bytes);
    void put_u32(std::uint32_t v);
    void put_u64(std::uint64_t v);
    void put_f32(float v);
    void put_f32s(std::span<const float> values);

    /// Appends CRC32C of everything written so far.
    void seal();

    const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

/// Reads a sealed container: payload followed by a CRC32C trailer. Getters
/// throw LoadError(Truncated) past the payload end. Callers check the
/// expected total size from the header first, then call verify_checksum().
class ByteReader {
public:
    ByteReader(std::vector<std::uint8_t> bytes, std::string source_name);

    std::string get_bytes(std::size_t n);
    std::uint32_t get_u32();
    std::uint64_t get_u64();
    float get_f32();
    std::vector<float> get_f32s(std::size_t n);

    void verify_checksum() const;
    std::size_t total_size() const noexcept { return bytes_.size(); }
    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return payload_end_ - pos_; }
    const std::string& source() const noexcept { return source_; }

private:
    void need(std::size_t n) const;

    std::vector<std::uint8_t> bytes_;
    std::string source_;
    std::size_t pos_ = 0;
    std::size_t payload_end_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace lev::io
