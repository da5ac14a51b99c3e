#include "lev/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <boost/crc.hpp>

#include "lev/errors.hpp"

namespace lev::io {

static_assert(std::endian::native == std::endian::little, "container formats assume a little-endian host");

std::uint32_t crc32c(std::span<const std::uint8_t> bytes) {
    boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

void ByteWriter::put_bytes(std::string_view bytes) { bytes_.insert(bytes_.end(), bytes.begin(), bytes.end()); }

void ByteWriter::put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::put_f32s(std::span<const float> values) {
    for (float v : values) {
        put_f32(v);
    }
}

void ByteWriter::seal() { put_u32(crc32c(bytes_)); }

ByteReader::ByteReader(std::vector<std::uint8_t> bytes, std::string source_name)
    : bytes_(std::move(bytes)), source_(std::move(source_name)) {
    if (bytes_.size() < 4) {
        throw LoadError(LoadError::Kind::Truncated, source_ + ": file too short to hold a checksum");
    }
    payload_end_ = bytes_.size() - 4;
}

void ByteReader::verify_checksum() const {
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) {
        stored |= static_cast<std::uint32_t>(bytes_[payload_end_ + i]) << (8 * i);
    }
    const std::uint32_t actual = crc32c(std::span(bytes_.data(), payload_end_));
    if (stored != actual) {
        throw LoadError(LoadError::Kind::Checksum, source_ + ": checksum mismatch");
    }
}

void ByteReader::need(std::size_t n) const {
    if (n > payload_end_ - pos_) {
        throw LoadError(LoadError::Kind::Truncated, source_ + ": unexpected end of data");
    }
}

std::string ByteReader::get_bytes(std::size_t n) {
    need(n);
    std::string out(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return out;
}

std::uint32_t ByteReader::get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += 8;
    return v;
}

float ByteReader::get_f32() { return std::bit_cast<float>(get_u32()); }

std::vector<float> ByteReader::get_f32s(std::size_t n) {
    if (n > remaining() / 4) {
        throw LoadError(LoadError::Kind::Truncated, source_ + ": unexpected end of data");
    }
    std::vector<float> out(n);
    for (auto& v : out) {
        v = get_f32();
    }
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError(LoadError::Kind::NotFound, path.string() + ": cannot open");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error(tmp.string() + ": cannot open for writing");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw Error(tmp.string() + ": write failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace lev::io
