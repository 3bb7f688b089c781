#include "isod/zip.hpp"

#include <zlib.h>

#include <algorithm>
#include <limits>

#include "isod/errors.hpp"

namespace isod {

namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01
constexpr std::uint16_t kDosTime = 0;

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t crc_of(std::span<const std::uint8_t> data) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t pos = 0;
    while (pos < data.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - pos, 1u << 30));
        crc = crc32(crc, data.data() + pos, chunk);
        pos += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

class Cursor {
public:
    explicit Cursor(std::span<const std::uint8_t> b) : b_(b) {}
    std::uint16_t u16(std::size_t at) const {
        need(at, 2);
        return static_cast<std::uint16_t>(b_[at] | (b_[at + 1] << 8));
    }
    std::uint32_t u32(std::size_t at) const {
        need(at, 4);
        return static_cast<std::uint32_t>(b_[at]) | (static_cast<std::uint32_t>(b_[at + 1]) << 8) |
               (static_cast<std::uint32_t>(b_[at + 2]) << 16) | (static_cast<std::uint32_t>(b_[at + 3]) << 24);
    }
    std::span<const std::uint8_t> bytes(std::size_t at, std::size_t n) const {
        need(at, n);
        return b_.subspan(at, n);
    }
    std::size_t size() const noexcept { return b_.size(); }

private:
    void need(std::size_t at, std::size_t n) const {
        if (at > b_.size() || n > b_.size() - at) throw LoadError("zip: truncated archive");
    }
    std::span<const std::uint8_t> b_;
};

std::vector<std::uint8_t> inflate_raw(std::span<const std::uint8_t> in, std::size_t expected,
                                      const std::string& name) {
    std::vector<std::uint8_t> out(expected);
    z_stream zs{};
    if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw LoadError("zip: inflate init failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    const auto produced = zs.total_out;
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || produced != expected) throw LoadError("zip: cannot inflate entry '" + name + "'");
    return out;
}

} // namespace

std::vector<std::uint8_t> zip_store(const std::vector<ZipEntry>& entries) {
    std::vector<std::uint8_t> out;
    std::vector<std::uint8_t> central;
    for (const auto& e : entries) {
        if (e.data.size() > std::numeric_limits<std::uint32_t>::max() || e.name.size() > 0xffff)
            throw std::length_error("zip entry too large: " + e.name);
        const auto offset = static_cast<std::uint32_t>(out.size());
        const auto crc = crc_of(e.data);
        const auto size = static_cast<std::uint32_t>(e.data.size());
        const auto nlen = static_cast<std::uint16_t>(e.name.size());

        put32(out, kLocalSig);
        put16(out, 20);
        put16(out, 0);
        put16(out, 0);
        put16(out, kDosTime);
        put16(out, kDosDate);
        put32(out, crc);
        put32(out, size);
        put32(out, size);
        put16(out, nlen);
        put16(out, 0);
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.insert(out.end(), e.data.begin(), e.data.end());

        put32(central, kCentralSig);
        put16(central, 20);
        put16(central, 20);
        put16(central, 0);
        put16(central, 0);
        put16(central, kDosTime);
        put16(central, kDosDate);
        put32(central, crc);
        put32(central, size);
        put32(central, size);
        put16(central, nlen);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put32(central, 0);
        put32(central, offset);
        central.insert(central.end(), e.name.begin(), e.name.end());
    }
    const auto cd_offset = static_cast<std::uint32_t>(out.size());
    out.insert(out.end(), central.begin(), central.end());
    put32(out, kEndSig);
    put16(out, 0);
    put16(out, 0);
    put16(out, static_cast<std::uint16_t>(entries.size()));
    put16(out, static_cast<std::uint16_t>(entries.size()));
    put32(out, static_cast<std::uint32_t>(central.size()));
    put32(out, cd_offset);
    put16(out, 0);
    return out;
}

std::vector<ZipEntry> zip_read(std::span<const std::uint8_t> bytes) {
    const Cursor c(bytes);
    if (bytes.size() < 22) throw LoadError("zip: archive too short");
    // The end record sits within the last 22 + 65535 bytes.
    std::size_t eocd = bytes.size() - 22;
    const std::size_t floor = bytes.size() > 22 + 0xffff ? bytes.size() - 22 - 0xffff : 0;
    while (c.u32(eocd) != kEndSig) {
        if (eocd == floor) throw LoadError("zip: end of central directory not found");
        --eocd;
    }
    const std::uint16_t count = c.u16(eocd + 10);
    std::size_t pos = c.u32(eocd + 16);

    std::vector<ZipEntry> out;
    out.reserve(count);
    for (std::uint16_t i = 0; i < count; ++i) {
        if (c.u32(pos) != kCentralSig) throw LoadError("zip: corrupt central directory");
        const std::uint16_t method = c.u16(pos + 10);
        const std::uint32_t crc = c.u32(pos + 16);
        const std::uint32_t csize = c.u32(pos + 20);
        const std::uint32_t usize = c.u32(pos + 24);
        const std::uint16_t nlen = c.u16(pos + 28);
        const std::uint16_t elen = c.u16(pos + 30);
        const std::uint16_t clen = c.u16(pos + 32);
        const std::uint32_t local = c.u32(pos + 42);
        const auto name_bytes = c.bytes(pos + 46, nlen);
        std::string name(name_bytes.begin(), name_bytes.end());
        pos += 46u + nlen + elen + clen;

        if (c.u32(local) != kLocalSig) throw LoadError("zip: corrupt local header for '" + name + "'");
        const std::size_t data_at = local + 30u + c.u16(local + 26) + c.u16(local + 28);
        const auto raw = c.bytes(data_at, csize);

        ZipEntry e{std::move(name), {}};
        if (method == 0) {
            if (csize != usize) throw LoadError("zip: size mismatch for stored entry '" + e.name + "'");
            e.data.assign(raw.begin(), raw.end());
        } else if (method == 8) {
            e.data = inflate_raw(raw, usize, e.name);
        } else {
            throw LoadError("zip: unsupported compression method for '" + e.name + "'");
        }
        if (crc_of(e.data) != crc) throw LoadError("zip: CRC mismatch in entry '" + e.name + "'");
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace isod
