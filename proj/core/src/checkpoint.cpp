#include "sparseformer/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace spf {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'F', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ofstream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ofstream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_bytes(std::ifstream& is, void* dst, std::size_t n) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(is.gcount()) == n;
}

std::uint16_t u16_of(const unsigned char* b) {
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t u32_of(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<NamedBlob>& blobs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    if (b.name.size() > 0xffff) throw FormatError("tensor name too long: " + b.name);
    put_u16(os, static_cast<std::uint16_t>(b.name.size()));
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    const unsigned char dt = static_cast<unsigned char>(b.dtype);
    os.write(reinterpret_cast<const char*>(&dt), 1);
    const unsigned char nd = static_cast<unsigned char>(b.dims.size());
    os.write(reinterpret_cast<const char*>(&nd), 1);
    for (auto d : b.dims) put_u32(os, d);
    os.write(reinterpret_cast<const char*>(b.payload.data()),
             static_cast<std::streamsize>(b.payload.size()));
  }
  if (!os) throw FormatError("write failure on checkpoint: " + path);
}

std::vector<NamedBlob> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  unsigned char head[12];
  if (!get_bytes(is, head, 12)) throw FormatError("truncated checkpoint header: " + path);
  if (std::memcmp(head, kMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path);
  const std::uint32_t version = u32_of(head + 4);
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = u32_of(head + 8);
  std::vector<NamedBlob> blobs;
  blobs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    unsigned char lenb[2];
    if (!get_bytes(is, lenb, 2)) {
      throw FormatError("truncated checkpoint at tensor " + std::to_string(i));
    }
    NamedBlob b;
    const std::uint16_t name_len = u16_of(lenb);
    b.name.resize(name_len);
    if (!get_bytes(is, b.name.data(), name_len)) {
      throw FormatError("truncated checkpoint at tensor " + std::to_string(i));
    }
    unsigned char dt_nd[2];
    if (!get_bytes(is, dt_nd, 2)) {
      throw FormatError("truncated checkpoint reading tensor '" + b.name + "'");
    }
    if (dt_nd[0] > 1) {
      throw FormatError("bad dtype for tensor '" + b.name + "' in " + path);
    }
    b.dtype = static_cast<BlobDtype>(dt_nd[0]);
    b.dims.resize(dt_nd[1]);
    for (auto& d : b.dims) {
      unsigned char db[4];
      if (!get_bytes(is, db, 4)) {
        throw FormatError("truncated checkpoint reading tensor '" + b.name + "'");
      }
      d = u32_of(db);
      if (d == 0) throw FormatError("zero extent in tensor '" + b.name + "'");
    }
    const std::size_t elem = b.dtype == BlobDtype::f32 ? 4 : 8;
    b.payload.resize(static_cast<std::size_t>(b.numel()) * elem);
    if (!get_bytes(is, b.payload.data(), b.payload.size())) {
      throw FormatError("truncated checkpoint reading tensor '" + b.name + "'");
    }
    blobs.push_back(std::move(b));
  }
  return blobs;
}

}  // namespace spf
