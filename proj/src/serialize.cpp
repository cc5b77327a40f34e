#include "sdpl/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

static_assert(std::endian::native == std::endian::little,
              "tensor files assume a little-endian host");

namespace sdpl {

namespace {
constexpr char kMagic[4] = {'S', 'D', 'P', 'T'};

[[noreturn]] void truncated() {
  fail(ErrorCode::CorruptCheckpoint, "unexpected end of tensor stream");
}
}  // namespace

void write_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint8_t read_u8(std::istream& is) {
  int c = is.get();
  if (c == EOF) truncated();
  return static_cast<uint8_t>(c);
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) truncated();
  return v;
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) truncated();
  return v;
}

std::string read_string(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) truncated();
  return s;
}

void write_tensor(std::ostream& os, const Shape& shape, std::span<const float> values) {
  if (static_cast<size_t>(shape.numel()) != values.size())
    fail(ErrorCode::ShapeMismatch, "tensor payload does not match shape");
  os.write(kMagic, 4);
  write_u32(os, kTensorFormatVersion);
  write_u8(os, static_cast<uint8_t>(shape.rank()));
  for (int i = 0; i < shape.rank(); ++i) write_u32(os, static_cast<uint32_t>(shape[i]));
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!os) fail(ErrorCode::IoError, "tensor write failed");
}

StoredTensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) truncated();
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorCode::CorruptCheckpoint, "bad tensor magic");
  const uint32_t version = read_u32(is);
  if (version != kTensorFormatVersion)
    fail(ErrorCode::VersionMismatch, "tensor format version " + std::to_string(version));
  const uint8_t rank = read_u8(is);
  if (rank > 4) fail(ErrorCode::CorruptCheckpoint, "tensor rank > 4");
  std::vector<i64> dims(rank);
  for (auto& d : dims) d = read_u32(is);
  StoredTensor t;
  t.shape = Shape::of(dims);
  t.values.resize(static_cast<size_t>(t.shape.numel()));
  if (!t.values.empty() &&
      !is.read(reinterpret_cast<char*>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(float))))
    truncated();
  return t;
}

void save_tensor_file(const std::filesystem::path& path, const Shape& shape,
                      std::span<const float> values) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_tensor(os, shape, values);
}

StoredTensor load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace sdpl
