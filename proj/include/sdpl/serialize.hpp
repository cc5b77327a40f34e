#pragma once

// Tensor file format "SDPT": magic, u32 version = 1, u8 rank, u32 extents,
// then the payload as raw little-endian 32-bit floats. Checkpoints and
// descriptor files embed tensors in exactly this encoding.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sdpl/tensor.hpp"

namespace sdpl {

inline constexpr uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Shape& shape, std::span<const float> values);

struct StoredTensor {
  Shape shape;
  std::vector<float> values;
};

/// Throws CorruptCheckpoint on truncation or bad magic, VersionMismatch on an
/// unknown version.
StoredTensor read_tensor(std::istream& is);

void save_tensor_file(const std::filesystem::path& path, const Shape& shape,
                      std::span<const float> values);
StoredTensor load_tensor_file(const std::filesystem::path& path);

template <typename T>
void write_tensor(std::ostream& os, const TensorT<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    write_tensor(os, t.shape(), t.data());
  } else {
    std::vector<float> tmp(t.data().begin(), t.data().end());
    write_tensor(os, t.shape(), tmp);
  }
}

// little-endian scalar helpers shared by the checkpoint writer
void write_u8(std::ostream& os, uint8_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_string(std::ostream& os, const std::string& s);
uint8_t read_u8(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
std::string read_string(std::istream& is);

}  // namespace sdpl
