#pragma once

// PPM/PGM codecs (P6 binary color, P5 binary gray, P2 ASCII gray) — the only
// image formats the artifact reads or writes. Images are [3,H,W] tensors with
// values in [0,1], quantized to 8 bits on disk.

#include <filesystem>

#include "sdpl/geometry.hpp"
#include "sdpl/tensor.hpp"

namespace sdpl {

TensorT<float> read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const TensorT<float>& image);

/// Plain-text PGM (P2) with 0/255 cells; used for exported region masks.
void write_mask_pgm(const std::filesystem::path& path, const RegionMask& mask);

}  // namespace sdpl
