#include "sdpl/image_io.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sdpl {

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) fail(ErrorCode::MalformedImage, "truncated image header");
  return tok;
}

int parse_int(const std::string& tok) {
  try {
    size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::MalformedImage, "bad integer \"" + tok + "\" in image header");
  }
}

}  // namespace

TensorT<float> read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  const std::string magic = next_token(is);
  if (magic != "P6" && magic != "P5" && magic != "P2")
    fail(ErrorCode::MalformedImage, "unsupported format \"" + magic + "\"");
  const int w = parse_int(next_token(is));
  const int h = parse_int(next_token(is));
  const int maxval = parse_int(next_token(is));
  if (w < 1 || h < 1) fail(ErrorCode::MalformedImage, "non-positive image extents");
  if (maxval != 255) fail(ErrorCode::MalformedImage, "maxval must be 255");

  const size_t pixels = static_cast<size_t>(w) * h;
  std::vector<float> out(3 * pixels);
  if (magic == "P2") {
    for (size_t i = 0; i < pixels; ++i) {
      const int v = parse_int(next_token(is));
      if (v < 0 || v > 255) fail(ErrorCode::MalformedImage, "sample out of range");
      const float f = static_cast<float>(v) / 255.0f;
      out[i] = out[pixels + i] = out[2 * pixels + i] = f;
    }
  } else {
    const int channels = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(pixels * static_cast<size_t>(channels));
    if (!is.read(reinterpret_cast<char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size())))
      fail(ErrorCode::MalformedImage, "truncated pixel data in " + path.string());
    for (size_t i = 0; i < pixels; ++i) {
      if (channels == 3) {
        out[i] = static_cast<float>(raw[3 * i]) / 255.0f;
        out[pixels + i] = static_cast<float>(raw[3 * i + 1]) / 255.0f;
        out[2 * pixels + i] = static_cast<float>(raw[3 * i + 2]) / 255.0f;
      } else {
        const float f = static_cast<float>(raw[i]) / 255.0f;
        out[i] = out[pixels + i] = out[2 * pixels + i] = f;
      }
    }
  }
  return TensorT<float>::constant(Shape{3, h, w}, std::move(out));
}

void write_ppm(const std::filesystem::path& path, const TensorT<float>& image) {
  if (image.shape().rank() != 3 || image.shape()[0] != 3)
    fail(ErrorCode::ShapeMismatch, "write_ppm expects [3,H,W]");
  const i64 h = image.shape()[1], w = image.shape()[2];
  const i64 pixels = h * w;
  auto d = image.data();
  std::vector<unsigned char> raw(static_cast<size_t>(3 * pixels));
  for (i64 i = 0; i < pixels; ++i)
    for (int c = 0; c < 3; ++c) {
      float v = d[static_cast<size_t>(c * pixels + i)];
      v = std::min(1.0f, std::max(0.0f, v));
      raw[static_cast<size_t>(3 * i + c)] =
          static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  os << "P6\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
  if (!os) fail(ErrorCode::IoError, "write failed: " + path.string());
}

void write_mask_pgm(const std::filesystem::path& path, const RegionMask& mask) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  os << "P2\n" << mask.width << " " << mask.height << "\n255\n";
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) os << (mask.at(r, c) ? "255" : "0") << (c + 1 == mask.width ? "" : " ");
    os << "\n";
  }
  if (!os) fail(ErrorCode::IoError, "write failed: " + path.string());
}

}  // namespace sdpl
