#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hse {

// Interleaved 8-bit image buffer; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

void write_png(const std::string& path, const ImageU8& img);

// Decodes to 8-bit with the requested channel count (1 or 3), expanding
// palettes and stripping alpha/16-bit depth as needed.
ImageU8 read_png(const std::string& path, int want_channels);

}  // namespace hse
