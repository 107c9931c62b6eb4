#pragma once

#include <cstddef>
#include <variant>
#include <vector>

namespace mhex {

/// Channel-major image, values in [0, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  std::size_t plane() const { return height * width; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
};

struct TokenSeq {
  std::vector<int> ids;
};

using Input = std::variant<Image, TokenSeq>;

struct Example {
  Input input;
  int label = 0;
};

}  // namespace mhex
