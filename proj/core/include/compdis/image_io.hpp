#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "compdis/tensor.hpp"

namespace compdis {

// 8-bit RGB frame, row-major HWC.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> rgb;
};

void write_png(const std::string& path, const ImageU8& img);

// Tensor (3,H,W) in [0,1] (values clamped) -> 8-bit RGB.
ImageU8 to_u8(const Tensor& chw);
Tensor to_tensor01(const ImageU8& img);  // -> (3,H,W)

// Assemble a rows x cols sheet of equally sized cells with a 1px separator.
ImageU8 image_sheet(const std::vector<ImageU8>& cells, int rows, int cols);

}  // namespace compdis
