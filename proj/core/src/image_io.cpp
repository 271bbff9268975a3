#include "compdis/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace compdis {

void write_png(const std::string& path, const ImageU8& img) {
  if (img.rgb.size() != static_cast<size_t>(img.height) * img.width * 3)
    throw std::invalid_argument("write_png: bad buffer size");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.rgb.data() + static_cast<size_t>(y) * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

ImageU8 to_u8(const Tensor& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw std::invalid_argument("to_u8: need (3,H,W)");
  ImageU8 img;
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
  const size_t hw = static_cast<size_t>(img.height) * img.width;
  for (size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(chw[static_cast<size_t>(c) * hw + i], 0.0, 1.0);
      img.rgb[i * 3 + static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

Tensor to_tensor01(const ImageU8& img) {
  Tensor t({3, img.height, img.width});
  const size_t hw = static_cast<size_t>(img.height) * img.width;
  for (size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      t[static_cast<size_t>(c) * hw + i] = img.rgb[i * 3 + static_cast<size_t>(c)] / 255.0;
  return t;
}

ImageU8 image_sheet(const std::vector<ImageU8>& cells, int rows, int cols) {
  if (cells.empty() || rows * cols < static_cast<int>(cells.size()))
    throw std::invalid_argument("image_sheet: grid too small");
  const int ch = cells[0].height, cw = cells[0].width;
  for (const auto& c : cells)
    if (c.height != ch || c.width != cw) throw std::invalid_argument("image_sheet: uneven cells");
  const int sep = 1;
  ImageU8 sheet;
  sheet.height = rows * ch + (rows + 1) * sep;
  sheet.width = cols * cw + (cols + 1) * sep;
  sheet.rgb.assign(static_cast<size_t>(sheet.height) * sheet.width * 3, 32);
  for (size_t k = 0; k < cells.size(); ++k) {
    const int r = static_cast<int>(k) / cols, c = static_cast<int>(k) % cols;
    const int y0 = sep + r * (ch + sep), x0 = sep + c * (cw + sep);
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        for (int ch3 = 0; ch3 < 3; ++ch3)
          sheet.rgb[((static_cast<size_t>(y0 + y) * sheet.width) + (x0 + x)) * 3 + ch3] =
              cells[k].rgb[(static_cast<size_t>(y) * cw + x) * 3 + ch3];
  }
  return sheet;
}

}  // namespace compdis
