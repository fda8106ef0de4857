#include "dfpf/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <csetjmp>
#include <memory>
#include <string>

#include "dfpf/errors.hpp"

namespace dfpf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

thread_local std::string g_png_message;

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
  g_png_message = msg;
  png_longjmp(png, 1);
}
void png_warning_handler(png_structp, png_const_charp) {}

// setjmp lives in these helpers so the buffers they fill belong to the caller.
bool decode_png(png_structp png, png_infop info, std::FILE* file, Image8& img, std::vector<png_bytep>& rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return true;
}

bool encode_png(png_structp png, png_infop info, std::FILE* file, const Image8& image) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_set_IHDR(png, info, image.width, image.height, 8, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, image.pixels.data() + static_cast<size_t>(y) * image.width * image.channels);
  }
  png_write_end(png, nullptr);
  return true;
}

}  // namespace

Image8 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IngestionError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png_create_info_struct(png);
  Image8 img;
  std::vector<png_bytep> rows;
  const bool ok = decode_png(png, info, file.get(), img, rows);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw IngestionError(path.string() + ": " + g_png_message);
  if (img.channels != 1 && img.channels != 3) throw IngestionError(path.string() + ": unsupported channel count");
  return img;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw PreconditionError("write_png: 1 or 3 channels required");
  if (image.pixels.size() != static_cast<size_t>(image.width) * image.height * image.channels) {
    throw PreconditionError("write_png: pixel buffer size mismatch");
  }
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png_create_info_struct(png);
  const bool ok = encode_png(png, info, file.get(), image);
  png_destroy_write_struct(&png, &info);
  if (!ok) throw Error(path.string() + ": " + g_png_message);
}

Tensor image_to_tensor(const Image8& image) {
  Tensor t({3, image.height, image.width});
  const size_t plane = static_cast<size_t>(image.height) * image.width;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src = image.channels == 1 ? 0 : c;
        t[c * plane + static_cast<size_t>(y) * image.width + x] = image.at(y, x, src) / 255.0;
      }
    }
  }
  return t;
}

Image8 tensor_to_image(const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 3 && chw.dim(0) != 1)) {
    throw ShapeError("tensor_to_image: expected [3,H,W] or [1,H,W], got " + shape_str(chw.shape()));
  }
  Image8 img;
  img.channels = static_cast<int>(chw.dim(0));
  img.height = static_cast<int>(chw.dim(1));
  img.width = static_cast<int>(chw.dim(2));
  img.pixels.resize(chw.numel());
  const size_t plane = static_cast<size_t>(img.height) * img.width;
  for (int c = 0; c < img.channels; ++c) {
    for (size_t i = 0; i < plane; ++i) {
      const double v = std::clamp(chw[c * plane + i], 0.0, 1.0);
      img.pixels[i * img.channels + c] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

Tensor label_to_mask(const Image8& image, const std::string& name) {
  Tensor mask({1, image.height, image.width});
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const uint8_t v = image.at(y, x, 0);
      for (int c = 1; c < image.channels; ++c) {
        if (image.at(y, x, c) != v) throw IngestionError(name + ": label is not grayscale");
      }
      if (v != 0 && v != 255) throw IngestionError(name + ": label value " + std::to_string(v) + " is not 0 or 255");
      mask[static_cast<size_t>(y) * image.width + x] = v == 255 ? 1.0 : 0.0;
    }
  }
  return mask;
}

Image8 mask_to_image(const Tensor& mask) {
  if (!(mask.rank() == 2 || (mask.rank() == 3 && mask.dim(0) == 1))) {
    throw ShapeError("mask_to_image: expected [1,H,W] or [H,W], got " + shape_str(mask.shape()));
  }
  Image8 img;
  img.channels = 1;
  img.height = static_cast<int>(mask.dim(-2));
  img.width = static_cast<int>(mask.dim(-1));
  img.pixels.resize(mask.numel());
  for (size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) throw InputError("mask_to_image: mask must be binary");
    img.pixels[i] = mask[i] == 1.0 ? 255 : 0;
  }
  return img;
}

}  // namespace dfpf
