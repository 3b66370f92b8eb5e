// Raster container plus PNG and raw-float file I/O.
#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "simloop/core.hpp"

namespace simloop {

template <class T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {}

  T& at(int x, int y, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool in_bounds(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

using ImageU8 = Image<uint8_t>;
using ImageF = Image<float>;

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  explicit PngFile(const std::filesystem::path& p, const char* mode)
      : fp(std::fopen(p.string().c_str(), mode)) {}
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

// Reads an 8-bit PNG; palette and 16-bit inputs are normalized, alpha is
// stripped. Resulting channels: 1 (gray) or 3 (rgb).
inline ImageU8 read_png(const std::filesystem::path& path) {
  detail::PngFile f(path, "rb");
  if (!f.fp) throw IoError("cannot open PNG: " + path.string());

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed to decode PNG: " + path.string());
  }

  png_init_io(png, f.fp);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE)
    png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
      png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  ImageU8 img(static_cast<int>(png_get_image_width(png, info)),
              static_cast<int>(png_get_image_height(png, info)),
              static_cast<int>(png_get_channels(png, info)));

  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = img.data.data() + static_cast<size_t>(y) * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// Writes an 8-bit PNG; channels must be 1 (gray) or 3 (rgb).
inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError(strfmt("PNG writer supports 1 or 3 channels, got %d",
                         img.channels));
  std::filesystem::create_directories(path.parent_path());
  detail::PngFile f(path, "wb");
  if (!f.fp) throw IoError("cannot open PNG for writing: " + path.string());

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode PNG: " + path.string());
  }

  png_init_io(png, f.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(
        img.data.data() + static_cast<size_t>(y) * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Raw float raster: ASCII "W H\n" header then row-major little-endian
// float32 payload.
inline ImageF read_f32_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open raster: " + path.string());
  int w = 0, h = 0;
  in >> w >> h;
  char nl = 0;
  in.get(nl);
  if (!in || nl != '\n' || w <= 0 || h <= 0)
    throw IoError("bad raster header: " + path.string());
  ImageF img(w, h, 1);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (in.gcount() !=
      static_cast<std::streamsize>(img.data.size() * sizeof(float)))
    throw IoError("truncated raster payload: " + path.string());
  return img;
}

inline void write_f32_raster(const std::filesystem::path& path,
                             const ImageF& img) {
  if (img.channels != 1) throw IoError("f32 raster writer expects 1 channel");
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open raster for writing: " + path.string());
  out << img.width << " " << img.height << "\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!out) throw IoError("failed writing raster: " + path.string());
}

}  // namespace simloop
