// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/image_codec.hpp>
#include <endosplat/io.hpp>

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

namespace endosplat {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> to_bytes(const Image& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw ArgumentError("only 1- and 3-channel images can be encoded");
  }
  std::vector<std::uint8_t> px(image.data().size());
  std::transform(image.data().begin(), image.data().end(), px.begin(), to_byte);
  return px;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width() == 0 || image.height() == 0) throw ArgumentError("cannot encode an empty image");
  const std::vector<std::uint8_t> px = to_bytes(image);
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, px.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw FormatError(std::string("invalid PNG: ") + img.message, 0);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError(std::string("PNG decode failed: ") + img.message, 0);
  }
  Image out(static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3);
  for (std::size_t i = 0; i < px.size(); ++i) out.data()[i] = px[i] / 255.0;
  return out;
}

std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality) {
  if (image.width() == 0 || image.height() == 0) throw ArgumentError("cannot encode an empty image");
  const std::vector<std::uint8_t> px = to_bytes(image);
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width());
  cinfo.image_height = static_cast<JDIMENSION>(image.height());
  cinfo.input_components = image.channels();
  cinfo.in_color_space = image.channels() == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, std::clamp(quality, 1, 100), TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = static_cast<std::size_t>(image.width()) * image.channels();
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(px.data() + cinfo.next_scanline * stride);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

Image read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

void write_png(const Image& image, const std::filesystem::path& path) {
  write_file_bytes(path, encode_png(image));
}

}  // namespace endosplat
