#include "latentcf/image_io.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "latentcf/errors.hpp"

namespace latentcf {
namespace {

struct ReadCursor {
  const std::string* data;
  std::size_t offset;
};

void writeToString(png_structp png, png_bytep bytes, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(bytes), length);
}

void flushNothing(png_structp) {}

void readFromString(png_structp png, png_bytep bytes, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->data->size()) png_error(png, "truncated PNG payload");
  std::memcpy(bytes, cursor->data->data() + cursor->offset, length);
  cursor->offset += length;
}

[[noreturn]] void pngErrorToException(png_structp, png_const_charp message) {
  throw ArgumentError(std::string("PNG error: ") + message);
}

void pngWarning(png_structp, png_const_charp) {}

}  // namespace

torch::Tensor quantize8(const torch::Tensor& image) {
  return (image.clamp(0.0, 1.0) * 255.0).round() / 255.0;
}

std::string encodePng(const torch::Tensor& image) {
  if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
    throw ArgumentError("encodePng expects a (1|3, H, W) tensor");
  }
  const auto channels = image.size(0);
  const auto height = image.size(1);
  const auto width = image.size(2);
  auto bytes = (image.detach().to(torch::kCPU, torch::kFloat64).clamp(0.0, 1.0) * 255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();

  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, pngErrorToException, pngWarning);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, writeToString, flushNothing);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto* base = bytes.data_ptr<uint8_t>();
    const auto stride = width * channels;
    for (int64_t row = 0; row < height; ++row) {
      png_write_row(png, base + row * stride);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

torch::Tensor decodePng(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw ArgumentError("payload is not a PNG image");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, pngErrorToException, pngWarning);
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{&bytes, 0};
  torch::Tensor result;
  try {
    png_set_read_fn(png, &cursor, readFromString);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    const auto colorType = png_get_color_type(png, info);
    if (colorType == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (colorType == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const auto width = static_cast<int64_t>(png_get_image_width(png, info));
    const auto height = static_cast<int64_t>(png_get_image_height(png, info));
    const auto channels = static_cast<int64_t>(png_get_channels(png, info));
    if (channels != 1 && channels != 3) throw ArgumentError("unsupported PNG channel layout");
    auto buffer = torch::empty({height, width, channels}, torch::kUInt8);
    auto* base = buffer.data_ptr<uint8_t>();
    for (int64_t row = 0; row < height; ++row) {
      png_read_row(png, base + row * width * channels, nullptr);
    }
    png_read_end(png, nullptr);
    result = buffer.permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return result.contiguous();
}

void writePng(const std::filesystem::path& path, const torch::Tensor& image) {
  auto bytes = encodePng(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

torch::Tensor readPng(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decodePng(bytes);
}

torch::Tensor tileGrid(const std::vector<std::vector<torch::Tensor>>& rows, int64_t pad) {
  if (rows.empty() || rows.front().empty()) throw ArgumentError("tileGrid needs at least one cell");
  const auto cols = static_cast<int64_t>(rows.front().size());
  const auto& first = rows.front().front();
  const auto c = first.size(0), h = first.size(1), w = first.size(2);
  const auto nrows = static_cast<int64_t>(rows.size());
  auto canvas = torch::ones({c, nrows * h + (nrows + 1) * pad, cols * w + (cols + 1) * pad}, torch::kFloat32);
  for (int64_t r = 0; r < nrows; ++r) {
    if (static_cast<int64_t>(rows[r].size()) != cols) throw ArgumentError("tileGrid rows differ in length");
    for (int64_t col = 0; col < cols; ++col) {
      auto cell = rows[r][col].detach().to(torch::kCPU, torch::kFloat32);
      if (cell.dim() == 2) cell = cell.unsqueeze(0);
      if (cell.size(0) != c && cell.size(0) == 1) cell = cell.expand({c, h, w});
      if (cell.sizes() != first.sizes()) throw ArgumentError("tileGrid cells differ in shape");
      const auto y = pad + r * (h + pad);
      const auto x = pad + col * (w + pad);
      canvas.slice(1, y, y + h).slice(2, x, x + w).copy_(cell);
    }
  }
  return canvas;
}

}  // namespace latentcf
