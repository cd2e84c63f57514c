#include "kdlab/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <jpeglib.h>
#include <png.h>

#include "kdlab/errors.hpp"

namespace kdlab {

namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

RgbImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = image.width;
  out.height = image.height;
  out.rgb.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

RgbImage read_jpeg(const std::filesystem::path& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw FormatError("cannot open JPEG " + path.string());
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  RgbImage out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw FormatError("cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.rgb.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  return out;
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

RgbImage read_bmp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open BMP " + path.string());
  std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("BMP " + path.string() + ": " + why);
  };
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw fail("missing BM header");
  const std::uint32_t data_off = le32(b, 10);
  const std::uint32_t dib = le32(b, 14);
  if (dib < 40) throw fail("unsupported DIB header");
  const auto w = static_cast<std::int32_t>(le32(b, 18));
  const auto h_raw = static_cast<std::int32_t>(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (w <= 0 || h_raw == 0) throw fail("bad dimensions");
  if (compression != 0 && !(compression == 3 && bpp == 32)) throw fail("compressed BMP not supported");
  if (bpp != 8 && bpp != 24 && bpp != 32) throw fail("unsupported bit depth " + std::to_string(bpp));
  const bool bottom_up = h_raw > 0;
  const std::size_t width = static_cast<std::size_t>(w);
  const std::size_t height = static_cast<std::size_t>(bottom_up ? h_raw : -h_raw);
  const std::size_t stride = (width * bpp / 8 + 3) & ~std::size_t{3};
  if (data_off + stride * height > b.size()) throw fail("truncated pixel data");

  std::vector<std::uint8_t> palette;
  if (bpp == 8) {
    std::uint32_t colors = le32(b, 46);
    if (colors == 0) colors = 256;
    const std::size_t pal_off = 14 + dib;
    if (pal_off + colors * 4 > b.size()) throw fail("truncated palette");
    palette.assign(b.begin() + static_cast<long>(pal_off),
                   b.begin() + static_cast<long>(pal_off + colors * 4));
  }

  RgbImage out{width, height, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t src_row = bottom_up ? height - 1 - y : y;
    const std::uint8_t* row = b.data() + data_off + src_row * stride;
    for (std::size_t x = 0; x < width; ++x) {
      std::uint8_t* px = out.rgb.data() + (y * width + x) * 3;
      if (bpp == 8) {
        const std::size_t idx = row[x];
        if (idx * 4 + 2 >= palette.size()) throw fail("palette index out of range");
        px[0] = palette[idx * 4 + 2];
        px[1] = palette[idx * 4 + 1];
        px[2] = palette[idx * 4 + 0];
      } else {
        const std::uint8_t* s = row + x * (bpp / 8);
        px[0] = s[2];
        px[1] = s[1];
        px[2] = s[0];
      }
    }
  }
  return out;
}

void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace

bool is_supported_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

RgbImage read_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  if (ext == ".bmp") return read_bmp(path);
  throw FormatError("unsupported image type: " + path.string());
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.rgb.data(), 0, nullptr)) {
    throw FormatError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

void write_bmp(const std::filesystem::path& path, const RgbImage& image) {
  const std::size_t stride = (image.width * 3 + 3) & ~std::size_t{3};
  const auto pixel_bytes = static_cast<std::uint32_t>(stride * image.height);
  std::vector<std::uint8_t> b{'B', 'M'};
  put32(b, 54 + pixel_bytes);
  put32(b, 0);
  put32(b, 54);
  put32(b, 40);
  put32(b, static_cast<std::uint32_t>(image.width));
  put32(b, static_cast<std::uint32_t>(image.height));
  put16(b, 1);
  put16(b, 24);
  put32(b, 0);
  put32(b, pixel_bytes);
  put32(b, 2835);
  put32(b, 2835);
  put32(b, 0);
  put32(b, 0);
  for (std::size_t y = image.height; y-- > 0;) {
    std::size_t written = 0;
    for (std::size_t x = 0; x < image.width; ++x) {
      const std::uint8_t* px = image.rgb.data() + (y * image.width + x) * 3;
      b.push_back(px[2]);
      b.push_back(px[1]);
      b.push_back(px[0]);
      written += 3;
    }
    for (; written < stride; ++written) b.push_back(0);
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw FormatError("cannot write BMP " + path.string());
}

}  // namespace kdlab
