#pragma once

// Image decoding/encoding and the geometric transforms used by augmentation.
// Images are float tensors [C, H, W] with values in [0, 1].

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include "conmat/tensor.hpp"

namespace conmat {

using Image = Tensor<float>;

namespace detail {

inline std::string lower_ext(const std::string& path) {
  auto e = std::filesystem::path(path).extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

// Interleaved 8-bit pixels with `ch` channels -> [3, H, W]; gray is replicated, alpha dropped.
inline Image from_interleaved(const unsigned char* px, std::size_t h, std::size_t w, std::size_t ch, double maxval = 255.0) {
  Image img({3, h, w});
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t src = ch >= 3 ? c : 0;
      img[c * n + i] = static_cast<float>(px[i * ch + src] / maxval);
    }
  return img;
}

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline Image read_png(const std::string& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) throw DataError(path + ": " + im.message);
  im.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    throw DataError(path + ": " + im.message);
  }
  return detail::from_interleaved(buf.data(), im.height, im.width, 3);
}

namespace detail {
struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};
inline void jpeg_fail(j_common_ptr info) { std::longjmp(reinterpret_cast<JpegErr*>(info->err)->jump, 1); }
}  // namespace detail

inline Image read_jpeg(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open " + path);
  jpeg_decompress_struct cinfo{};
  detail::JpegErr err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_fail;
  std::vector<unsigned char> buf;
  std::size_t h = 0, w = 0, ch = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw DataError(path + ": undecodable JPEG");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = cinfo.output_height;
  w = cinfo.output_width;
  ch = cinfo.output_components;
  buf.resize(h * w * ch);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + cinfo.output_scanline * w * ch;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return detail::from_interleaved(buf.data(), h, w, ch);
}

// Binary PGM (P5) / PPM (P6), maxval <= 255.
inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6") throw DataError(path + ": unsupported PNM variant '" + magic + "'");
  auto next_int = [&] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
      is >> std::ws;
    }
    long v = -1;
    is >> v;
    if (!is || v <= 0) throw DataError(path + ": bad PNM header");
    return static_cast<std::size_t>(v);
  };
  const auto w = next_int(), h = next_int(), maxval = next_int();
  if (maxval > 255) throw DataError(path + ": 16-bit PNM not supported");
  is.get();
  const std::size_t ch = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(w * h * ch);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw DataError(path + ": truncated PNM data");
  return detail::from_interleaved(buf.data(), h, w, ch, static_cast<double>(maxval));
}

inline bool is_image_file(const std::string& path) {
  const auto e = detail::lower_ext(path);
  return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".ppm" || e == ".pgm";
}

inline Image load_image(const std::string& path) {
  const auto e = detail::lower_ext(path);
  if (e == ".png") return read_png(path);
  if (e == ".jpg" || e == ".jpeg") return read_jpeg(path);
  if (e == ".ppm" || e == ".pgm") return read_pnm(path);
  throw DataError(path + ": unknown image extension");
}

inline std::vector<unsigned char> to_rgb8(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("image: expected [3,H,W]");
  const std::size_t n = img.dim(1) * img.dim(2);
  std::vector<unsigned char> out(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = detail::to_byte(img[c * n + i]);
  return out;
}

inline void write_png(const std::string& path, const Image& img) {
  auto px = to_rgb8(img);
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.dim(2));
  im.height = static_cast<png_uint_32>(img.dim(1));
  im.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&im, path.c_str(), 0, px.data(), 0, nullptr))
    throw IoError(path + ": " + im.message);
}

inline void write_ppm(const std::string& path, const Image& img) {
  auto px = to_rgb8(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "P6\n" << img.dim(2) << ' ' << img.dim(1) << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

// ---------------------------------------------------------------------------
// Geometry. Pixel centers sit at integer coordinates; out-of-range samples read 0.

// Bilinear sample of channel c at (x, y); zero outside the image.
inline float sample_bilinear(const Image& img, std::size_t c, double x, double y) {
  const auto h = static_cast<long>(img.dim(1)), w = static_cast<long>(img.dim(2));
  // snap coordinates that are integral up to round-off (exact 90-degree turns)
  const double rx = std::round(x), ry = std::round(y);
  if (std::abs(x - rx) < 1e-9) x = rx;
  if (std::abs(y - ry) < 1e-9) y = ry;
  const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  const float* plane = img.ptr() + c * static_cast<std::size_t>(h * w);
  auto px = [&](long yy, long xx) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return plane[yy * w + xx];
  };
  double v = (1 - fy) * ((1 - fx) * px(y0, x0) + (fx > 0 ? fx * px(y0, x0 + 1) : 0.0));
  if (fy > 0) v += fy * ((1 - fx) * px(y0 + 1, x0) + (fx > 0 ? fx * px(y0 + 1, x0 + 1) : 0.0));
  return static_cast<float>(v);
}

// Half-pixel-center bilinear resize with edge clamping.
inline Image resize_bilinear(const Image& img, std::size_t oh, std::size_t ow) {
  if (img.rank() != 3 || img.dim(1) == 0 || img.dim(2) == 0 || oh == 0 || ow == 0)
    throw ShapeError("resize: degenerate image");
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h == oh && w == ow) return img;
  Image out({c, oh, ow});
  const double sy = static_cast<double>(h) / static_cast<double>(oh);
  const double sx = static_cast<double>(w) / static_cast<double>(ow);
  for (std::size_t i = 0; i < oh; ++i) {
    const double y = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < ow; ++j) {
      const double x = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double fx = x - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const double top = (1 - fx) * img.at(k, y0, x0) + fx * img.at(k, y0, x1);
        const double bot = (1 - fx) * img.at(k, y1, x0) + fx * img.at(k, y1, x1);
        out.at(k, i, j) = static_cast<float>((1 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

inline Image hflip(const Image& img) {
  Image out(img.shape());
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(k, i, j) = img.at(k, i, w - 1 - j);
  return out;
}

inline Image vflip(const Image& img) {
  Image out(img.shape());
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(k, i, j) = img.at(k, h - 1 - i, j);
  return out;
}

// Rotation by `degrees` (counter-clockwise as displayed) about the center,
// then translation (tx, ty) in pixels and isotropic scaling. Inverse-mapped:
//   src = c + R(theta) (out - c - t) / s,  R = [[cos, -sin], [sin, cos]].
inline Image warp_affine(const Image& img, double degrees, double tx = 0, double ty = 0, double scale = 1.0) {
  if (!(scale > 0)) throw ValueError("warp_affine: scale must be positive");
  const auto c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double th = degrees * M_PI / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  Image out(img.shape());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double dx = (static_cast<double>(j) - cx - tx) / scale;
      const double dy = (static_cast<double>(i) - cy - ty) / scale;
      const double sx = cx + cs * dx - sn * dy;
      const double sy = cy + sn * dx + cs * dy;
      for (std::size_t k = 0; k < c; ++k) out.at(k, i, j) = sample_bilinear(img, k, sx, sy);
    }
  return out;
}

inline Image rotate(const Image& img, double degrees) { return warp_affine(img, degrees); }

inline void clamp01(Image& img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace conmat
