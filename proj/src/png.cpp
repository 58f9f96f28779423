#include "geoworld/png.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>

#include "geoworld/error.hpp"

namespace geoworld::png {

namespace {

std::uint8_t to_byte(double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_grid(const std::filesystem::path& path, const std::vector<std::vector<scene::Frame>>& rows) {
  if (rows.empty() || rows[0].empty()) throw InvalidInputError("png grid: nothing to draw");
  const int h = rows[0][0].height, w = rows[0][0].width;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    for (const auto& f : r)
      if (f.height != h || f.width != w) throw InvalidInputError("png grid: frame sizes differ");
  }
  constexpr int gap = 1;
  const int W = static_cast<int>(cols) * (w + gap) - gap;
  const int H = static_cast<int>(rows.size()) * 2 * (h + gap) - gap;
  std::vector<std::uint8_t> img(static_cast<std::size_t>(W) * H * 3, 255);

  for (std::size_t r = 0; r < rows.size(); ++r) {
    double dmin = 1e300, dmax = 0;
    for (const auto& f : rows[r])
      for (double d : f.depth)
        if (d > 0) dmin = std::min(dmin, d), dmax = std::max(dmax, d);
    const double span = dmax > dmin ? dmax - dmin : 1.0;
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& f = rows[r][c];
      const int x0 = static_cast<int>(c) * (w + gap);
      const int y_rgb = static_cast<int>(2 * r) * (h + gap), y_d = y_rgb + h + gap;
      for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
          const std::size_t i = static_cast<std::size_t>(v) * w + u;
          std::uint8_t* p = &img[(static_cast<std::size_t>(y_rgb + v) * W + x0 + u) * 3];
          for (int k = 0; k < 3; ++k) p[k] = to_byte(f.rgb[3 * i + k]);
          std::uint8_t* q = &img[(static_cast<std::size_t>(y_d + v) * W + x0 + u) * 3];
          const double d = f.depth[i];
          const std::uint8_t g = d > 0 ? to_byte(1.0 - 0.8 * (d - dmin) / span) : 0;
          q[0] = q[1] = q[2] = g;
        }
    }
  }

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw InvalidInputError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw InvalidInputError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InvalidInputError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < H; ++y) png_write_row(png, &img[static_cast<std::size_t>(y) * W * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace geoworld::png
