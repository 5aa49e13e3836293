#pragma once

// Scatter plots of 2-D embeddings written as PNG with run metadata in tEXt
// chunks. Marker shape encodes the domain, colour the class.

#include "dsagc/common.hpp"

#include <png.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>

namespace dsagc::viz {

enum class Marker { circle, asterisk, triangle };

using Rgb = std::array<unsigned char, 3>;

// Class 0 red, 1 purple, 2 blue; further classes cycle; unknown grey.
inline Rgb class_colour(int label) {
  static const Rgb palette[] = {{214, 39, 40}, {148, 103, 189}, {31, 119, 180}, {44, 160, 44}, {255, 127, 14}};
  if (label < 0) return {150, 150, 150};
  return palette[label % 5];
}

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 255) {}

  int width() const { return w_; }
  int height() const { return h_; }
  const std::vector<unsigned char>& pixels() const { return px_; }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    const std::size_t o = (static_cast<std::size_t>(y) * w_ + x) * 3;
    px_[o] = c[0];
    px_[o + 1] = c[1];
    px_[o + 2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void marker(int cx, int cy, Marker m, Rgb c, int r = 4) {
    switch (m) {
      case Marker::circle:
        for (int y = -r; y <= r; ++y)
          for (int x = -r; x <= r; ++x) {
            const int d = x * x + y * y;
            if (d <= r * r && d >= (r - 1) * (r - 1)) set(cx + x, cy + y, c);
          }
        break;
      case Marker::asterisk:
        line(cx - r, cy, cx + r, cy, c);
        line(cx, cy - r, cx, cy + r, c);
        line(cx - r + 1, cy - r + 1, cx + r - 1, cy + r - 1, c);
        line(cx - r + 1, cy + r - 1, cx + r - 1, cy - r + 1, c);
        break;
      case Marker::triangle:
        line(cx, cy - r, cx - r, cy + r, c);
        line(cx - r, cy + r, cx + r, cy + r, c);
        line(cx + r, cy + r, cx, cy - r, c);
        break;
    }
  }

 private:
  int w_, h_;
  std::vector<unsigned char> px_;
};

struct ScatterPoint {
  double x = 0.0, y = 0.0;
  Marker marker = Marker::circle;
  int label = -1;
};

inline Canvas scatter(const std::vector<ScatterPoint>& pts, int size = 640) {
  Canvas c(size, size);
  const int margin = 24;
  const Rgb axis{0, 0, 0};
  c.line(margin, margin, size - margin, margin, axis);
  c.line(size - margin, margin, size - margin, size - margin, axis);
  c.line(size - margin, size - margin, margin, size - margin, axis);
  c.line(margin, size - margin, margin, margin, axis);
  if (pts.empty()) return c;
  double xmin = pts[0].x, xmax = xmin, ymin = pts[0].y, ymax = ymin;
  for (const auto& p : pts) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-12});
  const double inner = size - 2 * margin - 16;
  const double cx = 0.5 * (xmin + xmax), cy = 0.5 * (ymin + ymax);
  for (const auto& p : pts) {
    const int px = static_cast<int>(std::lround(size / 2.0 + (p.x - cx) / span * inner));
    const int py = static_cast<int>(std::lround(size / 2.0 - (p.y - cy) / span * inner));
    c.marker(px, py, p.marker, class_colour(p.label));
  }
  return c;
}

// Writes an 8-bit RGB PNG. Metadata entries become tEXt chunks; no time
// chunk is written so equal inputs give equal bytes.
inline void write_png(const Canvas& c, const std::filesystem::path& path,
                      const std::map<std::string, std::string>& metadata = {}) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    std::fclose(fp);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed while writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(c.width()), static_cast<png_uint_32>(c.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> text;
  std::vector<std::string> keys, values;
  keys.reserve(metadata.size());
  values.reserve(metadata.size());
  for (const auto& [k, v] : metadata) {
    keys.push_back(k.substr(0, 79));
    values.push_back(v);
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = keys.back().data();
    t.text = values.back().data();
    t.text_length = values.back().size();
    text.push_back(t);
  }
  if (!text.empty()) png_set_text(png, info, text.data(), static_cast<int>(text.size()));
  png_write_info(png, info);
  const auto& px = c.pixels();
  for (int y = 0; y < c.height(); ++y)
    png_write_row(png, const_cast<png_bytep>(px.data() + static_cast<std::size_t>(y) * c.width() * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("close failed for " + path.string());
}

// Reads back the tEXt chunks of a PNG file.
inline std::map<std::string, std::string> read_png_text(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    std::fclose(fp);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("not a readable PNG: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_textp text = nullptr;
  int count = 0;
  png_get_text(png, info, &text, &count);
  std::map<std::string, std::string> out;
  for (int i = 0; i < count; ++i) out[text[i].key] = std::string(text[i].text, text[i].text_length);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

}  // namespace dsagc::viz
