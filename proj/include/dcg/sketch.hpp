#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcg/nn.hpp"
#include "dcg/tensor.hpp"

namespace dcg {

constexpr int kCanvasSize = 640;
constexpr int kPatchSize = 256;
constexpr double kCanvasFill = 0.9;

// Pen state after a point: `down` keeps drawing to the next point, `lift` ends the stroke.
enum class Pen : std::uint8_t { down = 0, lift = 1 };

struct StrokePoint {
  double dx = 0;
  double dy = 0;
  Pen pen = Pen::down;

  friend bool operator==(const StrokePoint&, const StrokePoint&) = default;
};

struct Point2 {
  double x = 0;
  double y = 0;
};

// Stroke-3 sequence. The first offset is relative to the origin.
struct StrokeSequence {
  std::vector<StrokePoint> points;

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }

  std::vector<Point2> absolute() const {
    std::vector<Point2> out;
    out.reserve(points.size());
    double x = 0, y = 0;
    for (auto& p : points) {
      x += p.dx;
      y += p.dy;
      out.push_back({x, y});
    }
    return out;
  }

  // Index of the stroke owning each point.
  std::vector<std::size_t> stroke_index() const {
    std::vector<std::size_t> out(points.size());
    std::size_t s = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      out[i] = s;
      if (points[i].pen == Pen::lift) ++s;
    }
    return out;
  }

  std::size_t stroke_count() const {
    if (points.empty()) return 0;
    return stroke_index().back() + 1;
  }

  static StrokeSequence from_absolute(const std::vector<Point2>& pts, const std::vector<Pen>& pens) {
    StrokeSequence s;
    double px = 0, py = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      s.points.push_back({pts[i].x - px, pts[i].y - py, pens[i]});
      px = pts[i].x;
      py = pts[i].y;
    }
    return s;
  }

  friend bool operator==(const StrokeSequence&, const StrokeSequence&) = default;
};

// Grayscale image, row-major, intensities in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.f) {}

  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  float get_or_zero(int x, int y) const { return contains(x, y) ? at(x, y) : 0.f; }

  friend bool operator==(const Image&, const Image&) = default;
};

using RasterCanvas = Image;

inline RasterCanvas blank_canvas() { return Image(kCanvasSize, kCanvasSize); }

// ---------------------------------------------------------------------------
// QuickDraw simplified NDJSON: {"word": ..., "drawing": [[[x...], [y...]], ...]}

struct ParsedDrawings {
  std::vector<StrokeSequence> sequences;
  std::vector<std::string> words;
  std::size_t malformed = 0;
  std::size_t empty = 0;
};

inline std::optional<StrokeSequence> drawing_to_stroke3(const nlohmann::json& drawing) {
  if (!drawing.is_array()) return std::nullopt;
  StrokeSequence seq;
  double px = 0, py = 0;
  for (const auto& stroke : drawing) {
    if (!stroke.is_array() || stroke.size() < 2 || !stroke[0].is_array() || !stroke[1].is_array()) return std::nullopt;
    const auto& xs = stroke[0];
    const auto& ys = stroke[1];
    if (xs.size() != ys.size()) return std::nullopt;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!xs[i].is_number() || !ys[i].is_number()) return std::nullopt;
      const double x = xs[i].get<double>(), y = ys[i].get<double>();
      seq.points.push_back({x - px, y - py, i + 1 == xs.size() ? Pen::lift : Pen::down});
      px = x;
      py = y;
    }
  }
  return seq;
}

inline ParsedDrawings parse_quickdraw_ndjson(std::istream& in) {
  ParsedDrawings out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("drawing")) {
      ++out.malformed;
      continue;
    }
    auto seq = drawing_to_stroke3(j["drawing"]);
    if (!seq) {
      ++out.malformed;
      continue;
    }
    if (seq->empty()) {
      ++out.empty;
      continue;
    }
    out.sequences.push_back(std::move(*seq));
    out.words.push_back(j.contains("word") && j["word"].is_string() ? j["word"].get<std::string>() : std::string());
  }
  return out;
}

// Per-stroke absolute coordinates, rounded, in QuickDraw layout.
inline nlohmann::json to_quickdraw_drawing(const StrokeSequence& seq) {
  nlohmann::json drawing = nlohmann::json::array();
  const auto abs = seq.absolute();
  nlohmann::json xs = nlohmann::json::array(), ys = nlohmann::json::array();
  for (std::size_t i = 0; i < abs.size(); ++i) {
    xs.push_back(std::lround(abs[i].x));
    ys.push_back(std::lround(abs[i].y));
    if (seq.points[i].pen == Pen::lift || i + 1 == abs.size()) {
      drawing.push_back(nlohmann::json::array({xs, ys}));
      xs = nlohmann::json::array();
      ys = nlohmann::json::array();
    }
  }
  return drawing;
}

inline std::string to_ndjson_line(const StrokeSequence& seq, const std::string& word, const std::string& key) {
  nlohmann::json j;
  j["word"] = word;
  j["key_id"] = key;
  j["drawing"] = to_quickdraw_drawing(seq);
  return j.dump();
}

// ---------------------------------------------------------------------------

// Translates and scales so the bounding box sits centered in 90% of the
// canvas (aspect preserved), then snaps absolute coordinates to integers.
inline StrokeSequence normalize(const StrokeSequence& seq, int canvas = kCanvasSize, double fill = kCanvasFill) {
  if (seq.empty()) return seq;
  auto abs = seq.absolute();
  double x0 = abs[0].x, x1 = abs[0].x, y0 = abs[0].y, y1 = abs[0].y;
  for (auto& p : abs) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double extent = std::max(x1 - x0, y1 - y0);
  const double s = extent > 0 ? fill * canvas / extent : 1.0;
  const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
  const double mid = 0.5 * canvas;
  std::vector<Pen> pens;
  for (auto& p : abs) {
    p.x = std::clamp<double>(std::round((p.x - cx) * s + mid), 0, canvas - 1);
    p.y = std::clamp<double>(std::round((p.y - cy) * s + mid), 0, canvas - 1);
  }
  for (auto& p : seq.points) pens.push_back(p.pen);
  return StrokeSequence::from_absolute(abs, pens);
}

inline void stamp(Image& img, int x, int y, int thickness) {
  const int lo = -(thickness - 1) / 2, hi = thickness / 2;
  for (int dy = lo; dy <= hi; ++dy)
    for (int dx = lo; dx <= hi; ++dx)
      if (img.contains(x + dx, y + dy)) img.at(x + dx, y + dy) = 1.f;
}

inline void draw_line(Image& img, int x0, int y0, int x1, int y1, int thickness) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    stamp(img, x0, y0, thickness);
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

// Bresenham segments between consecutive points when the earlier point keeps
// the pen down; every point is also stamped.
inline RasterCanvas rasterize(const StrokeSequence& seq, int thickness = 1) {
  RasterCanvas canvas = blank_canvas();
  const auto abs = seq.absolute();
  for (std::size_t i = 0; i < abs.size(); ++i) {
    const int x = static_cast<int>(std::lround(abs[i].x)), y = static_cast<int>(std::lround(abs[i].y));
    stamp(canvas, x, y, thickness);
    if (i > 0 && seq.points[i - 1].pen == Pen::down)
      draw_line(canvas, static_cast<int>(std::lround(abs[i - 1].x)), static_cast<int>(std::lround(abs[i - 1].y)), x, y, thickness);
  }
  return canvas;
}

struct PatchCenter {
  int x = 0;
  int y = 0;
  std::size_t point = 0;   // index into the sequence
  std::size_t stroke = 0;  // stroke owning that point

  friend bool operator==(const PatchCenter&, const PatchCenter&) = default;
};

// M points at evenly spaced indices floor(m n / M) of the point list; with
// fewer than M points the list is repeated cyclically.
inline std::vector<PatchCenter> select_patch_centers(const StrokeSequence& seq, std::size_t m) {
  if (m < 1) throw std::invalid_argument("select_patch_centers: M must be >= 1");
  if (seq.empty()) throw std::invalid_argument("select_patch_centers: sequence has no points");
  const auto abs = seq.absolute();
  const auto strokes = seq.stroke_index();
  const std::size_t n = abs.size();
  std::vector<PatchCenter> out;
  out.reserve(m);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t idx = n >= m ? (k * n) / m : k % n;
    out.push_back({static_cast<int>(std::lround(abs[idx].x)), static_cast<int>(std::lround(abs[idx].y)), idx, strokes[idx]});
  }
  return out;
}

inline Image crop(const Image& src, int cx, int cy, int size = kPatchSize) {
  Image out(size, size);
  const int x0 = cx - size / 2, y0 = cy - size / 2;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out.at(x, y) = src.get_or_zero(x0 + x, y0 + y);
  return out;
}

// Half-pixel-centred bilinear resampling.
inline Image resize_bilinear(const Image& src, int w, int h) {
  Image out(w, h);
  const double sx = static_cast<double>(src.width) / w, sy = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      const double v = (1 - ty) * ((1 - tx) * src.at(x0, y0) + tx * src.at(x1, y0)) + ty * ((1 - tx) * src.at(x0, y1) + tx * src.at(x1, y1));
      out.at(x, y) = static_cast<float>(v);
    }
  }
  return out;
}

// Each output pixel takes the max over its source block.
inline Image downsample_max(const Image& src, int size) {
  if (size == src.width && size == src.height) return src;
  Image out(size, size);
  for (int y = 0; y < size; ++y) {
    const int ya = y * src.height / size, yb = std::max(ya + 1, (y + 1) * src.height / size);
    for (int x = 0; x < size; ++x) {
      const int xa = x * src.width / size, xb = std::max(xa + 1, (x + 1) * src.width / size);
      float m = 0.f;
      for (int yy = ya; yy < yb; ++yy)
        for (int xx = xa; xx < xb; ++xx) m = std::max(m, src.at(xx, yy));
      out.at(x, y) = m;
    }
  }
  return out;
}

struct PatchSet {
  std::vector<Image> patches;  // drawing order
  Image full;                  // whole canvas resized to patch size
  std::vector<PatchCenter> centers;
};

inline PatchSet crop_patches(const RasterCanvas& canvas, const std::vector<PatchCenter>& centers) {
  PatchSet ps;
  ps.centers = centers;
  for (auto& c : centers) ps.patches.push_back(crop(canvas, c.x, c.y));
  ps.full = resize_bilinear(canvas, kPatchSize, kPatchSize);
  return ps;
}

struct MaskSpec {
  double probability = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> applied;  // filled by apply_masks
};

// Independently, with the given probability, zeroes the 256x256 window centred
// on each patch center.
inline RasterCanvas apply_masks(const RasterCanvas& canvas, const std::vector<PatchCenter>& centers, MaskSpec& spec) {
  if (!(spec.probability >= 0.0 && spec.probability <= 1.0))
    throw std::invalid_argument("apply_masks: probability must lie in [0, 1]");
  RasterCanvas out = canvas;
  Rng rng(spec.seed);
  spec.applied.clear();
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const double u = uniform01(rng);
    if (!(u < spec.probability)) continue;
    spec.applied.push_back(i);
    const int x0 = centers[i].x - kPatchSize / 2, y0 = centers[i].y - kPatchSize / 2;
    for (int y = std::max(0, y0); y < std::min(out.height, y0 + kPatchSize); ++y)
      for (int x = std::max(0, x0); x < std::min(out.width, x0 + kPatchSize); ++x) out.at(x, y) = 0.f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic sketches in a 256-unit drawing space.

enum class SyntheticShape { circle, square, zigzag, two_strokes };

inline const char* shape_name(SyntheticShape s) {
  switch (s) {
    case SyntheticShape::circle: return "circle";
    case SyntheticShape::square: return "square";
    case SyntheticShape::zigzag: return "zigzag";
    case SyntheticShape::two_strokes: return "two_strokes";
  }
  return "?";
}

inline SyntheticShape parse_shape(const std::string& name) {
  for (auto s : {SyntheticShape::circle, SyntheticShape::square, SyntheticShape::zigzag, SyntheticShape::two_strokes})
    if (name == shape_name(s)) return s;
  throw std::invalid_argument("unknown synthetic shape '" + name + "'");
}

inline StrokeSequence generate_synthetic(SyntheticShape shape, Rng& rng) {
  auto uni = [&](double a, double b) { return a + (b - a) * uniform01(rng); };
  std::vector<Point2> pts;
  std::vector<Pen> pens;
  const double c = 128.0;
  switch (shape) {
    case SyntheticShape::circle: {
      const int n = 12 + static_cast<int>(rng() % 5);
      const double rx = 100, ry = 100 * uni(0.45, 1.0), rot = uni(0, std::numbers::pi), start = uni(0, 2 * std::numbers::pi);
      for (int i = 0; i <= n; ++i) {
        const int k = i % n;
        const double a = start + 2 * std::numbers::pi * k / n;
        const double wob = i == n ? 1.0 : 1.0 + uni(-0.06, 0.06);
        const double ex = rx * wob * std::cos(a), ey = ry * wob * std::sin(a);
        pts.push_back({c + ex * std::cos(rot) - ey * std::sin(rot), c + ex * std::sin(rot) + ey * std::cos(rot)});
        if (i == n) pts.back() = pts.front();
        pens.push_back(i == n ? Pen::lift : Pen::down);
      }
      break;
    }
    case SyntheticShape::square: {
      const double w = 100, h = 100 * uni(0.5, 1.0), rot = uni(-0.3, 0.3);
      std::vector<Point2> corners = {{-w, -h}, {w, -h}, {w, h}, {-w, h}};
      for (auto& p : corners) {
        const double x = p.x + uni(-8, 8), y = p.y + uni(-8, 8);
        p = {c + x * std::cos(rot) - y * std::sin(rot), c + x * std::sin(rot) + y * std::cos(rot)};
      }
      for (int s = 0; s < 4; ++s) {
        const auto& a = corners[static_cast<std::size_t>(s)];
        const auto& b = corners[static_cast<std::size_t>((s + 1) % 4)];
        pts.push_back(a);
        pts.push_back({0.5 * (a.x + b.x), 0.5 * (a.y + b.y)});
      }
      pts.push_back(corners[0]);
      pens.assign(pts.size(), Pen::down);
      pens.back() = Pen::lift;
      break;
    }
    case SyntheticShape::zigzag: {
      const int n = 8 + static_cast<int>(rng() % 7);
      const double amp = uni(40, 120), tilt = uni(-0.4, 0.4);
      for (int i = 0; i < n; ++i) {
        const double x = -110 + 220.0 * i / (n - 1);
        const double y = (i % 2 ? amp : -amp) * 0.5 + uni(-10, 10) + tilt * x;
        pts.push_back({c + x, c + y});
        pens.push_back(i + 1 == n ? Pen::lift : Pen::down);
      }
      break;
    }
    case SyntheticShape::two_strokes: {
      for (int s = 0; s < 2; ++s) {
        const int n = 4 + static_cast<int>(rng() % 2);
        const double a = uni(0, std::numbers::pi) + s * std::numbers::pi / 2, len = uni(70, 110);
        const double ox = uni(-20, 20), oy = uni(-20, 20);
        for (int i = 0; i < n; ++i) {
          const double t = -1.0 + 2.0 * i / (n - 1);
          pts.push_back({c + ox + t * len * std::cos(a) + uni(-4, 4), c + oy + t * len * std::sin(a) + uni(-4, 4)});
          pens.push_back(i + 1 == n ? Pen::lift : Pen::down);
        }
      }
      break;
    }
  }
  return StrokeSequence::from_absolute(pts, pens);
}

// ---------------------------------------------------------------------------
// Dataset cache: "DCS1", u32 count, then per sketch u32 point count followed
// by (i16 dx, i16 dy, u8 pen) triplets. Little-endian.

inline void write_sketch_cache(std::ostream& os, const std::vector<StrokeSequence>& seqs) {
  os.write("DCS1", 4);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(seqs.size()));
  for (auto& s : seqs) {
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    for (auto& p : s.points) {
      io::put<std::int16_t>(os, static_cast<std::int16_t>(std::lround(p.dx)));
      io::put<std::int16_t>(os, static_cast<std::int16_t>(std::lround(p.dy)));
      io::put<std::uint8_t>(os, static_cast<std::uint8_t>(p.pen));
    }
  }
}

inline std::vector<StrokeSequence> read_sketch_cache(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DCS1") throw std::runtime_error("sketch cache: bad magic");
  const auto count = io::get<std::uint32_t>(is);
  std::vector<StrokeSequence> out(count);
  for (auto& s : out) {
    const auto n = io::get<std::uint32_t>(is);
    s.points.resize(n);
    for (auto& p : s.points) {
      p.dx = io::get<std::int16_t>(is);
      p.dy = io::get<std::int16_t>(is);
      const auto pen = io::get<std::uint8_t>(is);
      if (pen > 1) throw std::runtime_error("sketch cache: invalid pen state");
      p.pen = static_cast<Pen>(pen);
    }
  }
  return out;
}

}  // namespace dcg
