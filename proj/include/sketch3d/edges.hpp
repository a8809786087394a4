#pragma once

// Deterministic edge detector used to turn renders into sketches:
// luma -> Sobel magnitude -> threshold at a fraction of the maximum ->
// Zhang-Suen thinning to one-pixel strokes.

#include "sketch3d/common.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace sketch3d {

inline constexpr double kEdgeThreshold = 0.2;
inline constexpr const char* kEdgeDetectorName = "sobel-zhang-suen";

struct PointSet2D {
  std::vector<Vec2> points;  // normalized pixel coordinates in [0, 1]^2
  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct EdgeResult {
  Mask sketch;
  PointSet2D points;
};

/// Pixel centers mapped to [0, 1]^2.
inline PointSet2D mask_points(const Mask& m) {
  PointSet2D s;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) s.points.emplace_back((x + 0.5) / m.width, (y + 0.5) / m.height);
  return s;
}

inline Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  Image g(img.width, img.height, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      g.at(y, x, 0) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return g;
}

/// Sobel gradient magnitude with replicated borders.
inline Image sobel_magnitude(const Image& gray) {
  const int W = gray.width, H = gray.height;
  Image mag(W, H, 1);
  auto px = [&](int y, int x) {
    return gray.at(std::clamp(y, 0, H - 1), std::clamp(x, 0, W - 1), 0);
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      mag.at(y, x, 0) = std::sqrt(gx * gx + gy * gy);
    }
  return mag;
}

/// Zhang-Suen thinning, in place.
inline void thin(Mask& m) {
  const int W = m.width, H = m.height;
  auto at = [&](int y, int x) -> int {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0;
    return m.at(y, x);
  };
  std::vector<std::pair<int, int>> remove;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      remove.clear();
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (!m.at(y, x)) continue;
          // P2..P9 clockwise from north.
          const int p[8] = {at(y - 1, x), at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1),
                            at(y + 1, x), at(y + 1, x - 1), at(y, x - 1), at(y - 1, x - 1)};
          int b = 0, a = 0;
          for (int i = 0; i < 8; ++i) {
            b += p[i];
            a += (p[i] == 0 && p[(i + 1) % 8] == 1);
          }
          if (b < 2 || b > 6 || a != 1) continue;
          if (pass == 0) {
            if (p[0] * p[2] * p[4] != 0 || p[2] * p[4] * p[6] != 0) continue;
          } else {
            if (p[0] * p[2] * p[6] != 0 || p[0] * p[4] * p[6] != 0) continue;
          }
          remove.emplace_back(y, x);
        }
      for (auto [y, x] : remove) m.at(y, x) = 0;
      if (!remove.empty()) changed = true;
    }
  }
}

inline EdgeResult extract_edges(const Image& image, double threshold = kEdgeThreshold) {
  require(image.channels == 1 || image.channels == 3, "extract_edges: need 1 or 3 channels");
  for (double v : image.data) require(std::isfinite(v), "extract_edges: image is not finite");
  const Image mag = sobel_magnitude(to_gray(image));
  const double peak = mag.data.empty() ? 0.0 : *std::max_element(mag.data.begin(), mag.data.end());
  EdgeResult r;
  r.sketch = Mask(image.width, image.height);
  if (peak <= 1e-9) return r;
  const double cut = threshold * peak;
  for (std::size_t i = 0; i < mag.data.size(); ++i) r.sketch.data[i] = mag.data[i] >= cut ? 1 : 0;
  thin(r.sketch);
  r.points = mask_points(r.sketch);
  return r;
}

}  // namespace sketch3d
