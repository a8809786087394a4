#pragma once

// Sketch-similarity metrics between edge point sets: chamfer and Hausdorff
// distances, with a uniform-grid nearest-neighbor index.

#include "sketch3d/dataset.hpp"
#include "sketch3d/edges.hpp"
#include "sketch3d/field.hpp"
#include "sketch3d/renderer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sketch3d {

/// Bucket grid over [0, 1]^2 answering exact nearest-neighbor distance queries.
class GridIndex {
 public:
  explicit GridIndex(const std::vector<Vec2>& points) : points_(points) {
    cells_ = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(points.size()))));
    cell_size_ = 1.0 / cells_;
    start_.assign(static_cast<std::size_t>(cells_) * cells_ + 1, 0);
    std::vector<int> cell_of(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      cell_of[i] = cell_id(points[i]);
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    order_.resize(points.size());
    std::vector<int> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < points.size(); ++i) order_[fill[cell_of[i]]++] = static_cast<int>(i);
  }

  double nearest_distance(const Vec2& q) const {
    const int cx = axis_cell(q.x()), cy = axis_cell(q.y());
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < cells_; ++r) {
      for (int y = cy - r; y <= cy + r; ++y) {
        if (y < 0 || y >= cells_) continue;
        const bool edge_row = (y == cy - r || y == cy + r);
        for (int x = cx - r; x <= cx + r; x += (edge_row ? 1 : 2 * r)) {
          if (x >= 0 && x < cells_) scan(y * cells_ + x, q, best);
          if (r == 0) break;
        }
      }
      const double reach = r * cell_size_;
      if (best <= reach * reach) break;
    }
    return std::sqrt(best);
  }

 private:
  int axis_cell(double v) const { return std::clamp(static_cast<int>(v * cells_), 0, cells_ - 1); }
  int cell_id(const Vec2& p) const { return axis_cell(p.y()) * cells_ + axis_cell(p.x()); }

  void scan(int cell, const Vec2& q, double& best) const {
    for (int k = start_[cell]; k < start_[cell + 1]; ++k) {
      const Vec2& p = points_[order_[k]];
      const double dx = q.x() - p.x(), dy = q.y() - p.y();
      const double d2 = dx * dx + dy * dy;
      if (d2 < best) best = d2;
    }
  }

  const std::vector<Vec2>& points_;
  int cells_ = 1;
  double cell_size_ = 1.0;
  std::vector<int> start_;
  std::vector<int> order_;
};

namespace detail {

inline std::vector<double> nearest_distances(const PointSet2D& from, const PointSet2D& to) {
  const GridIndex index(to.points);
  std::vector<double> d(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) d[i] = index.nearest_distance(from.points[i]);
  return d;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// max over `a` of the distance to the nearest point of `b`.
inline double directed_hausdorff(const PointSet2D& a, const PointSet2D& b) {
  require(!a.empty() && !b.empty(), "hausdorff: point sets must be non-empty");
  const auto d = detail::nearest_distances(a, b);
  return *std::max_element(d.begin(), d.end());
}

inline double chamfer_distance(const PointSet2D& s1, const PointSet2D& s2) {
  require(!s1.empty() && !s2.empty(), "chamfer_distance: point sets must be non-empty");
  return detail::mean(detail::nearest_distances(s1, s2)) + detail::mean(detail::nearest_distances(s2, s1));
}

inline double hausdorff_distance(const PointSet2D& s1, const PointSet2D& s2) {
  require(!s1.empty() && !s2.empty(), "hausdorff_distance: point sets must be non-empty");
  return std::max(directed_hausdorff(s1, s2), directed_hausdorff(s2, s1));
}

struct ViewScore {
  std::string view_id;
  double cd = 0.0;
  double hd = 0.0;
  bool missing = false;  // rendered edge set was empty
};

struct EvalReport {
  std::vector<ViewScore> views;
  double mean_cd = 0.0;
  double mean_hd = 0.0;
  int scored_views = 0;
  std::string detector = kEdgeDetectorName;

  nlohmann::json to_json() const {
    nlohmann::json v = nlohmann::json::array();
    for (const auto& s : views) {
      nlohmann::json j = {{"view_id", s.view_id}, {"missing", s.missing}};
      j["cd"] = s.missing ? nlohmann::json(nullptr) : nlohmann::json(s.cd);
      j["hd"] = s.missing ? nlohmann::json(nullptr) : nlohmann::json(s.hd);
      v.push_back(j);
    }
    return {{"views", v}, {"mean_cd", mean_cd}, {"mean_hd", mean_hd},
            {"scored_views", scored_views}, {"detector", detector}};
  }
};

/// Scores renders (one per dataset view, same order) against the input sketches.
inline EvalReport evaluate_renders(const std::vector<Image>& renders, const SketchDataset& ds) {
  require(renders.size() == ds.views.size(), "evaluate: one render per view is required");
  EvalReport rep;
  double cd_sum = 0.0, hd_sum = 0.0;
  for (std::size_t i = 0; i < renders.size(); ++i) {
    ViewScore s;
    s.view_id = ds.views[i].view_id;
    const PointSet2D rendered = extract_edges(renders[i]).points;
    const PointSet2D sketch = mask_points(ds.views[i].sketch);
    if (rendered.empty() || sketch.empty()) {
      s.missing = true;
    } else {
      s.cd = chamfer_distance(sketch, rendered);
      s.hd = hausdorff_distance(sketch, rendered);
      cd_sum += s.cd;
      hd_sum += s.hd;
      ++rep.scored_views;
    }
    rep.views.push_back(s);
  }
  if (rep.scored_views > 0) {
    rep.mean_cd = cd_sum / rep.scored_views;
    rep.mean_hd = hd_sum / rep.scored_views;
  } else {
    rep.mean_cd = rep.mean_hd = std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

/// Renders the field at every sketch pose (white background) and scores it.
template <typename Scalar>
EvalReport evaluate(const FieldParams<Scalar>& params, const SketchDataset& ds,
                    RenderOptions options = {}) {
  ds.validate();
  options.background = Vec3::Ones();
  options.scene_bound = ds.scene_bound;
  std::vector<Image> renders;
  for (const auto& v : ds.views) renders.push_back(render(params, v.pose, options).color);
  return evaluate_renders(renders, ds);
}

}  // namespace sketch3d
