#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmpc/types.hpp"

namespace lmpc {

struct TrackSegment {
  double length = 0.0;     // arc length [m]
  double curvature = 0.0;  // signed, CCW positive [1/m]
};

// Piecewise-constant-curvature centerline: straights and circular arcs.
struct TrackLayout {
  std::vector<TrackSegment> segments;
  double half_width = 0.0;
};

struct GlobalPose {
  double x = 0.0;
  double y = 0.0;
  double psi = 0.0;
};

struct FrenetPose {
  double s = 0.0;
  double ey = 0.0;
  double epsi = 0.0;
};

// Track geometry with curvature lookup and frenet/global conversions.
// Immutable after construction; the centerline starts at the origin
// heading +X and positive e_y is left of the travel direction.
class Track {
 public:
  explicit Track(TrackLayout layout) : layout_(std::move(layout)) {
    if (layout_.segments.empty()) throw std::invalid_argument("track: no segments");
    if (!(layout_.half_width > 0.0)) throw std::invalid_argument("track: half_width must be > 0");
    cum_.reserve(layout_.segments.size() + 1);
    cum_.push_back(0.0);
    start_pose_.push_back({0.0, 0.0, 0.0});
    for (const auto& seg : layout_.segments) {
      if (!(seg.length > 0.0) || !std::isfinite(seg.length))
        throw std::invalid_argument("track: segment length must be positive and finite");
      if (!std::isfinite(seg.curvature))
        throw std::invalid_argument("track: segment curvature must be finite");
      if (std::abs(seg.curvature) * layout_.half_width >= 1.0)
        throw std::invalid_argument("track: |curvature| * half_width must be < 1");
      cum_.push_back(cum_.back() + seg.length);
      start_pose_.push_back(advance_pose(start_pose_.back(), seg, seg.length));
    }
    length_ = cum_.back();
    projection_margin_ = layout_.half_width;
  }

  double length() const { return length_; }
  double half_width() const { return layout_.half_width; }
  const TrackLayout& layout() const { return layout_; }

  // Margin beyond the half width tolerated by global_to_frenet.
  void set_projection_margin(double margin) { projection_margin_ = margin; }
  double projection_margin() const { return projection_margin_; }

  // Piecewise-constant curvature at arc length s, wrapped modulo the track length.
  double curvature(double s) const {
    const std::size_t i = segment_index(wrap_s(s));
    return layout_.segments[i].curvature;
  }

  GlobalPose centerline_pose(double s) const {
    const double sw = wrap_s(s);
    const std::size_t i = segment_index(sw);
    return advance_pose(start_pose_[i], layout_.segments[i], sw - cum_[i]);
  }

  GlobalPose frenet_to_global(double s, double ey, double epsi) const {
    const GlobalPose c = centerline_pose(s);
    // left normal of the tangent direction
    return GlobalPose{c.x - ey * std::sin(c.psi), c.y + ey * std::cos(c.psi),
                      c.psi + epsi};
  }

  GlobalPose frenet_to_global(const VehicleState& x) const {
    return frenet_to_global(x.s, x.ey, x.epsi);
  }

  // Projects a global pose onto the centerline. The returned s lies in [0, L).
  // Throws if the point is farther than half_width + projection_margin from
  // the centerline.
  FrenetPose global_to_frenet(double x, double y, double psi) const {
    double best_d2 = std::numeric_limits<double>::infinity();
    double best_s = 0.0;
    double best_ey = 0.0;
    double best_psi_c = 0.0;
    auto consider = [&](double s_cand, const GlobalPose& c) {
      const double dx = x - c.x;
      const double dy = y - c.y;
      const double d2 = dx * dx + dy * dy;
      if (d2 < best_d2 - 1e-15 || (d2 < best_d2 + 1e-15 && s_cand < best_s)) {
        best_d2 = d2;
        best_s = s_cand;
        best_ey = -dx * std::sin(c.psi) + dy * std::cos(c.psi);
        best_psi_c = c.psi;
      }
    };
    for (std::size_t i = 0; i < layout_.segments.size(); ++i) {
      const auto& seg = layout_.segments[i];
      const GlobalPose& p0 = start_pose_[i];
      if (seg.curvature == 0.0) {
        const double ct = std::cos(p0.psi), st = std::sin(p0.psi);
        double t = (x - p0.x) * ct + (y - p0.y) * st;
        t = std::clamp(t, 0.0, seg.length);
        consider(cum_[i] + t, advance_pose(p0, seg, t));
      } else {
        const double kappa = seg.curvature;
        const double radius = 1.0 / std::abs(kappa);
        const double cx = p0.x - std::sin(p0.psi) / kappa;
        const double cy = p0.y + std::cos(p0.psi) / kappa;
        const double phi0 = std::atan2(p0.y - cy, p0.x - cx);
        const double phi_p = std::atan2(y - cy, x - cx);
        // angular advance from segment start to the point, in travel direction
        double dphi = (phi_p - phi0) * (kappa > 0.0 ? 1.0 : -1.0);
        dphi = std::fmod(dphi, 2.0 * M_PI);
        if (dphi < 0.0) dphi += 2.0 * M_PI;
        const double t_circ = dphi * radius;
        if (t_circ <= seg.length) {
          consider(cum_[i] + t_circ, advance_pose(p0, seg, t_circ));
        } else {
          consider(cum_[i], p0);
          consider(cum_[i] + seg.length, advance_pose(p0, seg, seg.length));
        }
      }
    }
    if (std::abs(best_ey) > layout_.half_width + projection_margin_)
      throw std::runtime_error("track: projection failed (point off-track)");
    return FrenetPose{best_s >= length_ ? best_s - length_ : best_s, best_ey,
                      wrap_to_pi(psi - best_psi_c)};
  }

  static Track from_json(const nlohmann::json& j) {
    TrackLayout layout;
    layout.half_width = j.at("half_width").get<double>();
    for (const auto& seg : j.at("segments")) {
      layout.segments.push_back(
          {seg.at("length").get<double>(), seg.at("curvature").get<double>()});
    }
    return Track(std::move(layout));
  }

  static Track load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("track: cannot open " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("track: parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : layout_.segments)
      segs.push_back({{"length", seg.length}, {"curvature", seg.curvature}});
    return {{"half_width", layout_.half_width}, {"segments", segs}};
  }

 private:
  double wrap_s(double s) const {
    double sw = std::fmod(s, length_);
    if (sw < 0.0) sw += length_;
    return sw;
  }

  // Index of the segment containing arc length sw in [0, L).
  std::size_t segment_index(double sw) const {
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), sw);
    const auto i = static_cast<std::size_t>(std::distance(cum_.begin(), it));
    return std::min(i > 0 ? i - 1 : 0, layout_.segments.size() - 1);
  }

  static GlobalPose advance_pose(const GlobalPose& p, const TrackSegment& seg, double t) {
    if (seg.curvature == 0.0)
      return GlobalPose{p.x + t * std::cos(p.psi), p.y + t * std::sin(p.psi), p.psi};
    const double k = seg.curvature;
    const double psi1 = p.psi + k * t;
    return GlobalPose{p.x + (std::sin(psi1) - std::sin(p.psi)) / k,
                      p.y - (std::cos(psi1) - std::cos(p.psi)) / k, psi1};
  }

  TrackLayout layout_;
  std::vector<double> cum_;            // segment start arc lengths, plus total
  std::vector<GlobalPose> start_pose_; // pose at each segment start
  double length_ = 0.0;
  double projection_margin_ = 0.0;
};

}  // namespace lmpc
