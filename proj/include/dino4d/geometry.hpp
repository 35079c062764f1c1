#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <vector>

#include "dino4d/common.hpp"

namespace dino4d {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid transform mapping world coordinates into another frame:
/// x' = R * x + t.
struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

Pose compose_pose(const Pose& a, const Pose& b);  // a after b: x -> a(b(x))
Pose invert_pose(const Pose& a);
void check_orthonormal(const Mat3& r, double tol = 1e-9);

Mat3 exp_so3(const Vec3& w);
Vec3 log_so3(const Mat3& r);
/// Geodesic angle between two rotations, radians.
double rotation_distance(const Mat3& a, const Mat3& b);

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
};

/// World->camera pose plus pinhole intrinsics.
struct CameraModel {
    Pose pose;
    double fx = 0, fy = 0, cx = 0, cy = 0;

    Intrinsics intrinsics() const { return {fx, fy, cx, cy}; }
    static CameraModel make(const Pose& pose, const Intrinsics& k) {
        return {pose, k.fx, k.fy, k.cx, k.cy};
    }
};

/// Dense grayscale intensity grid, values in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0.0) {}
    double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Pinhole projection of a world point. Throws BehindCamera when the
/// camera-frame depth is <= kEpsDepth.
Vec2 project(const Vec3& point, const CameraModel& camera);
/// Non-throwing variant for hot loops; nullopt means behind the camera.
std::optional<Vec2> try_project(const Vec3& point, const CameraModel& camera);
/// Inverse of project at a given camera-frame depth.
Vec3 unproject(const Vec2& pixel, double depth, const CameraModel& camera);

/// Dense per-pixel grid of 3D world points with a validity mask.
/// (source_frame, target_time) identifies the role: the grid holds the
/// content of source_frame expressed at target_time.
struct Pointmap {
    int width = 0;
    int height = 0;
    int source_frame = 0;
    int target_time = 0;
    std::vector<Vec3> points;       // row-major, width*height
    std::vector<std::uint8_t> valid;

    Pointmap() = default;
    Pointmap(int w, int h, int src, int tgt)
        : width(w), height(h), source_frame(src), target_time(tgt),
          points(static_cast<std::size_t>(w) * h, Vec3::Zero()),
          valid(static_cast<std::size_t>(w) * h, 1) {}

    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * width + x;
    }
    Vec3& at(int x, int y) { return points[index(x, y)]; }
    const Vec3& at(int x, int y) const { return points[index(x, y)]; }
    bool is_valid(int x, int y) const { return valid[index(x, y)] != 0; }
    std::size_t size() const { return points.size(); }
};

/// Per-query per-frame ground-truth (or predicted) 3D positions.
struct TrajectorySet {
    int num_queries = 0;
    int frames = 0;
    std::vector<Vec3> positions;        // num_queries * frames, query-major
    std::vector<std::uint8_t> visible;

    TrajectorySet() = default;
    TrajectorySet(int q, int t)
        : num_queries(q), frames(t),
          positions(static_cast<std::size_t>(q) * t, Vec3::Zero()),
          visible(static_cast<std::size_t>(q) * t, 1) {}

    std::size_t index(int q, int t) const {
        return static_cast<std::size_t>(q) * frames + t;
    }
    Vec3& at(int q, int t) { return positions[index(q, t)]; }
    const Vec3& at(int q, int t) const { return positions[index(q, t)]; }
};

struct MetricReport {
    std::vector<double> apd_thresholds;  // meters
    std::vector<double> apd_values;      // percent, [0, 100]
    double chamfer_cm = 0;
    std::size_t num_points = 0;
    double wall_time_s = 0;
};

/// Symmetric mean nearest-neighbor distance between two point sets,
/// non-squared Euclidean, reported in centimeters.
double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b);

/// Percent of truth-visible (query, frame) pairs with prediction error
/// below each threshold. Thresholds must be positive and strictly
/// increasing; only truth-visible pairs count.
std::vector<double> apd(const TrajectorySet& predicted,
                        const TrajectorySet& truth,
                        std::span<const double> thresholds);

}  // namespace dino4d
