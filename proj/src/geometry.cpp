#include "dino4d/geometry.hpp"

#include <cmath>

namespace dino4d {

void check_orthonormal(const Mat3& r, double tol) {
    const double err = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (err > tol || std::abs(r.determinant() - 1.0) > tol) {
        throw NonOrthonormalInput("rotation matrix is not orthonormal with det +1");
    }
}

Pose compose_pose(const Pose& a, const Pose& b) {
    check_orthonormal(a.rotation);
    check_orthonormal(b.rotation);
    Pose out;
    out.rotation = a.rotation * b.rotation;
    out.translation = a.rotation * b.translation + a.translation;
    return out;
}

Pose invert_pose(const Pose& a) {
    check_orthonormal(a.rotation);
    Pose out;
    out.rotation = a.rotation.transpose();
    out.translation = -(out.rotation * a.translation);
    return out;
}

Mat3 exp_so3(const Vec3& w) {
    const double theta = w.norm();
    Mat3 wx;
    wx << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    if (theta < 1e-12) {
        return Mat3::Identity() + wx + 0.5 * wx * wx;
    }
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / (theta * theta);
    return Mat3::Identity() + a * wx + b * wx * wx;
}

Vec3 log_so3(const Mat3& r) {
    const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
    const double theta = std::acos(c);
    Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    if (theta < 1e-10) {
        return 0.5 * w;
    }
    return (theta / (2.0 * std::sin(theta))) * w;
}

double rotation_distance(const Mat3& a, const Mat3& b) {
    return log_so3(a.transpose() * b).norm();
}

std::optional<Vec2> try_project(const Vec3& point, const CameraModel& camera) {
    const Vec3 pc = camera.pose.apply(point);
    if (pc.z() <= kEpsDepth) {
        return std::nullopt;
    }
    return Vec2(camera.fx * pc.x() / pc.z() + camera.cx,
                camera.fy * pc.y() / pc.z() + camera.cy);
}

Vec2 project(const Vec3& point, const CameraModel& camera) {
    auto px = try_project(point, camera);
    if (!px) {
        throw BehindCamera();
    }
    return *px;
}

Vec3 unproject(const Vec2& pixel, double depth, const CameraModel& camera) {
    const Vec3 pc((pixel.x() - camera.cx) / camera.fx * depth,
                  (pixel.y() - camera.cy) / camera.fy * depth, depth);
    return camera.pose.rotation.transpose() * (pc - camera.pose.translation);
}

namespace {
double directed_mean_nn(std::span<const Vec3> from, std::span<const Vec3> to) {
    double sum = 0;
    for (const Vec3& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const Vec3& q : to) {
            best = std::min(best, (p - q).squaredNorm());
        }
        sum += std::sqrt(best);
    }
    return sum / static_cast<double>(from.size());
}
}  // namespace

double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
    if (a.empty() || b.empty()) {
        throw EmptySet("chamfer_distance requires two non-empty point sets");
    }
    return 100.0 * 0.5 * (directed_mean_nn(a, b) + directed_mean_nn(b, a));
}

std::vector<double> apd(const TrajectorySet& predicted, const TrajectorySet& truth,
                        std::span<const double> thresholds) {
    if (predicted.num_queries != truth.num_queries || predicted.frames != truth.frames) {
        throw ShapeMismatch("apd: predicted and truth trajectory shapes differ");
    }
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (thresholds[i] <= 0 || (i > 0 && thresholds[i] <= thresholds[i - 1])) {
            throw Error("apd: thresholds must be positive and strictly increasing");
        }
    }
    std::size_t visible = 0;
    std::vector<std::size_t> within(thresholds.size(), 0);
    for (int q = 0; q < truth.num_queries; ++q) {
        for (int t = 0; t < truth.frames; ++t) {
            const std::size_t idx = truth.index(q, t);
            if (!truth.visible[idx]) {
                continue;
            }
            ++visible;
            const double err = (predicted.positions[idx] - truth.positions[idx]).norm();
            for (std::size_t k = 0; k < thresholds.size(); ++k) {
                if (err < thresholds[k]) {
                    ++within[k];
                }
            }
        }
    }
    if (visible == 0) {
        throw NoVisiblePoints("apd: no truth-visible (query, frame) pairs");
    }
    std::vector<double> out(thresholds.size());
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
        out[k] = 100.0 * static_cast<double>(within[k]) / static_cast<double>(visible);
    }
    return out;
}

}  // namespace dino4d
