#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dino4d/geometry.hpp"
#include "dino4d/semantic.hpp"

namespace dino4d {

struct SceneConfig {
    int width = 112;
    int height = 112;
    int frames = 24;
    int num_objects = 3;           // last one is the deforming (breathing) sphere
    double motion_amplitude = 0.4; // meters
    double orbit_radius = 2.5;     // camera distance from the look target
    double orbit_speed = 0.02;     // radians per frame
    double textureless_fraction = 0.3;
    int query_stride = 8;          // trajectory query pixel spacing
    int patch_size = 14;
    std::uint64_t seed = 0;
};

/// Ground-truth bundle for one synthetic video. Pointmaps are in world
/// coordinates; gt_tracking[t] holds the frame-0 surface content moved to
/// time t, gt_recon[t] the geometry of frame t.
struct SceneSample {
    SceneConfig config;
    std::vector<Image> images;
    std::vector<LabelMap> labels;
    std::vector<Pointmap> gt_recon;
    std::vector<Pointmap> gt_tracking;
    std::vector<CameraModel> cameras;
    TrajectorySet gt_trajectories;
    std::vector<Eigen::Vector2i> query_pixels;  // frame-0 pixel of each query
};

SceneSample generate(const SceneConfig& config);

/// Picks `window` frame indices with a uniform stride (drawn from [1, 6]
/// when force_stride == 0) and a uniform start among valid starts.
std::vector<int> sample_window(int total_frames, int window, int force_stride,
                               std::uint64_t seed);

void save_bundle(const SceneSample& scene, const std::string& dir);
SceneSample load_bundle(const std::string& dir);

}  // namespace dino4d
