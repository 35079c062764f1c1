#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "dino4d/fusion.hpp"
#include "dino4d/geometry.hpp"
#include "dino4d/semantic.hpp"

namespace dino4d {

struct PredictorConfig {
    int width = 112;
    int height = 112;
    int patch_size = 14;
    int d_geo = 32;   // fused feature dim fed to the network
    int hidden = 128;
    Intrinsics nominal;     // intrinsics of the base depth surface
    double d0_init = 2.0;   // starting base depth, meters
    // fixed scale on the offset heads so zero-initialized weights can reach
    // scene-scale displacements within a short optimization budget
    double offset_gain = 10.0;

    int patches_x() const { return width / patch_size; }
    int patches_y() const { return height / patch_size; }
    int tokens() const { return patches_x() * patches_y(); }
    int pixels_per_patch() const { return patch_size * patch_size; }
    // per-token input: patch pixels of both frames, fused features of both
    // frames, normalized token position
    int input_dim() const { return 2 * pixels_per_patch() + 2 * d_geo + 2; }
};

/// Fixed seeded patch embedder standing in for a lightweight geometric
/// encoder; not trained.
Eigen::MatrixXd make_patch_embedder(int pixels_per_patch, int d_geo,
                                    std::uint64_t seed);
FeatureMap embed_patches(const Image& img, const Eigen::MatrixXd& embedder,
                         int patch_size, int frame);

/// Two shared hidden layers over per-token inputs, then separate linear
/// heads emitting per-pixel 3D offsets from a learned base depth for the
/// tracking and reconstruction branches, plus a log-confidence head.
struct PredictorParams {
    PredictorConfig config;
    Eigen::MatrixXd w1, w2, w_track, w_recon, w_conf;
    Eigen::VectorXd b1, b2, b_track, b_recon, b_conf;
    double base_depth = 2.0;

    static PredictorParams init(const PredictorConfig& cfg, std::uint64_t seed);
};

struct PredictorGrads {
    Eigen::MatrixXd w1, w2, w_track, w_recon, w_conf;
    Eigen::VectorXd b1, b2, b_track, b_recon, b_conf;
    double base_depth = 0;

    static PredictorGrads zeros_like(const PredictorParams& p);
    void add(const PredictorGrads& other);
};

struct PairPrediction {
    Pointmap tracking;        // content of frame i at time j
    Pointmap reconstruction;  // geometry of frame j at time j
    std::vector<double> confidence;
};

struct ForwardCache {
    Eigen::MatrixXd input;    // tokens x input_dim
    Eigen::MatrixXd h1, h2;   // post-activation
    Eigen::MatrixXd o_conf;   // raw log-confidence
    bool filled = false;
};

PairPrediction forward_pair(int frame_i, int frame_j, const Image& img_i,
                            const Image& img_j, const FeatureMap& f_fused_i,
                            const FeatureMap& f_fused_j,
                            const PredictorParams& params,
                            ForwardCache* cache = nullptr);

struct PredictorBackwardResult {
    PredictorGrads grads;
    Eigen::MatrixXd d_f_fused_i;  // tokens x d_geo
    Eigen::MatrixXd d_f_fused_j;
};

/// Backward through forward_pair. d_tracking / d_reconstruction are dense
/// per-pixel gradients w.r.t. the output 3D points; d_confidence may be
/// empty when the confidence head receives no gradient.
PredictorBackwardResult predictor_backward(const std::vector<Vec3>& d_tracking,
                                           const std::vector<Vec3>& d_reconstruction,
                                           const std::vector<double>& d_confidence,
                                           const ForwardCache& cache,
                                           const PredictorParams& params);

struct GeometricLossResult {
    double loss = 0;
    std::vector<Vec3> d_tracking;
    std::vector<Vec3> d_reconstruction;
};

/// Mean squared Euclidean error over gt-valid pixels, summed over the two
/// branches.
GeometricLossResult geometric_loss(const PairPrediction& pred,
                                   const Pointmap& gt_tracking,
                                   const Pointmap& gt_reconstruction);

/// Gauss-Newton PnP over explicit 3D-2D correspondences. Rotation updates
/// use exponential-map increments; converged when the update norm drops
/// below 1e-10 (50 iterations max).
Pose estimate_pose_pnp(const std::vector<Vec3>& points,
                       const std::vector<Vec2>& pixels, const Intrinsics& k,
                       const Pose& initial_pose);

/// Pointmap wrapper: valid pixels paired with the observed pixel grid.
Pose estimate_pose_pnp(const Pointmap& recon, const std::vector<Vec2>& observed,
                       const Intrinsics& k, const Pose& initial_pose);

struct ReprojectionLossResult {
    double loss = 0;
    std::vector<Vec3> d_points;
    Pose pose;  // pose the loss was evaluated at
};

/// Mean squared pixel error between the projection of the points under a
/// fixed pose and the observed pixels; the pose is treated as constant,
/// so gradients flow only to the 3D points. Behind-camera points are
/// masked out of the mean.
ReprojectionLossResult reprojection_loss(const Pointmap& pred,
                                         const std::vector<Vec2>& observed,
                                         const Intrinsics& k, const Pose& pose);

}  // namespace dino4d
