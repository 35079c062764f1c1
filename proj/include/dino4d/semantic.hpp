#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "dino4d/geometry.hpp"

namespace dino4d {

/// Patch-grid of D-dimensional descriptors. Tokens are stored row-major
/// (one row per patch, index py * patch_width + px).
struct FeatureMap {
    int patch_width = 0;
    int patch_height = 0;
    int dim = 0;
    int patch_size = 0;
    int frame = 0;
    Eigen::MatrixXd data;  // tokens x dim

    int tokens() const { return patch_width * patch_height; }
    int token_index(int px, int py) const { return py * patch_width + px; }
};

/// Dense integer label image (background = 0).
struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> labels;

    std::uint8_t at(int x, int y) const {
        return labels[static_cast<std::size_t>(y) * width + x];
    }
};

/// Synthetic stand-in for a frozen semantic backbone: each label id maps
/// to a fixed seeded unit embedding; patch features are per-pixel label
/// embedding means plus noise of magnitude sigma_feat, renormalized.
/// The label table depends only on `seed`, so embeddings are comparable
/// across frames; the noise is re-drawn per `frame`, as real backbone
/// responses decorrelate between views. Deterministic in all arguments.
FeatureMap synth_features(const LabelMap& labels, int dim, int patch_size,
                          std::uint64_t seed, double sigma_feat = 0.05,
                          int frame = 0);

/// The seeded unit embedding synth_features assigns to one label id.
Eigen::VectorXd label_embedding(std::uint8_t label, int dim, std::uint64_t seed);

/// Bilinear interpolation footprint over the 4 nearest patch centers,
/// with border clamping. Weights sum to 1; duv derivatives are zero in a
/// clamped axis.
struct BilinearFootprint {
    int idx[4];
    double w[4];
    double dw_du[4];
    double dw_dv[4];
};
BilinearFootprint bilinear_footprint(const FeatureMap& fm, double u, double v);

/// Bilinear feature lookup at a continuous pixel coordinate.
Eigen::VectorXd sample_feature(const FeatureMap& fm, double u, double v);

struct SemanticLossConfig {
    std::vector<Eigen::Vector2i> omega;  // query pixels in the source frame
    double eps_norm = 1e-8;
    bool mean = true;  // mean over omega (default) vs plain sum
};

struct SemanticLossResult {
    double loss = 0;
    // Gradient w.r.t. each tracked 3D point, dense over the pointmap grid
    // (zero outside omega and on masked terms).
    std::vector<Vec3> grad_points;
};

/// Cosine-dissimilarity consistency between source-frame features and
/// target-frame features sampled where the tracked points land.
/// Points projecting behind the camera contribute the maximum per-term
/// value 2 with zero gradient; in-front projections are clamped to the
/// image border for sampling.
SemanticLossResult semantic_consistency_loss(const FeatureMap& f_src,
                                             const FeatureMap& f_dst,
                                             const Pointmap& tracking,
                                             const CameraModel& camera_j,
                                             const SemanticLossConfig& cfg);

}  // namespace dino4d
