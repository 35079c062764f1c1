#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "dino4d/geometry.hpp"
#include "dino4d/semantic.hpp"

namespace dino4d {

struct DiffusionSchedule {
    int num_steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative products

    static DiffusionSchedule linear(int num_steps = 5, double beta_start = 1e-4,
                                    double beta_end = 0.2);
};

/// Per-pixel residual of a coarse pointmap: values[i] = gt - coarse.
struct Residual {
    int width = 0;
    int height = 0;
    std::vector<Vec3> values;
    std::vector<std::uint8_t> valid;

    Residual() = default;
    Residual(int w, int h)
        : width(w), height(h), values(static_cast<std::size_t>(w) * h, Vec3::Zero()),
          valid(static_cast<std::size_t>(w) * h, 1) {}
    std::size_t size() const { return values.size(); }
};

/// z_t = sqrt(alpha_bar[t]) * residual + sqrt(1 - alpha_bar[t]) * noise.
std::vector<Vec3> forward_noise(const Residual& residual, int t,
                                const std::vector<Vec3>& noise,
                                const DiffusionSchedule& schedule);

inline constexpr int kTimestepEmbedDim = 16;
Eigen::VectorXd timestep_embedding(int t);

/// Per-pixel noise-prediction MLP over (z_t, timestep embedding,
/// condition channels).
struct DenoiserConfig {
    int cond_dim = 0;  // condition channels per pixel
    int hidden = 64;
    int input_dim() const { return 3 + kTimestepEmbedDim + cond_dim; }
};

struct DenoiserParams {
    DenoiserConfig config;
    Eigen::MatrixXd w1, w2, w3;
    Eigen::VectorXd b1, b2, b3;

    static DenoiserParams init(const DenoiserConfig& cfg, std::uint64_t seed);
};

struct DenoiserGrads {
    Eigen::MatrixXd w1, w2, w3;
    Eigen::VectorXd b1, b2, b3;

    static DenoiserGrads zeros_like(const DenoiserParams& p);
    void add(const DenoiserGrads& o);
};

/// Batched forward: rows are pixels, input = [z | t_embed | cond].
Eigen::MatrixXd denoiser_forward(const Eigen::MatrixXd& z, int t,
                                 const Eigen::MatrixXd& cond,
                                 const DenoiserParams& params);

struct DiffusionLossResult {
    double loss = 0;
    DenoiserGrads grads;
};

/// MSE between the predicted and drawn noise over valid pixels; analytic
/// gradients w.r.t. the denoiser parameters (inputs treated constant).
DiffusionLossResult diffusion_loss(const DenoiserParams& params,
                                   const Residual& residual,
                                   const Eigen::MatrixXd& cond, int t,
                                   const std::vector<Vec3>& noise,
                                   const DiffusionSchedule& schedule);

/// Noise predictor the sampler queries at each reverse step; the trained
/// path wraps denoiser_forward, tests may substitute an oracle.
using NoisePredictor = std::function<Eigen::MatrixXd(
    const Eigen::MatrixXd& z, int t, const Eigen::MatrixXd& cond)>;

/// K ancestral reverse steps from z_K ~ N(0, I) with the lower-bound
/// posterior variance; returns coarse + sigma_residual * z_0 on valid
/// pixels, coarse unchanged elsewhere. Deterministic per seed.
Pointmap refine(const Pointmap& coarse, const Eigen::MatrixXd& cond,
                const NoisePredictor& predictor,
                const DiffusionSchedule& schedule, double sigma_residual,
                std::uint64_t seed);

/// Per-pixel condition channels: coarse point coordinates concatenated
/// with the fused features sampled at each pixel.
Eigen::MatrixXd build_condition(const Pointmap& coarse, const FeatureMap& fused);

}  // namespace dino4d
