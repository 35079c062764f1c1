#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dino4d/diffusion.hpp"
#include "dino4d/fusion.hpp"
#include "dino4d/predictor.hpp"
#include "dino4d/scene.hpp"

namespace dino4d {

struct LossWeights {
    double reproj = 1.0;
    double geo = 1.0;
    double sem = 0.5;
    double diff = 0.5;
};

struct LossComponents {
    double reproj = 0;
    double geo = 0;
    double sem = 0;
    double diff = 0;
};

/// Weighted sum of the four training objectives; throws NonFiniteLoss
/// naming the offending component.
double total_loss(const LossComponents& components, const LossWeights& weights);

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Flat view of one named parameter tensor.
struct ParamRef {
    std::string name;
    double* data = nullptr;
    std::size_t size = 0;
};

/// Decoupled-weight-decay Adam with bias-corrected moments. Moment
/// buffers are keyed by parameter name.
class AdamW {
  public:
    explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

    void step(const std::vector<ParamRef>& params,
              const std::vector<ParamRef>& grads);
    long step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

  private:
    AdamWConfig cfg_;
    long step_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct ModelConfig {
    PredictorConfig predictor;
    int d_sem = 64;
    int d_k = 32;
    int d_v = 32;
    int diffusion_steps = 5;
    double beta_start = 1e-4;
    double beta_end = 0.2;
    int denoiser_hidden = 64;
    double sigma_feat = 0.05;
};

/// All trainable state plus the fixed patch embedder and noise schedule.
struct Model {
    ModelConfig config;
    AdapterParams adapter;
    PredictorParams predictor;
    DenoiserParams denoiser;
    Eigen::MatrixXd patch_embedder;  // fixed, seeded
    DiffusionSchedule schedule;
    double sigma_residual = 1.0;  // residual normalization recorded at train time
    long step = 0;
    std::uint64_t seed = 0;

    static Model init(const ModelConfig& cfg, std::uint64_t seed);
};

struct ModelGrads {
    AdapterGrads adapter;
    PredictorGrads predictor;
    DenoiserGrads denoiser;

    static ModelGrads zeros_like(const Model& m);
};

std::vector<ParamRef> param_refs(Model& m);
std::vector<ParamRef> grad_refs(ModelGrads& g, const Model& m);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

struct TrainConfig {
    std::vector<std::string> scene_dirs;
    LossWeights weights;
    AdamWConfig optim;
    ModelConfig model;
    int steps = 500;
    int window = 24;
    int force_stride = 0;    // 0: draw stride from [1, 6]
    int pairs_per_step = 0;  // 0: every pair of the window
    // semantic loss query spacing; dense by default so the per-point
    // semantic and geometric gradient scales stay comparable
    int omega_stride = 1;
    int pnp_stride = 4;      // correspondence subsampling for pose estimation
    int diffusion_stride = 2;
    int checkpoint_every = 100;
    int keep_checkpoints = 3;
    std::uint64_t seed = 0;
    std::string out_dir = "run";
};

struct TrainResult {
    double initial_total = 0;
    double final_total = 0;
    std::string checkpoint_path;
    std::string log_path;
};

TrainResult train(const TrainConfig& cfg);

struct EvalConfig {
    std::vector<double> apd_thresholds{0.05, 0.15, 0.3};
    bool refine = false;
    int chamfer_stride = 4;
    std::uint64_t seed = 0;
};

struct EvalReport {
    std::string scene_id;
    std::vector<double> apd_thresholds;
    std::vector<double> apd_values;
    double cd_coarse_cm = 0;
    double cd_refined_cm = -1;  // negative when refinement was not run
    int pairs_executed = 0;
    std::size_t num_points = 0;
    double wall_time_s = 0;
};

/// Pairwise inference (exactly T-1 forward passes with reference frame 0),
/// APD over the ground-truth queries and per-frame Chamfer distance,
/// optionally with diffusion refinement of the reconstruction branch.
EvalReport evaluate(const Model& model, const SceneSample& scene,
                    const EvalConfig& cfg);

/// Mean APD/CD over per-scene reports (per-sequence averaging).
EvalReport aggregate_reports(const std::vector<EvalReport>& reports);

std::string report_to_json(const EvalReport& r);

/// Plain-text metric table in the usual benchmark layout, e.g.
///   Method            APD@0.1m  APD@0.3m  APD@0.5m
///   St4RTrack             35.1      67.4      78.5
std::string format_apd_table(
    const std::vector<std::pair<std::string, std::vector<double>>>& rows,
    const std::vector<double>& thresholds);

}  // namespace dino4d
