#include "dino4d/diffusion.hpp"

#include <cmath>
#include <random>

namespace dino4d {

DiffusionSchedule DiffusionSchedule::linear(int num_steps, double beta_start,
                                            double beta_end) {
    if (num_steps < 1 || beta_start <= 0 || beta_end >= 1 || beta_end < beta_start) {
        throw ConfigInvalid("diffusion schedule: invalid beta range");
    }
    DiffusionSchedule s;
    s.num_steps = num_steps;
    s.beta.resize(num_steps);
    s.alpha.resize(num_steps);
    s.alpha_bar.resize(num_steps);
    double prod = 1.0;
    for (int t = 0; t < num_steps; ++t) {
        s.beta[t] = num_steps == 1
                        ? beta_start
                        : beta_start + (beta_end - beta_start) * t / (num_steps - 1);
        s.alpha[t] = 1.0 - s.beta[t];
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

std::vector<Vec3> forward_noise(const Residual& residual, int t,
                                const std::vector<Vec3>& noise,
                                const DiffusionSchedule& schedule) {
    if (t < 0 || t >= schedule.num_steps) {
        throw StepOutOfRange("forward_noise: step index outside [0, K)");
    }
    if (noise.size() != residual.size()) {
        throw ShapeMismatch("forward_noise: noise shape mismatch");
    }
    const double a = std::sqrt(schedule.alpha_bar[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
    std::vector<Vec3> z(residual.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = a * residual.values[i] + b * noise[i];
    }
    return z;
}

Eigen::VectorXd timestep_embedding(int t) {
    Eigen::VectorXd e(kTimestepEmbedDim);
    for (int k = 0; k < kTimestepEmbedDim / 2; ++k) {
        const double freq = std::pow(10000.0, -2.0 * k / kTimestepEmbedDim);
        e[2 * k] = std::sin(t * freq);
        e[2 * k + 1] = std::cos(t * freq);
    }
    return e;
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(stage_seed(seed, "denoiser_init"));
    auto glorot = [&](int r, int c) {
        const double s = std::sqrt(2.0 / (r + c));
        std::normal_distribution<double> normal(0.0, s);
        Eigen::MatrixXd m(r, c);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) {
                m(i, j) = normal(rng);
            }
        }
        return m;
    };
    DenoiserParams p;
    p.config = cfg;
    p.w1 = glorot(cfg.input_dim(), cfg.hidden);
    p.b1 = Eigen::VectorXd::Zero(cfg.hidden);
    p.w2 = glorot(cfg.hidden, cfg.hidden);
    p.b2 = Eigen::VectorXd::Zero(cfg.hidden);
    p.w3 = Eigen::MatrixXd::Zero(cfg.hidden, 3);  // starts as the zero predictor
    p.b3 = Eigen::VectorXd::Zero(3);
    return p;
}

DenoiserGrads DenoiserGrads::zeros_like(const DenoiserParams& p) {
    DenoiserGrads g;
    g.w1 = Eigen::MatrixXd::Zero(p.w1.rows(), p.w1.cols());
    g.w2 = Eigen::MatrixXd::Zero(p.w2.rows(), p.w2.cols());
    g.w3 = Eigen::MatrixXd::Zero(p.w3.rows(), p.w3.cols());
    g.b1 = Eigen::VectorXd::Zero(p.b1.size());
    g.b2 = Eigen::VectorXd::Zero(p.b2.size());
    g.b3 = Eigen::VectorXd::Zero(p.b3.size());
    return g;
}

void DenoiserGrads::add(const DenoiserGrads& o) {
    w1 += o.w1;
    w2 += o.w2;
    w3 += o.w3;
    b1 += o.b1;
    b2 += o.b2;
    b3 += o.b3;
}

namespace {
Eigen::MatrixXd assemble_input(const Eigen::MatrixXd& z, int t,
                               const Eigen::MatrixXd& cond,
                               const DenoiserConfig& cfg) {
    if (z.cols() != 3 || cond.rows() != z.rows() || cond.cols() != cfg.cond_dim) {
        throw ShapeMismatch("denoiser: input shape mismatch");
    }
    Eigen::MatrixXd x(z.rows(), cfg.input_dim());
    x.leftCols(3) = z;
    x.middleCols(3, kTimestepEmbedDim) =
        timestep_embedding(t).transpose().replicate(z.rows(), 1);
    x.rightCols(cfg.cond_dim) = cond;
    return x;
}
}  // namespace

Eigen::MatrixXd denoiser_forward(const Eigen::MatrixXd& z, int t,
                                 const Eigen::MatrixXd& cond,
                                 const DenoiserParams& params) {
    const Eigen::MatrixXd x = assemble_input(z, t, cond, params.config);
    const Eigen::MatrixXd h1 =
        ((x * params.w1).rowwise() + params.b1.transpose()).array().tanh();
    const Eigen::MatrixXd h2 =
        ((h1 * params.w2).rowwise() + params.b2.transpose()).array().tanh();
    return (h2 * params.w3).rowwise() + params.b3.transpose();
}

DiffusionLossResult diffusion_loss(const DenoiserParams& params,
                                   const Residual& residual,
                                   const Eigen::MatrixXd& cond, int t,
                                   const std::vector<Vec3>& noise,
                                   const DiffusionSchedule& schedule) {
    const std::vector<Vec3> z_vec = forward_noise(residual, t, noise, schedule);
    const Eigen::Index n = static_cast<Eigen::Index>(residual.size());
    Eigen::MatrixXd z(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        z.row(i) = z_vec[i].transpose();
    }

    const Eigen::MatrixXd x = assemble_input(z, t, cond, params.config);
    const Eigen::MatrixXd h1 =
        ((x * params.w1).rowwise() + params.b1.transpose()).array().tanh();
    const Eigen::MatrixXd h2 =
        ((h1 * params.w2).rowwise() + params.b2.transpose()).array().tanh();
    const Eigen::MatrixXd pred = (h2 * params.w3).rowwise() + params.b3.transpose();

    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < residual.size(); ++i) {
        if (residual.valid[i]) {
            ++n_valid;
        }
    }
    if (n_valid == 0) {
        throw NoValidPixels("diffusion_loss: no valid pixels");
    }
    const double inv = 1.0 / (3.0 * static_cast<double>(n_valid));

    double sum = 0;
    Eigen::MatrixXd d_pred = Eigen::MatrixXd::Zero(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!residual.valid[i]) {
            continue;
        }
        const Eigen::RowVector3d e = pred.row(i) - noise[i].transpose();
        sum += e.squaredNorm();
        d_pred.row(i) = 2.0 * inv * e;
    }

    DiffusionLossResult res;
    res.loss = sum * inv;
    res.grads = DenoiserGrads::zeros_like(params);
    res.grads.w3 = h2.transpose() * d_pred;
    res.grads.b3 = d_pred.colwise().sum();
    Eigen::MatrixXd d_h2 = d_pred * params.w3.transpose();
    Eigen::MatrixXd d_z2 = d_h2.array() * (1.0 - h2.array() * h2.array());
    res.grads.w2 = h1.transpose() * d_z2;
    res.grads.b2 = d_z2.colwise().sum();
    Eigen::MatrixXd d_h1 = d_z2 * params.w2.transpose();
    Eigen::MatrixXd d_z1 = d_h1.array() * (1.0 - h1.array() * h1.array());
    res.grads.w1 = x.transpose() * d_z1;
    res.grads.b1 = d_z1.colwise().sum();
    return res;
}

Pointmap refine(const Pointmap& coarse, const Eigen::MatrixXd& cond,
                const NoisePredictor& predictor,
                const DiffusionSchedule& schedule, double sigma_residual,
                std::uint64_t seed) {
    const Eigen::Index n = static_cast<Eigen::Index>(coarse.size());
    if (cond.rows() != n) {
        throw ShapeMismatch("refine: condition row count mismatch");
    }
    std::mt19937_64 rng(stage_seed(seed, "refine_sampler"));
    std::normal_distribution<double> normal(0.0, 1.0);

    Eigen::MatrixXd z(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
            z(i, c) = normal(rng);
        }
    }

    for (int t = schedule.num_steps - 1; t >= 0; --t) {
        const Eigen::MatrixXd eps = predictor(z, t, cond);
        const double a = schedule.alpha[t];
        const double ab = schedule.alpha_bar[t];
        z = (z - (schedule.beta[t] / std::sqrt(1.0 - ab)) * eps) / std::sqrt(a);
        if (t > 0) {
            // lower-bound posterior variance beta_tilde
            const double ab_prev = schedule.alpha_bar[t - 1];
            const double sigma =
                std::sqrt(schedule.beta[t] * (1.0 - ab_prev) / (1.0 - ab));
            for (Eigen::Index i = 0; i < n; ++i) {
                for (int c = 0; c < 3; ++c) {
                    z(i, c) += sigma * normal(rng);
                }
            }
        }
    }

    Pointmap out = coarse;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (coarse.valid[i]) {
            out.points[i] += sigma_residual * z.row(i).transpose();
        }
    }
    return out;
}

Eigen::MatrixXd build_condition(const Pointmap& coarse, const FeatureMap& fused) {
    Eigen::MatrixXd cond(coarse.size(), 3 + fused.dim);
    for (int y = 0; y < coarse.height; ++y) {
        for (int x = 0; x < coarse.width; ++x) {
            const std::size_t i = coarse.index(x, y);
            cond.row(i).head<3>() = coarse.points[i].transpose();
            cond.row(i).tail(fused.dim) = sample_feature(fused, x, y).transpose();
        }
    }
    return cond;
}

}  // namespace dino4d
