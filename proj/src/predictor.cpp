#include "dino4d/predictor.hpp"

#include <cmath>
#include <random>

namespace dino4d {

Eigen::MatrixXd make_patch_embedder(int pixels_per_patch, int d_geo,
                                    std::uint64_t seed) {
    std::mt19937_64 rng(stage_seed(seed, "patch_embedder"));
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(pixels_per_patch));
    Eigen::MatrixXd proj(pixels_per_patch, d_geo);
    for (int i = 0; i < proj.rows(); ++i) {
        for (int j = 0; j < proj.cols(); ++j) {
            proj(i, j) = normal(rng);
        }
    }
    return proj;
}

FeatureMap embed_patches(const Image& img, const Eigen::MatrixXd& embedder,
                         int patch_size, int frame) {
    FeatureMap fm;
    fm.patch_size = patch_size;
    fm.frame = frame;
    fm.patch_width = img.width / patch_size;
    fm.patch_height = img.height / patch_size;
    fm.dim = static_cast<int>(embedder.cols());
    fm.data.resize(fm.tokens(), fm.dim);
    Eigen::VectorXd patch(patch_size * patch_size);
    for (int py = 0; py < fm.patch_height; ++py) {
        for (int px = 0; px < fm.patch_width; ++px) {
            int k = 0;
            for (int dy = 0; dy < patch_size; ++dy) {
                for (int dx = 0; dx < patch_size; ++dx) {
                    patch[k++] = img.at(px * patch_size + dx, py * patch_size + dy);
                }
            }
            fm.data.row(fm.token_index(px, py)) = (embedder.transpose() * patch).transpose();
        }
    }
    return fm;
}

PredictorParams PredictorParams::init(const PredictorConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(stage_seed(seed, "predictor_init"));
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
    PredictorParams p;
    p.config = cfg;
    const int pp = cfg.pixels_per_patch();
    p.w1 = glorot(cfg.input_dim(), cfg.hidden);
    p.b1 = Eigen::VectorXd::Zero(cfg.hidden);
    p.w2 = glorot(cfg.hidden, cfg.hidden);
    p.b2 = Eigen::VectorXd::Zero(cfg.hidden);
    // heads start at zero: both branches emit the base depth surface
    p.w_track = Eigen::MatrixXd::Zero(cfg.hidden, pp * 3);
    p.b_track = Eigen::VectorXd::Zero(pp * 3);
    p.w_recon = Eigen::MatrixXd::Zero(cfg.hidden, pp * 3);
    p.b_recon = Eigen::VectorXd::Zero(pp * 3);
    p.w_conf = Eigen::MatrixXd::Zero(cfg.hidden, pp);
    p.b_conf = Eigen::VectorXd::Zero(pp);
    p.base_depth = cfg.d0_init;
    return p;
}

PredictorGrads PredictorGrads::zeros_like(const PredictorParams& p) {
    PredictorGrads g;
    g.w1 = Eigen::MatrixXd::Zero(p.w1.rows(), p.w1.cols());
    g.w2 = Eigen::MatrixXd::Zero(p.w2.rows(), p.w2.cols());
    g.w_track = Eigen::MatrixXd::Zero(p.w_track.rows(), p.w_track.cols());
    g.w_recon = Eigen::MatrixXd::Zero(p.w_recon.rows(), p.w_recon.cols());
    g.w_conf = Eigen::MatrixXd::Zero(p.w_conf.rows(), p.w_conf.cols());
    g.b1 = Eigen::VectorXd::Zero(p.b1.size());
    g.b2 = Eigen::VectorXd::Zero(p.b2.size());
    g.b_track = Eigen::VectorXd::Zero(p.b_track.size());
    g.b_recon = Eigen::VectorXd::Zero(p.b_recon.size());
    g.b_conf = Eigen::VectorXd::Zero(p.b_conf.size());
    g.base_depth = 0;
    return g;
}

void PredictorGrads::add(const PredictorGrads& o) {
    w1 += o.w1;
    w2 += o.w2;
    w_track += o.w_track;
    w_recon += o.w_recon;
    w_conf += o.w_conf;
    b1 += o.b1;
    b2 += o.b2;
    b_track += o.b_track;
    b_recon += o.b_recon;
    b_conf += o.b_conf;
    base_depth += o.base_depth;
}

namespace {
Vec3 base_point(const PredictorConfig& cfg, int x, int y, double d0) {
    return Vec3((x - cfg.nominal.cx) / cfg.nominal.fx * d0,
                (y - cfg.nominal.cy) / cfg.nominal.fy * d0, d0);
}
}  // namespace

PairPrediction forward_pair(int frame_i, int frame_j, const Image& img_i,
                            const Image& img_j, const FeatureMap& f_fused_i,
                            const FeatureMap& f_fused_j,
                            const PredictorParams& params, ForwardCache* cache) {
    const PredictorConfig& cfg = params.config;
    if (img_i.width != cfg.width || img_i.height != cfg.height ||
        img_j.width != cfg.width || img_j.height != cfg.height) {
        throw DimMismatch("forward_pair: frame resolution mismatch");
    }
    if (f_fused_i.tokens() != cfg.tokens() || f_fused_j.tokens() != cfg.tokens() ||
        f_fused_i.dim != cfg.d_geo || f_fused_j.dim != cfg.d_geo) {
        throw DimMismatch("forward_pair: feature grid not aligned to frames");
    }

    const int ps = cfg.patch_size;
    const int pp = cfg.pixels_per_patch();
    const int px_n = cfg.patches_x();
    const int py_n = cfg.patches_y();

    Eigen::MatrixXd input(cfg.tokens(), cfg.input_dim());
    for (int py = 0; py < py_n; ++py) {
        for (int px = 0; px < px_n; ++px) {
            const int t = py * px_n + px;
            int k = 0;
            for (int dy = 0; dy < ps; ++dy) {
                for (int dx = 0; dx < ps; ++dx) {
                    input(t, k++) = img_i.at(px * ps + dx, py * ps + dy);
                }
            }
            for (int dy = 0; dy < ps; ++dy) {
                for (int dx = 0; dx < ps; ++dx) {
                    input(t, k++) = img_j.at(px * ps + dx, py * ps + dy);
                }
            }
            input.block(t, k, 1, cfg.d_geo) = f_fused_i.data.row(t);
            k += cfg.d_geo;
            input.block(t, k, 1, cfg.d_geo) = f_fused_j.data.row(t);
            k += cfg.d_geo;
            input(t, k++) = px_n > 1 ? 2.0 * px / (px_n - 1) - 1.0 : 0.0;
            input(t, k++) = py_n > 1 ? 2.0 * py / (py_n - 1) - 1.0 : 0.0;
        }
    }

    const Eigen::MatrixXd h1 =
        ((input * params.w1).rowwise() + params.b1.transpose()).array().tanh();
    const Eigen::MatrixXd h2 =
        ((h1 * params.w2).rowwise() + params.b2.transpose()).array().tanh();
    const Eigen::MatrixXd o_track =
        (h2 * params.w_track).rowwise() + params.b_track.transpose();
    const Eigen::MatrixXd o_recon =
        (h2 * params.w_recon).rowwise() + params.b_recon.transpose();
    const Eigen::MatrixXd o_conf =
        (h2 * params.w_conf).rowwise() + params.b_conf.transpose();

    PairPrediction out;
    out.tracking = Pointmap(cfg.width, cfg.height, frame_i, frame_j);
    out.reconstruction = Pointmap(cfg.width, cfg.height, frame_j, frame_j);
    out.confidence.assign(out.tracking.size(), 1.0);

    for (int py = 0; py < py_n; ++py) {
        for (int px = 0; px < px_n; ++px) {
            const int t = py * px_n + px;
            for (int dy = 0; dy < ps; ++dy) {
                for (int dx = 0; dx < ps; ++dx) {
                    const int x = px * ps + dx;
                    const int y = py * ps + dy;
                    const int o = (dy * ps + dx) * 3;
                    const Vec3 base = base_point(cfg, x, y, params.base_depth);
                    const double g = cfg.offset_gain;
                    out.tracking.at(x, y) =
                        base + g * Vec3(o_track(t, o), o_track(t, o + 1), o_track(t, o + 2));
                    out.reconstruction.at(x, y) =
                        base + g * Vec3(o_recon(t, o), o_recon(t, o + 1), o_recon(t, o + 2));
                    out.confidence[out.tracking.index(x, y)] =
                        std::exp(o_conf(t, dy * ps + dx));
                }
            }
        }
    }

    if (cache) {
        cache->input = input;
        cache->h1 = h1;
        cache->h2 = h2;
        cache->o_conf = o_conf;
        cache->filled = true;
    }
    (void)pp;
    return out;
}

PredictorBackwardResult predictor_backward(const std::vector<Vec3>& d_tracking,
                                           const std::vector<Vec3>& d_reconstruction,
                                           const std::vector<double>& d_confidence,
                                           const ForwardCache& cache,
                                           const PredictorParams& params) {
    if (!cache.filled) {
        throw Error("predictor_backward: missing forward cache");
    }
    const PredictorConfig& cfg = params.config;
    const int ps = cfg.patch_size;
    const int pp = cfg.pixels_per_patch();
    const int px_n = cfg.patches_x();
    const int py_n = cfg.patches_y();
    const std::size_t npix = static_cast<std::size_t>(cfg.width) * cfg.height;
    if (d_tracking.size() != npix || d_reconstruction.size() != npix) {
        throw ShapeMismatch("predictor_backward: gradient grid size mismatch");
    }

    Eigen::MatrixXd d_o_track = Eigen::MatrixXd::Zero(cfg.tokens(), pp * 3);
    Eigen::MatrixXd d_o_recon = Eigen::MatrixXd::Zero(cfg.tokens(), pp * 3);
    Eigen::MatrixXd d_o_conf = Eigen::MatrixXd::Zero(cfg.tokens(), pp);
    double d_d0 = 0;

    for (int py = 0; py < py_n; ++py) {
        for (int px = 0; px < px_n; ++px) {
            const int t = py * px_n + px;
            for (int dy = 0; dy < ps; ++dy) {
                for (int dx = 0; dx < ps; ++dx) {
                    const int x = px * ps + dx;
                    const int y = py * ps + dy;
                    const std::size_t pix = static_cast<std::size_t>(y) * cfg.width + x;
                    const int o = (dy * ps + dx) * 3;
                    for (int c = 0; c < 3; ++c) {
                        d_o_track(t, o + c) = cfg.offset_gain * d_tracking[pix][c];
                        d_o_recon(t, o + c) = cfg.offset_gain * d_reconstruction[pix][c];
                    }
                    const Vec3 dbase((x - cfg.nominal.cx) / cfg.nominal.fx,
                                     (y - cfg.nominal.cy) / cfg.nominal.fy, 1.0);
                    d_d0 += dbase.dot(d_tracking[pix] + d_reconstruction[pix]);
                    if (!d_confidence.empty()) {
                        const double conf = std::exp(cache.o_conf(t, dy * ps + dx));
                        d_o_conf(t, dy * ps + dx) = d_confidence[pix] * conf;
                    }
                }
            }
        }
    }

    PredictorBackwardResult res;
    res.grads = PredictorGrads::zeros_like(params);
    res.grads.base_depth = d_d0;
    res.grads.w_track = cache.h2.transpose() * d_o_track;
    res.grads.b_track = d_o_track.colwise().sum();
    res.grads.w_recon = cache.h2.transpose() * d_o_recon;
    res.grads.b_recon = d_o_recon.colwise().sum();
    res.grads.w_conf = cache.h2.transpose() * d_o_conf;
    res.grads.b_conf = d_o_conf.colwise().sum();

    Eigen::MatrixXd d_h2 = d_o_track * params.w_track.transpose() +
                           d_o_recon * params.w_recon.transpose() +
                           d_o_conf * params.w_conf.transpose();
    Eigen::MatrixXd d_z2 =
        d_h2.array() * (1.0 - cache.h2.array() * cache.h2.array());
    res.grads.w2 = cache.h1.transpose() * d_z2;
    res.grads.b2 = d_z2.colwise().sum();

    Eigen::MatrixXd d_h1 = d_z2 * params.w2.transpose();
    Eigen::MatrixXd d_z1 =
        d_h1.array() * (1.0 - cache.h1.array() * cache.h1.array());
    res.grads.w1 = cache.input.transpose() * d_z1;
    res.grads.b1 = d_z1.colwise().sum();

    const Eigen::MatrixXd d_input = d_z1 * params.w1.transpose();
    const int off = 2 * pp;
    res.d_f_fused_i = d_input.middleCols(off, cfg.d_geo);
    res.d_f_fused_j = d_input.middleCols(off + cfg.d_geo, cfg.d_geo);
    return res;
}

GeometricLossResult geometric_loss(const PairPrediction& pred,
                                   const Pointmap& gt_tracking,
                                   const Pointmap& gt_reconstruction) {
    const Pointmap& pt = pred.tracking;
    const Pointmap& pr = pred.reconstruction;
    if (pt.width != gt_tracking.width || pt.height != gt_tracking.height ||
        pr.width != gt_reconstruction.width || pr.height != gt_reconstruction.height) {
        throw ShapeMismatch("geometric_loss: prediction / ground-truth shape mismatch");
    }
    GeometricLossResult res;
    res.d_tracking.assign(pt.size(), Vec3::Zero());
    res.d_reconstruction.assign(pr.size(), Vec3::Zero());

    auto branch = [](const Pointmap& p, const Pointmap& gt, std::vector<Vec3>& grad) {
        std::size_t n = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (gt.valid[i]) {
                ++n;
            }
        }
        if (n == 0) {
            throw NoValidPixels("geometric_loss: a branch has no valid ground truth");
        }
        double sum = 0;
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (!gt.valid[i]) {
                continue;
            }
            const Vec3 e = p.points[i] - gt.points[i];
            sum += e.squaredNorm();
            grad[i] = 2.0 * inv * e;
        }
        return sum * inv;
    };
    res.loss = branch(pt, gt_tracking, res.d_tracking) +
               branch(pr, gt_reconstruction, res.d_reconstruction);
    return res;
}

Pose estimate_pose_pnp(const std::vector<Vec3>& points,
                       const std::vector<Vec2>& pixels, const Intrinsics& k,
                       const Pose& initial_pose) {
    if (points.size() != pixels.size()) {
        throw ShapeMismatch("pnp: correspondence count mismatch");
    }
    if (points.size() < 6) {
        throw InsufficientCorrespondences("pnp: need at least 6 correspondences");
    }
    Pose pose = initial_pose;
    double prev_residual = std::numeric_limits<double>::infinity();
    int rising = 0;

    // behind-camera points carry a fixed penalty so the solver cannot
    // "win" by pushing the cloud behind the image plane
    constexpr double kBehindPenalty = 1e6;
    const auto eval_residual = [&](const Pose& p) {
        double r2 = 0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const Vec3 pc = p.apply(points[i]);
            if (pc.z() <= kEpsDepth) {
                r2 += kBehindPenalty;
                continue;
            }
            const Vec2 proj(k.fx * pc.x() / pc.z() + k.cx,
                            k.fy * pc.y() / pc.z() + k.cy);
            r2 += (proj - pixels[i]).squaredNorm();
        }
        return r2;
    };

    for (int iter = 0; iter < 50; ++iter) {
        Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
        double residual = 0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const Vec3 pc = pose.apply(points[i]);
            if (pc.z() <= kEpsDepth) {
                residual += kBehindPenalty;
                continue;
            }
            const double z = pc.z();
            const Vec2 proj(k.fx * pc.x() / z + k.cx, k.fy * pc.y() / z + k.cy);
            const Vec2 r = proj - pixels[i];
            residual += r.squaredNorm();

            Eigen::Matrix<double, 2, 3> duv_dpc;
            duv_dpc << k.fx / z, 0, -k.fx * pc.x() / (z * z),
                       0, k.fy / z, -k.fy * pc.y() / (z * z);
            // perturbation: R <- exp(w) R, t <- t + v
            Eigen::Matrix<double, 3, 6> dpc;
            dpc.leftCols<3>() = Mat3::Identity();
            const Vec3 rp = pose.rotation * points[i];
            Mat3 skew;
            skew << 0, -rp.z(), rp.y(), rp.z(), 0, -rp.x(), -rp.y(), rp.x(), 0;
            dpc.rightCols<3>() = -skew;

            const Eigen::Matrix<double, 2, 6> j = duv_dpc * dpc;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if (residual > prev_residual) {
            if (++rising >= 5) {
                throw DivergedPnP("pnp: residual increased 5 consecutive iterations");
            }
        } else {
            rising = 0;
        }
        prev_residual = residual;

        const Eigen::Matrix<double, 6, 1> delta = jtj.ldlt().solve(-jtr);
        if (delta.norm() < 1e-10) {
            break;
        }
        // backtrack the Gauss-Newton step when it overshoots
        double scale = 1.0;
        Pose candidate;
        for (int half = 0; half < 8; ++half) {
            candidate = pose;
            candidate.translation += scale * delta.head<3>();
            candidate.rotation = exp_so3(scale * delta.tail<3>()) * candidate.rotation;
            if (eval_residual(candidate) <= residual || half == 7) {
                break;
            }
            scale *= 0.5;
        }
        pose = candidate;
        if (scale * delta.norm() < 1e-10) {
            break;
        }
    }
    return pose;
}

Pose estimate_pose_pnp(const Pointmap& recon, const std::vector<Vec2>& observed,
                       const Intrinsics& k, const Pose& initial_pose) {
    if (observed.size() != recon.size()) {
        throw ShapeMismatch("pnp: observed grid size mismatch");
    }
    std::vector<Vec3> pts;
    std::vector<Vec2> pix;
    for (std::size_t i = 0; i < recon.size(); ++i) {
        if (recon.valid[i]) {
            pts.push_back(recon.points[i]);
            pix.push_back(observed[i]);
        }
    }
    return estimate_pose_pnp(pts, pix, k, initial_pose);
}

ReprojectionLossResult reprojection_loss(const Pointmap& pred,
                                         const std::vector<Vec2>& observed,
                                         const Intrinsics& k, const Pose& pose) {
    if (observed.size() != pred.size()) {
        throw ShapeMismatch("reprojection_loss: observed grid size mismatch");
    }
    ReprojectionLossResult res;
    res.pose = pose;
    res.d_points.assign(pred.size(), Vec3::Zero());

    std::size_t counted = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred.valid[i] && pose.apply(pred.points[i]).z() > kEpsDepth) {
            ++counted;
        }
    }
    if (counted == 0) {
        throw NoValidPixels("reprojection_loss: no usable points");
    }
    const double inv = 1.0 / static_cast<double>(counted);

    double sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!pred.valid[i]) {
            continue;
        }
        const Vec3 pc = pose.apply(pred.points[i]);
        if (pc.z() <= kEpsDepth) {
            continue;
        }
        const double z = pc.z();
        const Vec2 proj(k.fx * pc.x() / z + k.cx, k.fy * pc.y() / z + k.cy);
        const Vec2 r = proj - observed[i];
        sum += r.squaredNorm();

        const Vec3 du_dpc(k.fx / z, 0.0, -k.fx * pc.x() / (z * z));
        const Vec3 dv_dpc(0.0, k.fy / z, -k.fy * pc.y() / (z * z));
        const Vec3 grad_pc = 2.0 * inv * (r.x() * du_dpc + r.y() * dv_dpc);
        res.d_points[i] = pose.rotation.transpose() * grad_pc;
    }
    res.loss = sum * inv;
    return res;
}

}  // namespace dino4d
