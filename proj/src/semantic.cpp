#include "dino4d/semantic.hpp"

#include <cmath>
#include <random>

namespace dino4d {

Eigen::VectorXd label_embedding(std::uint8_t label, int dim, std::uint64_t seed) {
    std::mt19937_64 rng(stage_seed(seed, "label_embedding:" + std::to_string(label)));
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd e(dim);
    for (int i = 0; i < dim; ++i) {
        e[i] = normal(rng);
    }
    e.normalize();
    return e;
}

FeatureMap synth_features(const LabelMap& labels, int dim, int patch_size,
                          std::uint64_t seed, double sigma_feat, int frame) {
    if (dim < 8 || patch_size <= 0 || labels.width <= 0 || labels.height <= 0) {
        throw ConfigInvalid("synth_features: dim >= 8 and positive sizes required");
    }
    FeatureMap fm;
    fm.patch_size = patch_size;
    fm.dim = dim;
    fm.frame = frame;
    fm.patch_width = (labels.width + patch_size - 1) / patch_size;
    fm.patch_height = (labels.height + patch_size - 1) / patch_size;
    fm.data.resize(fm.tokens(), dim);

    std::vector<Eigen::VectorXd> table(256);
    std::mt19937_64 noise_rng(
        stage_seed(seed, "feature_noise:" + std::to_string(frame)));
    std::normal_distribution<double> normal(0.0, 1.0);

    for (int py = 0; py < fm.patch_height; ++py) {
        for (int px = 0; px < fm.patch_width; ++px) {
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim);
            int count = 0;
            for (int dy = 0; dy < patch_size; ++dy) {
                const int y = py * patch_size + dy;
                if (y >= labels.height) {
                    continue;
                }
                for (int dx = 0; dx < patch_size; ++dx) {
                    const int x = px * patch_size + dx;
                    if (x >= labels.width) {
                        continue;
                    }
                    const std::uint8_t id = labels.at(x, y);
                    if (table[id].size() == 0) {
                        table[id] = label_embedding(id, dim, seed);
                    }
                    acc += table[id];
                    ++count;
                }
            }
            acc /= static_cast<double>(count);
            if (sigma_feat > 0) {
                for (int i = 0; i < dim; ++i) {
                    acc[i] += sigma_feat * normal(noise_rng);
                }
            }
            const double n = acc.norm();
            if (n > 0) {
                acc /= n;
            }
            fm.data.row(fm.token_index(px, py)) = acc.transpose();
        }
    }
    return fm;
}

BilinearFootprint bilinear_footprint(const FeatureMap& fm, double u, double v) {
    const double half = (fm.patch_size - 1) * 0.5;
    double gx = (u - half) / fm.patch_size;
    double gy = (v - half) / fm.patch_size;
    const double dgx_du = (gx > 0.0 && gx < fm.patch_width - 1) ? 1.0 / fm.patch_size : 0.0;
    const double dgy_dv = (gy > 0.0 && gy < fm.patch_height - 1) ? 1.0 / fm.patch_size : 0.0;
    gx = std::clamp(gx, 0.0, static_cast<double>(fm.patch_width - 1));
    gy = std::clamp(gy, 0.0, static_cast<double>(fm.patch_height - 1));

    int x0 = std::min(static_cast<int>(std::floor(gx)), fm.patch_width - 2);
    int y0 = std::min(static_cast<int>(std::floor(gy)), fm.patch_height - 2);
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    const int x1 = std::min(x0 + 1, fm.patch_width - 1);
    const int y1 = std::min(y0 + 1, fm.patch_height - 1);
    const double ax = gx - x0;
    const double ay = gy - y0;

    BilinearFootprint f;
    f.idx[0] = fm.token_index(x0, y0);
    f.idx[1] = fm.token_index(x1, y0);
    f.idx[2] = fm.token_index(x0, y1);
    f.idx[3] = fm.token_index(x1, y1);
    f.w[0] = (1 - ax) * (1 - ay);
    f.w[1] = ax * (1 - ay);
    f.w[2] = (1 - ax) * ay;
    f.w[3] = ax * ay;
    f.dw_du[0] = -(1 - ay) * dgx_du;
    f.dw_du[1] = (1 - ay) * dgx_du;
    f.dw_du[2] = -ay * dgx_du;
    f.dw_du[3] = ay * dgx_du;
    f.dw_dv[0] = -(1 - ax) * dgy_dv;
    f.dw_dv[1] = -ax * dgy_dv;
    f.dw_dv[2] = (1 - ax) * dgy_dv;
    f.dw_dv[3] = ax * dgy_dv;
    return f;
}

Eigen::VectorXd sample_feature(const FeatureMap& fm, double u, double v) {
    const BilinearFootprint f = bilinear_footprint(fm, u, v);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(fm.dim);
    for (int k = 0; k < 4; ++k) {
        out += f.w[k] * fm.data.row(f.idx[k]).transpose();
    }
    return out;
}

SemanticLossResult semantic_consistency_loss(const FeatureMap& f_src,
                                             const FeatureMap& f_dst,
                                             const Pointmap& tracking,
                                             const CameraModel& camera_j,
                                             const SemanticLossConfig& cfg) {
    if (f_src.dim != f_dst.dim) {
        throw ShapeMismatch("semantic loss: feature dims differ");
    }
    if (cfg.omega.empty()) {
        throw EmptyOmega("semantic loss: omega is empty");
    }
    const int w = tracking.width;
    const int h = tracking.height;

    SemanticLossResult res;
    res.grad_points.assign(tracking.size(), Vec3::Zero());
    double total = 0;
    std::size_t counted = 0;

    for (const Eigen::Vector2i& p : cfg.omega) {
        if (p.x() < 0 || p.x() >= w || p.y() < 0 || p.y() >= h) {
            throw ConfigInvalid("semantic loss: omega pixel outside the source image");
        }
        const std::size_t pix = tracking.index(p.x(), p.y());
        if (!tracking.valid[pix]) {
            continue;
        }
        ++counted;

        const Vec3& point = tracking.points[pix];
        const auto uv = try_project(point, camera_j);
        if (!uv) {
            total += 2.0;  // off-frustum: maximum penalty, zero gradient
            continue;
        }

        const Eigen::VectorXd a = sample_feature(f_src, p.x(), p.y());
        const BilinearFootprint fp = bilinear_footprint(f_dst, uv->x(), uv->y());
        Eigen::VectorXd b = Eigen::VectorXd::Zero(f_dst.dim);
        for (int k = 0; k < 4; ++k) {
            b += fp.w[k] * f_dst.data.row(fp.idx[k]).transpose();
        }

        const double na = std::max(a.norm(), cfg.eps_norm);
        const double nb_raw = b.norm();
        const double nb = std::max(nb_raw, cfg.eps_norm);
        const double dot = a.dot(b);
        const double cosine = dot / (na * nb);
        total += 1.0 - cosine;

        Eigen::VectorXd dcos_db;
        if (nb_raw > cfg.eps_norm) {
            dcos_db = a / (na * nb) - (cosine / (nb * nb)) * b;
        } else {
            dcos_db = a / (na * nb);
        }
        // b depends on (u, v) through the bilinear weights only.
        double gu = 0, gv = 0;
        for (int k = 0; k < 4; ++k) {
            const double d = dcos_db.dot(f_dst.data.row(fp.idx[k]).transpose());
            gu += fp.dw_du[k] * d;
            gv += fp.dw_dv[k] * d;
        }
        // d(loss term)/d(u,v) = -(gu, gv); chain through the projection.
        const Vec3 pc = camera_j.pose.apply(point);
        const double z = pc.z();
        const Vec3 du_dpc(camera_j.fx / z, 0.0, -camera_j.fx * pc.x() / (z * z));
        const Vec3 dv_dpc(0.0, camera_j.fy / z, -camera_j.fy * pc.y() / (z * z));
        const Vec3 grad_pc = -(gu * du_dpc + gv * dv_dpc);
        res.grad_points[pix] = camera_j.pose.rotation.transpose() * grad_pc;
    }

    if (counted == 0) {
        throw EmptyOmega("semantic loss: every omega pixel is masked invalid");
    }
    if (cfg.mean) {
        const double inv = 1.0 / static_cast<double>(counted);
        total *= inv;
        for (Vec3& g : res.grad_points) {
            g *= inv;
        }
    }
    res.loss = total;
    return res;
}

}  // namespace dino4d
