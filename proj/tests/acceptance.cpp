// Acceptance suite: each criterion prints exactly one PASS/FAIL line and the
// binary exits nonzero if any selected criterion fails.
//
//   acceptance [--cache DIR] [--cli PATH] [criterion...]
//
// With no criterion names every criterion runs. --cache points at a directory
// where trained models and generated scene bundles are reused across
// invocations (the ablation criteria share their training runs). --cli is the
// path to the command-line tool, required only by the cli-smoke criterion.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dino4d/diffusion.hpp"
#include "dino4d/fusion.hpp"
#include "dino4d/geometry.hpp"
#include "dino4d/predictor.hpp"
#include "dino4d/scene.hpp"
#include "dino4d/semantic.hpp"
#include "dino4d/training.hpp"

namespace fs = std::filesystem;
using namespace dino4d;

namespace {

std::string g_cache = "acceptance_cache";
std::string g_cli;

struct Failure {
    std::string detail;
};

void require(bool ok, const std::string& detail) {
    if (!ok) {
        throw Failure{detail};
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

// The default training suite: 8 scenes with the stock generator settings,
// seeded from base seed 1 exactly like the CLI generator would.
std::vector<std::string> default_suite() {
    std::vector<std::string> dirs;
    for (int i = 0; i < 8; ++i) {
        SceneConfig sc;
        sc.seed = stage_seed(1, "scene:" + std::to_string(i));
        std::ostringstream name;
        name << g_cache << "/scenes/scene_" << i;
        if (!fs::exists(name.str() + "/manifest.json")) {
            save_bundle(generate(sc), name.str());
        }
        dirs.push_back(name.str());
    }
    return dirs;
}

// A held-out scene the training suite never sees, with a chosen fraction of
// textureless surface.
std::string held_scene(double textureless_fraction, const std::string& tag) {
    const std::string dir = g_cache + "/" + tag;
    if (!fs::exists(dir + "/manifest.json")) {
        SceneConfig sc;
        sc.textureless_fraction = textureless_fraction;
        sc.seed = stage_seed(99, "scene:0");
        save_bundle(generate(sc), dir);
    }
    return dir;
}

// Trains (or reuses) one ablation model: 4 training scenes, 300 steps with 8
// frame pairs per step, with the semantic consistency weight switched on or
// off. Returns the checkpoint path.
std::string ablation_model(std::uint64_t seed, bool with_semantic) {
    const std::vector<std::string> suite = default_suite();
    const std::string tag = std::string(with_semantic ? "abl_sem_" : "abl_nosem_") +
                            std::to_string(seed);
    const std::string out = g_cache + "/" + tag;
    const std::string ckpt = out + "/checkpoint.ckpt";
    if (!fs::exists(ckpt)) {
        TrainConfig tc;
        tc.scene_dirs.assign(suite.begin(), suite.begin() + 4);
        tc.steps = 300;
        tc.pairs_per_step = 8;
        tc.weights.sem = with_semantic ? 0.5 : 0.0;
        tc.seed = seed;
        tc.out_dir = out;
        train(tc);
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// criteria

// chamfer_distance and apd agree with exhaustive brute-force oracles to 1e-9
// relative on 50 random instances of up to 128 points.
void metric_oracle_equivalence() {
    std::mt19937_64 rng(100);
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    const auto close = [](double a, double b) {
        return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b));
    };
    for (int inst = 0; inst < 50; ++inst) {
        const int na = 1 + static_cast<int>(rng() % 128);
        const int nb = 1 + static_cast<int>(rng() % 128);
        std::vector<Vec3> a(na), b(nb);
        for (auto& p : a) p = Vec3(uni(rng), uni(rng), uni(rng));
        for (auto& p : b) p = Vec3(uni(rng), uni(rng), uni(rng));

        const auto directed = [](const std::vector<Vec3>& from,
                                 const std::vector<Vec3>& to) {
            double sum = 0;
            for (const auto& p : from) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& q : to) {
                    best = std::min(best, (p - q).norm());
                }
                sum += best;
            }
            return sum / static_cast<double>(from.size());
        };
        const double oracle = 100.0 * 0.5 * (directed(a, b) + directed(b, a));
        require(close(chamfer_distance(a, b), oracle),
                "chamfer mismatch on instance " + std::to_string(inst));

        // APD over a random trajectory pair with random visibility
        const int q = 2 + static_cast<int>(rng() % 12);
        const int t = 2 + static_cast<int>(rng() % 8);
        TrajectorySet pred(q, t), truth(q, t);
        for (std::size_t i = 0; i < truth.positions.size(); ++i) {
            truth.positions[i] = Vec3(uni(rng), uni(rng), uni(rng));
            pred.positions[i] =
                truth.positions[i] + 0.1 * Vec3(uni(rng), uni(rng), uni(rng));
            truth.visible[i] = (rng() % 4) != 0;
        }
        truth.visible[0] = 1;  // keep at least one countable pair
        const std::vector<double> thr{0.05, 0.15, 0.3};
        const std::vector<double> got = apd(pred, truth, thr);
        for (std::size_t k = 0; k < thr.size(); ++k) {
            std::size_t vis = 0, within = 0;
            for (int qi = 0; qi < q; ++qi) {
                for (int ti = 0; ti < t; ++ti) {
                    const std::size_t idx = truth.index(qi, ti);
                    if (!truth.visible[idx]) continue;
                    ++vis;
                    if ((pred.positions[idx] - truth.positions[idx]).norm() <
                        thr[k]) {
                        ++within;
                    }
                }
            }
            const double oracle_apd =
                100.0 * static_cast<double>(within) / static_cast<double>(vis);
            require(close(got[k], oracle_apd),
                    "apd mismatch on instance " + std::to_string(inst));
        }
    }
}

// Every backward pass (semantic loss, fusion adapter, geometric loss,
// reprojection loss under the frozen-pose convention, diffusion loss) matches
// central finite differences with h = 1e-5 at <= 1e-4 relative error on 20
// random instances each.
void gradient_suite() {
    const double h = 1e-5;
    const auto rel_ok = [](double fd, double analytic) {
        return std::abs(fd - analytic) / std::max(1.0, std::abs(fd)) <= 1e-4;
    };

    // fusion adapter
    {
        std::mt19937_64 rng(200);
        std::normal_distribution<double> normal(0.0, 0.5);
        const auto randm = [&](int r, int c) {
            Eigen::MatrixXd m(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) m(i, j) = normal(rng);
            return m;
        };
        for (int inst = 0; inst < 20; ++inst) {
            AdapterParams p;
            p.w_q = randm(4, 3);
            p.w_k = randm(5, 3);
            p.w_v = randm(5, 3);
            p.w_o = randm(3, 4);
            const Eigen::MatrixXd fg = randm(6, 4), fsem = randm(7, 5),
                                  up = randm(6, 4);
            FuseCache cache;
            fuse(fg, fsem, p, &cache);
            const FuseBackwardResult back = fuse_backward(up, cache, p);
            const auto loss = [&](const AdapterParams& pp) {
                return (fuse(fg, fsem, pp).array() * up.array()).sum();
            };
            const auto probe = [&](Eigen::MatrixXd AdapterParams::* f,
                                   const Eigen::MatrixXd& analytic) {
                for (int k = 0; k < 6; ++k) {
                    const int i = static_cast<int>(rng() % analytic.rows());
                    const int j = static_cast<int>(rng() % analytic.cols());
                    AdapterParams plus = p, minus = p;
                    (plus.*f)(i, j) += h;
                    (minus.*f)(i, j) -= h;
                    require(rel_ok((loss(plus) - loss(minus)) / (2 * h),
                                   analytic(i, j)),
                            "fusion gradient mismatch");
                }
            };
            probe(&AdapterParams::w_q, back.grads.w_q);
            probe(&AdapterParams::w_k, back.grads.w_k);
            probe(&AdapterParams::w_v, back.grads.w_v);
            probe(&AdapterParams::w_o, back.grads.w_o);
        }
    }

    // semantic consistency loss w.r.t. the tracked 3D points
    {
        std::mt19937_64 rng(201);
        std::uniform_real_distribution<double> upix(5.0, 23.0);
        std::uniform_real_distribution<double> udepth(1.5, 3.0);
        for (int inst = 0; inst < 20; ++inst) {
            const int w = 28, ps = 7, dim = 8;
            LabelMap la{w, w, std::vector<std::uint8_t>(w * w)};
            LabelMap lb{w, w, std::vector<std::uint8_t>(w * w)};
            for (auto& v : la.labels) v = static_cast<std::uint8_t>(rng() % 3);
            for (auto& v : lb.labels) v = static_cast<std::uint8_t>(rng() % 3);
            const FeatureMap fa = synth_features(la, dim, ps, rng(), 0.05, 0);
            const FeatureMap fb = synth_features(lb, dim, ps, rng(), 0.05, 1);
            CameraModel cam;
            cam.fx = cam.fy = 30;
            cam.cx = cam.cy = 14;
            Pointmap track(w, w, 0, 1);
            SemanticLossConfig cfg;
            for (int k = 0; k < 6; ++k) {
                const Eigen::Vector2i px(static_cast<int>(rng() % w),
                                         static_cast<int>(rng() % w));
                cfg.omega.push_back(px);
                track.at(px.x(), px.y()) =
                    unproject(Vec2(upix(rng), upix(rng)), udepth(rng), cam);
            }
            const SemanticLossResult base =
                semantic_consistency_loss(fa, fb, track, cam, cfg);
            for (const auto& px : cfg.omega) {
                const std::size_t idx = track.index(px.x(), px.y());
                for (int c = 0; c < 3; ++c) {
                    Pointmap plus = track, minus = track;
                    plus.points[idx][c] += h;
                    minus.points[idx][c] -= h;
                    const double fd =
                        (semantic_consistency_loss(fa, fb, plus, cam, cfg).loss -
                         semantic_consistency_loss(fa, fb, minus, cam, cfg).loss) /
                        (2 * h);
                    require(rel_ok(fd, base.grad_points[idx][c]),
                            "semantic gradient mismatch");
                }
            }
        }
    }

    // geometric loss w.r.t. predicted points of both branches
    {
        std::mt19937_64 rng(202);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (int inst = 0; inst < 20; ++inst) {
            const int w = 5, hh = 4;
            PairPrediction pred;
            pred.tracking = Pointmap(w, hh, 0, 1);
            pred.reconstruction = Pointmap(w, hh, 1, 1);
            Pointmap gt_t(w, hh, 0, 1), gt_r(w, hh, 1, 1);
            for (std::size_t i = 0; i < gt_t.size(); ++i) {
                pred.tracking.points[i] = Vec3(normal(rng), normal(rng), normal(rng));
                pred.reconstruction.points[i] =
                    Vec3(normal(rng), normal(rng), normal(rng));
                gt_t.points[i] = Vec3(normal(rng), normal(rng), normal(rng));
                gt_r.points[i] = Vec3(normal(rng), normal(rng), normal(rng));
                gt_t.valid[i] = (rng() % 5) != 0;
                gt_r.valid[i] = (rng() % 5) != 0;
            }
            gt_t.valid[0] = gt_r.valid[0] = 1;
            const GeometricLossResult base = geometric_loss(pred, gt_t, gt_r);
            for (int k = 0; k < 8; ++k) {
                const std::size_t i = rng() % gt_t.size();
                const int c = static_cast<int>(rng() % 3);
                PairPrediction plus = pred, minus = pred;
                plus.tracking.points[i][c] += h;
                minus.tracking.points[i][c] -= h;
                const double fd = (geometric_loss(plus, gt_t, gt_r).loss -
                                   geometric_loss(minus, gt_t, gt_r).loss) /
                                  (2 * h);
                require(rel_ok(fd, base.d_tracking[i][c]),
                        "geometric gradient mismatch (tracking)");
                plus = pred;
                minus = pred;
                plus.reconstruction.points[i][c] += h;
                minus.reconstruction.points[i][c] -= h;
                const double fd2 = (geometric_loss(plus, gt_t, gt_r).loss -
                                    geometric_loss(minus, gt_t, gt_r).loss) /
                                   (2 * h);
                require(rel_ok(fd2, base.d_reconstruction[i][c]),
                        "geometric gradient mismatch (reconstruction)");
            }
        }
    }

    // reprojection loss under a frozen pose w.r.t. the 3D points
    {
        std::mt19937_64 rng(203);
        std::normal_distribution<double> normal(0.0, 0.3);
        std::uniform_real_distribution<double> udepth(2.0, 4.0);
        for (int inst = 0; inst < 20; ++inst) {
            Intrinsics k{40, 40, 8, 8};
            CameraModel cam = CameraModel::make(Pose{}, k);
            const int w = 4, hh = 4;
            Pointmap pred(w, hh, 1, 1);
            std::vector<Vec2> observed(pred.size());
            for (std::size_t i = 0; i < pred.size(); ++i) {
                pred.points[i] = Vec3(normal(rng), normal(rng), udepth(rng));
                observed[i] =
                    project(pred.points[i], cam) + Vec2(normal(rng), normal(rng));
            }
            Pose pose;
            pose.rotation = exp_so3(Vec3(normal(rng), normal(rng), normal(rng)) * 0.1);
            pose.translation = Vec3(normal(rng), normal(rng), normal(rng)) * 0.1;
            const ReprojectionLossResult base =
                reprojection_loss(pred, observed, k, pose);
            for (int t = 0; t < 8; ++t) {
                const std::size_t i = rng() % pred.size();
                const int c = static_cast<int>(rng() % 3);
                Pointmap plus = pred, minus = pred;
                plus.points[i][c] += h;
                minus.points[i][c] -= h;
                const double fd =
                    (reprojection_loss(plus, observed, k, pose).loss -
                     reprojection_loss(minus, observed, k, pose).loss) /
                    (2 * h);
                require(rel_ok(fd, base.d_points[i][c]),
                        "reprojection gradient mismatch");
            }
        }
    }

    // diffusion (denoiser) loss w.r.t. all three weight matrices
    {
        std::mt19937_64 rng(204);
        std::normal_distribution<double> normal(0.0, 1.0);
        const DiffusionSchedule s = DiffusionSchedule::linear();
        for (int inst = 0; inst < 20; ++inst) {
            DenoiserConfig cfg;
            cfg.cond_dim = 4;
            cfg.hidden = 6;
            DenoiserParams p = DenoiserParams::init(cfg, rng());
            p.w3.setRandom();
            p.w3 *= 0.3;
            Residual r(3, 3);
            for (auto& v : r.values) v = Vec3(normal(rng), normal(rng), normal(rng));
            std::vector<Vec3> eps(r.size());
            for (auto& v : eps) v = Vec3(normal(rng), normal(rng), normal(rng));
            const Eigen::MatrixXd cond = Eigen::MatrixXd::Random(r.size(), 4);
            const int t = static_cast<int>(rng() % s.num_steps);
            const DiffusionLossResult base = diffusion_loss(p, r, cond, t, eps, s);
            const auto probe = [&](Eigen::MatrixXd DenoiserParams::* f,
                                   const Eigen::MatrixXd& analytic) {
                for (int k = 0; k < 6; ++k) {
                    const int i = static_cast<int>(rng() % analytic.rows());
                    const int j = static_cast<int>(rng() % analytic.cols());
                    DenoiserParams plus = p, minus = p;
                    (plus.*f)(i, j) += h;
                    (minus.*f)(i, j) -= h;
                    const double fd =
                        (diffusion_loss(plus, r, cond, t, eps, s).loss -
                         diffusion_loss(minus, r, cond, t, eps, s).loss) /
                        (2 * h);
                    require(rel_ok(fd, analytic(i, j)),
                            "diffusion gradient mismatch");
                }
            };
            probe(&DenoiserParams::w1, base.grads.w1);
            probe(&DenoiserParams::w2, base.grads.w2);
            probe(&DenoiserParams::w3, base.grads.w3);
        }
    }
}

// With the exact noise oracle, the 5-step reverse process recovers the
// residual with MSE <= 1e-3 * Var on 20 random residual grids.
void diffusion_closed_loop() {
    std::mt19937_64 rng(300);
    std::normal_distribution<double> normal(0.0, 0.7);
    const DiffusionSchedule s = DiffusionSchedule::linear();
    for (int inst = 0; inst < 20; ++inst) {
        const int w = 6, h = 5;
        Pointmap coarse(w, h, 1, 1);
        for (auto& p : coarse.points) p = Vec3::Random();
        Eigen::MatrixXd target(static_cast<Eigen::Index>(w) * h, 3);
        double var = 0;
        for (Eigen::Index i = 0; i < target.rows(); ++i) {
            const Vec3 d(normal(rng), normal(rng), normal(rng));
            target.row(i) = d.transpose();
            var += d.squaredNorm();
        }
        var /= 3.0 * static_cast<double>(target.rows());

        const NoisePredictor oracle = [&](const Eigen::MatrixXd& z, int t,
                                          const Eigen::MatrixXd&) {
            const double ab = s.alpha_bar[t];
            return Eigen::MatrixXd((z - std::sqrt(ab) * target) /
                                   std::sqrt(1.0 - ab));
        };
        const Eigen::MatrixXd cond = Eigen::MatrixXd::Zero(target.rows(), 1);
        const Pointmap refined = refine(coarse, cond, oracle, s, 1.0, 9000 + inst);
        double mse = 0;
        for (Eigen::Index i = 0; i < target.rows(); ++i) {
            const Vec3 got = refined.points[i] - coarse.points[i];
            mse += (got - Vec3(target.row(i).transpose())).squaredNorm();
        }
        mse /= 3.0 * static_cast<double>(target.rows());
        require(mse <= 1e-3 * var, "closed-loop MSE too large on instance " +
                                       std::to_string(inst));
    }
}

// Gauss-Newton pose estimation recovers noise-free synthetic poses (rotation
// <= 30 degrees, translation <= 0.5 m) within 1e-6 on 20 random draws.
void pnp_recovery() {
    std::mt19937_64 rng(400);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::uniform_real_distribution<double> udepth(2.0, 5.0);
    std::uniform_real_distribution<double> uangle(0.0, 30.0 * M_PI / 180.0);
    const Intrinsics k{100, 100, 56, 56};
    for (int inst = 0; inst < 20; ++inst) {
        Vec3 axis(uni(rng), uni(rng), uni(rng));
        if (axis.norm() < 1e-6) axis = Vec3::UnitX();
        Pose truth;
        truth.rotation = exp_so3(axis.normalized() * uangle(rng));
        truth.translation = 0.5 * Vec3(uni(rng), uni(rng), uni(rng)).normalized() *
                            std::abs(uni(rng));
        std::vector<Vec3> points;
        std::vector<Vec2> pixels;
        const CameraModel cam = CameraModel::make(truth, k);
        while (points.size() < 40) {
            const Vec3 p(uni(rng), uni(rng), udepth(rng));
            const auto uv = try_project(p, cam);
            if (uv) {
                points.push_back(p);
                pixels.push_back(*uv);
            }
        }
        const Pose est = estimate_pose_pnp(points, pixels, k, Pose{});
        require(rotation_distance(est.rotation, truth.rotation) <= 1e-6,
                "rotation error too large on draw " + std::to_string(inst));
        require((est.translation - truth.translation).norm() <= 1e-6,
                "translation error too large on draw " + std::to_string(inst));
    }
}

// Every ground-truth point of every scene in the default suite projects back
// onto its pixel within 1e-6. The scenes are checked as generated (bundle
// serialization quantizes pointmaps to float32, which is a storage choice,
// not a generator property).
void scene_projection_round_trip() {
    double worst = 0;
    for (int i = 0; i < 8; ++i) {
        SceneConfig sc;
        sc.seed = stage_seed(1, "scene:" + std::to_string(i));
        const SceneSample s = generate(sc);
        for (int t = 0; t < s.config.frames; ++t) {
            const Pointmap& pm = s.gt_recon[t];
            for (int y = 0; y < pm.height; ++y) {
                for (int x = 0; x < pm.width; ++x) {
                    if (!pm.is_valid(x, y)) continue;
                    const Vec2 uv = project(pm.at(x, y), s.cameras[t]);
                    worst = std::max(worst, (uv - Vec2(x, y)).norm());
                }
            }
        }
    }
    require(worst <= 1e-6,
            "worst round-trip error " + std::to_string(worst) + " px");
}

// 500 training steps on the default 8-scene suite at least halve the total
// loss, within 10 minutes.
void e2e_training() {
    TrainConfig tc;
    tc.scene_dirs = default_suite();
    tc.steps = 500;
    tc.seed = 1;
    tc.out_dir = g_cache + "/e2e";
    fs::remove_all(tc.out_dir);
    const TrainResult r = train(tc);
    std::ostringstream msg;
    msg << "loss " << r.initial_total << " -> " << r.final_total;
    require(r.final_total <= 0.5 * r.initial_total, msg.str());
}

// Over seeds 1..3, the model trained with the semantic consistency loss beats
// the one trained without it at the tightest APD threshold on a held-out
// mostly-textureless scene in at least 2 of 3 seeds.
void semantic_ablation() {
    const SceneSample held = load_bundle(held_scene(0.85, "held_textureless"));
    EvalConfig ec;
    ec.apd_thresholds = {0.3, 0.5, 1.0};
    int wins = 0;
    std::ostringstream detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        const Model sem = load_checkpoint(ablation_model(seed, true));
        const Model nosem = load_checkpoint(ablation_model(seed, false));
        const double a = evaluate(sem, held, ec).apd_values[0];
        const double b = evaluate(nosem, held, ec).apd_values[0];
        wins += a > b ? 1 : 0;
        detail << (seed > 1 ? ", " : "") << "seed " << seed << ": " << a
               << (a > b ? " > " : " <= ") << b;
    }
    require(wins >= 2, detail.str());
}

// On the same trained models, diffusion refinement lowers the Chamfer
// distance on a held-out scene in at least 2 of 3 seeds.
void refinement_ablation() {
    const SceneSample held = load_bundle(held_scene(0.6, "held_refine"));
    EvalConfig ec;
    ec.refine = true;
    int wins = 0;
    std::ostringstream detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        const Model m = load_checkpoint(ablation_model(seed, true));
        const EvalReport r = evaluate(m, held, ec);
        wins += r.cd_refined_cm < r.cd_coarse_cm ? 1 : 0;
        detail << (seed > 1 ? ", " : "") << "seed " << seed << ": "
               << r.cd_refined_cm << " vs " << r.cd_coarse_cm;
    }
    require(wins >= 2, detail.str());
}

// Evaluation over sequence lengths 8/16/32/64 runs exactly T-1 pairs and its
// wall clock grows linearly in T (least-squares fit R^2 >= 0.98).
void linear_complexity() {
    const std::vector<int> lengths{8, 16, 32, 64};
    std::vector<double> walls;
    for (int T : lengths) {
        SceneConfig sc;
        sc.frames = T;
        sc.seed = stage_seed(5, "lin:" + std::to_string(T));
        const SceneSample scene = generate(sc);
        ModelConfig mc;
        mc.predictor.nominal = scene.cameras[0].intrinsics();
        mc.predictor.d0_init = 4.0;
        const Model model = Model::init(mc, 1);
        double best = std::numeric_limits<double>::infinity();
        for (int rep = 0; rep < 3; ++rep) {
            const EvalReport r = evaluate(model, scene, EvalConfig{});
            require(r.pairs_executed == T - 1,
                    "expected " + std::to_string(T - 1) + " pairs, ran " +
                        std::to_string(r.pairs_executed));
            best = std::min(best, r.wall_time_s);
        }
        walls.push_back(best);
    }
    const double n = static_cast<double>(lengths.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < walls.size(); ++i) {
        sx += lengths[i];
        sy += walls[i];
        sxx += static_cast<double>(lengths[i]) * lengths[i];
        sxy += lengths[i] * walls[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < walls.size(); ++i) {
        ss_res += std::pow(walls[i] - (slope * lengths[i] + intercept), 2);
        ss_tot += std::pow(walls[i] - sy / n, 2);
    }
    const double r2 = 1.0 - ss_res / ss_tot;
    std::ostringstream msg;
    msg << "R^2 = " << r2;
    require(r2 >= 0.98, msg.str());
}

// The command-line tool round trip (generate -> train 50 steps -> evaluate ->
// export) exits 0, the report carries the expected fields, and the exported
// point cloud parses as valid PLY.
void cli_smoke() {
    require(!g_cli.empty() && fs::exists(g_cli),
            "tool binary not found (pass --cli)");
    const std::string dir = g_cache + "/cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto run = [&](const std::string& args) {
        const std::string cmd =
            g_cli + " " + args + " > " + dir + "/last.log 2>&1";
        const int rc = std::system(cmd.c_str());
        require(WIFEXITED(rc) && WEXITSTATUS(rc) == 0,
                "command failed: " + args);
    };
    std::ofstream(dir + "/gen.json") << R"({"num_scenes": 4})";
    run("gen --config " + dir + "/gen.json --out " + dir + "/scenes --seed 7");
    std::string scene_args;
    for (int i = 0; i < 4; ++i) {
        scene_args += " " + dir + "/scenes/scene_00" + std::to_string(i);
    }
    run("train --scenes" + scene_args + " --steps 50 --seed 3 --out " + dir +
        "/run");
    run("eval --checkpoint " + dir + "/run/checkpoint.ckpt --scenes " + dir +
        "/scenes/scene_000 --out " + dir + "/eval");
    run("export --scene " + dir + "/scenes/scene_000 --frame 2 --kind recon "
        "--ply " + dir + "/cloud.ply");

    // the report is well-formed JSON with the documented fields
    std::ifstream rf(dir + "/eval/report.json");
    require(rf.good(), "report.json missing");
    nlohmann::json report;
    rf >> report;
    require(report.contains("scenes") && report["scenes"].is_array() &&
                report["scenes"].size() == 1,
            "report.json: bad scenes array");
    for (const char* key : {"apd", "cd_coarse_cm", "pairs_executed",
                            "num_points", "scene_id"}) {
        require(report["aggregate"].contains(key),
                std::string("report.json aggregate missing ") + key);
    }

    // the exported point cloud is parseable PLY with the declared vertex count
    std::ifstream ply(dir + "/cloud.ply");
    std::string line;
    std::getline(ply, line);
    require(line == "ply", "PLY magic missing");
    long vertices = -1;
    while (std::getline(ply, line) && line != "end_header") {
        std::istringstream ss(line);
        std::string a, b;
        ss >> a >> b;
        if (a == "element" && b == "vertex") {
            ss >> vertices;
        }
    }
    require(line == "end_header" && vertices > 0, "PLY header malformed");
    long rows = 0;
    while (std::getline(ply, line)) {
        std::istringstream ss(line);
        double x, y, z;
        require(static_cast<bool>(ss >> x >> y >> z),
                "PLY vertex row malformed");
        ++rows;
    }
    require(rows == vertices, "PLY vertex count mismatch");
}

struct Criterion {
    std::string name;
    std::function<void()> fn;
    double budget_s;  // <= 0: no runtime budget
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> all{
        {"metric-oracle-equivalence", metric_oracle_equivalence, 10},
        {"gradient-suite", gradient_suite, 60},
        {"diffusion-closed-loop", diffusion_closed_loop, 10},
        {"pnp-recovery", pnp_recovery, 5},
        {"scene-projection-round-trip", scene_projection_round_trip, 0},
        {"e2e-training", e2e_training, 600},
        {"semantic-ablation", semantic_ablation, 0},
        {"refinement-ablation", refinement_ablation, 0},
        {"linear-complexity", linear_complexity, 0},
        {"cli-smoke", cli_smoke, 300},
    };
    return all;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> selected;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--cache" && i + 1 < argc) {
            g_cache = argv[++i];
        } else if (arg == "--cli" && i + 1 < argc) {
            g_cli = argv[++i];
        } else {
            selected.push_back(arg);
        }
    }
    fs::create_directories(g_cache);

    bool all_ok = true;
    for (const Criterion& c : criteria()) {
        if (!selected.empty() &&
            std::find(selected.begin(), selected.end(), c.name) ==
                selected.end()) {
            continue;
        }
        const auto start = std::chrono::steady_clock::now();
        std::string failure;
        try {
            c.fn();
        } catch (const Failure& f) {
            failure = f.detail;
        } catch (const std::exception& e) {
            failure = std::string("unexpected exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          start)
                .count();
        if (failure.empty() && c.budget_s > 0 && secs > c.budget_s) {
            std::ostringstream msg;
            msg << "runtime " << secs << " s exceeds budget " << c.budget_s
                << " s";
            failure = msg.str();
        }
        std::ostringstream line;
        line.setf(std::ios::fixed);
        line.precision(1);
        if (failure.empty()) {
            line << "PASS: " << c.name << " (" << secs << "s)";
        } else {
            line << "FAIL: " << c.name << " (" << secs << "s) — " << failure;
            all_ok = false;
        }
        std::cout << line.str() << std::endl;
    }
    return all_ok ? 0 : 1;
}
