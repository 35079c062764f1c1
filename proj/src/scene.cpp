#include "dino4d/scene.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>

#include "dino4d/io.hpp"

namespace dino4d {

namespace {

constexpr double kPlaneZ = 4.5;
constexpr double kPlaneExtent = 2.8;
const Vec3 kLookTarget(0.0, 0.0, 2.5);

struct SphereSpec {
    Vec3 base_center;
    double radius = 0.3;
    Vec3 motion_freq;
    Vec3 motion_phase;
    Vec3 spin_axis;       // rigid spheres only
    double spin_rate = 0; // radians per frame
    bool breathing = false;
    double breath_freq = 0.25;
    double breath_phase = 0;
};

struct SceneModel {
    SceneConfig cfg;
    std::vector<SphereSpec> spheres;
    double textureless_x = 0;

    Vec3 center_at(int k, double t) const {
        const SphereSpec& s = spheres[k];
        return s.base_center +
               cfg.motion_amplitude *
                   Vec3(std::sin(s.motion_freq.x() * t + s.motion_phase.x()),
                        std::sin(s.motion_freq.y() * t + s.motion_phase.y()),
                        0.5 * std::sin(s.motion_freq.z() * t + s.motion_phase.z()));
    }
    double radius_at(int k, double t) const {
        const SphereSpec& s = spheres[k];
        if (!s.breathing) {
            return s.radius;
        }
        return s.radius * (1.0 + 0.25 * std::sin(s.breath_freq * t + s.breath_phase));
    }
    Mat3 spin_at(int k, double t) const {
        const SphereSpec& s = spheres[k];
        if (s.breathing) {
            return Mat3::Identity();
        }
        return exp_so3(s.spin_axis * (s.spin_rate * t));
    }
};

SceneModel build_model(const SceneConfig& cfg) {
    SceneModel m;
    m.cfg = cfg;
    m.textureless_x = kPlaneExtent * (2.0 * cfg.textureless_fraction - 1.0);

    std::mt19937_64 rng(stage_seed(cfg.seed, "scene_layout"));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    std::uniform_real_distribution<double> uni01(0.0, 1.0);
    for (int k = 0; k < cfg.num_objects; ++k) {
        SphereSpec s;
        s.base_center = kLookTarget + Vec3(0.9 * uni(rng), 0.7 * uni(rng), 0.4 * uni(rng));
        s.radius = 0.22 + 0.15 * uni01(rng);
        s.motion_freq = Vec3(0.10 + 0.18 * uni01(rng), 0.10 + 0.18 * uni01(rng),
                             0.10 + 0.18 * uni01(rng));
        s.motion_phase = Vec3(6.28 * uni01(rng), 6.28 * uni01(rng), 6.28 * uni01(rng));
        s.spin_axis = Vec3(uni(rng), uni(rng), uni(rng));
        if (s.spin_axis.norm() < 1e-6) {
            s.spin_axis = Vec3(0, 0, 1);
        }
        s.spin_axis.normalize();
        s.spin_rate = 0.05 + 0.10 * uni01(rng);
        s.breathing = (k == cfg.num_objects - 1);  // last object deforms
        s.breath_phase = 6.28 * uni01(rng);
        m.spheres.push_back(s);
    }
    return m;
}

CameraModel camera_at(const SceneConfig& cfg, double t) {
    const double theta = cfg.orbit_speed * (t - 0.5 * (cfg.frames - 1));
    const Vec3 pos = kLookTarget +
                     cfg.orbit_radius * Vec3(std::sin(theta),
                                             0.12 * std::sin(0.7 * theta + 1.0),
                                             -std::cos(theta));
    const Vec3 fwd = (kLookTarget - pos).normalized();
    Vec3 right = Vec3(0, 1, 0).cross(fwd).normalized();
    const Vec3 down = fwd.cross(right);
    Mat3 r_cw;  // camera axes in world coordinates, columns
    r_cw.col(0) = right;
    r_cw.col(1) = down;
    r_cw.col(2) = fwd;

    CameraModel cam;
    cam.pose.rotation = r_cw.transpose();
    cam.pose.translation = -(cam.pose.rotation * pos);
    cam.fx = cam.fy = static_cast<double>(cfg.width);
    cam.cx = 0.5 * cfg.width;
    cam.cy = 0.5 * cfg.height;
    return cam;
}

// surface 0 = background plane; k+1 = sphere k
struct Hit {
    double depth = 0;  // camera-frame z of the hit
    int surface = -1;
    Vec3 point;     // world coordinates
    Vec3 material;  // plane: world point; sphere: unit direction in object frame
};

std::optional<Hit> raycast(const SceneModel& m, double t, const Vec3& origin,
                           const Vec3& dir) {
    std::optional<Hit> best;
    auto consider = [&](double s, int surface) {
        if (s > 1e-6 && (!best || s < best->depth)) {
            Hit h;
            h.depth = s;
            h.surface = surface;
            h.point = origin + s * dir;
            best = h;
        }
    };
    if (std::abs(dir.z()) > 1e-12) {
        consider((kPlaneZ - origin.z()) / dir.z(), 0);
    }
    for (std::size_t k = 0; k < m.spheres.size(); ++k) {
        const Vec3 c = m.center_at(static_cast<int>(k), t);
        const double r = m.radius_at(static_cast<int>(k), t);
        const Vec3 oc = origin - c;
        const double a = dir.squaredNorm();
        const double b = oc.dot(dir);
        const double disc = b * b - a * (oc.squaredNorm() - r * r);
        if (disc < 0) {
            continue;
        }
        const double sq = std::sqrt(disc);
        consider((-b - sq) / a, static_cast<int>(k) + 1);
        consider((-b + sq) / a, static_cast<int>(k) + 1);
    }
    if (best) {
        if (best->surface == 0) {
            best->material = best->point;
        } else {
            const int k = best->surface - 1;
            const Vec3 n = (best->point - m.center_at(k, t)) / m.radius_at(k, t);
            best->material = m.spin_at(k, t).transpose() * n;
        }
    }
    return best;
}

Vec3 material_position(const SceneModel& m, int surface, const Vec3& material,
                       double t) {
    if (surface == 0) {
        return material;  // plane is static
    }
    const int k = surface - 1;
    return m.center_at(k, t) + m.radius_at(k, t) * (m.spin_at(k, t) * material);
}

double texture_intensity(const SceneModel& m, int surface, const Vec3& material) {
    if (surface == 0) {
        if (material.x() < m.textureless_x) {
            return 0.55;
        }
        const int cell = static_cast<int>(std::floor(material.x() / 0.3)) +
                         static_cast<int>(std::floor(material.y() / 0.3));
        return ((cell % 2 + 2) % 2 == 0) ? 0.75 : 0.35;
    }
    const Vec3& d = material;
    const double az = std::atan2(d.y(), d.x());
    if (m.spheres[surface - 1].breathing) {
        return std::clamp(0.5 + 0.3 * std::sin(5.0 * az) * std::cos(3.5 * d.z()), 0.0, 1.0);
    }
    return std::clamp(0.5 + 0.25 * std::sin(7.0 * az) + 0.2 * d.z(), 0.0, 1.0);
}

std::uint8_t texture_label(const SceneModel& m, int surface, const Vec3& material) {
    if (surface == 0) {
        return material.x() < m.textureless_x ? 1 : 0;
    }
    return static_cast<std::uint8_t>(surface + 1);
}

Vec3 pixel_ray_world(const CameraModel& cam, double u, double v) {
    const Vec3 dc((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    return cam.pose.rotation.transpose() * dc;
}

Vec3 camera_center(const CameraModel& cam) {
    return -(cam.pose.rotation.transpose() * cam.pose.translation);
}

}  // namespace

SceneSample generate(const SceneConfig& config) {
    if (config.frames < 2 || config.width <= 0 || config.height <= 0 ||
        config.width % config.patch_size != 0 ||
        config.height % config.patch_size != 0 ||
        config.textureless_fraction < 0 || config.textureless_fraction > 1) {
        throw ConfigInvalid("scene config: invalid dimensions or fractions");
    }
    const SceneModel model = build_model(config);

    SceneSample out;
    out.config = config;

    // frame-0 material records drive tracking pointmaps and trajectories
    struct Record {
        int surface = -1;
        Vec3 material;
    };
    std::vector<Record> frame0(static_cast<std::size_t>(config.width) * config.height);

    for (int t = 0; t < config.frames; ++t) {
        const CameraModel cam = camera_at(config, t);
        const Vec3 origin = camera_center(cam);
        Image img(config.width, config.height);
        LabelMap lab;
        lab.width = config.width;
        lab.height = config.height;
        lab.labels.assign(img.pixels.size(), 0);
        Pointmap recon(config.width, config.height, t, t);

        for (int y = 0; y < config.height; ++y) {
            for (int x = 0; x < config.width; ++x) {
                const Vec3 dir = pixel_ray_world(cam, x, y);
                const auto hit = raycast(model, t, origin, dir);
                const std::size_t idx = recon.index(x, y);
                if (!hit) {
                    recon.valid[idx] = 0;
                    continue;
                }
                recon.points[idx] = hit->point;
                img.pixels[idx] = texture_intensity(model, hit->surface, hit->material);
                lab.labels[idx] = texture_label(model, hit->surface, hit->material);
                if (t == 0) {
                    frame0[idx] = {hit->surface, hit->material};
                }
            }
        }
        out.cameras.push_back(cam);
        out.images.push_back(std::move(img));
        out.labels.push_back(std::move(lab));
        out.gt_recon.push_back(std::move(recon));
    }

    for (int t = 0; t < config.frames; ++t) {
        Pointmap track(config.width, config.height, 0, t);
        for (std::size_t idx = 0; idx < frame0.size(); ++idx) {
            if (frame0[idx].surface < 0) {
                track.valid[idx] = 0;
                continue;
            }
            track.points[idx] =
                material_position(model, frame0[idx].surface, frame0[idx].material, t);
        }
        out.gt_tracking.push_back(std::move(track));
    }

    // trajectory queries on a pixel grid of frame 0
    std::vector<std::size_t> query_pixels;
    const int s0 = config.query_stride / 2;
    for (int y = s0; y < config.height; y += config.query_stride) {
        for (int x = s0; x < config.width; x += config.query_stride) {
            const std::size_t idx = static_cast<std::size_t>(y) * config.width + x;
            if (frame0[idx].surface >= 0) {
                query_pixels.push_back(idx);
            }
        }
    }
    out.gt_trajectories = TrajectorySet(static_cast<int>(query_pixels.size()),
                                        config.frames);
    for (int q = 0; q < out.gt_trajectories.num_queries; ++q) {
        const std::size_t qi = query_pixels[q];
        out.query_pixels.emplace_back(static_cast<int>(qi % config.width),
                                      static_cast<int>(qi / config.width));
        const Record& rec = frame0[qi];
        for (int t = 0; t < config.frames; ++t) {
            const Vec3 p = material_position(model, rec.surface, rec.material, t);
            out.gt_trajectories.at(q, t) = p;

            bool vis = false;
            const CameraModel& cam = out.cameras[t];
            const auto uv = try_project(p, cam);
            if (uv && uv->x() >= 0 && uv->x() <= config.width - 1 && uv->y() >= 0 &&
                uv->y() <= config.height - 1) {
                const double depth = cam.pose.apply(p).z();
                const Vec3 dir = pixel_ray_world(cam, uv->x(), uv->y());
                const auto hit = raycast(model, t, camera_center(cam), dir);
                vis = hit && hit->depth >= depth - 1e-6;
            }
            out.gt_trajectories.visible[out.gt_trajectories.index(q, t)] = vis ? 1 : 0;
        }
    }
    return out;
}

std::vector<int> sample_window(int total_frames, int window, int force_stride,
                               std::uint64_t seed) {
    if (window < 1) {
        throw ConfigInvalid("sample_window: window must be >= 1");
    }
    std::mt19937_64 rng(stage_seed(seed, "sample_window"));

    std::vector<int> feasible;
    for (int s = 1; s <= 6; ++s) {
        if (force_stride > 0 && s != force_stride) {
            continue;
        }
        if ((window - 1) * s + 1 <= total_frames) {
            feasible.push_back(s);
        }
    }
    if (feasible.empty()) {
        throw WindowTooLong("sample_window: window does not fit under any stride");
    }
    const int stride =
        feasible[std::uniform_int_distribution<std::size_t>(0, feasible.size() - 1)(rng)];
    const int max_start = total_frames - ((window - 1) * stride + 1);
    const int start = std::uniform_int_distribution<int>(0, max_start)(rng);

    std::vector<int> idx(window);
    for (int i = 0; i < window; ++i) {
        idx[i] = start + i * stride;
    }
    return idx;
}

void save_bundle(const SceneSample& scene, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const SceneConfig& c = scene.config;
    const std::size_t npix = static_cast<std::size_t>(c.width) * c.height;
    const int T = c.frames;

    std::vector<double> images, recon_pts, track_pts, traj_pos, cams;
    std::vector<std::uint8_t> labels, recon_valid, track_valid;
    for (int t = 0; t < T; ++t) {
        images.insert(images.end(), scene.images[t].pixels.begin(),
                      scene.images[t].pixels.end());
        labels.insert(labels.end(), scene.labels[t].labels.begin(),
                      scene.labels[t].labels.end());
        auto rp = flatten_points(scene.gt_recon[t].points);
        recon_pts.insert(recon_pts.end(), rp.begin(), rp.end());
        recon_valid.insert(recon_valid.end(), scene.gt_recon[t].valid.begin(),
                           scene.gt_recon[t].valid.end());
        auto tp = flatten_points(scene.gt_tracking[t].points);
        track_pts.insert(track_pts.end(), tp.begin(), tp.end());
        track_valid.insert(track_valid.end(), scene.gt_tracking[t].valid.begin(),
                           scene.gt_tracking[t].valid.end());
        const CameraModel& cam = scene.cameras[t];
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                cams.push_back(cam.pose.rotation(i, j));
            }
        }
        for (int i = 0; i < 3; ++i) {
            cams.push_back(cam.pose.translation[i]);
        }
        cams.push_back(cam.fx);
        cams.push_back(cam.fy);
        cams.push_back(cam.cx);
        cams.push_back(cam.cy);
    }
    const std::string d = dir + "/";
    write_f32(d + "images.f32", images);
    write_u8(d + "labels.u8", labels);
    write_f32(d + "recon_points.f32", recon_pts);
    write_u8(d + "recon_valid.u8", recon_valid);
    write_f32(d + "track_points.f32", track_pts);
    write_u8(d + "track_valid.u8", track_valid);
    write_f32(d + "traj_positions.f32", flatten_points(scene.gt_trajectories.positions));
    write_u8(d + "traj_visible.u8", scene.gt_trajectories.visible);
    write_f64(d + "cameras.f64", cams);
    std::vector<double> qpix;
    for (const auto& qp : scene.query_pixels) {
        qpix.push_back(qp.x());
        qpix.push_back(qp.y());
    }
    write_f64(d + "query_pixels.f64", qpix);

    nlohmann::json manifest;
    manifest["format"] = "dino4d_scene/1";
    manifest["config"] = {
        {"width", c.width},
        {"height", c.height},
        {"frames", c.frames},
        {"num_objects", c.num_objects},
        {"motion_amplitude", c.motion_amplitude},
        {"orbit_radius", c.orbit_radius},
        {"orbit_speed", c.orbit_speed},
        {"textureless_fraction", c.textureless_fraction},
        {"query_stride", c.query_stride},
        {"patch_size", c.patch_size},
        {"seed", c.seed},
    };
    manifest["num_queries"] = scene.gt_trajectories.num_queries;
    manifest["arrays"] = nlohmann::json::array();
    auto add = [&](const std::string& name, const std::string& file,
                   const std::string& dtype, std::vector<std::size_t> shape) {
        manifest["arrays"].push_back(
            {{"name", name}, {"file", file}, {"dtype", dtype}, {"shape", shape}});
    };
    const std::size_t w = c.width, h = c.height,
                      tt = static_cast<std::size_t>(T),
                      q = static_cast<std::size_t>(scene.gt_trajectories.num_queries);
    add("images", "images.f32", "float32", {tt, h, w});
    add("labels", "labels.u8", "uint8", {tt, h, w});
    add("recon_points", "recon_points.f32", "float32", {tt, h, w, 3});
    add("recon_valid", "recon_valid.u8", "uint8", {tt, h, w});
    add("track_points", "track_points.f32", "float32", {tt, h, w, 3});
    add("track_valid", "track_valid.u8", "uint8", {tt, h, w});
    add("traj_positions", "traj_positions.f32", "float32", {q, tt, 3});
    add("traj_visible", "traj_visible.u8", "uint8", {q, tt});
    add("cameras", "cameras.f64", "float64", {tt, 16});
    add("query_pixels", "query_pixels.f64", "float64", {q, 2});

    std::ofstream mf(d + "manifest.json");
    mf << manifest.dump(2) << "\n";
    (void)npix;
}

SceneSample load_bundle(const std::string& dir) {
    const std::string d = dir + "/";
    std::ifstream mf(d + "manifest.json");
    if (!mf) {
        throw Error("cannot open manifest: " + d + "manifest.json");
    }
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.value("format", "") != "dino4d_scene/1") {
        throw Error("unknown bundle format in " + dir);
    }
    const auto& jc = manifest["config"];
    SceneConfig c;
    c.width = jc["width"];
    c.height = jc["height"];
    c.frames = jc["frames"];
    c.num_objects = jc["num_objects"];
    c.motion_amplitude = jc["motion_amplitude"];
    c.orbit_radius = jc["orbit_radius"];
    c.orbit_speed = jc["orbit_speed"];
    c.textureless_fraction = jc["textureless_fraction"];
    c.query_stride = jc["query_stride"];
    c.patch_size = jc["patch_size"];
    c.seed = jc["seed"];
    const int nq = manifest["num_queries"];

    const std::size_t npix = static_cast<std::size_t>(c.width) * c.height;
    const std::size_t T = static_cast<std::size_t>(c.frames);

    const auto images = read_f32(d + "images.f32", T * npix);
    const auto labels = read_u8(d + "labels.u8", T * npix);
    const auto recon_pts = read_f32(d + "recon_points.f32", T * npix * 3);
    const auto recon_valid = read_u8(d + "recon_valid.u8", T * npix);
    const auto track_pts = read_f32(d + "track_points.f32", T * npix * 3);
    const auto track_valid = read_u8(d + "track_valid.u8", T * npix);
    const auto traj_pos =
        read_f32(d + "traj_positions.f32", static_cast<std::size_t>(nq) * T * 3);
    const auto traj_vis =
        read_u8(d + "traj_visible.u8", static_cast<std::size_t>(nq) * T);
    const auto cams = read_f64(d + "cameras.f64", T * 16);
    const auto qpix = read_f64(d + "query_pixels.f64", static_cast<std::size_t>(nq) * 2);

    SceneSample out;
    out.config = c;
    for (std::size_t t = 0; t < T; ++t) {
        Image img(c.width, c.height);
        std::copy_n(images.begin() + t * npix, npix, img.pixels.begin());
        out.images.push_back(std::move(img));

        LabelMap lab;
        lab.width = c.width;
        lab.height = c.height;
        lab.labels.assign(labels.begin() + t * npix, labels.begin() + (t + 1) * npix);
        out.labels.push_back(std::move(lab));

        Pointmap recon(c.width, c.height, static_cast<int>(t), static_cast<int>(t));
        recon.points = unflatten_points(
            {recon_pts.begin() + t * npix * 3, recon_pts.begin() + (t + 1) * npix * 3});
        recon.valid.assign(recon_valid.begin() + t * npix,
                           recon_valid.begin() + (t + 1) * npix);
        out.gt_recon.push_back(std::move(recon));

        Pointmap track(c.width, c.height, 0, static_cast<int>(t));
        track.points = unflatten_points(
            {track_pts.begin() + t * npix * 3, track_pts.begin() + (t + 1) * npix * 3});
        track.valid.assign(track_valid.begin() + t * npix,
                           track_valid.begin() + (t + 1) * npix);
        out.gt_tracking.push_back(std::move(track));

        CameraModel cam;
        const double* p = cams.data() + t * 16;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                cam.pose.rotation(i, j) = p[i * 3 + j];
            }
        }
        cam.pose.translation = Vec3(p[9], p[10], p[11]);
        cam.fx = p[12];
        cam.fy = p[13];
        cam.cx = p[14];
        cam.cy = p[15];
        out.cameras.push_back(cam);
    }
    out.gt_trajectories = TrajectorySet(nq, c.frames);
    out.gt_trajectories.positions = unflatten_points(traj_pos);
    out.gt_trajectories.visible = traj_vis;
    for (int q = 0; q < nq; ++q) {
        out.query_pixels.emplace_back(static_cast<int>(qpix[2 * q]),
                                      static_cast<int>(qpix[2 * q + 1]));
    }
    return out;
}

}  // namespace dino4d
