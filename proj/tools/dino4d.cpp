// dino4d: command-line driver for scene generation, training, evaluation,
// diffusion refinement, and point-cloud export.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dino4d/io.hpp"
#include "dino4d/scene.hpp"
#include "dino4d/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "dino4d 1.0.0";

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
    const char* env = std::getenv("DINO4D_LOG");
    if (!env) {
        return LogLevel::kInfo;
    }
    const std::string v(env);
    if (v == "error") return LogLevel::kError;
    if (v == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
}

void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::kInfo) {
        std::cerr << "[info] " << msg << "\n";
    }
}

void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::kDebug) {
        std::cerr << "[debug] " << msg << "\n";
    }
}

std::string timestamp_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Usage / configuration problems exit with code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw UsageError("cannot open config file: " + path);
    }
    std::stringstream buf;
    buf << f.rdbuf();
    const std::string text = buf.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // report line/column instead of the raw byte offset
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw UsageError("config parse error in " + path + " at line " +
                         std::to_string(line) + ", column " + std::to_string(col) +
                         ": " + e.what());
    }
}

struct ManifestWriter {
    json manifest;
    std::string out_dir;

    ManifestWriter(const std::string& command, const json& config_echo,
                   std::uint64_t seed, const std::string& dir)
        : out_dir(dir) {
        manifest["command"] = command;
        manifest["config"] = config_echo;
        manifest["seed"] = seed;
        manifest["tool_version"] = kToolVersion;
        manifest["started_at"] = timestamp_now();
        manifest["artifacts"] = json::array();
    }
    void add_artifact(const std::string& path) {
        manifest["artifacts"].push_back(path);
    }
    void finish() {
        manifest["finished_at"] = timestamp_now();
        for (const auto& a : manifest["artifacts"]) {
            if (!fs::exists(a.get<std::string>())) {
                throw dino4d::Error("manifest lists missing artifact: " +
                                    a.get<std::string>());
            }
        }
        fs::create_directories(out_dir);
        std::ofstream f(out_dir + "/run_manifest.json");
        f << manifest.dump(2) << "\n";
    }
};

dino4d::SceneConfig scene_config_from_json(const json& j) {
    dino4d::SceneConfig c;
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.frames = j.value("frames", c.frames);
    c.num_objects = j.value("num_objects", c.num_objects);
    c.motion_amplitude = j.value("motion_amplitude", c.motion_amplitude);
    c.orbit_radius = j.value("orbit_radius", c.orbit_radius);
    c.orbit_speed = j.value("orbit_speed", c.orbit_speed);
    c.textureless_fraction = j.value("textureless_fraction", c.textureless_fraction);
    c.query_stride = j.value("query_stride", c.query_stride);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.seed = j.value("seed", c.seed);
    return c;
}

int cmd_gen(const std::string& config_path, const std::string& out_dir,
            std::uint64_t seed, bool seed_set) {
    json cfg = json::object();
    if (!config_path.empty()) {
        cfg = load_config(config_path);
    }
    const int num_scenes = cfg.value("num_scenes", 8);
    if (num_scenes < 1) {
        throw UsageError("num_scenes must be >= 1");
    }
    const std::uint64_t base_seed =
        seed_set ? seed : cfg.value("seed", std::uint64_t{0});

    ManifestWriter mw("gen", cfg, base_seed, out_dir);
    fs::create_directories(out_dir);
    for (int i = 0; i < num_scenes; ++i) {
        dino4d::SceneConfig sc = scene_config_from_json(cfg);
        sc.seed = dino4d::stage_seed(base_seed, "scene:" + std::to_string(i));
        std::ostringstream name;
        name << out_dir << "/scene_" << std::setw(3) << std::setfill('0') << i;
        log_info("generating " + name.str());
        const dino4d::SceneSample sample = dino4d::generate(sc);
        dino4d::save_bundle(sample, name.str());
        mw.add_artifact(name.str() + "/manifest.json");
    }
    mw.finish();
    return 0;
}

std::vector<std::string> scene_dirs_from(const json& cfg,
                                         const std::vector<std::string>& flag) {
    std::vector<std::string> dirs = flag;
    if (dirs.empty() && cfg.contains("scenes")) {
        for (const auto& s : cfg["scenes"]) {
            dirs.push_back(s.get<std::string>());
        }
    }
    return dirs;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::uint64_t seed, bool seed_set, int steps, bool steps_set,
              const std::vector<std::string>& scene_flags) {
    json cfg = json::object();
    if (!config_path.empty()) {
        cfg = load_config(config_path);
    }
    dino4d::TrainConfig tc;
    tc.scene_dirs = scene_dirs_from(cfg, scene_flags);
    if (tc.scene_dirs.empty()) {
        throw UsageError("train: no scenes given (use --scenes or config \"scenes\")");
    }
    if (cfg.contains("weights")) {
        const auto& w = cfg["weights"];
        tc.weights.reproj = w.value("lambda_reproj", tc.weights.reproj);
        tc.weights.geo = w.value("lambda_geo", tc.weights.geo);
        tc.weights.sem = w.value("lambda_sem", tc.weights.sem);
        tc.weights.diff = w.value("lambda_diff", tc.weights.diff);
    }
    if (cfg.contains("optim")) {
        const auto& o = cfg["optim"];
        tc.optim.lr = o.value("lr", tc.optim.lr);
        tc.optim.beta1 = o.value("beta1", tc.optim.beta1);
        tc.optim.beta2 = o.value("beta2", tc.optim.beta2);
        tc.optim.eps = o.value("eps", tc.optim.eps);
        tc.optim.weight_decay = o.value("weight_decay", tc.optim.weight_decay);
    }
    tc.steps = steps_set ? steps : cfg.value("steps", tc.steps);
    tc.window = cfg.value("window", tc.window);
    tc.force_stride = cfg.value("force_stride", tc.force_stride);
    tc.pairs_per_step = cfg.value("pairs_per_step", tc.pairs_per_step);
    tc.omega_stride = cfg.value("omega_stride", tc.omega_stride);
    tc.pnp_stride = cfg.value("pnp_stride", tc.pnp_stride);
    tc.diffusion_stride = cfg.value("diffusion_stride", tc.diffusion_stride);
    tc.checkpoint_every = cfg.value("checkpoint_every", tc.checkpoint_every);
    tc.model.diffusion_steps = cfg.value("diffusion_steps", tc.model.diffusion_steps);
    tc.model.sigma_feat = cfg.value("sigma_feat", tc.model.sigma_feat);
    tc.seed = seed_set ? seed : cfg.value("seed", std::uint64_t{0});
    tc.out_dir = out_dir;

    ManifestWriter mw("train", cfg, tc.seed, out_dir);
    log_info("training for " + std::to_string(tc.steps) + " steps on " +
             std::to_string(tc.scene_dirs.size()) + " scene(s)");
    const dino4d::TrainResult r = dino4d::train(tc);
    log_info("loss " + std::to_string(r.initial_total) + " -> " +
             std::to_string(r.final_total));
    mw.add_artifact(r.checkpoint_path);
    mw.add_artifact(r.log_path);
    mw.finish();
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& out_dir,
             const std::vector<std::string>& scene_flags, bool refine,
             const std::string& thresholds_csv, std::uint64_t seed) {
    if (checkpoint.empty()) {
        throw UsageError("eval: --checkpoint is required");
    }
    if (scene_flags.empty()) {
        throw UsageError("eval: --scenes is required");
    }
    dino4d::EvalConfig ec;
    ec.refine = refine;
    ec.seed = seed;
    if (!thresholds_csv.empty()) {
        ec.apd_thresholds.clear();
        std::stringstream ss(thresholds_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                ec.apd_thresholds.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw UsageError("eval: bad threshold value: " + tok);
            }
        }
        if (ec.apd_thresholds.empty()) {
            throw UsageError("eval: --thresholds parsed to an empty list");
        }
    }

    const dino4d::Model model = dino4d::load_checkpoint(checkpoint);
    json cfg_echo = {{"checkpoint", checkpoint},
                     {"scenes", scene_flags},
                     {"refine", refine}};
    ManifestWriter mw("eval", cfg_echo, seed, out_dir);
    fs::create_directories(out_dir);

    std::vector<dino4d::EvalReport> reports;
    for (const auto& dir : scene_flags) {
        log_info("evaluating " + dir);
        const dino4d::SceneSample scene = dino4d::load_bundle(dir);
        reports.push_back(dino4d::evaluate(model, scene, ec));
        log_debug("scene " + reports.back().scene_id + " cd_coarse_cm=" +
                  std::to_string(reports.back().cd_coarse_cm));
    }
    json out = json::array();
    for (const auto& r : reports) {
        out.push_back(json::parse(dino4d::report_to_json(r)));
    }
    const dino4d::EvalReport agg = dino4d::aggregate_reports(reports);
    json doc = {{"scenes", out},
                {"aggregate", json::parse(dino4d::report_to_json(agg))}};
    const std::string report_path = out_dir + "/report.json";
    std::ofstream f(report_path);
    f << doc.dump(2) << "\n";
    mw.add_artifact(report_path);
    mw.finish();
    return 0;
}

// Runs coarse inference on one frame pair, applies diffusion refinement,
// and writes both point clouds.
int cmd_refine(const std::string& checkpoint, const std::string& scene_dir,
               int frame, const std::string& out_dir, std::uint64_t seed) {
    if (checkpoint.empty() || scene_dir.empty()) {
        throw UsageError("refine: --checkpoint and --scene are required");
    }
    const dino4d::Model model = dino4d::load_checkpoint(checkpoint);
    const dino4d::SceneSample scene = dino4d::load_bundle(scene_dir);
    if (frame < 1 || frame >= scene.config.frames) {
        throw UsageError("refine: --frame must be in [1, frames)");
    }
    json cfg_echo = {{"checkpoint", checkpoint},
                     {"scene", scene_dir},
                     {"frame", frame}};
    ManifestWriter mw("refine", cfg_echo, seed, out_dir);
    fs::create_directories(out_dir);

    dino4d::EvalConfig ec;
    ec.refine = true;
    ec.seed = seed;
    // reuse the evaluation path for its pairwise schedule, then export the
    // requested frame
    const std::uint64_t fseed =
        dino4d::stage_seed(scene.config.seed, "semantic_features");
    dino4d::FeatureMap sem0 = dino4d::synth_features(
        scene.labels[0], model.config.d_sem, scene.config.patch_size, fseed,
        model.config.sigma_feat, 0);
    dino4d::FeatureMap semj = dino4d::synth_features(
        scene.labels[frame], model.config.d_sem, scene.config.patch_size, fseed,
        model.config.sigma_feat, frame);
    const dino4d::FeatureMap geo0 = dino4d::embed_patches(
        scene.images[0], model.patch_embedder, scene.config.patch_size, 0);
    const dino4d::FeatureMap geoj = dino4d::embed_patches(
        scene.images[frame], model.patch_embedder, scene.config.patch_size, frame);
    const dino4d::FeatureMap ff0 = dino4d::fuse(geo0, sem0, model.adapter);
    const dino4d::FeatureMap ffj = dino4d::fuse(geoj, semj, model.adapter);
    const dino4d::PairPrediction pred =
        dino4d::forward_pair(0, frame, scene.images[0], scene.images[frame],
                             ff0, ffj, model.predictor, nullptr);
    const Eigen::MatrixXd cond =
        dino4d::build_condition(pred.reconstruction, ffj);
    dino4d::NoisePredictor np = [&](const Eigen::MatrixXd& z, int t,
                                    const Eigen::MatrixXd& c) {
        return dino4d::denoiser_forward(z, t, c, model.denoiser);
    };
    const dino4d::Pointmap refined = dino4d::refine(
        pred.reconstruction, cond, np, model.schedule, model.sigma_residual,
        dino4d::stage_seed(seed, "refine:" + std::to_string(frame)));

    const std::string coarse_path = out_dir + "/coarse.ply";
    const std::string refined_path = out_dir + "/refined.ply";
    dino4d::export_ply(pred.reconstruction, coarse_path);
    dino4d::export_ply(refined, refined_path);
    mw.add_artifact(coarse_path);
    mw.add_artifact(refined_path);
    mw.finish();
    return 0;
}

int cmd_export(const std::string& scene_dir, int frame, const std::string& kind,
               const std::string& ply_path) {
    if (scene_dir.empty() || ply_path.empty()) {
        throw UsageError("export: --scene and --ply are required");
    }
    const dino4d::SceneSample scene = dino4d::load_bundle(scene_dir);
    if (frame < 0 || frame >= scene.config.frames) {
        throw UsageError("export: --frame out of range");
    }
    const dino4d::Pointmap* pm = nullptr;
    if (kind == "recon") {
        pm = &scene.gt_recon[frame];
    } else if (kind == "tracking") {
        pm = &scene.gt_tracking[frame];
    } else {
        throw UsageError("export: --kind must be recon or tracking");
    }
    if (const fs::path parent = fs::path(ply_path).parent_path(); !parent.empty()) {
        fs::create_directories(parent);
    }
    dino4d::export_ply(*pm, ply_path);
    log_info("wrote " + ply_path);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale semantic 4D reconstruction harness"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    std::string config_path, out_dir = "out", checkpoint, scene_dir,
                thresholds_csv, kind = "recon", ply_path;
    std::vector<std::string> scenes;
    std::uint64_t seed = 0;
    int steps = 0, frame = 1;
    bool refine_flag = false;

    auto* gen = app.add_subcommand("gen", "Generate synthetic scene bundles");
    gen->add_option("--config", config_path, "JSON scene config");
    gen->add_option("--out", out_dir, "output directory");
    auto* gen_seed = gen->add_option("--seed", seed, "base seed");

    auto* train = app.add_subcommand("train", "Train a model on scene bundles");
    train->add_option("--config", config_path, "JSON training config");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--scenes", scenes, "scene bundle directories");
    auto* train_seed = train->add_option("--seed", seed, "run seed");
    auto* train_steps = train->add_option("--steps", steps, "training steps");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval->add_option("--scenes", scenes, "held-out scene bundles")->required();
    eval->add_option("--out", out_dir, "output directory");
    eval->add_flag("--refine", refine_flag, "run diffusion refinement");
    eval->add_option("--thresholds", thresholds_csv, "APD thresholds, CSV meters");
    eval->add_option("--seed", seed, "evaluation seed");

    auto* refine = app.add_subcommand("refine", "Refine one frame and export PLY");
    refine->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    refine->add_option("--scene", scene_dir, "scene bundle")->required();
    refine->add_option("--frame", frame, "target frame index");
    refine->add_option("--out", out_dir, "output directory");
    refine->add_option("--seed", seed, "sampler seed");

    auto* exp = app.add_subcommand("export", "Export a ground-truth pointmap as PLY");
    exp->add_option("--scene", scene_dir, "scene bundle")->required();
    exp->add_option("--frame", frame, "frame index");
    exp->add_option("--kind", kind, "recon|tracking");
    exp->add_option("--ply", ply_path, "output PLY path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help / --version
        }
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen(config_path, out_dir, seed, gen_seed->count() > 0);
        }
        if (train->parsed()) {
            return cmd_train(config_path, out_dir, seed, train_seed->count() > 0,
                             steps, train_steps->count() > 0, scenes);
        }
        if (eval->parsed()) {
            return cmd_eval(checkpoint, out_dir, scenes, refine_flag,
                            thresholds_csv, seed);
        }
        if (refine->parsed()) {
            return cmd_refine(checkpoint, scene_dir, frame, out_dir, seed);
        }
        if (exp->parsed()) {
            return cmd_export(scene_dir, frame, kind, ply_path);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dino4d::ConfigInvalid& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
