#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dino4d/training.hpp"

using namespace dino4d;
namespace fs = std::filesystem;

TEST_CASE("total loss weighted sum") {
    LossComponents c{0.5, 0.25, 0.125, 0.0625};
    LossWeights w{1, 1, 1, 1};
    CHECK(total_loss(c, w) == doctest::Approx(0.9375).epsilon(1e-15));

    // zero semantic weight removes the dependence on that component
    w.sem = 0;
    const double base = total_loss(c, w);
    c.sem = 123.0;
    CHECK(total_loss(c, w) == base);

    // dot-product oracle on random draws
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> uni(0, 2);
    for (int i = 0; i < 50; ++i) {
        const LossComponents rc{uni(rng), uni(rng), uni(rng), uni(rng)};
        const LossWeights rw{uni(rng), uni(rng), uni(rng), uni(rng)};
        const double oracle = Eigen::Vector4d(rc.reproj, rc.geo, rc.sem, rc.diff)
                                  .dot(Eigen::Vector4d(rw.reproj, rw.geo, rw.sem,
                                                       rw.diff));
        CHECK(std::abs(total_loss(rc, rw) - oracle) < 1e-12);
    }

    LossComponents bad = c;
    bad.geo = std::numeric_limits<double>::quiet_NaN();
    try {
        total_loss(bad, w);
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(std::string(e.what()).find("L_geo") != std::string::npos);
    }
}

TEST_CASE("adamw single step closed forms") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    double p = 1.0, g = 1.0;
    opt.step({{"p", &p, 1}}, {{"p", &g, 1}});
    // bias-corrected first step moves by ~lr regardless of the gradient scale
    CHECK(p == doctest::Approx(0.9).epsilon(1e-7));

    // decoupled decay with zero gradient: p <- p - lr * decay * p
    AdamWConfig cfg2;
    cfg2.lr = 0.1;
    cfg2.weight_decay = 0.01;
    AdamW opt2(cfg2);
    double p2 = 1.0, g2 = 0.0;
    opt2.step({{"p", &p2, 1}}, {{"p", &g2, 1}});
    CHECK(p2 == doctest::Approx(0.999).epsilon(1e-12));

    // zero gradient and zero decay leave the parameter untouched
    AdamWConfig cfg3;
    cfg3.weight_decay = 0.0;
    AdamW opt3(cfg3);
    double p3 = 0.5, g3 = 0.0;
    opt3.step({{"p", &p3, 1}}, {{"p", &g3, 1}});
    CHECK(p3 == 0.5);

    double q[2] = {0, 0};
    CHECK_THROWS_AS(opt3.step({{"p", &p3, 1}}, {{"q", q, 2}}), ShapeMismatch);
}

TEST_CASE("adamw two-step closed form") {
    // hand-derived: g = 1 both steps, lr = 0.1, no decay
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    cfg.eps = 0;  // exact closed form
    AdamW opt(cfg);
    double p = 0.0, g = 1.0;
    opt.step({{"p", &p, 1}}, {{"p", &g, 1}});
    opt.step({{"p", &p, 1}}, {{"p", &g, 1}});
    // with constant unit gradients every bias-corrected update is exactly lr
    CHECK(p == doctest::Approx(-0.2).epsilon(1e-12));
    CHECK(opt.step_count() == 2);
}

namespace {

ModelConfig tiny_model_config() {
    ModelConfig mc;
    mc.predictor.width = 56;
    mc.predictor.height = 56;
    mc.predictor.patch_size = 14;
    mc.predictor.d_geo = 8;
    mc.predictor.hidden = 16;
    mc.predictor.nominal = {56, 56, 28, 28};
    mc.predictor.d0_init = 4.0;
    mc.d_sem = 16;
    mc.d_k = 8;
    mc.d_v = 8;
    mc.denoiser_hidden = 16;
    return mc;
}

std::string make_scene_dir(std::uint64_t seed, const std::string& tag) {
    SceneConfig sc;
    sc.width = 56;
    sc.height = 56;
    sc.frames = 5;
    sc.seed = seed;
    const std::string dir =
        (fs::temp_directory_path() / ("dino4d_train_test_" + tag)).string();
    fs::remove_all(dir);
    save_bundle(generate(sc), dir);
    return dir;
}

}  // namespace

TEST_CASE("model init and checkpoint round trip") {
    const ModelConfig mc = tiny_model_config();
    Model a = Model::init(mc, 5);
    Model b = Model::init(mc, 5);
    CHECK((a.adapter.w_q - b.adapter.w_q).norm() == 0.0);
    CHECK((a.predictor.w1 - b.predictor.w1).norm() == 0.0);
    CHECK(a.adapter.w_o.norm() == 0.0);

    a.step = 17;
    a.sigma_residual = 0.37;
    const std::string path =
        (fs::temp_directory_path() / "dino4d_ckpt_test.ckpt").string();
    save_checkpoint(a, path);
    const Model r = load_checkpoint(path);
    CHECK(r.step == 17);
    CHECK(r.sigma_residual == doctest::Approx(0.37).epsilon(1e-7));
    CHECK(r.config.d_sem == mc.d_sem);
    // parameters survive float32 storage
    CHECK((r.predictor.w1 - a.predictor.w1).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((r.patch_embedder - a.patch_embedder).cwiseAbs().maxCoeff() < 1e-6);

    // truncated files are rejected
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointCorrupt);
    std::ofstream(path) << "not a checkpoint\n";
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointCorrupt);
    fs::remove(path);
}

TEST_CASE("parameter and gradient registries align") {
    Model m = Model::init(tiny_model_config(), 3);
    ModelGrads g = ModelGrads::zeros_like(m);
    const auto pr = param_refs(m);
    const auto gr = grad_refs(g, m);
    REQUIRE(pr.size() == gr.size());
    for (std::size_t i = 0; i < pr.size(); ++i) {
        CHECK(pr[i].name == gr[i].name);
        CHECK(pr[i].size == gr[i].size);
    }
}

TEST_CASE("training is deterministic and reduces the loss") {
    const std::string scene = make_scene_dir(31, "det");

    TrainConfig tc;
    tc.scene_dirs = {scene};
    tc.model = tiny_model_config();
    tc.steps = 6;
    tc.window = 5;
    tc.force_stride = 1;
    tc.checkpoint_every = 0;
    tc.seed = 9;

    const std::string out1 = (fs::temp_directory_path() / "dino4d_run1").string();
    const std::string out2 = (fs::temp_directory_path() / "dino4d_run2").string();
    fs::remove_all(out1);
    fs::remove_all(out2);
    tc.out_dir = out1;
    const TrainResult r1 = train(tc);
    tc.out_dir = out2;
    const TrainResult r2 = train(tc);

    CHECK(r1.initial_total == r2.initial_total);
    CHECK(r1.final_total == r2.final_total);
    CHECK(r1.final_total < r1.initial_total);

    // checkpoints byte-identical; logs identical after dropping wall times
    std::ifstream c1(r1.checkpoint_path, std::ios::binary);
    std::ifstream c2(r2.checkpoint_path, std::ios::binary);
    std::stringstream b1, b2;
    b1 << c1.rdbuf();
    b2 << c2.rdbuf();
    CHECK(b1.str() == b2.str());

    std::ifstream l1(r1.log_path), l2(r2.log_path);
    std::string s1, s2;
    int lines = 0;
    while (std::getline(l1, s1) && std::getline(l2, s2)) {
        auto j1 = nlohmann::json::parse(s1);
        auto j2 = nlohmann::json::parse(s2);
        j1.erase("wall_ms");
        j2.erase("wall_ms");
        CHECK(j1 == j2);
        ++lines;
    }
    CHECK(lines == tc.steps);
    fs::remove_all(out1);
    fs::remove_all(out2);
    fs::remove_all(scene);
}

TEST_CASE("semantic weight changes updates but the loss is always logged") {
    const std::string scene = make_scene_dir(32, "zero");
    TrainConfig tc;
    tc.scene_dirs = {scene};
    tc.model = tiny_model_config();
    tc.steps = 3;
    tc.window = 5;
    tc.force_stride = 1;
    tc.checkpoint_every = 0;
    tc.seed = 4;
    tc.weights.sem = 0.0;
    const std::string out1 = (fs::temp_directory_path() / "dino4d_zsem").string();
    const std::string out2 = (fs::temp_directory_path() / "dino4d_psem").string();
    fs::remove_all(out1);
    fs::remove_all(out2);

    tc.out_dir = out1;
    train(tc);
    tc.weights.sem = 0.5;
    tc.out_dir = out2;
    train(tc);

    // L_sem is computed and logged even when its weight is zero
    std::ifstream l1(out1 + "/train_log.jsonl");
    std::string line;
    std::getline(l1, line);
    const auto rec = nlohmann::json::parse(line);
    CHECK(rec["L_sem"].get<double>() > 0.0);

    // but a positive weight changes the parameter trajectory
    std::ifstream c1(out1 + "/checkpoint.ckpt", std::ios::binary);
    std::ifstream c2(out2 + "/checkpoint.ckpt", std::ios::binary);
    std::stringstream b1, b2;
    b1 << c1.rdbuf();
    b2 << c2.rdbuf();
    CHECK(b1.str() != b2.str());
    fs::remove_all(out1);
    fs::remove_all(out2);
    fs::remove_all(scene);
}

TEST_CASE("evaluation runs one forward pass per non-reference frame") {
    SceneConfig sc;
    sc.width = 56;
    sc.height = 56;
    sc.frames = 7;
    sc.seed = 77;
    const SceneSample scene = generate(sc);

    ModelConfig mc = tiny_model_config();
    const Model model = Model::init(mc, 2);
    EvalConfig ec;
    ec.refine = true;
    const EvalReport rep = evaluate(model, scene, ec);
    CHECK(rep.pairs_executed == sc.frames - 1);
    CHECK(rep.apd_values.size() == ec.apd_thresholds.size());
    CHECK(rep.cd_coarse_cm > 0.0);
    CHECK(rep.cd_refined_cm >= 0.0);

    // report JSON carries the comparison rows and metric fields
    const auto j = nlohmann::json::parse(report_to_json(rep));
    CHECK(j.contains("cd_coarse_cm"));
    CHECK(j.contains("cd_refined_cm"));
    CHECK(j["table"].size() == 2);
    CHECK(j["pairs_executed"] == sc.frames - 1);

    const EvalReport agg = aggregate_reports({rep, rep});
    CHECK(agg.cd_coarse_cm == doctest::Approx(rep.cd_coarse_cm).epsilon(1e-12));
    CHECK(agg.pairs_executed == 2 * rep.pairs_executed);
    CHECK_THROWS_AS(aggregate_reports({}), EmptySet);
}

TEST_CASE("metric table formatting") {
    const std::string table = format_apd_table(
        {{"St4RTrack", {35.1, 67.4, 78.5}}, {"DINO_4D", {41.8, 78.1, 86.3}}},
        {0.1, 0.3, 0.5});
    CHECK(table.find("Method") != std::string::npos);
    CHECK(table.find("APD@0.1m") != std::string::npos);
    CHECK(table.find("St4RTrack") != std::string::npos);
    CHECK(table.find("35.1") != std::string::npos);
    CHECK(table.find("86.3") != std::string::npos);
}
