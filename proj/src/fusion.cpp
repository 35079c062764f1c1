#include "dino4d/fusion.hpp"

#include <cmath>
#include <random>

namespace dino4d {

AdapterParams AdapterParams::init(int d_geo, int d_sem, int d_k, int d_v,
                                  std::uint64_t seed) {
    std::mt19937_64 rng(stage_seed(seed, "adapter_init"));
    std::uniform_real_distribution<double> uni(-0.1, 0.1);
    auto fill = [&](int r, int c) {
        Eigen::MatrixXd m(r, c);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) {
                m(i, j) = uni(rng);
            }
        }
        return m;
    };
    AdapterParams p;
    p.w_q = fill(d_geo, d_k);
    p.w_k = fill(d_sem, d_k);
    p.w_v = fill(d_sem, d_v);
    p.w_o = Eigen::MatrixXd::Zero(d_v, d_geo);
    return p;
}

Eigen::MatrixXd fuse(const Eigen::MatrixXd& f_geo, const Eigen::MatrixXd& f_sem,
                     const AdapterParams& params, FuseCache* cache) {
    if (f_geo.cols() != params.d_geo() || f_sem.cols() != params.d_sem()) {
        throw DimMismatch("fuse: feature dims do not match adapter params");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.d_k()));
    const Eigen::MatrixXd q = f_geo * params.w_q;
    const Eigen::MatrixXd k = f_sem * params.w_k;
    const Eigen::MatrixXd v = f_sem * params.w_v;

    Eigen::MatrixXd scores = scale * (q * k.transpose());
    // row-wise softmax with max subtraction
    Eigen::MatrixXd attn(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        const double m = scores.row(i).maxCoeff();
        Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
        attn.row(i) = (e / e.sum()).matrix().transpose();
    }
    const Eigen::MatrixXd context = attn * v;
    Eigen::MatrixXd out = f_geo + context * params.w_o;

    if (cache) {
        cache->f_geo = f_geo;
        cache->f_sem = f_sem;
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->attn = attn;
        cache->context = context;
        cache->filled = true;
    }
    return out;
}

FeatureMap fuse(const FeatureMap& f_geo, const FeatureMap& f_sem,
                const AdapterParams& params, FuseCache* cache) {
    if (f_geo.tokens() != f_sem.tokens()) {
        throw DimMismatch("fuse: patch grids are not token-aligned");
    }
    FeatureMap out = f_geo;
    out.data = fuse(f_geo.data, f_sem.data, params, cache);
    return out;
}

FuseBackwardResult fuse_backward(const Eigen::MatrixXd& upstream,
                                 const FuseCache& cache,
                                 const AdapterParams& params) {
    if (!cache.filled) {
        throw Error("fuse_backward: stale or missing forward cache");
    }
    if (upstream.rows() != cache.f_geo.rows() || upstream.cols() != cache.f_geo.cols()) {
        throw ShapeMismatch("fuse_backward: upstream gradient shape mismatch");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.d_k()));

    FuseBackwardResult r;
    r.grads.w_o = cache.context.transpose() * upstream;
    const Eigen::MatrixXd d_context = upstream * params.w_o.transpose();
    Eigen::MatrixXd d_attn = d_context * cache.v.transpose();
    const Eigen::MatrixXd d_v = cache.attn.transpose() * d_context;

    // softmax backward per row: dS = A .* (dA - rowsum(dA .* A))
    Eigen::MatrixXd d_scores(d_attn.rows(), d_attn.cols());
    for (Eigen::Index i = 0; i < d_attn.rows(); ++i) {
        const double dot = d_attn.row(i).dot(cache.attn.row(i));
        d_scores.row(i) =
            cache.attn.row(i).array() * (d_attn.row(i).array() - dot);
    }
    d_scores *= scale;

    const Eigen::MatrixXd d_q = d_scores * cache.k;
    const Eigen::MatrixXd d_k = d_scores.transpose() * cache.q;

    r.grads.w_q = cache.f_geo.transpose() * d_q;
    r.grads.w_k = cache.f_sem.transpose() * d_k;
    r.grads.w_v = cache.f_sem.transpose() * d_v;
    r.d_f_geo = upstream + d_q * params.w_q.transpose();
    r.d_f_sem = d_k * params.w_k.transpose() + d_v * params.w_v.transpose();
    return r;
}

}  // namespace dino4d
