#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "dino4d/semantic.hpp"

namespace dino4d {

/// Single-head cross-attention weights: geometric tokens query semantic
/// keys/values, output projected back to the geometric dim and added
/// residually.
struct AdapterParams {
    Eigen::MatrixXd w_q;  // d_geo x d_k
    Eigen::MatrixXd w_k;  // d_sem x d_k
    Eigen::MatrixXd w_v;  // d_sem x d_v
    Eigen::MatrixXd w_o;  // d_v  x d_geo

    int d_geo() const { return static_cast<int>(w_q.rows()); }
    int d_sem() const { return static_cast<int>(w_k.rows()); }
    int d_k() const { return static_cast<int>(w_q.cols()); }
    int d_v() const { return static_cast<int>(w_v.cols()); }

    /// w_o starts at zero so the adapter is the identity on the geometric
    /// stream at step 0; the other projections are small uniform.
    static AdapterParams init(int d_geo, int d_sem, int d_k, int d_v,
                              std::uint64_t seed);
};

struct AdapterGrads {
    Eigen::MatrixXd w_q, w_k, w_v, w_o;
};

struct FuseCache {
    Eigen::MatrixXd f_geo, f_sem;  // token matrices
    Eigen::MatrixXd q, k, v;       // projected
    Eigen::MatrixXd attn;          // softmax rows, n_geo x n_sem
    Eigen::MatrixXd context;       // attn * v
    bool filled = false;
};

/// out = f_geo + softmax(Q K^T / sqrt(d_k)) V w_o, rows are tokens.
Eigen::MatrixXd fuse(const Eigen::MatrixXd& f_geo, const Eigen::MatrixXd& f_sem,
                     const AdapterParams& params, FuseCache* cache = nullptr);

/// FeatureMap convenience wrapper; grids must be token-aligned.
FeatureMap fuse(const FeatureMap& f_geo, const FeatureMap& f_sem,
                const AdapterParams& params, FuseCache* cache = nullptr);

struct FuseBackwardResult {
    Eigen::MatrixXd d_f_geo;
    Eigen::MatrixXd d_f_sem;
    AdapterGrads grads;
};

FuseBackwardResult fuse_backward(const Eigen::MatrixXd& upstream,
                                 const FuseCache& cache,
                                 const AdapterParams& params);

}  // namespace dino4d
