#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowlab/config.hpp"
#include "flowlab/rng.hpp"

namespace flowlab {

struct LayerOffsets {
    size_t rms1_g, qkv_w, qkv_b, q_gain, k_gain, attn_out_w, attn_out_b;
    size_t rms2_g, ffn_w1, ffn_w3, ffn_w2, mod_w, mod_b;
};

// Flat parameter buffer layout. Weights are [in, out] row-major; slots exist
// for every configuration so the layout is stable across flags.
struct ParamLayout {
    int C, D, HW, T, NH, HD, F, TF, L;
    int n_class_emb;  // num_classes + 1 (null class)
    bool qk_norm, cls_token;
    size_t patch_in_w, patch_in_b, cls_in_w, cls_in_b, pos_emb;
    size_t time_w1, time_b1, time_w2, time_b2, class_emb;
    std::vector<LayerOffsets> layers;
    size_t final_rms_g, final_mod_w, final_mod_b, out_w, out_b, cls_head_w, cls_head_b;
    size_t total = 0;
    std::vector<std::pair<std::string, std::pair<size_t, size_t>>> slots;

    static ParamLayout build(const DenoiserConfig& cfg);
    std::string slot_of(size_t flat_index) const;
};

template <typename T>
struct DenoiserCacheT {
    int B = 0;
    std::vector<double> t;
    std::vector<int32_t> labels;
    std::vector<T> tokens;     // [B*T, C]
    std::vector<T> x0;         // [B*T, D]
    std::vector<T> time_feat;  // [B, TF]
    std::vector<T> time_h_pre, time_h, cond, silu_cond;  // [B, D]
    struct Layer {
        std::vector<T> x_in, m1, attn_cat, attn_proj, x_mid, m2, ffn_out;  // [B*T, D]
        std::vector<T> inv_rms1, inv_rms2;                                 // [B*T]
        std::vector<T> mod;                                                // [B, 6D]
        std::vector<T> qkv;                                                // [B*T, 3D]
        std::vector<T> qn, kn;                                             // [B*T, D]
        std::vector<T> q_inv_rms, k_inv_rms;                               // [B*T*NH]
        std::vector<T> probs;                                              // [B*NH*T*T]
        std::vector<T> attn_mask, proj_mask1, proj_mask2;                  // dropout; empty if inactive
        std::vector<T> ffn_a, ffn_su, ffn_g;                               // [B*T, F]
    };
    std::vector<Layer> layers;
    std::vector<T> x_final;   // [B*T, D]
    std::vector<T> inv_rms_f;  // [B*T]
    std::vector<T> mod_f;      // [B, 2D]
    std::vector<T> mf;         // [B*T, D]
    std::vector<T> y_patch;    // [B, C, H, W]
    std::vector<T> y_cls;      // [B, C]
};

// Tiny DiT-style x-prediction network: adaLN-modulated RMSNorm blocks with
// bidirectional self-attention over CLS + patch tokens, optional QK-norm,
// SwiGLU FFN, learned positional embeddings, sinusoidal timestep MLP, class
// embeddings with a null class, and separate patch / CLS output heads.
// Deterministic forward; hand-written exact backward.
template <typename T>
class DenoiserT {
  public:
    explicit DenoiserT(const DenoiserConfig& cfg);

    // scaled-Gaussian init; modulation projections and output heads start at
    // zero, so the initial output is input-independent
    void init_params(Rng& rng);
    // every slot random; used by gradient checks to exercise all paths
    void randomize_all(Rng& rng, double scale);

    void forward(int B, const T* z_t, const T* z_cls_t, const double* t, const int32_t* labels,
                 DenoiserCacheT<T>& cache, Rng* dropout_rng = nullptr) const;
    void backward(const DenoiserCacheT<T>& cache, const T* d_y_patch, const T* d_y_cls, std::vector<T>& grads) const;

    const DenoiserConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }

    std::vector<T> params;

  private:
    DenoiserConfig cfg_;
    ParamLayout layout_;
};

using Denoiser = DenoiserT<float>;
using DenoiserCache = DenoiserCacheT<float>;

// shadow' = decay * shadow + (1 - decay) * params
template <typename T>
void ema_update(std::vector<T>& shadow, const std::vector<T>& params, double decay);

extern template class DenoiserT<float>;
extern template class DenoiserT<double>;
extern template void ema_update<float>(std::vector<float>&, const std::vector<float>&, double);
extern template void ema_update<double>(std::vector<double>&, const std::vector<double>&, double);

}  // namespace flowlab
