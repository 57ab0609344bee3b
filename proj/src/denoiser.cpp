#include "flowlab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flowlab/nn_ops.hpp"

namespace flowlab {

namespace {

size_t add_slot(ParamLayout& lay, const std::string& name, size_t size) {
    const size_t off = lay.total;
    lay.slots.emplace_back(name, std::make_pair(off, size));
    lay.total += size;
    return off;
}

bool dropout_layer(int l, int L) { return l >= L / 4 && l < L - L / 4; }

}  // namespace

ParamLayout ParamLayout::build(const DenoiserConfig& cfg) {
    cfg.validate();
    ParamLayout lay;
    lay.C = cfg.channels;
    lay.D = cfg.hidden_dim;
    lay.HW = cfg.grid_h * cfg.grid_w;
    lay.cls_token = cfg.cls_token;
    lay.T = lay.HW + (cfg.cls_token ? 1 : 0);
    lay.NH = cfg.heads;
    lay.HD = cfg.hidden_dim / cfg.heads;
    lay.F = cfg.ffn_mult * cfg.hidden_dim;
    lay.TF = cfg.time_feat_dim;
    lay.L = cfg.layers;
    lay.n_class_emb = cfg.num_classes + 1;
    lay.qk_norm = cfg.qk_norm;

    const int C = lay.C, D = lay.D, F = lay.F, TF = lay.TF, HD = lay.HD;
    lay.patch_in_w = add_slot(lay, "patch_in_w", size_t(C) * D);
    lay.patch_in_b = add_slot(lay, "patch_in_b", D);
    lay.cls_in_w = add_slot(lay, "cls_in_w", size_t(C) * D);
    lay.cls_in_b = add_slot(lay, "cls_in_b", D);
    lay.pos_emb = add_slot(lay, "pos_emb", size_t(lay.T) * D);
    lay.time_w1 = add_slot(lay, "time_w1", size_t(TF) * D);
    lay.time_b1 = add_slot(lay, "time_b1", D);
    lay.time_w2 = add_slot(lay, "time_w2", size_t(D) * D);
    lay.time_b2 = add_slot(lay, "time_b2", D);
    lay.class_emb = add_slot(lay, "class_emb", size_t(lay.n_class_emb) * D);
    for (int l = 0; l < lay.L; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerOffsets lo;
        lo.rms1_g = add_slot(lay, p + "rms1_g", D);
        lo.qkv_w = add_slot(lay, p + "qkv_w", size_t(D) * 3 * D);
        lo.qkv_b = add_slot(lay, p + "qkv_b", size_t(3) * D);
        lo.q_gain = add_slot(lay, p + "q_gain", HD);
        lo.k_gain = add_slot(lay, p + "k_gain", HD);
        lo.attn_out_w = add_slot(lay, p + "attn_out_w", size_t(D) * D);
        lo.attn_out_b = add_slot(lay, p + "attn_out_b", D);
        lo.rms2_g = add_slot(lay, p + "rms2_g", D);
        lo.ffn_w1 = add_slot(lay, p + "ffn_w1", size_t(D) * F);
        lo.ffn_w3 = add_slot(lay, p + "ffn_w3", size_t(D) * F);
        lo.ffn_w2 = add_slot(lay, p + "ffn_w2", size_t(F) * D);
        lo.mod_w = add_slot(lay, p + "mod_w", size_t(D) * 6 * D);
        lo.mod_b = add_slot(lay, p + "mod_b", size_t(6) * D);
        lay.layers.push_back(lo);
    }
    lay.final_rms_g = add_slot(lay, "final_rms_g", D);
    lay.final_mod_w = add_slot(lay, "final_mod_w", size_t(D) * 2 * D);
    lay.final_mod_b = add_slot(lay, "final_mod_b", size_t(2) * D);
    lay.out_w = add_slot(lay, "out_w", size_t(D) * C);
    lay.out_b = add_slot(lay, "out_b", C);
    lay.cls_head_w = add_slot(lay, "cls_head_w", size_t(D) * C);
    lay.cls_head_b = add_slot(lay, "cls_head_b", C);
    return lay;
}

std::string ParamLayout::slot_of(size_t flat_index) const {
    for (const auto& [name, span] : slots)
        if (flat_index >= span.first && flat_index < span.first + span.second) return name;
    return "<out of range>";
}

template <typename T>
DenoiserT<T>::DenoiserT(const DenoiserConfig& cfg) : cfg_(cfg), layout_(ParamLayout::build(cfg)) {
    params.assign(layout_.total, T(0));
}

template <typename T>
void DenoiserT<T>::init_params(Rng& rng) {
    std::fill(params.begin(), params.end(), T(0));
    auto fill_normal = [&](size_t off, size_t n, double std) {
        for (size_t i = 0; i < n; ++i) params[off + i] = static_cast<T>(std * rng.normal());
    };
    auto fill_ones = [&](size_t off, size_t n) {
        for (size_t i = 0; i < n; ++i) params[off + i] = T(1);
    };
    const auto& L = layout_;
    fill_normal(L.patch_in_w, size_t(L.C) * L.D, 1.0 / std::sqrt(double(L.C)));
    fill_normal(L.cls_in_w, size_t(L.C) * L.D, 1.0 / std::sqrt(double(L.C)));
    fill_normal(L.pos_emb, size_t(L.T) * L.D, 0.02);
    fill_normal(L.time_w1, size_t(L.TF) * L.D, 1.0 / std::sqrt(double(L.TF)));
    fill_normal(L.time_w2, size_t(L.D) * L.D, 1.0 / std::sqrt(double(L.D)));
    fill_normal(L.class_emb, size_t(L.n_class_emb) * L.D, 0.02);
    for (const auto& lo : L.layers) {
        fill_ones(lo.rms1_g, L.D);
        fill_ones(lo.rms2_g, L.D);
        fill_normal(lo.qkv_w, size_t(L.D) * 3 * L.D, 1.0 / std::sqrt(double(L.D)));
        fill_ones(lo.q_gain, L.HD);
        fill_ones(lo.k_gain, L.HD);
        fill_normal(lo.attn_out_w, size_t(L.D) * L.D, 1.0 / std::sqrt(double(L.D)));
        fill_normal(lo.ffn_w1, size_t(L.D) * L.F, 1.0 / std::sqrt(double(L.D)));
        fill_normal(lo.ffn_w3, size_t(L.D) * L.F, 1.0 / std::sqrt(double(L.D)));
        fill_normal(lo.ffn_w2, size_t(L.F) * L.D, 1.0 / std::sqrt(double(L.F)));
        // mod_w / mod_b stay zero: blocks start as identity
    }
    fill_ones(L.final_rms_g, L.D);
    // final modulation and both output heads stay zero
}

template <typename T>
void DenoiserT<T>::randomize_all(Rng& rng, double scale) {
    for (auto& p : params) p = static_cast<T>(scale * rng.normal());
}

template <typename T>
void DenoiserT<T>::forward(int B, const T* z_t, const T* z_cls_t, const double* t, const int32_t* labels,
                           DenoiserCacheT<T>& cache, Rng* dropout_rng) const {
    const auto& L = layout_;
    const int Tn = L.T, D = L.D, C = L.C, NH = L.NH, HD = L.HD, F = L.F, TF = L.TF;
    const int H = cfg_.grid_h, W = cfg_.grid_w, HW = L.HW;
    const int cls_off = L.cls_token ? 1 : 0;
    const int rows = B * Tn;
    const T* P = params.data();

    cache.B = B;
    cache.t.assign(t, t + B);
    cache.labels.assign(labels, labels + B);
    for (int b = 0; b < B; ++b)
        if (labels[b] < 0 || labels[b] > cfg_.num_classes)
            throw std::runtime_error("denoiser: label out of range (null class is " +
                                     std::to_string(cfg_.num_classes) + ")");

    // tokenize: CLS first, then the grid scanned row-major
    cache.tokens.assign(size_t(rows) * C, T(0));
    for (int b = 0; b < B; ++b) {
        if (L.cls_token)
            for (int c = 0; c < C; ++c) cache.tokens[size_t(b * Tn) * C + c] = z_cls_t[size_t(b) * C + c];
        for (int hw = 0; hw < HW; ++hw)
            for (int c = 0; c < C; ++c)
                cache.tokens[(size_t(b) * Tn + cls_off + hw) * C + c] = z_t[(size_t(b) * C + c) * HW + hw];
    }

    // input projections (patch weights everywhere, CLS rows overwritten)
    cache.x0.resize(size_t(rows) * D);
    linear_fwd(cache.tokens.data(), P + L.patch_in_w, P + L.patch_in_b, cache.x0.data(), rows, C, D);
    if (L.cls_token)
        for (int b = 0; b < B; ++b)
            linear_fwd(cache.tokens.data() + size_t(b * Tn) * C, P + L.cls_in_w, P + L.cls_in_b,
                       cache.x0.data() + size_t(b * Tn) * D, 1, C, D);
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < Tn; ++j)
            for (int d = 0; d < D; ++d) cache.x0[(size_t(b) * Tn + j) * D + d] += P[L.pos_emb + size_t(j) * D + d];

    // conditioning c = MLP(sinusoidal(t)) + class embedding
    cache.time_feat.assign(size_t(B) * TF, T(0));
    const int half = TF / 2;
    for (int b = 0; b < B; ++b) {
        const double tau = 1000.0 * t[b];
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
            cache.time_feat[size_t(b) * TF + i] = static_cast<T>(std::cos(tau * freq));
            cache.time_feat[size_t(b) * TF + half + i] = static_cast<T>(std::sin(tau * freq));
        }
    }
    cache.time_h_pre.resize(size_t(B) * D);
    linear_fwd(cache.time_feat.data(), P + L.time_w1, P + L.time_b1, cache.time_h_pre.data(), B, TF, D);
    cache.time_h.resize(size_t(B) * D);
    for (size_t i = 0; i < cache.time_h.size(); ++i) cache.time_h[i] = silu(cache.time_h_pre[i]);
    cache.cond.resize(size_t(B) * D);
    linear_fwd(cache.time_h.data(), P + L.time_w2, P + L.time_b2, cache.cond.data(), B, D, D);
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
            cache.cond[size_t(b) * D + d] += P[L.class_emb + size_t(labels[b]) * D + d];
    cache.silu_cond.resize(size_t(B) * D);
    for (size_t i = 0; i < cache.cond.size(); ++i) cache.silu_cond[i] = silu(cache.cond[i]);

    cache.layers.assign(L.L, typename DenoiserCacheT<T>::Layer{});
    std::vector<T> x = cache.x0;
    std::vector<T> norm_buf(size_t(rows) * D);

    const T inv_sqrt_hd = T(1) / std::sqrt(T(HD));
    for (int l = 0; l < L.L; ++l) {
        auto& ly = cache.layers[l];
        const auto& lo = L.layers[l];
        ly.x_in = x;

        ly.mod.resize(size_t(B) * 6 * D);
        linear_fwd(cache.silu_cond.data(), P + lo.mod_w, P + lo.mod_b, ly.mod.data(), B, D, 6 * D);

        // attention branch: modulate(RMSNorm(x)) -> qkv
        ly.inv_rms1.resize(rows);
        ly.m1.resize(size_t(rows) * D);
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* sa_shift = ly.mod.data() + size_t(b) * 6 * D;
            const T* sa_scale = sa_shift + D;
            ly.inv_rms1[r] = rmsnorm_fwd(ly.x_in.data() + size_t(r) * D, P + lo.rms1_g,
                                         norm_buf.data() + size_t(r) * D, D);
            modulate_fwd(norm_buf.data() + size_t(r) * D, sa_shift, sa_scale, ly.m1.data() + size_t(r) * D, D);
        }
        ly.qkv.resize(size_t(rows) * 3 * D);
        linear_fwd(ly.m1.data(), P + lo.qkv_w, P + lo.qkv_b, ly.qkv.data(), rows, D, 3 * D);

        ly.qn.resize(size_t(rows) * D);
        ly.kn.resize(size_t(rows) * D);
        if (L.qk_norm) {
            ly.q_inv_rms.resize(size_t(rows) * NH);
            ly.k_inv_rms.resize(size_t(rows) * NH);
        }
        for (int r = 0; r < rows; ++r) {
            const T* q = ly.qkv.data() + size_t(r) * 3 * D;
            const T* k = q + D;
            for (int h = 0; h < NH; ++h) {
                if (L.qk_norm) {
                    ly.q_inv_rms[size_t(r) * NH + h] =
                        rmsnorm_fwd(q + h * HD, P + lo.q_gain, ly.qn.data() + size_t(r) * D + h * HD, HD);
                    ly.k_inv_rms[size_t(r) * NH + h] =
                        rmsnorm_fwd(k + h * HD, P + lo.k_gain, ly.kn.data() + size_t(r) * D + h * HD, HD);
                } else {
                    std::copy(q + h * HD, q + (h + 1) * HD, ly.qn.data() + size_t(r) * D + h * HD);
                    std::copy(k + h * HD, k + (h + 1) * HD, ly.kn.data() + size_t(r) * D + h * HD);
                }
            }
        }

        const bool use_attn_drop = cfg_.attn_dropout > 0 && dropout_rng && dropout_layer(l, L.L);
        const bool use_proj_drop = cfg_.proj_dropout > 0 && dropout_rng && dropout_layer(l, L.L);
        if (use_attn_drop) ly.attn_mask.resize(size_t(B) * NH * Tn * Tn);

        ly.probs.resize(size_t(B) * NH * Tn * Tn);
        ly.attn_cat.assign(size_t(rows) * D, T(0));
        std::vector<T> scores(size_t(Tn) * Tn);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < NH; ++h) {
                const T* qb = ly.qn.data() + size_t(b * Tn) * D + h * HD;
                const T* kb = ly.kn.data() + size_t(b * Tn) * D + h * HD;
                const T* vb = ly.qkv.data() + size_t(b * Tn) * 3 * D + 2 * D + h * HD;
                // S = Q K^T / sqrt(HD) over this sample's tokens
                for (int i = 0; i < Tn; ++i) {
                    const T* qi = qb + size_t(i) * D;
                    for (int j = 0; j < Tn; ++j) {
                        const T* kj = kb + size_t(j) * D;
                        T s = T(0);
                        for (int d = 0; d < HD; ++d) s += qi[d] * kj[d];
                        scores[size_t(i) * Tn + j] = s * inv_sqrt_hd;
                    }
                }
                T* probs = ly.probs.data() + (size_t(b) * NH + h) * Tn * Tn;
                for (int i = 0; i < Tn; ++i) {
                    softmax_row(scores.data() + size_t(i) * Tn, Tn);
                    std::copy(scores.data() + size_t(i) * Tn, scores.data() + size_t(i + 1) * Tn,
                              probs + size_t(i) * Tn);
                }
                if (use_attn_drop) {
                    const T keep = T(1) / T(1.0 - cfg_.attn_dropout);
                    T* mask = ly.attn_mask.data() + (size_t(b) * NH + h) * Tn * Tn;
                    for (int i = 0; i < Tn * Tn; ++i) {
                        mask[i] = dropout_rng->uniform() < cfg_.attn_dropout ? T(0) : keep;
                        scores[i] = probs[i] * mask[i];
                    }
                } else {
                    std::copy(probs, probs + size_t(Tn) * Tn, scores.data());
                }
                for (int i = 0; i < Tn; ++i) {
                    T* oi = ly.attn_cat.data() + (size_t(b * Tn) + i) * D + h * HD;
                    for (int j = 0; j < Tn; ++j) {
                        const T p = scores[size_t(i) * Tn + j];
                        const T* vj = vb + size_t(j) * 3 * D;
                        for (int d = 0; d < HD; ++d) oi[d] += p * vj[d];
                    }
                }
            }
        }

        ly.attn_proj.resize(size_t(rows) * D);
        linear_fwd(ly.attn_cat.data(), P + lo.attn_out_w, P + lo.attn_out_b, ly.attn_proj.data(), rows, D, D);
        if (use_proj_drop) {
            const T keep = T(1) / T(1.0 - cfg_.proj_dropout);
            ly.proj_mask1.resize(size_t(rows) * D);
            for (auto& m : ly.proj_mask1) m = dropout_rng->uniform() < cfg_.proj_dropout ? T(0) : keep;
        }

        ly.x_mid.resize(size_t(rows) * D);
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* gate = ly.mod.data() + size_t(b) * 6 * D + 2 * D;
            for (int d = 0; d < D; ++d) {
                T branch = ly.attn_proj[size_t(r) * D + d];
                if (!ly.proj_mask1.empty()) branch *= ly.proj_mask1[size_t(r) * D + d];
                ly.x_mid[size_t(r) * D + d] = ly.x_in[size_t(r) * D + d] + gate[d] * branch;
            }
        }

        // FFN branch: modulate(RMSNorm(x_mid)) -> SwiGLU
        ly.inv_rms2.resize(rows);
        ly.m2.resize(size_t(rows) * D);
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* mlp_shift = ly.mod.data() + size_t(b) * 6 * D + 3 * D;
            const T* mlp_scale = mlp_shift + D;
            ly.inv_rms2[r] = rmsnorm_fwd(ly.x_mid.data() + size_t(r) * D, P + lo.rms2_g,
                                         norm_buf.data() + size_t(r) * D, D);
            modulate_fwd(norm_buf.data() + size_t(r) * D, mlp_shift, mlp_scale, ly.m2.data() + size_t(r) * D, D);
        }
        ly.ffn_a.resize(size_t(rows) * F);
        ly.ffn_g.resize(size_t(rows) * F);
        linear_fwd(ly.m2.data(), P + lo.ffn_w1, static_cast<const T*>(nullptr), ly.ffn_a.data(), rows, D, F);
        linear_fwd(ly.m2.data(), P + lo.ffn_w3, static_cast<const T*>(nullptr), ly.ffn_g.data(), rows, D, F);
        ly.ffn_su.resize(size_t(rows) * F);
        for (size_t i = 0; i < ly.ffn_su.size(); ++i) ly.ffn_su[i] = silu(ly.ffn_a[i]);
        std::vector<T> gated(size_t(rows) * F);
        for (size_t i = 0; i < gated.size(); ++i) gated[i] = ly.ffn_su[i] * ly.ffn_g[i];
        ly.ffn_out.resize(size_t(rows) * D);
        linear_fwd(gated.data(), P + lo.ffn_w2, static_cast<const T*>(nullptr), ly.ffn_out.data(), rows, F, D);
        if (use_proj_drop) {
            const T keep = T(1) / T(1.0 - cfg_.proj_dropout);
            ly.proj_mask2.resize(size_t(rows) * D);
            for (auto& m : ly.proj_mask2) m = dropout_rng->uniform() < cfg_.proj_dropout ? T(0) : keep;
        }

        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* gate = ly.mod.data() + size_t(b) * 6 * D + 5 * D;
            for (int d = 0; d < D; ++d) {
                T branch = ly.ffn_out[size_t(r) * D + d];
                if (!ly.proj_mask2.empty()) branch *= ly.proj_mask2[size_t(r) * D + d];
                x[size_t(r) * D + d] = ly.x_mid[size_t(r) * D + d] + gate[d] * branch;
            }
        }

        for (const T v : x)
            if (!std::isfinite(double(v)))
                throw std::runtime_error("denoiser: non-finite activation in layer " + std::to_string(l));
    }

    cache.x_final = x;
    cache.mod_f.resize(size_t(B) * 2 * D);
    linear_fwd(cache.silu_cond.data(), P + L.final_mod_w, P + L.final_mod_b, cache.mod_f.data(), B, D, 2 * D);
    cache.inv_rms_f.resize(rows);
    cache.mf.resize(size_t(rows) * D);
    for (int r = 0; r < rows; ++r) {
        const int b = r / Tn;
        const T* fshift = cache.mod_f.data() + size_t(b) * 2 * D;
        const T* fscale = fshift + D;
        cache.inv_rms_f[r] =
            rmsnorm_fwd(cache.x_final.data() + size_t(r) * D, P + L.final_rms_g, norm_buf.data() + size_t(r) * D, D);
        modulate_fwd(norm_buf.data() + size_t(r) * D, fshift, fscale, cache.mf.data() + size_t(r) * D, D);
    }

    // heads: per-token patch projection scattered back into [B,C,H,W]
    cache.y_patch.assign(size_t(B) * C * HW, T(0));
    std::vector<T> patch_out(size_t(rows) * C);
    linear_fwd(cache.mf.data(), P + L.out_w, P + L.out_b, patch_out.data(), rows, D, C);
    for (int b = 0; b < B; ++b)
        for (int hw = 0; hw < HW; ++hw)
            for (int c = 0; c < C; ++c)
                cache.y_patch[(size_t(b) * C + c) * HW + hw] = patch_out[(size_t(b) * Tn + cls_off + hw) * C + c];

    cache.y_cls.assign(size_t(B) * C, T(0));
    if (L.cls_token)
        for (int b = 0; b < B; ++b)
            linear_fwd(cache.mf.data() + size_t(b * Tn) * D, P + L.cls_head_w, P + L.cls_head_b,
                       cache.y_cls.data() + size_t(b) * C, 1, D, C);
}

template <typename T>
void DenoiserT<T>::backward(const DenoiserCacheT<T>& cache, const T* d_y_patch, const T* d_y_cls,
                            std::vector<T>& grads) const {
    const auto& L = layout_;
    const int B = cache.B, Tn = L.T, D = L.D, C = L.C, NH = L.NH, HD = L.HD, F = L.F, TF = L.TF, HW = L.HW;
    const int cls_off = L.cls_token ? 1 : 0;
    const int rows = B * Tn;
    const T* P = params.data();
    if (grads.size() != params.size()) throw std::runtime_error("denoiser backward: gradient buffer size mismatch");
    if (cache.x_final.size() != size_t(rows) * D) throw std::runtime_error("denoiser backward: cache mismatch");
    T* G = grads.data();

    // heads
    std::vector<T> d_patch_out(size_t(rows) * C, T(0));
    for (int b = 0; b < B; ++b)
        for (int hw = 0; hw < HW; ++hw)
            for (int c = 0; c < C; ++c)
                d_patch_out[(size_t(b) * Tn + cls_off + hw) * C + c] = d_y_patch[(size_t(b) * C + c) * HW + hw];

    std::vector<T> d_mf(size_t(rows) * D, T(0));
    linear_bwd(cache.mf.data(), P + L.out_w, d_patch_out.data(), d_mf.data(), G + L.out_w, G + L.out_b, rows, D, C);
    if (L.cls_token && d_y_cls)
        for (int b = 0; b < B; ++b)
            linear_bwd(cache.mf.data() + size_t(b * Tn) * D, P + L.cls_head_w, d_y_cls + size_t(b) * C,
                       d_mf.data() + size_t(b * Tn) * D, G + L.cls_head_w, G + L.cls_head_b, 1, D, C);

    // final modulated RMSNorm
    std::vector<T> d_silu_cond(size_t(B) * D, T(0));
    std::vector<T> d_x(size_t(rows) * D, T(0));
    std::vector<T> d_mod_f(size_t(B) * 2 * D, T(0));
    std::vector<T> nf(D);
    for (int r = 0; r < rows; ++r) {
        const int b = r / Tn;
        const T* fshift = cache.mod_f.data() + size_t(b) * 2 * D;
        const T* fscale = fshift + D;
        const T* xr = cache.x_final.data() + size_t(r) * D;
        const T ir = cache.inv_rms_f[r];
        for (int d = 0; d < D; ++d) nf[d] = xr[d] * ir * P[L.final_rms_g + d];
        std::vector<T> d_nf(D, T(0));
        modulate_bwd(nf.data(), fscale, d_mf.data() + size_t(r) * D, d_nf.data(),
                     d_mod_f.data() + size_t(b) * 2 * D, d_mod_f.data() + size_t(b) * 2 * D + D, D);
        rmsnorm_bwd(xr, P + L.final_rms_g, ir, d_nf.data(), d_x.data() + size_t(r) * D, G + L.final_rms_g, D);
    }
    linear_bwd(cache.silu_cond.data(), P + L.final_mod_w, d_mod_f.data(), d_silu_cond.data(), G + L.final_mod_w,
               G + L.final_mod_b, B, D, 2 * D);

    const T inv_sqrt_hd = T(1) / std::sqrt(T(HD));
    std::vector<T> d_branch(size_t(rows) * D);
    std::vector<T> d_m(size_t(rows) * D);
    std::vector<T> d_mod(size_t(B) * 6 * D);
    std::vector<T> work(D);

    for (int l = L.L - 1; l >= 0; --l) {
        const auto& ly = cache.layers[l];
        const auto& lo = L.layers[l];
        std::fill(d_mod.begin(), d_mod.end(), T(0));

        // x_out = x_mid + gate_mlp * drop2(ffn_out); d_x currently holds d(x_out)
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* gate = ly.mod.data() + size_t(b) * 6 * D + 5 * D;
            T* d_gate = d_mod.data() + size_t(b) * 6 * D + 5 * D;
            for (int d = 0; d < D; ++d) {
                T branch = ly.ffn_out[size_t(r) * D + d];
                if (!ly.proj_mask2.empty()) branch *= ly.proj_mask2[size_t(r) * D + d];
                const T dy = d_x[size_t(r) * D + d];
                d_gate[d] += dy * branch;
                T db = dy * gate[d];
                if (!ly.proj_mask2.empty()) db *= ly.proj_mask2[size_t(r) * D + d];
                d_branch[size_t(r) * D + d] = db;  // d(ffn_out raw)
            }
        }

        // SwiGLU backward
        std::vector<T> gated(size_t(rows) * F);
        for (size_t i = 0; i < gated.size(); ++i) gated[i] = ly.ffn_su[i] * ly.ffn_g[i];
        std::vector<T> d_gated(size_t(rows) * F, T(0));
        linear_bwd(gated.data(), P + lo.ffn_w2, d_branch.data(), d_gated.data(), G + lo.ffn_w2,
                   static_cast<T*>(nullptr), rows, F, D);
        std::vector<T> d_a(size_t(rows) * F), d_g(size_t(rows) * F);
        for (size_t i = 0; i < d_gated.size(); ++i) {
            d_a[i] = d_gated[i] * ly.ffn_g[i] * silu_grad(ly.ffn_a[i]);
            d_g[i] = d_gated[i] * ly.ffn_su[i];
        }
        std::fill(d_m.begin(), d_m.end(), T(0));
        linear_bwd(ly.m2.data(), P + lo.ffn_w1, d_a.data(), d_m.data(), G + lo.ffn_w1, static_cast<T*>(nullptr), rows,
                   D, F);
        linear_bwd(ly.m2.data(), P + lo.ffn_w3, d_g.data(), d_m.data(), G + lo.ffn_w3, static_cast<T*>(nullptr), rows,
                   D, F);

        // modulate2 + rms2 backward; d(x_mid) = d(x_out) + norm-path contribution
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* mlp_scale = ly.mod.data() + size_t(b) * 6 * D + 4 * D;
            const T* xr = ly.x_mid.data() + size_t(r) * D;
            const T ir = ly.inv_rms2[r];
            for (int d = 0; d < D; ++d) work[d] = xr[d] * ir * P[lo.rms2_g + d];  // n2
            std::vector<T> d_n(D, T(0));
            modulate_bwd(work.data(), mlp_scale, d_m.data() + size_t(r) * D, d_n.data(),
                         d_mod.data() + size_t(b) * 6 * D + 3 * D, d_mod.data() + size_t(b) * 6 * D + 4 * D, D);
            rmsnorm_bwd(xr, P + lo.rms2_g, ir, d_n.data(), d_x.data() + size_t(r) * D, G + lo.rms2_g, D);
        }

        // x_mid = x_in + gate_sa * drop1(attn_proj); d_x now holds d(x_mid)
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* gate = ly.mod.data() + size_t(b) * 6 * D + 2 * D;
            T* d_gate = d_mod.data() + size_t(b) * 6 * D + 2 * D;
            for (int d = 0; d < D; ++d) {
                T branch = ly.attn_proj[size_t(r) * D + d];
                if (!ly.proj_mask1.empty()) branch *= ly.proj_mask1[size_t(r) * D + d];
                const T dy = d_x[size_t(r) * D + d];
                d_gate[d] += dy * branch;
                T db = dy * gate[d];
                if (!ly.proj_mask1.empty()) db *= ly.proj_mask1[size_t(r) * D + d];
                d_branch[size_t(r) * D + d] = db;  // d(attn_proj raw)
            }
        }

        std::vector<T> d_attn_cat(size_t(rows) * D, T(0));
        linear_bwd(ly.attn_cat.data(), P + lo.attn_out_w, d_branch.data(), d_attn_cat.data(), G + lo.attn_out_w,
                   G + lo.attn_out_b, rows, D, D);

        // attention core backward
        std::vector<T> d_qn(size_t(rows) * D, T(0)), d_kn(size_t(rows) * D, T(0));
        std::vector<T> d_qkv(size_t(rows) * 3 * D, T(0));
        std::vector<T> dP(size_t(Tn) * Tn), dS(size_t(Tn) * Tn);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < NH; ++h) {
                const T* probs = ly.probs.data() + (size_t(b) * NH + h) * Tn * Tn;
                const T* mask =
                    ly.attn_mask.empty() ? nullptr : ly.attn_mask.data() + (size_t(b) * NH + h) * Tn * Tn;
                const T* dOb = d_attn_cat.data() + size_t(b * Tn) * D + h * HD;
                const T* vb = ly.qkv.data() + size_t(b * Tn) * 3 * D + 2 * D + h * HD;
                T* dVb = d_qkv.data() + size_t(b * Tn) * 3 * D + 2 * D + h * HD;

                // dP = dO V^T ; dV += P_used^T dO
                for (int i = 0; i < Tn; ++i) {
                    const T* dOi = dOb + size_t(i) * D;
                    for (int j = 0; j < Tn; ++j) {
                        const T* vj = vb + size_t(j) * 3 * D;
                        T s = T(0);
                        for (int d = 0; d < HD; ++d) s += dOi[d] * vj[d];
                        dP[size_t(i) * Tn + j] = s;
                        const T p = mask ? probs[size_t(i) * Tn + j] * mask[size_t(i) * Tn + j]
                                         : probs[size_t(i) * Tn + j];
                        T* dVj = dVb + size_t(j) * 3 * D;
                        for (int d = 0; d < HD; ++d) dVj[d] += p * dOi[d];
                    }
                }

                if (mask)
                    for (int i = 0; i < Tn * Tn; ++i) dP[i] *= mask[i];
                std::fill(dS.begin(), dS.end(), T(0));
                for (int i = 0; i < Tn; ++i)
                    softmax_bwd(probs + size_t(i) * Tn, dP.data() + size_t(i) * Tn, dS.data() + size_t(i) * Tn, Tn);
                for (auto& v : dS) v *= inv_sqrt_hd;

                // dQ += dS K ; dK += dS^T Q
                const T* qb = ly.qn.data() + size_t(b * Tn) * D + h * HD;
                const T* kb = ly.kn.data() + size_t(b * Tn) * D + h * HD;
                T* dQb = d_qn.data() + size_t(b * Tn) * D + h * HD;
                T* dKb = d_kn.data() + size_t(b * Tn) * D + h * HD;
                for (int i = 0; i < Tn; ++i) {
                    T* dQi = dQb + size_t(i) * D;
                    const T* qi = qb + size_t(i) * D;
                    for (int j = 0; j < Tn; ++j) {
                        const T ds = dS[size_t(i) * Tn + j];
                        const T* kj = kb + size_t(j) * D;
                        T* dKj = dKb + size_t(j) * D;
                        for (int d = 0; d < HD; ++d) {
                            dQi[d] += ds * kj[d];
                            dKj[d] += ds * qi[d];
                        }
                    }
                }
            }
        }

        // qk-norm backward into d_qkv
        for (int r = 0; r < rows; ++r) {
            const T* q = ly.qkv.data() + size_t(r) * 3 * D;
            const T* k = q + D;
            for (int h = 0; h < NH; ++h) {
                if (L.qk_norm) {
                    rmsnorm_bwd(q + h * HD, P + lo.q_gain, ly.q_inv_rms[size_t(r) * NH + h],
                                d_qn.data() + size_t(r) * D + h * HD, d_qkv.data() + size_t(r) * 3 * D + h * HD,
                                G + lo.q_gain, HD);
                    rmsnorm_bwd(k + h * HD, P + lo.k_gain, ly.k_inv_rms[size_t(r) * NH + h],
                                d_kn.data() + size_t(r) * D + h * HD, d_qkv.data() + size_t(r) * 3 * D + D + h * HD,
                                G + lo.k_gain, HD);
                } else {
                    for (int d = 0; d < HD; ++d) {
                        d_qkv[size_t(r) * 3 * D + h * HD + d] += d_qn[size_t(r) * D + h * HD + d];
                        d_qkv[size_t(r) * 3 * D + D + h * HD + d] += d_kn[size_t(r) * D + h * HD + d];
                    }
                }
            }
        }

        std::fill(d_m.begin(), d_m.end(), T(0));
        linear_bwd(ly.m1.data(), P + lo.qkv_w, d_qkv.data(), d_m.data(), G + lo.qkv_w, G + lo.qkv_b, rows, D, 3 * D);

        // modulate1 + rms1 backward; d(x_in) = d(x_mid) + norm-path contribution
        for (int r = 0; r < rows; ++r) {
            const int b = r / Tn;
            const T* sa_scale = ly.mod.data() + size_t(b) * 6 * D + D;
            const T* xr = ly.x_in.data() + size_t(r) * D;
            const T ir = ly.inv_rms1[r];
            for (int d = 0; d < D; ++d) work[d] = xr[d] * ir * P[lo.rms1_g + d];  // n1
            std::vector<T> d_n(D, T(0));
            modulate_bwd(work.data(), sa_scale, d_m.data() + size_t(r) * D, d_n.data(),
                         d_mod.data() + size_t(b) * 6 * D, d_mod.data() + size_t(b) * 6 * D + D, D);
            rmsnorm_bwd(xr, P + lo.rms1_g, ir, d_n.data(), d_x.data() + size_t(r) * D, G + lo.rms1_g, D);
        }

        linear_bwd(cache.silu_cond.data(), P + lo.mod_w, d_mod.data(), d_silu_cond.data(), G + lo.mod_w, G + lo.mod_b,
                   B, D, 6 * D);
    }

    // conditioning path
    std::vector<T> d_cond(size_t(B) * D);
    for (size_t i = 0; i < d_cond.size(); ++i) d_cond[i] = d_silu_cond[i] * silu_grad(cache.cond[i]);
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
            G[L.class_emb + size_t(cache.labels[b]) * D + d] += d_cond[size_t(b) * D + d];
    std::vector<T> d_time_h(size_t(B) * D, T(0));
    linear_bwd(cache.time_h.data(), P + L.time_w2, d_cond.data(), d_time_h.data(), G + L.time_w2, G + L.time_b2, B, D,
               D);
    std::vector<T> d_h_pre(size_t(B) * D);
    for (size_t i = 0; i < d_h_pre.size(); ++i) d_h_pre[i] = d_time_h[i] * silu_grad(cache.time_h_pre[i]);
    linear_bwd(cache.time_feat.data(), P + L.time_w1, d_h_pre.data(), static_cast<T*>(nullptr), G + L.time_w1,
               G + L.time_b1, B, TF, D);

    // positional embeddings and input projections
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < Tn; ++j)
            for (int d = 0; d < D; ++d)
                G[L.pos_emb + size_t(j) * D + d] += d_x[(size_t(b) * Tn + j) * D + d];
    if (L.cls_token) {
        for (int b = 0; b < B; ++b) {
            linear_bwd(cache.tokens.data() + size_t(b * Tn) * C, P + L.cls_in_w, d_x.data() + size_t(b * Tn) * D,
                       static_cast<T*>(nullptr), G + L.cls_in_w, G + L.cls_in_b, 1, C, D);
            // patch rows of this sample
            linear_bwd(cache.tokens.data() + (size_t(b) * Tn + 1) * C, P + L.patch_in_w,
                       d_x.data() + (size_t(b) * Tn + 1) * D, static_cast<T*>(nullptr), G + L.patch_in_w,
                       G + L.patch_in_b, Tn - 1, C, D);
        }
    } else {
        linear_bwd(cache.tokens.data(), P + L.patch_in_w, d_x.data(), static_cast<T*>(nullptr), G + L.patch_in_w,
                   G + L.patch_in_b, rows, C, D);
    }
}

template <typename T>
void ema_update(std::vector<T>& shadow, const std::vector<T>& params, double decay) {
    if (shadow.size() != params.size()) throw std::runtime_error("ema_update: shape mismatch");
    if (!(decay >= 0.0 && decay < 1.0)) throw std::runtime_error("ema_update: decay must be in [0,1)");
    const T d = static_cast<T>(decay);
    const T one_minus = static_cast<T>(1.0 - decay);
    for (size_t i = 0; i < shadow.size(); ++i) shadow[i] = d * shadow[i] + one_minus * params[i];
}

template class DenoiserT<float>;
template class DenoiserT<double>;
template void ema_update<float>(std::vector<float>&, const std::vector<float>&, double);
template void ema_update<double>(std::vector<double>&, const std::vector<double>&, double);

}  // namespace flowlab
