#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowlab {

// Row-major f32 tensor, the unit of file I/O.
struct Tensor {
    std::vector<uint64_t> dims;
    std::vector<float> values;

    size_t numel() const {
        size_t n = 1;
        for (uint64_t d : dims) n *= static_cast<size_t>(d);
        return dims.empty() ? 0 : n;
    }
};

// A batch of token grids plus per-sample CLS vectors and class labels.
// patches: [B, C, H, W] row-major; cls: [B, C].
struct FeatureBatch {
    int b = 0, c = 0, h = 0, w = 0;
    std::vector<float> patches;
    std::vector<float> cls;
    std::vector<int32_t> labels;

    size_t patch_dim() const { return static_cast<size_t>(c) * h * w; }

    float* sample(int i) { return patches.data() + static_cast<size_t>(i) * patch_dim(); }
    const float* sample(int i) const { return patches.data() + static_cast<size_t>(i) * patch_dim(); }
    float* cls_row(int i) { return cls.data() + static_cast<size_t>(i) * c; }
    const float* cls_row(int i) const { return cls.data() + static_cast<size_t>(i) * c; }

    void resize(int b_, int c_, int h_, int w_) {
        b = b_;
        c = c_;
        h = h_;
        w = w_;
        patches.assign(static_cast<size_t>(b) * c * h * w, 0.0f);
        cls.assign(static_cast<size_t>(b) * c, 0.0f);
        labels.assign(b, 0);
    }

    void check_consistent() const {
        if (patches.size() != static_cast<size_t>(b) * c * h * w || cls.size() != static_cast<size_t>(b) * c ||
            labels.size() != static_cast<size_t>(b))
            throw std::runtime_error("FeatureBatch: inconsistent shapes");
    }

    FeatureBatch select(const std::vector<int>& idx) const {
        FeatureBatch out;
        out.resize(static_cast<int>(idx.size()), c, h, w);
        for (size_t j = 0; j < idx.size(); ++j) {
            const int i = idx[j];
            std::copy(sample(i), sample(i) + patch_dim(), out.sample(static_cast<int>(j)));
            std::copy(cls_row(i), cls_row(i) + c, out.cls_row(static_cast<int>(j)));
            out.labels[j] = labels[i];
        }
        return out;
    }
};

}  // namespace flowlab
