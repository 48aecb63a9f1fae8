#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "larvseg/config.hpp"
#include "larvseg/errors.hpp"
#include "larvseg/rng.hpp"
#include "larvseg/tensor.hpp"

namespace larvseg {

// Desk-scale segmenter: edge-clamped neighborhood averaging followed by a
// per-pixel two-layer MLP, then a one-layer cosine classifier. Same-category
// pixels share a mean feature, so this preserves exactly the property the
// attention machinery depends on.

struct Backbone {
    Tensor w1, b1;  // F x Dh, Dh
    Tensor w2, b2;  // Dh x D, D
    std::size_t mixing_radius = 1;
};

struct CosineClassifier {
    Tensor weights;  // C x D; rows are normalized at score time
    double logit_scale = 20.0;
};

struct Model {
    Backbone backbone;
    CosineClassifier clf;

    // Fixed order: the optimizer, the checkpoint format and the determinism
    // guarantees all iterate parameters through this list.
    std::vector<std::pair<std::string, Tensor>> named_params() const {
        return {{"backbone.w1", backbone.w1},
                {"backbone.b1", backbone.b1},
                {"backbone.w2", backbone.w2},
                {"backbone.b2", backbone.b2},
                {"classifier.weights", clf.weights}};
    }
};

inline Model init_model(const Config& cfg) {
    auto rng = make_rng(cfg.seed, stream::weight_init);
    auto uniform_tensor = [&](Shape shape) {
        std::size_t n = shape_numel(shape);
        std::vector<double> v(n);
        for (auto& x : v) x = draw_uniform(rng, -cfg.init_range, cfg.init_range);
        return Tensor::from(std::move(shape), std::move(v), true);
    };
    Model m;
    m.backbone.w1 = uniform_tensor({cfg.feature_dim, cfg.hidden_dim});
    m.backbone.b1 = uniform_tensor({cfg.hidden_dim});
    m.backbone.w2 = uniform_tensor({cfg.hidden_dim, cfg.embed_dim});
    m.backbone.b2 = uniform_tensor({cfg.embed_dim});
    m.backbone.mixing_radius = cfg.mixing_radius;
    m.clf.weights = uniform_tensor({cfg.categories, cfg.embed_dim});
    m.clf.logit_scale = cfg.logit_scale;
    return m;
}

// image H x W x F -> features H x W x D, differentiable end to end.
inline Tensor embed(const Tensor& image, const Backbone& bb) {
    if (image.rank() != 3) throw DimensionError("embed: image must be H x W x F");
    if (image.extent(2) != bb.w1.extent(0))
        throw DimensionError("embed: feature dim " + std::to_string(image.extent(2)) +
                             " does not match backbone input " + std::to_string(bb.w1.extent(0)));
    const std::size_t h = image.extent(0), w = image.extent(1);
    Tensor mixed = bb.mixing_radius == 0 ? image : box_mean(image, bb.mixing_radius);
    Tensor rows = reshape(mixed, {h * w, image.extent(2)});
    Tensor hidden = relu(add_rowvec(matmul(rows, bb.w1), bb.b1));
    Tensor out = add_rowvec(matmul(hidden, bb.w2), bb.b2);
    return reshape(out, {h, w, bb.w2.extent(1)});
}

// features H x W x D -> cosine scores H x W x C in [-1, 1].
inline Tensor score(const Tensor& fm, const CosineClassifier& clf) {
    if (fm.rank() != 3) throw DimensionError("score: feature map must be H x W x D");
    if (fm.extent(2) != clf.weights.extent(1))
        throw DimensionError("score: embed dim mismatch");
    const std::size_t h = fm.extent(0), w = fm.extent(1);
    Tensor rows = l2_normalize_rows(reshape(fm, {h * w, fm.extent(2)}));
    Tensor wn = l2_normalize_rows(clf.weights);
    Tensor s = matmul(rows, transpose(wn));
    return reshape(s, {h, w, clf.weights.extent(0)});
}

// Per-pixel argmax; ties break toward the smallest id.
inline Tensor predict_mask(const Tensor& sm) {
    if (sm.rank() != 3) throw DimensionError("predict_mask: score map must be H x W x C");
    const std::size_t h = sm.extent(0), w = sm.extent(1), c = sm.extent(2);
    Tensor mask = Tensor::zeros({h, w});
    const auto& sv = sm.values();
    for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (sv[p * c + k] > sv[p * c + best]) best = k;
        mask.values()[p] = static_cast<double>(best);
    }
    return mask;
}

}  // namespace larvseg
