#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "larvseg/config.hpp"
#include "larvseg/errors.hpp"
#include "larvseg/model.hpp"
#include "larvseg/rng.hpp"
#include "larvseg/synth.hpp"
#include "larvseg/tensor.hpp"

namespace larvseg {

// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
    explicit ConfusionMatrix(std::size_t categories)
        : categories(categories), counts(categories * categories, 0) {}

    std::size_t categories;
    std::vector<std::uint64_t> counts;

    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * categories + pred]; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const {
        return counts[gt * categories + pred];
    }

    std::uint64_t total() const {
        std::uint64_t n = 0;
        for (std::uint64_t v : counts) n += v;
        return n;
    }

    void accumulate(const Tensor& pred, const Tensor& gt, std::size_t ignore_id) {
        if (pred.shape() != gt.shape())
            throw DimensionError("confusion: prediction and ground truth shapes differ");
        for (std::size_t p = 0; p < pred.numel(); ++p) {
            const auto g = static_cast<std::size_t>(gt.values()[p]);
            if (g == ignore_id) continue;
            const auto pr = static_cast<std::size_t>(pred.values()[p]);
            if (g >= categories)
                throw ContractError("confusion: ground-truth id " + std::to_string(g) +
                                    " out of range");
            if (pr >= categories)
                throw ContractError("confusion: predicted id " + std::to_string(pr) +
                                    " out of range");
            ++at(g, pr);
        }
    }
};

struct MiouReport {
    std::vector<double> iou;               // NaN for categories absent from gt and pred
    std::vector<std::uint64_t> gt_pixels;  // ground-truth pixel count per category
    double mean_all = std::numeric_limits<double>::quiet_NaN();
    double mean_base = std::numeric_limits<double>::quiet_NaN();
    double mean_novel = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t pixels = 0;
};

// IoU_c = TP / (TP + FP + FN). Subset means run over the categories with at
// least one ground-truth pixel, the standard mIoU convention.
inline MiouReport miou(const ConfusionMatrix& cm, const std::vector<std::size_t>& base_ids,
                       const std::vector<std::size_t>& novel_ids) {
    const std::size_t c = cm.categories;
    std::vector<int> membership(c, 0);  // 1 = base, 2 = novel
    for (std::size_t id : base_ids) {
        if (id >= c) throw ContractError("miou: base id out of range");
        membership[id] = 1;
    }
    for (std::size_t id : novel_ids) {
        if (id >= c || membership[id] != 0)
            throw ContractError("miou: base and novel ids must partition the categories");
        membership[id] = 2;
    }
    for (std::size_t id = 0; id < c; ++id)
        if (membership[id] == 0)
            throw ContractError("miou: category " + std::to_string(id) +
                                " missing from both splits");

    MiouReport rep;
    rep.pixels = cm.total();
    if (rep.pixels == 0) throw ContractError("miou: no pixels were evaluated");

    rep.iou.assign(c, std::numeric_limits<double>::quiet_NaN());
    rep.gt_pixels.assign(c, 0);
    double sum_all = 0.0, sum_base = 0.0, sum_novel = 0.0;
    std::size_t n_all = 0, n_base = 0, n_novel = 0;
    for (std::size_t k = 0; k < c; ++k) {
        std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0, gt = 0;
        for (std::size_t j = 0; j < c; ++j) {
            gt += cm.at(k, j);
            if (j != k) {
                fn += cm.at(k, j);
                fp += cm.at(j, k);
            }
        }
        rep.gt_pixels[k] = gt;
        if (tp + fp + fn > 0)
            rep.iou[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        if (gt == 0) continue;
        sum_all += rep.iou[k];
        ++n_all;
        if (membership[k] == 1) {
            sum_base += rep.iou[k];
            ++n_base;
        } else {
            sum_novel += rep.iou[k];
            ++n_novel;
        }
    }
    if (n_all > 0) rep.mean_all = sum_all / static_cast<double>(n_all);
    if (n_base > 0) rep.mean_base = sum_base / static_cast<double>(n_base);
    if (n_novel > 0) rep.mean_novel = sum_novel / static_cast<double>(n_novel);
    return rep;
}

// Cosine similarity of the anchor pixel's feature vector against every pixel.
inline Tensor response_map(const Tensor& fm, std::size_t h_c, std::size_t w_c) {
    if (fm.rank() != 3) throw DimensionError("response_map: feature map must be H x W x D");
    const std::size_t h = fm.extent(0), w = fm.extent(1), d = fm.extent(2);
    if (h_c >= h || w_c >= w) throw ContractError("response_map: anchor out of bounds");
    const std::vector<double>& f = fm.values();
    const double* anchor = f.data() + (h_c * w + w_c) * d;
    double an2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) an2 += anchor[i] * anchor[i];
    const double an = std::sqrt(std::max(an2, kCosineEps * kCosineEps));
    std::vector<double> out(h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
        const double* v = f.data() + p * d;
        double dot = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dot += anchor[i] * v[i];
            n2 += v[i] * v[i];
        }
        out[p] = dot / (an * std::sqrt(std::max(n2, kCosineEps * kCosineEps)));
    }
    return Tensor::from({h, w}, std::move(out));
}

struct GroupingReport {
    double base_accuracy = std::numeric_limits<double>::quiet_NaN();
    double novel_accuracy = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t base_pixels = 0;
    std::uint64_t novel_pixels = 0;
    MiouReport miou;
};

// The exploratory pixel-grouping experiment: per image, one seeded anchor
// pixel is drawn for every category present in the full mask, and each pixel
// is assigned the category whose anchor response is the highest. Accuracy is
// reported separately for pixels whose ground truth is base vs novel.
inline GroupingReport pixel_grouping_eval(const Model& model, const std::vector<Sample>& samples,
                                          const std::vector<Tensor>& masks, std::size_t base_count,
                                          std::size_t ignore_id, std::uint64_t seed) {
    if (samples.size() != masks.size())
        throw ContractError("pixel_grouping_eval: sample/mask count mismatch");
    if (samples.empty()) throw ContractError("pixel_grouping_eval: no samples");

    const std::size_t c = model.clf.weights.extent(0);
    ConfusionMatrix cm(c);
    std::uint64_t base_correct = 0, novel_correct = 0;
    GroupingReport rep;

    for (std::size_t si = 0; si < samples.size(); ++si) {
        const Tensor fm = embed(samples[si].image, model.backbone);
        const std::size_t h = fm.extent(0), w = fm.extent(1);
        const Tensor& mask = masks[si];
        if (mask.shape() != Shape{h, w})
            throw DimensionError("pixel_grouping_eval: mask shape mismatch");

        std::map<std::size_t, std::vector<std::size_t>> by_cat;
        for (std::size_t p = 0; p < h * w; ++p) {
            const auto id = static_cast<std::size_t>(mask.values()[p]);
            if (id == ignore_id) continue;
            if (id >= c)
                throw ContractError("pixel_grouping_eval: mask id " + std::to_string(id) +
                                    " out of range");
            by_cat[id].push_back(p);
        }
        if (by_cat.empty()) continue;

        // One anchor per present category, drawn in ascending category order
        // from a per-image stream.
        auto rng = make_rng(seed, stream::anchor_pick, si);
        std::vector<std::size_t> cats;
        std::vector<Tensor> maps;
        for (const auto& [cat, pixels] : by_cat) {
            const std::size_t anchor = pixels[draw_index(rng, pixels.size())];
            cats.push_back(cat);
            maps.push_back(response_map(fm, anchor / w, anchor % w));
        }

        Tensor pred = Tensor::zeros({h, w});
        for (std::size_t p = 0; p < h * w; ++p) {
            std::size_t best = 0;
            for (std::size_t m = 1; m < maps.size(); ++m)
                if (maps[m].values()[p] > maps[best].values()[p]) best = m;
            pred.values()[p] = static_cast<double>(cats[best]);
            const auto gt = static_cast<std::size_t>(mask.values()[p]);
            if (gt == ignore_id) continue;
            const bool correct = cats[best] == gt;
            if (gt < base_count) {
                ++rep.base_pixels;
                base_correct += correct;
            } else {
                ++rep.novel_pixels;
                novel_correct += correct;
            }
        }
        cm.accumulate(pred, mask, ignore_id);
    }

    if (rep.base_pixels > 0)
        rep.base_accuracy =
            static_cast<double>(base_correct) / static_cast<double>(rep.base_pixels);
    if (rep.novel_pixels > 0)
        rep.novel_accuracy =
            static_cast<double>(novel_correct) / static_cast<double>(rep.novel_pixels);

    std::vector<std::size_t> base_ids, novel_ids;
    for (std::size_t id = 0; id < c; ++id)
        (id < base_count ? base_ids : novel_ids).push_back(id);
    rep.miou = miou(cm, base_ids, novel_ids);
    return rep;
}

// Standard mIoU evaluation of model predictions against full masks.
inline MiouReport evaluate_miou(const Model& model, const std::vector<Sample>& samples,
                                const std::vector<Tensor>& masks, std::size_t base_count,
                                std::size_t ignore_id) {
    if (samples.size() != masks.size())
        throw ContractError("evaluate_miou: sample/mask count mismatch");
    const std::size_t c = model.clf.weights.extent(0);
    ConfusionMatrix cm(c);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Tensor pred = predict_mask(score(embed(samples[i].image, model.backbone), model.clf));
        cm.accumulate(pred, masks[i], ignore_id);
    }
    std::vector<std::size_t> base_ids, novel_ids;
    for (std::size_t id = 0; id < c; ++id)
        (id < base_count ? base_ids : novel_ids).push_back(id);
    return miou(cm, base_ids, novel_ids);
}

}  // namespace larvseg
