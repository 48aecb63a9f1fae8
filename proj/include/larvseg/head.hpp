#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "larvseg/errors.hpp"
#include "larvseg/model.hpp"
#include "larvseg/tensor.hpp"

// The category-wise attentive classifier and its supporting pieces: the
// pixel-level and image-level cross-entropies, the cross-image memory bank,
// the attention map built from memory confidence, and the attentively pooled
// auxiliary loss. Masked logits use an additive -1e30 so the excluded present
// categories vanish from softmax denominators without branching.

namespace larvseg {

inline constexpr double kMaskNegInf = -1e30;

struct LossWeights {
    double lambda_cls = 0.1;
    double lambda_aux = 0.1;
    double tau = 1.0;
    std::size_t top_k = 20;
    std::size_t capacity = 20;
};

// ---------------------------------------------------------------------------
// Pixel-level cross-entropy (L_seg)
// ---------------------------------------------------------------------------

inline Tensor seg_loss(const Tensor& sm, const Tensor& mask, std::size_t ignore_id,
                       double logit_scale) {
    if (sm.rank() != 3) throw DimensionError("seg_loss: score map must be H x W x C");
    const std::size_t h = sm.extent(0), w = sm.extent(1), c = sm.extent(2);
    if (mask.rank() != 2 || mask.extent(0) != h || mask.extent(1) != w)
        throw DimensionError("seg_loss: mask shape mismatch");

    std::vector<std::size_t> pixels, targets;
    for (std::size_t p = 0; p < h * w; ++p) {
        const auto id = static_cast<std::size_t>(mask.values()[p]);
        if (id == ignore_id) continue;
        if (id >= c) throw ContractError("seg_loss: mask id " + std::to_string(id) + " out of range");
        pixels.push_back(p);
        targets.push_back(id);
    }
    if (pixels.empty()) return Tensor::scalar(0.0);

    Tensor logits = reshape(sm, {h * w, c}) * logit_scale;
    Tensor rows = gather_rows(logits, pixels);
    Tensor lse = logsumexp_rows(rows);
    Tensor tgt = take_per_row(rows, targets);
    return mean(lse - tgt);
}

// ---------------------------------------------------------------------------
// Image-level classification (L_cls)
// ---------------------------------------------------------------------------

namespace detail {

// Cross-entropy of one masked softmax row: the denominator runs over the
// target plus every category absent from `labels`; other present categories
// are ignore labels and drop out of the partition function.
inline Tensor masked_row_ce(const Tensor& logits_row, std::size_t target,
                            const std::vector<std::size_t>& labels) {
    const std::size_t c = logits_row.extent(0);
    std::vector<double> mask(c, 0.0);
    for (std::size_t id : labels)
        if (id != target) mask[id] = kMaskNegInf;
    Tensor masked = logits_row + Tensor::from({c}, std::move(mask));
    return logsumexp(masked) - at_index(logits_row, target);
}

inline void check_labels(const std::vector<std::size_t>& labels, std::size_t c, const char* op) {
    if (labels.empty()) throw ContractError(std::string(op) + ": empty label set");
    for (std::size_t id : labels)
        if (id >= c) throw ContractError(std::string(op) + ": label id " + std::to_string(id) +
                                         " out of range");
}

}  // namespace detail

// GAP over the feature map, cosine logits against every class, then the mean
// masked cross-entropy over the present labels.
inline Tensor image_cls_loss(const Tensor& fm, const CosineClassifier& clf,
                             const std::vector<std::size_t>& labels) {
    if (fm.rank() != 3) throw DimensionError("image_cls_loss: feature map must be H x W x D");
    const std::size_t c = clf.weights.extent(0);
    detail::check_labels(labels, c, "image_cls_loss");
    const std::size_t hw = fm.extent(0) * fm.extent(1);
    Tensor pooled = mean_axis(reshape(fm, {hw, fm.extent(2)}), 0);           // D
    Tensor pn = l2_normalize_rows(reshape(pooled, {1, fm.extent(2)}));       // 1 x D
    Tensor z = reshape(matmul(pn, transpose(l2_normalize_rows(clf.weights))), {c}) *
               clf.logit_scale;
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t target : labels) acc = acc + detail::masked_row_ce(z, target, labels);
    return acc * (1.0 / static_cast<double>(labels.size()));
}

inline Tensor baseline_total_loss(const Tensor& seg, const Tensor& cls, const LossWeights& w) {
    return seg + w.lambda_cls * cls;
}

inline Tensor larvseg_total_loss(const Tensor& seg, const Tensor& cls, const Tensor& aux,
                                 const LossWeights& w) {
    return seg + w.lambda_cls * cls + w.lambda_aux * aux;
}

// ---------------------------------------------------------------------------
// Cross-image memory bank
// ---------------------------------------------------------------------------

class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(const std::vector<std::size_t>& novel_ids, std::size_t capacity)
        : capacity_(capacity) {
        if (capacity == 0) throw ContractError("MemoryBank: capacity must be positive");
        for (std::size_t id : novel_ids) slots_[id];
    }

    std::size_t capacity() const { return capacity_; }
    bool has_slot(std::size_t id) const { return slots_.count(id) != 0; }
    std::size_t fill(std::size_t id) const { return slot(id).size(); }

    const std::deque<std::vector<double>>& slot(std::size_t id) const {
        auto it = slots_.find(id);
        if (it == slots_.end())
            throw ContractError("MemoryBank: category " + std::to_string(id) + " is not novel");
        return it->second;
    }

    // Pushes an already-normalized feature; evicts the oldest beyond capacity.
    void push(std::size_t id, std::vector<double> unit_vec) {
        auto it = slots_.find(id);
        if (it == slots_.end())
            throw ContractError("MemoryBank: category " + std::to_string(id) + " is not novel");
        double norm2 = 0.0;
        for (double v : unit_vec) norm2 += v * v;
        if (std::fabs(std::sqrt(norm2) - 1.0) > 1e-9)
            throw ContractError("MemoryBank: stored vectors must be unit norm");
        it->second.push_back(std::move(unit_vec));
        while (it->second.size() > capacity_) it->second.pop_front();
    }

    // Mean of the stored unit vectors; with unit entries, dotting the
    // normalized pixel feature against this mean equals the average cosine.
    std::vector<double> mean_vector(std::size_t id) const {
        const auto& s = slot(id);
        if (s.empty()) throw ColdStartError("MemoryBank: empty slot " + std::to_string(id));
        std::vector<double> out(s.front().size(), 0.0);
        for (const auto& v : s)
            for (std::size_t i = 0; i < v.size(); ++i) out[i] += v[i];
        for (double& x : out) x /= static_cast<double>(s.size());
        return out;
    }

    std::vector<std::size_t> slot_ids() const {
        std::vector<std::size_t> ids;
        for (const auto& [id, s] : slots_) ids.push_back(id);
        return ids;
    }

    // Checkpoint form: one "bank.<id>" tensor of shape [fill, D] per nonempty
    // slot, rows ordered oldest to newest.
    std::vector<std::pair<std::string, Tensor>> to_tensors() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (const auto& [id, s] : slots_) {
            if (s.empty()) continue;
            const std::size_t d = s.front().size();
            Tensor t = Tensor::zeros({s.size(), d});
            std::size_t row = 0;
            for (const auto& v : s) {
                std::copy(v.begin(), v.end(), t.values().begin() + row * d);
                ++row;
            }
            out.emplace_back("bank." + std::to_string(id), t);
        }
        return out;
    }

    void restore_slot(std::size_t id, const Tensor& rows) {
        auto it = slots_.find(id);
        if (it == slots_.end())
            throw FormatError("MemoryBank: checkpoint names non-novel slot " + std::to_string(id));
        if (rows.rank() != 2) throw FormatError("MemoryBank: slot tensor must be rank 2");
        if (rows.extent(0) > capacity_) throw FormatError("MemoryBank: slot exceeds capacity");
        it->second.clear();
        const std::size_t d = rows.extent(1);
        for (std::size_t r = 0; r < rows.extent(0); ++r)
            it->second.emplace_back(rows.values().begin() + r * d,
                                    rows.values().begin() + (r + 1) * d);
    }

private:
    std::size_t capacity_ = 1;
    std::map<std::size_t, std::deque<std::vector<double>>> slots_;
};

// Top-K pixel indices of one score channel, ranked by descending score with
// index as the tie breaker (matches a full stable sort).
inline std::vector<std::size_t> topk_pixels(const std::vector<double>& channel, std::size_t k) {
    if (k > channel.size()) throw ContractError("topk_pixels: K exceeds pixel count");
    std::vector<std::size_t> idx(channel.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (channel[a] != channel[b]) return channel[a] > channel[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

// Pushes the K highest-scoring pixels of each labeled novel channel into the
// bank as detached unit vectors. Runs after the step's losses so the current
// sample never attends to itself.
inline void update_memory(MemoryBank& bank, const Tensor& fm, const Tensor& sm,
                          const std::vector<std::size_t>& novel_labels, std::size_t k) {
    const std::size_t h = fm.extent(0), w = fm.extent(1), d = fm.extent(2);
    const std::size_t c = sm.extent(2);
    if (k > h * w) throw ContractError("update_memory: K exceeds pixel count");
    for (std::size_t cat : novel_labels) {
        if (!bank.has_slot(cat))
            throw ContractError("update_memory: category " + std::to_string(cat) + " is not novel");
        std::vector<double> channel(h * w);
        for (std::size_t p = 0; p < h * w; ++p) channel[p] = sm.values()[p * c + cat];
        for (std::size_t p : topk_pixels(channel, k)) {
            std::vector<double> v(fm.values().begin() + p * d, fm.values().begin() + (p + 1) * d);
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(std::max(norm, kCosineEps * kCosineEps));
            for (double& x : v) x /= norm;
            bank.push(cat, std::move(v));
        }
    }
}

// ---------------------------------------------------------------------------
// Memory confidence (Eq. 3) and attention (Eq. 4)
// ---------------------------------------------------------------------------

// S_mem[h,w] = average cosine between fm[h,w] and the stored category
// features. Differentiable in fm; the bank contributes constants only.
inline Tensor memory_confidence(const Tensor& fm, const MemoryBank& bank, std::size_t cat) {
    if (fm.rank() != 3) throw DimensionError("memory_confidence: feature map must be H x W x D");
    const std::size_t h = fm.extent(0), w = fm.extent(1), d = fm.extent(2);
    std::vector<double> mean_vec = bank.mean_vector(cat);  // throws ColdStartError when empty
    if (mean_vec.size() != d) throw DimensionError("memory_confidence: bank dim mismatch");
    Tensor rows = l2_normalize_rows(reshape(fm, {h * w, d}));
    Tensor vbar = Tensor::from({d, 1}, std::move(mean_vec));
    return reshape(matmul(rows, vbar), {h, w});
}

// A = sigmoid((d - mean(d)) / (std(d) + 1e-8)), population std over pixels.
// The variance is floored at 1e-16 purely so sqrt stays differentiable; any
// real spread is far above the floor and the formula is unchanged there.
inline Tensor attention_map(const Tensor& s_fg, const Tensor& s_bg) {
    if (s_fg.shape() != s_bg.shape())
        throw DimensionError("attention_map: foreground/background shape mismatch");
    const std::size_t n = s_fg.numel();
    Tensor d = reshape(s_fg - s_bg, {n});
    Tensor centered = sub_bcast(d, mean(d));
    Tensor stddev = larvseg::sqrt(clamp_min(mean(centered * centered), 1e-16));
    Tensor a = sigmoid(div_bcast(centered, stddev + 1e-8));
    return reshape(a, s_fg.shape());
}

// ---------------------------------------------------------------------------
// Attentive auxiliary classification (Eq. 5)
// ---------------------------------------------------------------------------

// Pools the scaled logits with normalized attention weights, then applies the
// masked cross-entropy toward the attended category.
inline Tensor attentive_cls_loss(const Tensor& sm, const Tensor& attention, std::size_t target,
                                 const std::vector<std::size_t>& labels, double tau,
                                 double logit_scale) {
    if (tau <= 0.0) throw ContractError("attentive_cls_loss: tau must be positive");
    if (sm.rank() != 3) throw DimensionError("attentive_cls_loss: score map must be H x W x C");
    const std::size_t h = sm.extent(0), w = sm.extent(1), c = sm.extent(2);
    if (attention.numel() != h * w)
        throw DimensionError("attentive_cls_loss: attention shape mismatch");
    detail::check_labels(labels, c, "attentive_cls_loss");
    if (target >= c) throw ContractError("attentive_cls_loss: target out of range");

    Tensor a_flat = reshape(attention, {h * w});
    Tensor a_norm = div_bcast(a_flat, sum(a_flat));                       // sums to 1
    Tensor logits = reshape(sm, {h * w, c}) * logit_scale;
    Tensor pooled = reshape(matmul(reshape(a_norm, {1, h * w}), logits), {c}) * (1.0 / tau);
    return detail::masked_row_ce(pooled, target, labels);
}

// Eq. 6's L_aux for one image: one attentive term per labeled novel category
// whose bank slot is warm, averaged. S_fg is that category's memory
// confidence; S_bg is the strongest competitor at each pixel, taken over the
// base categories' classifier channels and the other bank-backed novel
// categories' confidence maps (all cosine-scaled, so directly comparable).
// Returns 0 when nothing contributes (cold start or no novel labels).
inline Tensor aux_loss_for_sample(const Tensor& fm, const Tensor& sm, const MemoryBank& bank,
                                  const std::vector<std::size_t>& labels, std::size_t base_count,
                                  const LossWeights& w, double logit_scale) {
    const std::size_t h = sm.extent(0), width = sm.extent(1), c = sm.extent(2);
    const std::size_t warm_floor = std::max<std::size_t>(1, bank.capacity() / 2);

    std::vector<std::size_t> targets;
    for (std::size_t id : labels)
        if (bank.has_slot(id) && bank.fill(id) >= warm_floor) targets.push_back(id);
    if (targets.empty()) return Tensor::scalar(0.0);

    // Base channels of the score map, sliced once and shared across targets.
    Tensor sm_t = transpose(reshape(sm, {h * width, c}));  // C x HW
    std::vector<Tensor> base_channels;
    for (std::size_t b = 0; b < base_count; ++b)
        base_channels.push_back(reshape(gather_rows(sm_t, {b}), {h, width}));

    std::map<std::size_t, Tensor> confidence;
    for (std::size_t id : bank.slot_ids())
        if (bank.fill(id) > 0) confidence.emplace(id, memory_confidence(fm, bank, id));

    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t target : targets) {
        Tensor s_fg = confidence.at(target);
        Tensor s_bg;
        bool have_bg = false;
        for (const Tensor& bc : base_channels) {
            s_bg = have_bg ? maximum(s_bg, bc) : bc;
            have_bg = true;
        }
        for (const auto& [id, conf] : confidence) {
            if (id == target) continue;
            s_bg = have_bg ? maximum(s_bg, conf) : conf;
            have_bg = true;
        }
        if (!have_bg) s_bg = Tensor::zeros({h, width});
        Tensor a = attention_map(s_fg, s_bg);
        acc = acc + attentive_cls_loss(sm, a, target, labels, w.tau, logit_scale);
    }
    return acc * (1.0 / static_cast<double>(targets.size()));
}

// ---------------------------------------------------------------------------
// Single-image CA ablation
// ---------------------------------------------------------------------------

// Foreground regions come from the image's own score map: the top-K pixels of
// each labeled channel get a per-pixel cross-entropy toward that label.
inline Tensor single_image_ca_loss(const Tensor& sm, const std::vector<std::size_t>& labels,
                                   std::size_t k, double logit_scale) {
    if (sm.rank() != 3) throw DimensionError("single_image_ca_loss: score map must be H x W x C");
    const std::size_t h = sm.extent(0), w = sm.extent(1), c = sm.extent(2);
    if (k > h * w) throw ContractError("single_image_ca_loss: K exceeds pixel count");
    detail::check_labels(labels, c, "single_image_ca_loss");

    Tensor logits = reshape(sm, {h * w, c}) * logit_scale;
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t target : labels) {
        std::vector<double> channel(h * w);
        for (std::size_t p = 0; p < h * w; ++p) channel[p] = sm.values()[p * c + target];
        std::vector<std::size_t> omega = topk_pixels(channel, k);
        Tensor rows = gather_rows(logits, omega);
        Tensor lse = logsumexp_rows(rows);
        Tensor tgt = take_per_row(rows, std::vector<std::size_t>(k, target));
        acc = acc + mean(lse - tgt);
    }
    return acc * (1.0 / static_cast<double>(labels.size()));
}

}  // namespace larvseg
