#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "larvseg/config.hpp"
#include "larvseg/errors.hpp"
#include "larvseg/rng.hpp"
#include "larvseg/tensor.hpp"
#include "larvseg/tensor_io.hpp"

// Synthetic data with exact ground truth. Images are H x W x F feature grids:
// axis-aligned rectangular regions, each filled with a category mean plus
// Gaussian noise. Seg samples carry masks over base categories only;
// multilabel/singlelabel samples carry image-level label sets while their
// pixel masks go into sealed sidecar files that only evaluation reads.

namespace larvseg {

struct CategorySpec {
    std::size_t id = 0;
    std::vector<double> mu;
    double sigma = 0.0;
    bool novel = false;
};

enum class SampleKind { Seg, MultiLabel, SingleLabel };

struct Sample {
    Tensor image;                      // H x W x F
    Tensor mask;                       // H x W category ids; only seg samples carry one
    std::vector<std::size_t> labels;   // sorted; empty for seg samples
    SampleKind kind = SampleKind::Seg;
};

struct Dataset {
    Config cfg;
    std::vector<CategorySpec> categories;
    std::vector<Sample> seg;
    std::vector<Sample> multilabel;
    std::vector<Sample> singlelabel;
    std::vector<Sample> val;           // multilabel-style, for held-out evaluation

    std::vector<std::size_t> base_ids() const {
        std::vector<std::size_t> out;
        for (const auto& c : categories)
            if (!c.novel) out.push_back(c.id);
        return out;
    }
    std::vector<std::size_t> novel_ids() const {
        std::vector<std::size_t> out;
        for (const auto& c : categories)
            if (c.novel) out.push_back(c.id);
        return out;
    }
};

// Ground-truth masks for the image-level splits. Produced next to the Dataset
// but kept apart so training paths never see them.
struct SealedMasks {
    std::vector<Tensor> multilabel;
    std::vector<Tensor> singlelabel;
    std::vector<Tensor> val;
};

// ---------------------------------------------------------------------------
// Categories
// ---------------------------------------------------------------------------

// Means sit on corners of a scaled hypercube restricted to even-parity bit
// patterns: distinct codes differ in >= 2 coordinates, so pairwise distance is
// at least mu_separation*sigma*sqrt(2), comfortably above the 2*sigma floor.
inline std::vector<CategorySpec> make_categories(std::size_t c_count, std::size_t f_dims,
                                                 double novel_fraction, double sigma,
                                                 double mu_separation, std::uint64_t seed) {
    if (c_count < 4) throw ConfigError("make_categories: need at least 4 categories");
    if (!(novel_fraction > 0.0 && novel_fraction < 1.0))
        throw ConfigError("make_categories: novel_fraction outside (0,1)");
    if (f_dims < 2 || f_dims > 63)
        throw DomainError("make_categories: feature_dim must lie in [2,63]");

    auto rng = make_rng(seed, stream::categories);
    std::set<std::uint64_t> codes;
    const std::uint64_t mask = (f_dims == 63) ? ~0ULL >> 1 : ((1ULL << f_dims) - 1);
    std::size_t attempts = 0;
    const std::size_t max_attempts = 10000 * c_count;
    while (codes.size() < c_count) {
        if (++attempts > max_attempts)
            throw DomainError("make_categories: cannot place " + std::to_string(c_count) +
                              " separable means in " + std::to_string(f_dims) + " dims");
        std::uint64_t code = rng() & mask;
        if (std::popcount(code) % 2 == 1) code ^= 1ULL;  // force even parity
        codes.insert(code);
    }

    std::vector<std::uint64_t> picked(codes.begin(), codes.end());
    std::shuffle(picked.begin(), picked.end(), rng);

    const double amp = mu_separation * sigma;
    const std::size_t novel_count =
        static_cast<std::size_t>(std::llround(novel_fraction * static_cast<double>(c_count)));
    if (novel_count == 0 || novel_count >= c_count)
        throw ConfigError("make_categories: novel_fraction leaves an empty split");

    std::vector<CategorySpec> specs(c_count);
    for (std::size_t i = 0; i < c_count; ++i) {
        specs[i].id = i;
        specs[i].sigma = sigma;
        specs[i].novel = i >= c_count - novel_count;
        specs[i].mu.resize(f_dims);
        for (std::size_t f = 0; f < f_dims; ++f)
            specs[i].mu[f] = ((picked[i] >> f) & 1ULL) ? amp : 0.0;
    }
    return specs;
}

// ---------------------------------------------------------------------------
// Region partition
// ---------------------------------------------------------------------------

struct Rect {
    std::size_t r0, c0, h, w;
    std::size_t area() const { return h * w; }
};

// Guillotine partition: repeatedly split the largest rectangle along its
// longer side until `n` pieces exist (or nothing splittable remains). Minimum
// side length 2 keeps every region statistically visible.
inline std::vector<Rect> partition_rects(std::size_t height, std::size_t width, std::size_t n,
                                         std::mt19937_64& rng) {
    constexpr std::size_t kMinSide = 2;
    std::vector<Rect> rects{{0, 0, height, width}};
    while (rects.size() < n) {
        std::size_t target = rects.size();
        std::size_t best_area = 0;
        for (std::size_t i = 0; i < rects.size(); ++i) {
            const Rect& r = rects[i];
            const bool splittable = r.h >= 2 * kMinSide || r.w >= 2 * kMinSide;
            if (splittable && r.area() > best_area) {
                best_area = r.area();
                target = i;
            }
        }
        if (target == rects.size()) break;  // nothing left to split
        Rect r = rects[target];
        const bool split_rows = r.h >= r.w ? r.h >= 2 * kMinSide : !(r.w >= 2 * kMinSide);
        if (split_rows) {
            std::size_t cut = kMinSide + draw_index(rng, r.h - 2 * kMinSide + 1);
            rects[target] = {r.r0, r.c0, cut, r.w};
            rects.push_back({r.r0 + cut, r.c0, r.h - cut, r.w});
        } else {
            std::size_t cut = kMinSide + draw_index(rng, r.w - 2 * kMinSide + 1);
            rects[target] = {r.r0, r.c0, r.h, cut};
            rects.push_back({r.r0, r.c0 + cut, r.h, r.w - cut});
        }
    }
    return rects;
}

namespace detail {

// Paint regions into a mask and fill the image with mu + N(0, sigma) noise.
// One rng drives everything so the draw order is part of the format.
inline void fill_regions(Tensor& image, Tensor& mask, const std::vector<Rect>& rects,
                         const std::vector<std::size_t>& region_cats,
                         const std::vector<CategorySpec>& specs, std::mt19937_64& rng) {
    const std::size_t h = mask.extent(0), w = mask.extent(1);
    const std::size_t f = image.extent(2);
    for (std::size_t r = 0; r < rects.size(); ++r) {
        const Rect& rect = rects[r];
        for (std::size_t i = rect.r0; i < rect.r0 + rect.h; ++i)
            for (std::size_t j = rect.c0; j < rect.c0 + rect.w; ++j)
                mask.values()[i * w + j] = static_cast<double>(region_cats[r]);
    }
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const auto cat = static_cast<std::size_t>(mask.values()[i * w + j]);
            const CategorySpec& spec = specs[cat];
            for (std::size_t c = 0; c < f; ++c)
                image.values()[(i * w + j) * f + c] = spec.mu[c] + draw_normal(rng, 0.0, spec.sigma);
        }
}

inline std::vector<std::size_t> labels_from_mask(const Tensor& mask) {
    std::set<std::size_t> present;
    for (double v : mask.values()) present.insert(static_cast<std::size_t>(v));
    return {present.begin(), present.end()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-sample generators
// ---------------------------------------------------------------------------

inline Sample gen_seg_sample(const std::vector<CategorySpec>& specs, const Config& cfg,
                             std::uint64_t sample_seed) {
    auto rng = make_rng(sample_seed, stream::seg_sample);
    const std::size_t n_regions =
        cfg.regions_min + draw_index(rng, cfg.regions_max - cfg.regions_min + 1);
    auto rects = partition_rects(cfg.height, cfg.width, n_regions, rng);

    std::vector<std::size_t> base;
    for (const auto& s : specs)
        if (!s.novel) base.push_back(s.id);

    std::vector<std::size_t> region_cats(rects.size());
    for (auto& c : region_cats) c = base[draw_index(rng, base.size())];

    Sample out;
    out.kind = SampleKind::Seg;
    out.image = Tensor::zeros({cfg.height, cfg.width, cfg.feature_dim});
    out.mask = Tensor::zeros({cfg.height, cfg.width});
    detail::fill_regions(out.image, out.mask, rects, region_cats, specs, rng);
    return out;
}

// Returns the sample plus its withheld ground-truth mask.
inline std::pair<Sample, Tensor> gen_multilabel_sample(const std::vector<CategorySpec>& specs,
                                                       const Config& cfg, std::uint64_t sample_seed,
                                                       std::uint64_t stream_tag = stream::multi_sample) {
    auto rng = make_rng(sample_seed, stream_tag);
    const std::size_t n_regions =
        cfg.regions_min + draw_index(rng, cfg.regions_max - cfg.regions_min + 1);
    auto rects = partition_rects(cfg.height, cfg.width, n_regions, rng);

    std::vector<std::size_t> novel;
    for (const auto& s : specs)
        if (s.novel) novel.push_back(s.id);
    if (novel.empty()) throw ContractError("gen_multilabel_sample: no novel categories");

    std::vector<std::size_t> region_cats(rects.size());
    for (auto& c : region_cats) c = draw_index(rng, specs.size());
    const bool has_novel = std::any_of(region_cats.begin(), region_cats.end(), [&](std::size_t c) {
        return specs[c].novel;
    });
    if (!has_novel) {
        // Force the premise of the split: each image-level sample shows at
        // least one novel category.
        std::size_t slot = draw_index(rng, region_cats.size());
        region_cats[slot] = novel[draw_index(rng, novel.size())];
    }

    Sample out;
    out.kind = SampleKind::MultiLabel;
    out.image = Tensor::zeros({cfg.height, cfg.width, cfg.feature_dim});
    Tensor hidden = Tensor::zeros({cfg.height, cfg.width});
    detail::fill_regions(out.image, hidden, rects, region_cats, specs, rng);
    out.labels = detail::labels_from_mask(hidden);
    return {std::move(out), std::move(hidden)};
}

// Single-label, object-centric: one centered novel rectangle over a base
// "stuff" background. When `forced_fg` is set the caller dictates the
// foreground id (the dataset writer uses this for exact category balance).
inline std::pair<Sample, Tensor> gen_singlelabel_sample(
    const std::vector<CategorySpec>& specs, const Config& cfg, std::uint64_t sample_seed,
    std::optional<std::size_t> forced_fg = std::nullopt) {
    auto rng = make_rng(sample_seed, stream::single_sample);

    std::vector<std::size_t> novel;
    for (const auto& s : specs)
        if (s.novel) novel.push_back(s.id);
    if (novel.empty()) throw ContractError("gen_singlelabel_sample: no novel categories");
    const std::size_t fg = forced_fg ? *forced_fg : novel[draw_index(rng, novel.size())];
    if (!specs.at(fg).novel) throw ContractError("gen_singlelabel_sample: foreground must be novel");

    // Enumerate side pairs whose area fraction falls in the configured band,
    // then draw one uniformly.
    const double total = static_cast<double>(cfg.height * cfg.width);
    std::vector<std::pair<std::size_t, std::size_t>> feasible;
    for (std::size_t fh = 1; fh <= cfg.height; ++fh)
        for (std::size_t fw = 1; fw <= cfg.width; ++fw) {
            const double frac = static_cast<double>(fh * fw) / total;
            if (frac >= cfg.singlelabel_fg_min && frac <= cfg.singlelabel_fg_max)
                feasible.emplace_back(fh, fw);
        }
    if (feasible.empty())
        throw DomainError("gen_singlelabel_sample: no rectangle fits the foreground band");
    const auto [fh, fw] = feasible[draw_index(rng, feasible.size())];
    const Rect fg_rect{(cfg.height - fh) / 2, (cfg.width - fw) / 2, fh, fw};

    Sample out;
    out.kind = SampleKind::SingleLabel;
    out.image = Tensor::zeros({cfg.height, cfg.width, cfg.feature_dim});
    Tensor hidden = Tensor::full({cfg.height, cfg.width}, static_cast<double>(cfg.background_base_id));
    // Paint foreground onto the background mask, then noise the whole grid.
    for (std::size_t i = fg_rect.r0; i < fg_rect.r0 + fg_rect.h; ++i)
        for (std::size_t j = fg_rect.c0; j < fg_rect.c0 + fg_rect.w; ++j)
            hidden.values()[i * cfg.width + j] = static_cast<double>(fg);
    for (std::size_t i = 0; i < cfg.height; ++i)
        for (std::size_t j = 0; j < cfg.width; ++j) {
            const auto cat = static_cast<std::size_t>(hidden.values()[i * cfg.width + j]);
            for (std::size_t c = 0; c < cfg.feature_dim; ++c)
                out.image.values()[(i * cfg.width + j) * cfg.feature_dim + c] =
                    specs[cat].mu[c] + draw_normal(rng, 0.0, specs[cat].sigma);
        }
    out.labels = {fg};
    return {std::move(out), std::move(hidden)};
}

// ---------------------------------------------------------------------------
// Whole-dataset generation
// ---------------------------------------------------------------------------

struct GeneratedData {
    Dataset data;
    SealedMasks sealed;
};

inline GeneratedData generate_dataset(const Config& cfg) {
    cfg.validate();
    GeneratedData out;
    out.data.cfg = cfg;
    out.data.categories = make_categories(cfg.categories, cfg.feature_dim, cfg.novel_fraction,
                                          cfg.sigma, cfg.mu_separation, cfg.seed);

    out.data.seg.reserve(cfg.count_seg);
    for (std::size_t i = 0; i < cfg.count_seg; ++i)
        out.data.seg.push_back(gen_seg_sample(out.data.categories, cfg,
                                              derive_seed(cfg.seed, stream::seg_sample, i)));

    out.data.multilabel.reserve(cfg.count_multilabel);
    for (std::size_t i = 0; i < cfg.count_multilabel; ++i) {
        auto [sample, hidden] = gen_multilabel_sample(out.data.categories, cfg,
                                                      derive_seed(cfg.seed, stream::multi_sample, i));
        out.data.multilabel.push_back(std::move(sample));
        out.sealed.multilabel.push_back(std::move(hidden));
    }

    // Exact per-category quotas, order shuffled by the dataset seed.
    std::vector<std::size_t> novel = [&] {
        std::vector<std::size_t> ids;
        for (const auto& s : out.data.categories)
            if (s.novel) ids.push_back(s.id);
        return ids;
    }();
    std::vector<std::size_t> fg_assignment(cfg.count_singlelabel);
    for (std::size_t i = 0; i < cfg.count_singlelabel; ++i)
        fg_assignment[i] = novel[i % novel.size()];
    auto quota_rng = make_rng(cfg.seed, stream::single_quota);
    std::shuffle(fg_assignment.begin(), fg_assignment.end(), quota_rng);

    out.data.singlelabel.reserve(cfg.count_singlelabel);
    for (std::size_t i = 0; i < cfg.count_singlelabel; ++i) {
        auto [sample, hidden] =
            gen_singlelabel_sample(out.data.categories, cfg,
                                   derive_seed(cfg.seed, stream::single_sample, i), fg_assignment[i]);
        out.data.singlelabel.push_back(std::move(sample));
        out.sealed.singlelabel.push_back(std::move(hidden));
    }

    out.data.val.reserve(cfg.count_val);
    for (std::size_t i = 0; i < cfg.count_val; ++i) {
        auto [sample, hidden] = gen_multilabel_sample(out.data.categories, cfg,
                                                      derive_seed(cfg.seed, stream::val_sample, i),
                                                      stream::val_sample);
        out.data.val.push_back(std::move(sample));
        out.sealed.val.push_back(std::move(hidden));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------
//
// Fixed layout inside the dataset directory:
//   manifest.txt                  config echo (key=value)
//   categories.ltns               C x F matrix of category means
//   seg_images.ltns               N x H x W x F
//   seg_masks.ltns                N x H x W
//   multilabel_images.ltns        N x H x W x F
//   multilabel_labels.ltns        N x C indicator matrix
//   singlelabel_images.ltns       N x H x W x F
//   singlelabel_labels.ltns       N
//   val_images.ltns / val_labels.ltns
//   sealed_multilabel_masks.ltns  } ground truth for image-level splits;
//   sealed_singlelabel_masks.ltns } read exclusively by evaluation code
//   sealed_val_masks.ltns         }

namespace detail {

inline Tensor stack_images(const std::vector<Sample>& samples, const Config& cfg) {
    Tensor out = Tensor::zeros({samples.size(), cfg.height, cfg.width, cfg.feature_dim});
    const std::size_t per = cfg.height * cfg.width * cfg.feature_dim;
    for (std::size_t i = 0; i < samples.size(); ++i)
        std::copy_n(samples[i].image.values().data(), per, out.values().data() + i * per);
    return out;
}

inline Tensor stack_masks(const std::vector<Tensor>& masks, const Config& cfg) {
    Tensor out = Tensor::zeros({masks.size(), cfg.height, cfg.width});
    const std::size_t per = cfg.height * cfg.width;
    for (std::size_t i = 0; i < masks.size(); ++i)
        std::copy_n(masks[i].values().data(), per, out.values().data() + i * per);
    return out;
}

inline Tensor label_indicator(const std::vector<Sample>& samples, const Config& cfg) {
    Tensor out = Tensor::zeros({samples.size(), cfg.categories});
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t id : samples[i].labels) out.values()[i * cfg.categories + id] = 1.0;
    return out;
}

}  // namespace detail

inline void write_dataset(const std::string& dir, const GeneratedData& gen) {
    namespace fs = std::filesystem;
    const Config& cfg = gen.data.cfg;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset dir: " + dir);
    save_config((fs::path(dir) / "manifest.txt").string(), cfg);

    Tensor cats = Tensor::zeros({cfg.categories, cfg.feature_dim});
    for (const auto& s : gen.data.categories)
        std::copy(s.mu.begin(), s.mu.end(), cats.values().begin() + s.id * cfg.feature_dim);
    auto path = [&](const char* name) { return (fs::path(dir) / name).string(); };
    save_tensor(path("categories.ltns"), cats);

    save_tensor(path("seg_images.ltns"), detail::stack_images(gen.data.seg, cfg));
    std::vector<Tensor> seg_masks;
    for (const auto& s : gen.data.seg) seg_masks.push_back(s.mask);
    save_tensor(path("seg_masks.ltns"), detail::stack_masks(seg_masks, cfg));

    save_tensor(path("multilabel_images.ltns"), detail::stack_images(gen.data.multilabel, cfg));
    save_tensor(path("multilabel_labels.ltns"), detail::label_indicator(gen.data.multilabel, cfg));
    save_tensor(path("singlelabel_images.ltns"), detail::stack_images(gen.data.singlelabel, cfg));
    Tensor single_labels = Tensor::zeros({gen.data.singlelabel.size()});
    for (std::size_t i = 0; i < gen.data.singlelabel.size(); ++i)
        single_labels.values()[i] = static_cast<double>(gen.data.singlelabel[i].labels.at(0));
    save_tensor(path("singlelabel_labels.ltns"), single_labels);
    save_tensor(path("val_images.ltns"), detail::stack_images(gen.data.val, cfg));
    save_tensor(path("val_labels.ltns"), detail::label_indicator(gen.data.val, cfg));

    save_tensor(path("sealed_multilabel_masks.ltns"), detail::stack_masks(gen.sealed.multilabel, cfg));
    save_tensor(path("sealed_singlelabel_masks.ltns"), detail::stack_masks(gen.sealed.singlelabel, cfg));
    save_tensor(path("sealed_val_masks.ltns"), detail::stack_masks(gen.sealed.val, cfg));
}

namespace detail {

inline std::vector<Sample> unstack(const Tensor& images, const Tensor* masks, const Tensor* labels,
                                   const Tensor* single_labels, SampleKind kind, const Config& cfg) {
    if (images.rank() != 4) throw FormatError("dataset: image stack must be rank 4");
    const std::size_t n = images.extent(0);
    if (images.extent(1) != cfg.height || images.extent(2) != cfg.width ||
        images.extent(3) != cfg.feature_dim)
        throw FormatError("dataset: image extents disagree with manifest");
    const std::size_t per = cfg.height * cfg.width * cfg.feature_dim;
    std::vector<Sample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].kind = kind;
        std::vector<double> img(images.values().begin() + i * per,
                                images.values().begin() + (i + 1) * per);
        out[i].image = Tensor::from({cfg.height, cfg.width, cfg.feature_dim}, std::move(img));
        if (masks) {
            const std::size_t mper = cfg.height * cfg.width;
            std::vector<double> m(masks->values().begin() + i * mper,
                                  masks->values().begin() + (i + 1) * mper);
            out[i].mask = Tensor::from({cfg.height, cfg.width}, std::move(m));
        }
        if (labels) {
            for (std::size_t c = 0; c < cfg.categories; ++c)
                if (labels->values()[i * cfg.categories + c] != 0.0) out[i].labels.push_back(c);
        }
        if (single_labels) {
            const auto id = static_cast<std::size_t>(single_labels->values()[i]);
            if (id >= cfg.categories) throw FormatError("dataset: label id out of range");
            out[i].labels = {id};
        }
    }
    return out;
}

}  // namespace detail

// Loads the training view of a dataset directory: images, seg masks and
// image-level labels. Sealed mask files are deliberately not touched here.
inline Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    auto path = [&](const char* name) { return (fs::path(dir) / name).string(); };
    Dataset out;
    out.cfg = load_config(path("manifest.txt"));
    out.cfg.validate();

    Tensor cats = load_tensor(path("categories.ltns"));
    if (cats.rank() != 2 || cats.extent(0) != out.cfg.categories ||
        cats.extent(1) != out.cfg.feature_dim)
        throw FormatError("dataset: categories.ltns extents disagree with manifest");
    const std::size_t novel_count = out.cfg.novel_count();
    out.categories.resize(out.cfg.categories);
    for (std::size_t i = 0; i < out.cfg.categories; ++i) {
        out.categories[i].id = i;
        out.categories[i].sigma = out.cfg.sigma;
        out.categories[i].novel = i >= out.cfg.categories - novel_count;
        out.categories[i].mu.assign(cats.values().begin() + i * out.cfg.feature_dim,
                                    cats.values().begin() + (i + 1) * out.cfg.feature_dim);
    }

    Tensor seg_images = load_tensor(path("seg_images.ltns"));
    Tensor seg_masks = load_tensor(path("seg_masks.ltns"));
    out.seg = detail::unstack(seg_images, &seg_masks, nullptr, nullptr, SampleKind::Seg, out.cfg);
    Tensor ml_images = load_tensor(path("multilabel_images.ltns"));
    Tensor ml_labels = load_tensor(path("multilabel_labels.ltns"));
    out.multilabel =
        detail::unstack(ml_images, nullptr, &ml_labels, nullptr, SampleKind::MultiLabel, out.cfg);
    Tensor sl_images = load_tensor(path("singlelabel_images.ltns"));
    Tensor sl_labels = load_tensor(path("singlelabel_labels.ltns"));
    out.singlelabel =
        detail::unstack(sl_images, nullptr, nullptr, &sl_labels, SampleKind::SingleLabel, out.cfg);
    Tensor val_images = load_tensor(path("val_images.ltns"));
    Tensor val_labels = load_tensor(path("val_labels.ltns"));
    out.val = detail::unstack(val_images, nullptr, &val_labels, nullptr, SampleKind::MultiLabel, out.cfg);
    return out;
}

// Evaluation-only: unseal the ground-truth masks for an image-level split.
inline std::vector<Tensor> read_sealed_masks(const std::string& dir, const std::string& split) {
    namespace fs = std::filesystem;
    if (split != "multilabel" && split != "singlelabel" && split != "val")
        throw ContractError("read_sealed_masks: unknown split '" + split + "'");
    Tensor stack = load_tensor((fs::path(dir) / ("sealed_" + split + "_masks.ltns")).string());
    if (stack.rank() != 3) throw FormatError("sealed masks: expected rank 3");
    const std::size_t n = stack.extent(0), h = stack.extent(1), w = stack.extent(2);
    std::vector<Tensor> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> m(stack.values().begin() + i * h * w,
                              stack.values().begin() + (i + 1) * h * w);
        out[i] = Tensor::from({h, w}, std::move(m));
    }
    return out;
}

}  // namespace larvseg
