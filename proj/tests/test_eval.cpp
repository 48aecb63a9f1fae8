#include "oracles.hpp"

#include <cmath>
#include <set>

#include "larvseg/eval.hpp"
#include "larvseg/render.hpp"

using namespace larvseg;
using testutil::make_tensor;

namespace {

// Brute-force mIoU on raw pixel arrays: per category, count the intersection
// and union of {p : gt[p]==c} and {p : pred[p]==c} directly.
double brute_force_miou(const std::vector<std::size_t>& gt, const std::vector<std::size_t>& pred,
                        const std::vector<std::size_t>& cats, std::size_t ignore_id) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c : cats) {
        std::size_t inter = 0, uni = 0, gt_count = 0;
        for (std::size_t p = 0; p < gt.size(); ++p) {
            if (gt[p] == ignore_id) continue;
            const bool in_gt = gt[p] == c, in_pred = pred[p] == c;
            inter += in_gt && in_pred;
            uni += in_gt || in_pred;
            gt_count += in_gt;
        }
        if (gt_count == 0) continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++n;
    }
    return sum / static_cast<double>(n);
}

}  // namespace

// ---------------------------------------------------------------------------
// confusion matrix
// ---------------------------------------------------------------------------

TEST_CASE("perfect prediction fills only the diagonal") {
    ConfusionMatrix cm(3);
    Tensor gt = Tensor::from({2, 2}, {0, 1, 2, 1});
    cm.accumulate(gt, gt, 255);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            REQUIRE(cm.at(i, j) == (i == j ? (i == 1 ? 2u : 1u) : 0u));
    REQUIRE(cm.total() == 4);
}

TEST_CASE("ignored pixels leave the matrix unchanged") {
    ConfusionMatrix cm(3);
    Tensor pred = Tensor::from({2, 2}, {0, 1, 2, 0});
    Tensor gt = Tensor::full({2, 2}, 255.0);
    cm.accumulate(pred, gt, 255);
    REQUIRE(cm.total() == 0);
}

TEST_CASE("handcrafted accumulation matches per-pixel enumeration") {
    ConfusionMatrix cm(3);
    Tensor pred = Tensor::from({2, 2}, {0, 1, 1, 2});
    Tensor gt = Tensor::from({2, 2}, {0, 2, 255, 1});
    cm.accumulate(pred, gt, 255);
    REQUIRE(cm.at(0, 0) == 1);  // pixel 0
    REQUIRE(cm.at(2, 1) == 1);  // pixel 1
    REQUIRE(cm.at(1, 2) == 1);  // pixel 3; pixel 2 ignored
    REQUIRE(cm.total() == 3);
}

TEST_CASE("accumulate rejects out-of-range ids and shape mismatch") {
    ConfusionMatrix cm(3);
    Tensor bad = Tensor::from({1, 1}, {7});
    Tensor ok = Tensor::from({1, 1}, {0});
    REQUIRE_THROWS_AS(cm.accumulate(bad, ok, 255), ContractError);
    REQUIRE_THROWS_AS(cm.accumulate(ok, bad, 255), ContractError);
    Tensor other = Tensor::from({2, 1}, {0, 0});
    REQUIRE_THROWS_AS(cm.accumulate(ok, other, 255), DimensionError);
}

// ---------------------------------------------------------------------------
// miou
// ---------------------------------------------------------------------------

TEST_CASE("perfect prediction scores IoU one everywhere") {
    ConfusionMatrix cm(4);
    Tensor gt = Tensor::from({2, 2}, {0, 1, 2, 3});
    cm.accumulate(gt, gt, 255);
    MiouReport rep = miou(cm, {0, 1}, {2, 3});
    for (double v : rep.iou) REQUIRE(v == 1.0);
    REQUIRE(rep.mean_all == 1.0);
    REQUIRE(rep.mean_base == 1.0);
    REQUIRE(rep.mean_novel == 1.0);
}

TEST_CASE("fully disjoint prediction scores zero") {
    ConfusionMatrix cm(2);
    Tensor gt = Tensor::from({1, 2}, {0, 1});
    Tensor pred = Tensor::from({1, 2}, {1, 0});
    cm.accumulate(pred, gt, 255);
    MiouReport rep = miou(cm, {0}, {1});
    REQUIRE(rep.iou[0] == 0.0);
    REQUIRE(rep.iou[1] == 0.0);
    REQUIRE(rep.mean_all == 0.0);
}

TEST_CASE("the 2x2 confusion grid from the hand oracle") {
    // cm = [[2,1],[1,2]]: IoU_0 = 2/(2+1+1) = 0.5, IoU_1 = 0.5, mean 0.5.
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 2;
    cm.at(0, 1) = 1;
    cm.at(1, 0) = 1;
    cm.at(1, 1) = 2;
    MiouReport rep = miou(cm, {0}, {1});
    REQUIRE(rep.iou[0] == 0.5);
    REQUIRE(rep.iou[1] == 0.5);
    REQUIRE(rep.mean_all == 0.5);
    REQUIRE(rep.mean_base == 0.5);
    REQUIRE(rep.mean_novel == 0.5);
    REQUIRE(rep.pixels == 6);
}

TEST_CASE("categories absent from ground truth are excluded from means") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 4;
    cm.at(1, 1) = 2;
    cm.at(1, 0) = 2;  // category 2 never appears
    MiouReport rep = miou(cm, {0, 1}, {2});
    REQUIRE(std::isnan(rep.iou[2]));
    REQUIRE(rep.mean_all == Catch::Approx((4.0 / 6.0 + 0.5) / 2.0).margin(1e-15));
    REQUIRE(std::isnan(rep.mean_novel));
}

TEST_CASE("miou validates splits and rejects empty evaluation") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 1;
    REQUIRE_THROWS_AS(miou(cm, {0, 1}, {1, 2}), ContractError);  // overlap
    REQUIRE_THROWS_AS(miou(cm, {0}, {2}), ContractError);        // hole
    REQUIRE_THROWS_AS(miou(cm, {0, 1}, {2, 5}), ContractError);  // out of range
    ConfusionMatrix empty(3);
    REQUIRE_THROWS_AS(miou(empty, {0, 1}, {2}), ContractError);
}

TEST_CASE("miou equals the brute-force set computation on random masks") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 5, n = 64;  // 8x8
        std::vector<std::size_t> gt(n), pred(n);
        std::vector<double> gt_d(n), pred_d(n);
        for (std::size_t p = 0; p < n; ++p) {
            gt[p] = rng() % (c + 1) == c ? 255 : rng() % c;
            pred[p] = rng() % c;
            gt_d[p] = static_cast<double>(gt[p]);
            pred_d[p] = static_cast<double>(pred[p]);
        }
        ConfusionMatrix cm(c);
        cm.accumulate(Tensor::from({8, 8}, pred_d), Tensor::from({8, 8}, gt_d), 255);
        MiouReport rep = miou(cm, {0, 1, 2}, {3, 4});
        REQUIRE(rep.mean_all ==
                Catch::Approx(brute_force_miou(gt, pred, {0, 1, 2, 3, 4}, 255)).margin(1e-12));
        REQUIRE(rep.mean_base ==
                Catch::Approx(brute_force_miou(gt, pred, {0, 1, 2}, 255)).margin(1e-12));
        REQUIRE(rep.mean_novel ==
                Catch::Approx(brute_force_miou(gt, pred, {3, 4}, 255)).margin(1e-12));
    }
}

// ---------------------------------------------------------------------------
// response maps
// ---------------------------------------------------------------------------

TEST_CASE("response at the anchor itself is one") {
    Tensor fm = make_tensor({3, 3, 4}, 7, -1.0, 1.0);
    Tensor resp = response_map(fm, 1, 2);
    REQUIRE(resp.values()[1 * 3 + 2] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("constant feature map responds one everywhere") {
    Tensor fm = Tensor::full({4, 4, 3}, 0.7);
    Tensor resp = response_map(fm, 0, 0);
    for (double v : resp.values()) REQUIRE(v == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("response map matches the per-pixel cosine oracle") {
    Tensor fm = make_tensor({3, 3, 5}, 8, -1.0, 1.0);
    const std::size_t hc = 2, wc = 0, d = 5;
    Tensor resp = response_map(fm, hc, wc);
    const double* anchor = fm.values().data() + (hc * 3 + wc) * d;
    for (std::size_t p = 0; p < 9; ++p) {
        const double* v = fm.values().data() + p * d;
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < d; ++i) {
            dot += anchor[i] * v[i];
            na += anchor[i] * anchor[i];
            nb += v[i] * v[i];
        }
        REQUIRE(resp.values()[p] ==
                Catch::Approx(dot / (std::sqrt(na) * std::sqrt(nb))).margin(1e-12));
    }
    REQUIRE_THROWS_AS(response_map(fm, 3, 0), ContractError);
}

// ---------------------------------------------------------------------------
// pixel grouping
// ---------------------------------------------------------------------------

TEST_CASE("single-category image groups perfectly") {
    Config cfg;
    cfg.categories = 4;
    cfg.feature_dim = 3;
    cfg.height = 4;
    cfg.width = 4;
    cfg.hidden_dim = 5;
    cfg.embed_dim = 4;
    Model model = init_model(cfg);
    Sample s;
    s.image = make_tensor({4, 4, 3}, 9, -1.0, 1.0);
    s.kind = SampleKind::MultiLabel;
    Tensor mask = Tensor::full({4, 4}, 2.0);
    GroupingReport rep = pixel_grouping_eval(model, {s}, {mask}, 2, cfg.ignore_id, 1);
    REQUIRE(rep.novel_accuracy == 1.0);
    REQUIRE(rep.novel_pixels == 16);
    REQUIRE(rep.base_pixels == 0);
    REQUIRE(std::isnan(rep.base_accuracy));
}

TEST_CASE("noise-free category features group perfectly on both splits") {
    // Build a dataset with zero noise: every pixel's image feature equals its
    // category mean exactly, so anchor responses separate categories.
    Config cfg;
    cfg.categories = 6;
    cfg.feature_dim = 4;
    cfg.height = 8;
    cfg.width = 8;
    cfg.hidden_dim = 8;
    cfg.embed_dim = 6;
    cfg.novel_fraction = 0.34;
    cfg.sigma = 1e-9;  // validate() requires positive sigma; effectively zero
    cfg.mu_separation = 4.0e9;
    cfg.mixing_radius = 0;  // no spatial mixing: every pixel is an exact mean
    cfg.count_seg = 4;
    cfg.count_multilabel = 4;
    cfg.count_singlelabel = 4;
    cfg.count_val = 6;
    cfg.seed = 11;
    GeneratedData gen = generate_dataset(cfg);
    Model model = init_model(cfg);  // untrained: grouping works on raw features
    GroupingReport rep = pixel_grouping_eval(model, gen.data.val, gen.sealed.val,
                                             cfg.base_count(), cfg.ignore_id, 3);
    // Identical inputs embed identically, so every pixel's own-category
    // response is exactly one and the grouping is perfect on both splits.
    REQUIRE(rep.base_accuracy == 1.0);
    REQUIRE(rep.novel_accuracy == 1.0);
}

TEST_CASE("pixel grouping is deterministic given the seed") {
    Config cfg;
    cfg.categories = 5;
    cfg.feature_dim = 4;
    cfg.height = 6;
    cfg.width = 6;
    cfg.hidden_dim = 6;
    cfg.embed_dim = 4;
    cfg.novel_fraction = 0.4;
    cfg.count_seg = 3;
    cfg.count_multilabel = 3;
    cfg.count_singlelabel = 3;
    cfg.count_val = 5;
    GeneratedData gen = generate_dataset(cfg);
    Model model = init_model(cfg);
    GroupingReport a = pixel_grouping_eval(model, gen.data.val, gen.sealed.val, cfg.base_count(),
                                           cfg.ignore_id, 17);
    GroupingReport b = pixel_grouping_eval(model, gen.data.val, gen.sealed.val, cfg.base_count(),
                                           cfg.ignore_id, 17);
    REQUIRE(a.base_accuracy == b.base_accuracy);
    REQUIRE(a.novel_accuracy == b.novel_accuracy);
    REQUIRE(a.miou.mean_all == b.miou.mean_all);
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

TEST_CASE("one-pixel mask renders its palette entry") {
    Tensor mask = Tensor::from({1, 1}, {0});
    std::string ppm = render_mask_ppm(mask);
    REQUIRE(ppm.substr(0, 11) == "P6\n1 1\n255\n");
    REQUIRE(ppm.size() == 11 + 3);
    const auto& p0 = mask_palette()[0];
    REQUIRE(static_cast<std::uint8_t>(ppm[11]) == p0[0]);
    REQUIRE(static_cast<std::uint8_t>(ppm[12]) == p0[1]);
    REQUIRE(static_cast<std::uint8_t>(ppm[13]) == p0[2]);
}

TEST_CASE("rendering is deterministic") {
    Tensor mask = Tensor::from({2, 3}, {0, 1, 2, 3, 31, 32});
    REQUIRE(render_mask_ppm(mask) == render_mask_ppm(mask));
    // id 32 wraps to palette entry 0
    std::string ppm = render_mask_ppm(mask);
    const auto& pal = mask_palette();
    REQUIRE(static_cast<std::uint8_t>(ppm[ppm.size() - 3]) == pal[0][0]);
    Tensor map = make_tensor({4, 4}, 21, -1.0, 1.0);
    REQUIRE(render_map_ppm(map) == render_map_ppm(map));
}

TEST_CASE("grayscale ramp maps min and max to 0 and 255") {
    Tensor map = Tensor::from({2, 2}, {-0.25, 0.5, 0.125, 0.875});
    std::string ppm = render_map_ppm(map);
    const std::size_t base = ppm.size() - 12;  // 4 pixels x 3 bytes
    auto gray = [&](std::size_t pixel) { return static_cast<std::uint8_t>(ppm[base + pixel * 3]); };
    REQUIRE(gray(0) == 0);
    REQUIRE(gray(3) == 255);
    // Interior values follow the linear ramp.
    REQUIRE(gray(1) == static_cast<std::uint8_t>(std::lround((0.5 + 0.25) / 1.125 * 255.0)));
    REQUIRE(gray(2) == static_cast<std::uint8_t>(std::lround((0.125 + 0.25) / 1.125 * 255.0)));
    // Constant maps render middle gray.
    std::string flat = render_map_ppm(Tensor::full({2, 2}, 3.0));
    REQUIRE(static_cast<std::uint8_t>(flat[flat.size() - 1]) == 128);
}

TEST_CASE("save_ppm reports IO failures") {
    REQUIRE_THROWS_AS(save_ppm("/nonexistent_dir/x.ppm", "P6\n1 1\n255\nabc"), IoError);
}
