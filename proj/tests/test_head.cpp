#include "oracles.hpp"

#include <cmath>
#include <set>

#include "larvseg/grad_check.hpp"
#include "larvseg/head.hpp"
#include "larvseg/model.hpp"

using namespace larvseg;
using testutil::make_tensor;
using testutil::uniform_vec;

namespace {

// Brute-force reference: per-pixel CE of softmax(scale * scores) without any
// tensor machinery.
double ce_oracle(const std::vector<double>& logits, std::size_t target) {
    double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    return std::log(z) + m - logits[target];
}

Config tiny_cfg() {
    Config cfg;
    cfg.height = 4;
    cfg.width = 4;
    cfg.feature_dim = 3;
    cfg.hidden_dim = 6;
    cfg.embed_dim = 5;
    cfg.categories = 4;
    cfg.novel_fraction = 0.5;
    cfg.top_k = 4;
    cfg.memory_capacity = 4;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// seg_loss
// ---------------------------------------------------------------------------

TEST_CASE("seg_loss near zero on confident correct scores") {
    // Correct channel at cosine 1, others at 0: margin 20 at s=20, so the CE
    // is about 3*exp(-20), far below 1e-6.
    const std::size_t c = 4;
    Tensor sm = Tensor::zeros({2, 2, c});
    Tensor mask = Tensor::zeros({2, 2});
    for (std::size_t p = 0; p < 4; ++p) {
        const std::size_t id = p % c;
        sm.values()[p * c + id] = 1.0;
        mask.values()[p] = static_cast<double>(id);
    }
    REQUIRE(seg_loss(sm, mask, 255, 20.0).item() < 1e-6);
}

TEST_CASE("seg_loss uniform scores give ln C") {
    Tensor sm = Tensor::full({3, 3, 4}, 0.25);
    Tensor mask = Tensor::zeros({3, 3});
    REQUIRE(seg_loss(sm, mask, 255, 20.0).item() == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("seg_loss all ignored is zero") {
    Tensor sm = make_tensor({2, 2, 4}, 3);
    Tensor mask = Tensor::full({2, 2}, 255.0);
    Tensor loss = seg_loss(sm, mask, 255, 20.0);
    REQUIRE(loss.item() == 0.0);
    REQUIRE_FALSE(loss.requires_grad());
}

TEST_CASE("seg_loss matches a per-pixel CE oracle") {
    const std::size_t c = 5;
    Tensor sm = make_tensor({3, 2, c}, 17, -1.0, 1.0);
    Tensor mask = Tensor::zeros({3, 2});
    mask.values() = {0, 4, 2, 255, 1, 3};
    const double scale = 20.0;
    double expect = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < 6; ++p) {
        const auto id = static_cast<std::size_t>(mask.values()[p]);
        if (id == 255) continue;
        std::vector<double> logits(c);
        for (std::size_t k = 0; k < c; ++k) logits[k] = sm.values()[p * c + k] * scale;
        expect += ce_oracle(logits, id);
        ++n;
    }
    expect /= static_cast<double>(n);
    REQUIRE(seg_loss(sm, mask, 255, scale).item() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("seg_loss rejects out-of-range ids") {
    Tensor sm = Tensor::zeros({2, 2, 4});
    Tensor mask = Tensor::full({2, 2}, 7.0);
    REQUIRE_THROWS_AS(seg_loss(sm, mask, 255, 20.0), ContractError);
}

// ---------------------------------------------------------------------------
// image_cls_loss
// ---------------------------------------------------------------------------

TEST_CASE("image_cls_loss single label two classes equals plain CE") {
    CosineClassifier clf;
    clf.weights = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
    clf.logit_scale = 20.0;
    Tensor fm = Tensor::full({2, 2, 3}, 0.0);
    for (std::size_t p = 0; p < 4; ++p) {
        fm.values()[p * 3 + 0] = 0.8;
        fm.values()[p * 3 + 1] = 0.3;
    }
    Tensor loss = image_cls_loss(fm, clf, {0});
    // Oracle: pooled feature is (0.8, 0.3, 0); cosine logits by hand.
    const double norm = std::sqrt(0.8 * 0.8 + 0.3 * 0.3);
    std::vector<double> z{20.0 * 0.8 / norm, 20.0 * 0.3 / norm};
    REQUIRE(loss.item() == Catch::Approx(ce_oracle(z, 0)).margin(1e-10));
}

TEST_CASE("image_cls_loss masks other present labels out of the denominator") {
    const std::size_t c = 4, d = 4;
    CosineClassifier clf;
    clf.weights = make_tensor({c, d}, 31, -1.0, 1.0);
    clf.logit_scale = 20.0;
    Tensor fm = make_tensor({2, 2, d}, 32, -1.0, 1.0);
    const std::vector<std::size_t> labels{0, 2};
    Tensor loss = image_cls_loss(fm, clf, labels);

    // Brute-force oracle: pooled cosine logits, then for each target the
    // denominator spans {target} plus the absent classes {1, 3}.
    std::vector<double> pooled(d, 0.0);
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t k = 0; k < d; ++k) pooled[k] += fm.values()[p * d + k] / 4.0;
    double pn = 0.0;
    for (double v : pooled) pn += v * v;
    pn = std::sqrt(pn);
    std::vector<double> z(c);
    for (std::size_t k = 0; k < c; ++k) {
        double dot = 0.0, wn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += pooled[j] * clf.weights.values()[k * d + j];
            wn += clf.weights.values()[k * d + j] * clf.weights.values()[k * d + j];
        }
        z[k] = 20.0 * dot / (pn * std::sqrt(wn));
    }
    auto masked_ce = [&](std::size_t target, std::size_t other) {
        double m = std::max({z[target], z[1], z[3]});
        double den = std::exp(z[target] - m) + std::exp(z[1] - m) + std::exp(z[3] - m);
        (void)other;
        return std::log(den) + m - z[target];
    };
    const double expect = 0.5 * (masked_ce(0, 2) + masked_ce(2, 0));
    REQUIRE(loss.item() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("image_cls_loss constant logits give ln C") {
    const std::size_t c = 6;
    CosineClassifier clf;
    // All weight rows identical: every cosine equals the same value.
    Tensor w = Tensor::zeros({c, 3});
    for (std::size_t k = 0; k < c; ++k) w.values()[k * 3] = 1.0;
    clf.weights = w;
    clf.logit_scale = 20.0;
    Tensor fm = Tensor::full({2, 2, 3}, 0.5);
    REQUIRE(image_cls_loss(fm, clf, {3}).item() ==
            Catch::Approx(std::log(static_cast<double>(c))).margin(1e-9));
}

TEST_CASE("image_cls_loss single label equals full softmax CE") {
    const std::size_t c = 5, d = 4;
    CosineClassifier clf;
    clf.weights = make_tensor({c, d}, 41, -1.0, 1.0);
    clf.logit_scale = 20.0;
    Tensor fm = make_tensor({3, 3, d}, 42, -1.0, 1.0);
    Tensor loss = image_cls_loss(fm, clf, {2});
    // With one label there is nothing to mask; compare to full-denominator CE.
    std::vector<double> pooled(d, 0.0);
    for (std::size_t p = 0; p < 9; ++p)
        for (std::size_t k = 0; k < d; ++k) pooled[k] += fm.values()[p * d + k] / 9.0;
    double pn = 0.0;
    for (double v : pooled) pn += v * v;
    pn = std::sqrt(pn);
    std::vector<double> z(c);
    for (std::size_t k = 0; k < c; ++k) {
        double dot = 0.0, wn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += pooled[j] * clf.weights.values()[k * d + j];
            wn += clf.weights.values()[k * d + j] * clf.weights.values()[k * d + j];
        }
        z[k] = 20.0 * dot / (pn * std::sqrt(wn));
    }
    REQUIRE(loss.item() == Catch::Approx(ce_oracle(z, 2)).margin(1e-10));
}

TEST_CASE("image_cls_loss rejects bad labels") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    Tensor fm = make_tensor({4, 4, cfg.embed_dim}, 43);
    REQUIRE_THROWS_AS(image_cls_loss(fm, m.clf, {}), ContractError);
    REQUIRE_THROWS_AS(image_cls_loss(fm, m.clf, {99}), ContractError);
}

// ---------------------------------------------------------------------------
// total losses
// ---------------------------------------------------------------------------

TEST_CASE("baseline total loss arithmetic") {
    LossWeights w;
    w.lambda_cls = 0.0;
    Tensor seg = Tensor::scalar(1.0);
    Tensor cls = Tensor::scalar(2.0);
    REQUIRE(baseline_total_loss(seg, cls, w).item() == 1.0);
    w.lambda_cls = 0.1;
    REQUIRE(baseline_total_loss(seg, cls, w).item() == Catch::Approx(1.2).margin(1e-15));
}

TEST_CASE("larvseg total loss arithmetic") {
    LossWeights w;
    Tensor seg = Tensor::scalar(1.0), cls = Tensor::scalar(2.0), aux = Tensor::scalar(3.0);
    REQUIRE(larvseg_total_loss(seg, cls, aux, w).item() == Catch::Approx(1.5).margin(1e-15));
    w.lambda_aux = 0.0;
    REQUIRE(larvseg_total_loss(seg, cls, aux, w).item() ==
            Catch::Approx(baseline_total_loss(seg, cls, w).item()).margin(1e-15));
}

TEST_CASE("total loss gradient is the weighted sum of term gradients") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    Tensor img = make_tensor({4, 4, cfg.feature_dim}, 51, -1.0, 1.0);
    Tensor mask = Tensor::zeros({4, 4});
    for (std::size_t p = 0; p < 16; ++p) mask.values()[p] = static_cast<double>(p % 2);

    auto grads_of = [&](double lam) {
        Model fresh = init_model(cfg);
        Tensor fm = embed(img, fresh.backbone);
        Tensor sm = score(fm, fresh.clf);
        Tensor seg = seg_loss(sm, mask, 255, fresh.clf.logit_scale);
        Tensor cls = image_cls_loss(fm, fresh.clf, {0, 1});
        LossWeights w;
        w.lambda_cls = lam;
        for (auto& [n, p] : fresh.named_params()) p.zero_grad();
        if (lam < 0) {  // cls only
            backward(cls);
        } else {
            backward(baseline_total_loss(seg, cls, w));
        }
        std::vector<double> all;
        for (auto& [n, p] : fresh.named_params())
            all.insert(all.end(), p.grad().begin(), p.grad().end());
        return all;
    };
    auto g_total = grads_of(0.1);
    auto g_seg = grads_of(0.0);
    auto g_cls = grads_of(-1.0);
    for (std::size_t i = 0; i < g_total.size(); ++i)
        REQUIRE(g_total[i] == Catch::Approx(g_seg[i] + 0.1 * g_cls[i]).margin(1e-10));
}

// ---------------------------------------------------------------------------
// memory bank
// ---------------------------------------------------------------------------

TEST_CASE("memory bank basic contracts") {
    MemoryBank bank({2, 3}, 4);
    REQUIRE(bank.has_slot(2));
    REQUIRE_FALSE(bank.has_slot(0));
    REQUIRE_THROWS_AS(bank.push(0, {1.0}), ContractError);
    REQUIRE_THROWS_AS(bank.push(2, {0.5, 0.5}), ContractError);  // not unit norm
    bank.push(2, {1.0, 0.0});
    REQUIRE(bank.fill(2) == 1);
    REQUIRE_THROWS_AS(bank.mean_vector(3), ColdStartError);
}

TEST_CASE("update_memory stores K unit vectors") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    Tensor img = make_tensor({4, 4, cfg.feature_dim}, 61, -1.0, 1.0);
    Tensor fm = embed(img, m.backbone);
    Tensor sm = score(fm, m.clf);
    MemoryBank bank({2, 3}, 8);
    update_memory(bank, fm.detach(), sm.detach(), {3}, 3);
    REQUIRE(bank.fill(3) == 3);
    REQUIRE(bank.fill(2) == 0);
    for (const auto& v : bank.slot(3)) {
        double n2 = 0.0;
        for (double x : v) n2 += x * x;
        REQUIRE(std::sqrt(n2) == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("memory bank FIFO eviction keeps the newest") {
    MemoryBank bank({1}, 2);
    auto unit = [](double a, double b) {
        double n = std::sqrt(a * a + b * b);
        return std::vector<double>{a / n, b / n};
    };
    bank.push(1, unit(1, 0));
    bank.push(1, unit(0, 1));
    bank.push(1, unit(1, 1));
    bank.push(1, unit(1, -1));
    REQUIRE(bank.fill(1) == 2);
    REQUIRE(bank.slot(1)[0] == unit(1, 1));
    REQUIRE(bank.slot(1)[1] == unit(1, -1));
}

TEST_CASE("top-K selection matches a full sort oracle") {
    auto channel = uniform_vec(71, 30, -1.0, 1.0);
    channel[7] = channel[12];  // force one tie
    for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{30}}) {
        auto got = topk_pixels(channel, k);
        std::vector<std::size_t> idx(channel.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return channel[a] > channel[b]; });
        idx.resize(k);
        REQUIRE(got == idx);
    }
    REQUIRE_THROWS_AS(topk_pixels(channel, 31), ContractError);
}

TEST_CASE("update_memory rejects oversized K") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    Tensor img = make_tensor({4, 4, cfg.feature_dim}, 62);
    Tensor fm = embed(img, m.backbone).detach();
    Tensor sm = score(fm, m.clf).detach();
    MemoryBank bank({2, 3}, 4);
    REQUIRE_THROWS_AS(update_memory(bank, fm, sm, {3}, 17), ContractError);
}

// ---------------------------------------------------------------------------
// memory confidence
// ---------------------------------------------------------------------------

TEST_CASE("memory confidence is one at the stored pixel") {
    Tensor fm = make_tensor({2, 2, 3}, 81, -1.0, 1.0);
    MemoryBank bank({0}, 4);
    std::vector<double> v(fm.values().begin(), fm.values().begin() + 3);
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (double& x : v) x /= n;
    bank.push(0, v);
    Tensor conf = memory_confidence(fm, bank, 0);
    REQUIRE(conf.values()[0] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("opposite unit vectors cancel to zero confidence") {
    Tensor fm = make_tensor({2, 2, 3}, 82, -1.0, 1.0);
    MemoryBank bank({0}, 4);
    bank.push(0, {1, 0, 0});
    bank.push(0, {-1, 0, 0});
    Tensor conf = memory_confidence(fm, bank, 0);
    for (double c : conf.values()) REQUIRE(c == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("memory confidence matches direct averaging oracle") {
    Tensor fm = make_tensor({3, 2, 4}, 83, -1.0, 1.0);
    MemoryBank bank({5}, 8);
    std::vector<std::vector<double>> stored;
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto v = uniform_vec(900 + s, 4, -1.0, 1.0);
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (double& x : v) x /= n;
        stored.push_back(v);
        bank.push(5, v);
    }
    Tensor conf = memory_confidence(fm, bank, 5);
    for (std::size_t p = 0; p < 6; ++p) {
        double fx = 0.0;
        for (std::size_t d = 0; d < 4; ++d) fx += fm.values()[p * 4 + d] * fm.values()[p * 4 + d];
        const double fn = std::sqrt(fx);
        double avg = 0.0;
        for (const auto& v : stored) {
            double dot = 0.0;
            for (std::size_t d = 0; d < 4; ++d) dot += fm.values()[p * 4 + d] * v[d];
            avg += dot / fn;
        }
        avg /= 3.0;
        REQUIRE(conf.values()[p] == Catch::Approx(avg).margin(1e-12));
    }
}

TEST_CASE("no gradient reaches memory bank contents") {
    Tensor fm = make_tensor({2, 2, 3}, 84, -1.0, 1.0).set_requires_grad(true);
    MemoryBank bank({0}, 4);
    bank.push(0, {0, 1, 0});
    const auto before = bank.slot(0);
    Tensor loss = mean(memory_confidence(fm, bank, 0));
    fm.zero_grad();
    backward(loss);
    REQUIRE(fm.has_grad());
    bool any_nonzero = false;
    for (double g : fm.grad()) any_nonzero = any_nonzero || g != 0.0;
    REQUIRE(any_nonzero);
    REQUIRE(bank.slot(0) == before);
}

// ---------------------------------------------------------------------------
// attention map
// ---------------------------------------------------------------------------

TEST_CASE("constant difference gives uniform half attention") {
    Tensor s_fg = Tensor::full({3, 3}, 0.4);
    Tensor s_bg = Tensor::full({3, 3}, -0.1);
    Tensor a = attention_map(s_fg, s_bg);
    for (double v : a.values()) REQUIRE(v == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("attention hand z-score oracle") {
    // d = [1, 1, -1, -1]: mean 0, population std 1, so A = sigmoid(+-1/(1+1e-8)).
    Tensor s_fg = Tensor::from({2, 2}, {1, 1, -1, -1});
    Tensor s_bg = Tensor::zeros({2, 2});
    Tensor a = attention_map(s_fg, s_bg);
    const double hi = 1.0 / (1.0 + std::exp(-1.0 / (1.0 + 1e-8)));
    const double lo = 1.0 / (1.0 + std::exp(1.0 / (1.0 + 1e-8)));
    REQUIRE(a.values()[0] == Catch::Approx(hi).margin(1e-12));
    REQUIRE(a.values()[1] == Catch::Approx(hi).margin(1e-12));
    REQUIRE(a.values()[2] == Catch::Approx(lo).margin(1e-12));
    REQUIRE(a.values()[3] == Catch::Approx(lo).margin(1e-12));
    // And the spec's idealized sigmoid(+-1) within the eps slack.
    REQUIRE(a.values()[0] == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).margin(1e-7));
}

TEST_CASE("attention stays in the open unit interval and is monotone in d") {
    Tensor s_fg = make_tensor({4, 4}, 91, -1.0, 1.0);
    Tensor s_bg = make_tensor({4, 4}, 92, -1.0, 1.0);
    Tensor a = attention_map(s_fg, s_bg);
    std::vector<double> d(16);
    for (std::size_t i = 0; i < 16; ++i) d[i] = s_fg.values()[i] - s_bg.values()[i];
    for (std::size_t i = 0; i < 16; ++i) {
        REQUIRE(a.values()[i] > 0.0);
        REQUIRE(a.values()[i] < 1.0);
        for (std::size_t j = 0; j < 16; ++j)
            if (d[i] > d[j]) REQUIRE(a.values()[i] > a.values()[j]);
    }
}

// ---------------------------------------------------------------------------
// attentive classification
// ---------------------------------------------------------------------------

TEST_CASE("attentive loss near zero for one-hot attention on a one-hot row") {
    const std::size_t c = 4;
    Tensor sm = Tensor::zeros({2, 2, c});
    sm.values()[1 * c + 2] = 1.0;  // pixel 1 scores category 2 at cosine 1
    // Attention concentrated on pixel 1 (strictly inside (0,1) but extreme).
    Tensor a = Tensor::from({2, 2}, {1e-12, 1.0 - 3e-12, 1e-12, 1e-12});
    Tensor loss = attentive_cls_loss(sm, a, 2, {2}, 1.0, 20.0);
    REQUIRE(loss.item() < 1e-6);
}

TEST_CASE("uniform attention reduces to GAP pooling of logits") {
    const std::size_t c = 4;
    Tensor sm = make_tensor({3, 3, c}, 101, -1.0, 1.0);
    Tensor a = Tensor::full({3, 3}, 0.37);  // any constant
    Tensor loss = attentive_cls_loss(sm, a, 1, {1}, 1.0, 20.0);
    std::vector<double> pooled(c, 0.0);
    for (std::size_t p = 0; p < 9; ++p)
        for (std::size_t k = 0; k < c; ++k) pooled[k] += 20.0 * sm.values()[p * c + k] / 9.0;
    REQUIRE(loss.item() == Catch::Approx(ce_oracle(pooled, 1)).margin(1e-10));
}

TEST_CASE("attentive loss invariant to attention rescaling") {
    const std::size_t c = 5;
    Tensor sm = make_tensor({4, 4, c}, 102, -1.0, 1.0);
    Tensor a = sigmoid(make_tensor({4, 4}, 103, -2.0, 2.0));
    Tensor l1 = attentive_cls_loss(sm, a, 2, {2, 4}, 1.0, 20.0);
    Tensor l2 = attentive_cls_loss(sm, a * 2.0, 2, {2, 4}, 1.0, 20.0);
    REQUIRE(l1.item() == Catch::Approx(l2.item()).margin(1e-12));
}

TEST_CASE("attentive loss applies the same masking rule") {
    const std::size_t c = 4;
    Tensor sm = make_tensor({2, 2, c}, 104, -1.0, 1.0);
    Tensor a = Tensor::full({2, 2}, 0.25);
    Tensor loss = attentive_cls_loss(sm, a, 0, {0, 3}, 1.0, 20.0);
    std::vector<double> pooled(c, 0.0);
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t k = 0; k < c; ++k) pooled[k] += 20.0 * sm.values()[p * c + k] / 4.0;
    // Denominator spans {0} and the absent {1, 2}; label 3 is masked away.
    double m = std::max({pooled[0], pooled[1], pooled[2]});
    double den = std::exp(pooled[0] - m) + std::exp(pooled[1] - m) + std::exp(pooled[2] - m);
    REQUIRE(loss.item() == Catch::Approx(std::log(den) + m - pooled[0]).margin(1e-10));
}

TEST_CASE("attentive loss rejects bad tau") {
    Tensor sm = Tensor::zeros({2, 2, 4});
    Tensor a = Tensor::full({2, 2}, 0.5);
    REQUIRE_THROWS_AS(attentive_cls_loss(sm, a, 0, {0}, 0.0, 20.0), ContractError);
    REQUIRE_THROWS_AS(attentive_cls_loss(sm, a, 0, {0}, -1.0, 20.0), ContractError);
}

TEST_CASE("normalized attention sums to one") {
    Tensor a = sigmoid(make_tensor({5, 5}, 105, -3.0, 3.0));
    Tensor a_flat = reshape(a, {25});
    Tensor a_norm = div_bcast(a_flat, sum(a_flat));
    double s = 0.0;
    for (double v : a_norm.values()) s += v;
    REQUIRE(s == Catch::Approx(1.0).margin(1e-9));
}

// ---------------------------------------------------------------------------
// single-image CA
// ---------------------------------------------------------------------------

TEST_CASE("single-image CA with K equal to all pixels is mean CE") {
    const std::size_t c = 4;
    Tensor sm = make_tensor({2, 2, c}, 111, -1.0, 1.0);
    Tensor loss = single_image_ca_loss(sm, {1}, 4, 20.0);
    double expect = 0.0;
    for (std::size_t p = 0; p < 4; ++p) {
        std::vector<double> logits(c);
        for (std::size_t k = 0; k < c; ++k) logits[k] = 20.0 * sm.values()[p * c + k];
        expect += ce_oracle(logits, 1) / 4.0;
    }
    REQUIRE(loss.item() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("single-image CA selects the hot pixels first") {
    const std::size_t c = 3;
    Tensor sm = Tensor::zeros({2, 2, c});
    sm.values()[0 * c + 1] = 0.9;  // pixels 0 and 3 are hot on channel 1
    sm.values()[3 * c + 1] = 0.8;
    Tensor loss = single_image_ca_loss(sm, {1}, 2, 20.0);
    double expect = 0.0;
    for (std::size_t p : {0, 3}) {
        std::vector<double> logits(c);
        for (std::size_t k = 0; k < c; ++k) logits[k] = 20.0 * sm.values()[p * c + k];
        expect += ce_oracle(logits, 1) / 2.0;
    }
    REQUIRE(loss.item() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("single-image CA rejects oversized K") {
    Tensor sm = Tensor::zeros({2, 2, 3});
    REQUIRE_THROWS_AS(single_image_ca_loss(sm, {0}, 5, 20.0), ContractError);
}

// ---------------------------------------------------------------------------
// aux composition and the full-loss gradient check
// ---------------------------------------------------------------------------

TEST_CASE("aux loss is zero on a cold bank") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    Tensor img = make_tensor({4, 4, cfg.feature_dim}, 121, -1.0, 1.0);
    Tensor fm = embed(img, m.backbone);
    Tensor sm = score(fm, m.clf);
    MemoryBank bank({2, 3}, 4);
    LossWeights w;
    Tensor aux = aux_loss_for_sample(fm, sm, bank, {2, 3}, 2, w, 20.0);
    REQUIRE(aux.item() == 0.0);
    // One vector is below the warm floor of capacity/2 = 2: still cold.
    bank.push(2, {0, 0, 1, 0, 0});
    aux = aux_loss_for_sample(fm, sm, bank, {2, 3}, 2, w, 20.0);
    REQUIRE(aux.item() == 0.0);
}

TEST_CASE("aux loss engages once the bank is warm") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    MemoryBank bank({2, 3}, 4);
    LossWeights w;
    for (std::uint64_t i = 0; i < 2; ++i) {
        Tensor img = make_tensor({4, 4, cfg.feature_dim}, 130 + i, -1.0, 1.0);
        Tensor fm = embed(img, m.backbone).detach();
        Tensor sm = score(fm, m.clf).detach();
        update_memory(bank, fm, sm, {2}, 1);
    }
    REQUIRE(bank.fill(2) == 2);
    Tensor img = make_tensor({4, 4, cfg.feature_dim}, 140, -1.0, 1.0);
    Tensor fm = embed(img, m.backbone);
    Tensor sm = score(fm, m.clf);
    Tensor aux = aux_loss_for_sample(fm, sm, bank, {0, 2}, 2, w, 20.0);
    REQUIRE(aux.item() > 0.0);
    REQUIRE(aux.requires_grad());
}

TEST_CASE("full larvseg loss gradient check on a 4x4 sample") {
    Config cfg = tiny_cfg();
    Model m = init_model(cfg);
    LossWeights w;
    w.top_k = 4;
    w.capacity = 4;

    // Warm the bank for both novel categories first.
    MemoryBank bank({2, 3}, w.capacity);
    for (std::uint64_t i = 0; i < 2; ++i) {
        Tensor img = make_tensor({4, 4, cfg.feature_dim}, 150 + i, -1.0, 1.0);
        Tensor fm = embed(img, m.backbone).detach();
        Tensor sm = score(fm, m.clf).detach();
        update_memory(bank, fm, sm, {2, 3}, 2);
    }

    Tensor seg_img = make_tensor({4, 4, cfg.feature_dim}, 160, -1.0, 1.0);
    Tensor seg_mask = Tensor::zeros({4, 4});
    for (std::size_t p = 0; p < 16; ++p) seg_mask.values()[p] = static_cast<double>(p % 2);
    Tensor cls_img = make_tensor({4, 4, cfg.feature_dim}, 161, -1.0, 1.0);
    const std::vector<std::size_t> labels{0, 2};

    auto fn = [&](const std::vector<Tensor>& in) {
        Backbone bb{in[0], in[1], in[2], in[3], 1};
        CosineClassifier clf{in[4], 20.0};
        Tensor seg_sm = score(embed(seg_img, bb), clf);
        Tensor l_seg = seg_loss(seg_sm, seg_mask, 255, clf.logit_scale);
        Tensor fm = embed(cls_img, bb);
        Tensor sm = score(fm, clf);
        Tensor l_cls = image_cls_loss(fm, clf, labels);
        Tensor l_aux = aux_loss_for_sample(fm, sm, bank, labels, 2, w, clf.logit_scale);
        return larvseg_total_loss(l_seg, l_cls, l_aux, w);
    };
    auto res = grad_check(fn,
                          {m.backbone.w1.detach(), m.backbone.b1.detach(), m.backbone.w2.detach(),
                           m.backbone.b2.detach(), m.clf.weights.detach()},
                          1e-5);
    INFO("max rel err " << res.max_rel_err << " at input " << res.worst_input << " index "
                        << res.worst_index << " analytic " << res.analytic << " numeric "
                        << res.numeric);
    REQUIRE(res.max_rel_err <= 1e-4);
}

TEST_CASE("bank serialization round trip") {
    MemoryBank bank({4, 6}, 3);
    auto unit = [](std::vector<double> v) {
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (double& x : v) x /= n;
        return v;
    };
    bank.push(4, unit({1, 2, 3}));
    bank.push(4, unit({-1, 0.5, 2}));
    bank.push(6, unit({0, 1, 0}));
    auto tensors = bank.to_tensors();
    REQUIRE(tensors.size() == 2);
    REQUIRE(tensors[0].first == "bank.4");
    REQUIRE(tensors[1].first == "bank.6");

    MemoryBank back({4, 6}, 3);
    for (const auto& [name, t] : tensors)
        back.restore_slot(std::stoul(name.substr(5)), t);
    REQUIRE(back.fill(4) == 2);
    REQUIRE(back.slot(4) == bank.slot(4));
    REQUIRE(back.slot(6) == bank.slot(6));
    REQUIRE_THROWS_AS(back.restore_slot(0, tensors[0].second), FormatError);
}
