#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "larvseg/checkpoint.hpp"
#include "larvseg/config.hpp"
#include "larvseg/errors.hpp"
#include "larvseg/head.hpp"
#include "larvseg/model.hpp"
#include "larvseg/rng.hpp"
#include "larvseg/synth.hpp"

namespace larvseg {

// Polynomial decay from base_lr to min_lr. The boundaries are returned
// verbatim rather than through the formula so they compare bit-exactly.
inline double lr_at(std::size_t iter, const Config& cfg) {
    if (iter > cfg.total_iters)
        throw ContractError("lr_at: iteration " + std::to_string(iter) + " past the schedule end");
    if (iter == 0) return cfg.base_lr;
    if (iter == cfg.total_iters) return cfg.min_lr;
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.total_iters);
    return (cfg.base_lr - cfg.min_lr) * std::pow(frac, cfg.lr_power) + cfg.min_lr;
}

// Momentum buffers, one per parameter, in the order Model::named_params()
// reports them.
struct OptimizerState {
    std::vector<std::vector<double>> buffers;
};

inline OptimizerState init_optimizer(const std::vector<std::pair<std::string, Tensor>>& params) {
    OptimizerState st;
    for (const auto& [name, p] : params) st.buffers.emplace_back(p.numel(), 0.0);
    return st;
}

// v <- momentum * v + g;  p <- p - lr * v.  No weight decay.
inline void sgd_step(std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
                     double lr, double momentum) {
    if (params.size() != state.buffers.size())
        throw ContractError("sgd_step: optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        if (!p.has_grad()) throw ContractError("sgd_step: parameter " + name + " has no gradient");
        const std::vector<double>& g = p.grad();
        std::vector<double>& v = state.buffers[i];
        if (g.size() != v.size())
            throw ContractError("sgd_step: buffer size mismatch for " + name);
        std::vector<double>& data = p.values();
        for (std::size_t j = 0; j < g.size(); ++j) {
            if (!std::isfinite(g[j]))
                throw TrainingAbort("non-finite gradient in parameter " + name);
            v[j] = momentum * v[j] + g[j];
            data[j] -= lr * v[j];
        }
    }
}

struct Batch {
    SampleKind kind;
    std::vector<std::size_t> indices;
};

// Deterministic round-robin over sample kinds. The kind pattern is the ratio
// list expanded in seg, multilabel, singlelabel order (ratio 1:1:1 yields
// seg, multi, single, seg, ...). Within a kind, samples are drawn from a
// per-epoch shuffled permutation keyed by (seed, batch_order, kind, epoch),
// so a resumed run can replay the exact draw sequence.
class BatchScheduler {
  public:
    BatchScheduler(std::uint64_t seed, std::size_t batch_size,
                   const std::array<std::size_t, 3>& ratios,
                   const std::array<std::size_t, 3>& counts)
        : seed_(seed), batch_size_(batch_size), counts_(counts) {
        if (batch_size == 0) throw ConfigError("batch_scheduler: batch size must be positive");
        static const char* kKindName[3] = {"seg", "multilabel", "singlelabel"};
        for (std::size_t k = 0; k < 3; ++k) {
            if (ratios[k] == 0) continue;
            if (counts[k] == 0)
                throw ConfigError(std::string("batch_scheduler: ratio for ") + kKindName[k] +
                                  " is positive but the split is empty");
            for (std::size_t r = 0; r < ratios[k]; ++r)
                pattern_.push_back(static_cast<SampleKind>(k));
        }
        if (pattern_.empty()) throw ConfigError("batch_scheduler: all ratios are zero");
    }

    Batch next() {
        const SampleKind kind = pattern_[cursor_ % pattern_.size()];
        ++cursor_;
        KindState& st = state_[static_cast<std::size_t>(kind)];
        Batch batch{kind, {}};
        batch.indices.reserve(batch_size_);
        for (std::size_t i = 0; i < batch_size_; ++i) {
            if (st.pos == st.order.size()) reshuffle(kind, st);
            batch.indices.push_back(st.order[st.pos++]);
        }
        return batch;
    }

  private:
    struct KindState {
        std::vector<std::size_t> order;
        std::size_t pos = 0;
        std::uint64_t epoch = 0;
    };

    void reshuffle(SampleKind kind, KindState& st) {
        st.order.resize(counts_[static_cast<std::size_t>(kind)]);
        std::iota(st.order.begin(), st.order.end(), std::size_t{0});
        const std::uint64_t index =
            (static_cast<std::uint64_t>(kind) << 32) | st.epoch;
        auto rng = make_rng(seed_, stream::batch_order, index);
        std::shuffle(st.order.begin(), st.order.end(), rng);
        st.pos = 0;
        ++st.epoch;
    }

    std::uint64_t seed_;
    std::size_t batch_size_;
    std::array<std::size_t, 3> counts_;
    std::vector<SampleKind> pattern_;
    std::size_t cursor_ = 0;
    KindState state_[3];
};

struct MetricsRow {
    std::size_t step = 0;
    double lr = 0.0;
    double l_seg = 0.0;
    double l_cls = 0.0;
    double l_aux = 0.0;
    double total = 0.0;
};

namespace detail {

inline std::string fmt_g17(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

}  // namespace detail

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open metrics file " + path);
    out << "step,lr,L_seg,L_cls,L_aux,total\n";
    for (const MetricsRow& r : rows)
        out << r.step << ',' << detail::fmt_g17(r.lr) << ',' << detail::fmt_g17(r.l_seg) << ','
            << detail::fmt_g17(r.l_cls) << ',' << detail::fmt_g17(r.l_aux) << ','
            << detail::fmt_g17(r.total) << '\n';
    if (!out) throw IoError("failed writing metrics file " + path);
}

inline Checkpoint build_checkpoint(const Config& cfg,
                                   std::vector<std::pair<std::string, Tensor>>& params,
                                   const OptimizerState& opt, const MemoryBank& bank,
                                   std::size_t iter) {
    Checkpoint ck;
    ck.cfg = cfg;
    for (auto& [name, p] : params) ck.tensors.emplace_back(name, p.detach());
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::vector<double> buf = opt.buffers[i];
        ck.tensors.emplace_back("momentum." + params[i].first,
                                Tensor::from(params[i].second.shape(), std::move(buf)));
    }
    for (auto& [name, t] : bank.to_tensors()) ck.tensors.emplace_back(name, t);
    ck.tensors.emplace_back("trainer.iter", Tensor::scalar(static_cast<double>(iter)));
    return ck;
}

// Copies parameter tensors from a checkpoint into an initialized model.
inline void load_params(const Checkpoint& ck, Model& model) {
    for (auto& [name, p] : model.named_params()) {
        const Tensor& t = ck.require(name);
        if (t.shape() != p.shape())
            throw FormatError("checkpoint tensor " + name + " has shape " +
                              shape_str(t.shape()) + ", expected " + shape_str(p.shape()));
        p.values() = t.values();
    }
}

struct TrainResult {
    Model model;
    MemoryBank bank;
    OptimizerState opt;
    std::vector<MetricsRow> metrics;  // rows for the steps this call executed
    std::size_t start_iter = 0;
};

// Runs the full training loop. When out_dir is non-empty, periodic and final
// checkpoints plus metrics.csv are written there; when empty the run stays
// in memory (used by tests and the ablation sweep). A non-empty resume path
// restores parameters, momentum, bank and step counter from a checkpoint and
// continues to total_iters.
inline TrainResult train(const Config& cfg, const Dataset& data, const std::string& out_dir = "",
                         const std::string& resume = "") {
    cfg.validate();
    if (cfg.categories != data.cfg.categories || cfg.feature_dim != data.cfg.feature_dim ||
        cfg.height != data.cfg.height || cfg.width != data.cfg.width)
        throw ConfigError("train: config geometry does not match the dataset manifest");

    Model model = init_model(cfg);
    std::vector<std::pair<std::string, Tensor>> params = model.named_params();
    OptimizerState opt = init_optimizer(params);
    MemoryBank bank(data.novel_ids(), cfg.memory_capacity);
    const std::size_t base_count = cfg.base_count();

    LossWeights w;
    w.lambda_cls = cfg.lambda_cls;
    w.lambda_aux = cfg.lambda_aux;
    w.tau = cfg.tau;
    w.top_k = cfg.top_k;
    w.capacity = cfg.memory_capacity;

    // Supervised mode sees pixel-labelled data only; the other modes follow
    // the configured ratio.
    std::array<std::size_t, 3> ratios = {cfg.ratio_seg, cfg.ratio_multilabel,
                                         cfg.ratio_singlelabel};
    if (cfg.mode == TrainMode::Supervised) ratios = {1, 0, 0};
    BatchScheduler sched(cfg.seed, cfg.batch_size, ratios,
                         {data.seg.size(), data.multilabel.size(), data.singlelabel.size()});

    std::size_t start_iter = 0;
    if (!resume.empty()) {
        Checkpoint ck = read_checkpoint(resume);
        if (config_to_text(ck.cfg) != config_to_text(cfg))
            throw ConfigError("train: resume checkpoint was written with a different config");
        load_params(ck, model);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor& m = ck.require("momentum." + params[i].first);
            if (m.shape() != params[i].second.shape())
                throw FormatError("checkpoint momentum buffer shape mismatch for " +
                                  params[i].first);
            opt.buffers[i] = m.values();
        }
        for (const auto& [name, t] : ck.tensors)
            if (name.rfind("bank.", 0) == 0)
                bank.restore_slot(std::stoul(name.substr(5)), t);
        start_iter = static_cast<std::size_t>(ck.require("trainer.iter").item());
        if (start_iter > cfg.total_iters)
            throw ConfigError("train: checkpoint iteration exceeds total_iters");
        // Replay the scheduler up to the checkpoint so the draw sequence
        // continues exactly where the interrupted run left off.
        for (std::size_t i = 0; i < start_iter; ++i) sched.next();
    }

    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    std::vector<MetricsRow> metrics;
    metrics.reserve(cfg.total_iters - start_iter);

    auto save = [&](std::size_t iter, const std::string& name) {
        Checkpoint ck = build_checkpoint(cfg, params, opt, bank, iter);
        write_checkpoint(out_dir + "/" + name, ck);
    };

    for (std::size_t iter = start_iter; iter < cfg.total_iters; ++iter) {
        const double lr = lr_at(iter, cfg);
        const Batch batch = sched.next();
        for (auto& [name, p] : params) p.zero_grad();

        MetricsRow row;
        row.step = iter + 1;
        row.lr = lr;
        Tensor total;

        struct PendingPush {
            Tensor fm, sm;
            std::vector<std::size_t> novel_labels;
        };
        std::vector<PendingPush> pushes;

        if (batch.kind == SampleKind::Seg) {
            Tensor acc = Tensor::scalar(0.0);
            for (std::size_t idx : batch.indices) {
                const Sample& s = data.seg[idx];
                Tensor sm = score(embed(s.image, model.backbone), model.clf);
                acc = acc + seg_loss(sm, s.mask, cfg.ignore_id, model.clf.logit_scale);
            }
            total = acc * inv_b;
            row.l_seg = total.item();
        } else {
            const std::vector<Sample>& split =
                batch.kind == SampleKind::MultiLabel ? data.multilabel : data.singlelabel;
            Tensor cls_acc = Tensor::scalar(0.0);
            Tensor aux_acc = Tensor::scalar(0.0);
            for (std::size_t idx : batch.indices) {
                const Sample& s = split[idx];
                Tensor fm = embed(s.image, model.backbone);
                Tensor sm = score(fm, model.clf);
                cls_acc = cls_acc + image_cls_loss(fm, model.clf, s.labels);
                std::vector<std::size_t> novel_labels;
                for (std::size_t id : s.labels)
                    if (id >= base_count) novel_labels.push_back(id);
                if (cfg.mode == TrainMode::LarvSeg) {
                    aux_acc = aux_acc + aux_loss_for_sample(fm, sm, bank, s.labels, base_count,
                                                            w, model.clf.logit_scale);
                    if (!novel_labels.empty())
                        pushes.push_back({fm.detach(), sm.detach(), std::move(novel_labels)});
                } else if (cfg.mode == TrainMode::SingleImageCA && !novel_labels.empty()) {
                    aux_acc = aux_acc +
                              single_image_ca_loss(sm, novel_labels, w.top_k,
                                                   model.clf.logit_scale);
                }
            }
            Tensor mean_cls = cls_acc * inv_b;
            Tensor mean_aux = aux_acc * inv_b;
            total = mean_cls * cfg.lambda_cls + mean_aux * cfg.lambda_aux;
            row.l_cls = mean_cls.item();
            row.l_aux = mean_aux.item();
        }

        row.total = total.item();
        if (!std::isfinite(row.total))
            throw TrainingAbort("non-finite loss at step " + std::to_string(iter + 1));
        backward(total);
        sgd_step(params, opt, lr, cfg.momentum);
        for (PendingPush& p : pushes)
            update_memory(bank, p.fm, p.sm, p.novel_labels, w.top_k);
        metrics.push_back(row);

        if (!out_dir.empty() && cfg.checkpoint_interval > 0 &&
            (iter + 1) % cfg.checkpoint_interval == 0 && iter + 1 < cfg.total_iters) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "checkpoint_%06zu.lckp", iter + 1);
            save(iter + 1, buf);
        }
    }

    if (!out_dir.empty()) {
        save(cfg.total_iters, "checkpoint_final.lckp");
        write_metrics_csv(out_dir + "/metrics.csv", metrics);
    }

    return TrainResult{std::move(model), std::move(bank), std::move(opt), std::move(metrics),
                       start_iter};
}

}  // namespace larvseg
