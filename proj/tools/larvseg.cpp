// larvseg command-line tool: dataset generation, training, evaluation,
// response-map dumps, mask rendering and ablation sweeps over one config.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "larvseg/checkpoint.hpp"
#include "larvseg/config.hpp"
#include "larvseg/errors.hpp"
#include "larvseg/eval.hpp"
#include "larvseg/render.hpp"
#include "larvseg/synth.hpp"
#include "larvseg/trainer.hpp"

namespace {

using namespace larvseg;

struct CommonOpts {
    std::string config_path;
    std::string data;
    std::string out;
    std::string checkpoint;
    std::string report;
    std::string mode;
    std::vector<std::string> sets;
    std::int64_t seed = -1;  // negative means "not given"
};

void add_config_flags(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "config file with key=value lines");
    cmd->add_option("--set", o.sets, "override a single config key (repeatable)");
    cmd->add_option("--seed", o.seed, "override the root seed");
}

// Layered resolution: defaults, then the dataset manifest (when a data dir is
// given), then the --config file, then --set pairs, then dedicated flags.
// Later layers win.
Config resolve_config(const CommonOpts& o, bool use_manifest) {
    Config cfg;
    if (use_manifest && !o.data.empty())
        cfg = load_config(o.data + "/manifest.txt", std::move(cfg));
    if (!o.config_path.empty()) cfg = load_config(o.config_path, std::move(cfg));
    for (const std::string& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!o.mode.empty()) cfg.mode = parse_mode(o.mode);
    if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
    cfg.validate();
    return cfg;
}

Model model_from_checkpoint(const Checkpoint& ck) {
    Model model = init_model(ck.cfg);
    load_params(ck, model);
    return model;
}

std::string fmt(double v) { return detail::fmt_g17(v); }

void write_report(const std::string& path, const MiouReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open report file " + path);
    out << "key,value\n";
    out << "miou_all," << fmt(rep.mean_all) << "\n";
    out << "miou_base," << fmt(rep.mean_base) << "\n";
    out << "miou_novel," << fmt(rep.mean_novel) << "\n";
    out << "pixels," << rep.pixels << "\n";
    for (std::size_t c = 0; c < rep.iou.size(); ++c)
        out << "iou_" << c << "," << fmt(rep.iou[c]) << "\n";
    if (!out) throw IoError("failed writing report file " + path);
}

int cmd_gen(const CommonOpts& o) {
    Config cfg = resolve_config(o, false);
    GeneratedData gen = generate_dataset(cfg);
    write_dataset(o.out, gen);
    std::cout << "wrote dataset with " << gen.data.seg.size() << "/" << gen.data.multilabel.size()
              << "/" << gen.data.singlelabel.size() << "/" << gen.data.val.size()
              << " seg/multilabel/singlelabel/val samples to " << o.out << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o) {
    Config cfg = resolve_config(o, true);
    Dataset data = read_dataset(o.data);
    std::filesystem::create_directories(o.out);
    save_config(o.out + "/config.txt", cfg);
    TrainResult res = train(cfg, data, o.out, o.checkpoint);
    MetricsRow last;
    if (!res.metrics.empty()) last = res.metrics.back();
    std::cout << "trained " << mode_name(cfg.mode) << " for " << cfg.total_iters
              << " iterations (final total loss " << fmt(last.total) << "), checkpoint in "
              << o.out << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& o) {
    Checkpoint ck = read_checkpoint(o.checkpoint);
    Model model = model_from_checkpoint(ck);
    Dataset data = read_dataset(o.data);
    std::vector<Tensor> masks = read_sealed_masks(o.data, "val");
    MiouReport rep =
        evaluate_miou(model, data.val, masks, ck.cfg.base_count(), ck.cfg.ignore_id);
    if (!o.report.empty()) write_report(o.report, rep);
    std::cout << "miou all " << fmt(rep.mean_all) << " base " << fmt(rep.mean_base) << " novel "
              << fmt(rep.mean_novel) << " over " << rep.pixels << " pixels\n";
    return 0;
}

int cmd_respmap(const CommonOpts& o, std::size_t sample, std::int64_t row, std::int64_t col) {
    Checkpoint ck = read_checkpoint(o.checkpoint);
    Model model = model_from_checkpoint(ck);
    Dataset data = read_dataset(o.data);
    if (sample >= data.val.size())
        throw ContractError("respmap: sample index " + std::to_string(sample) +
                            " out of range (val split has " + std::to_string(data.val.size()) +
                            " samples)");
    Tensor fm = embed(data.val[sample].image, model.backbone);
    const std::size_t h = fm.extent(0), w = fm.extent(1);
    const std::size_t hc = row < 0 ? h / 2 : static_cast<std::size_t>(row);
    const std::size_t wc = col < 0 ? w / 2 : static_cast<std::size_t>(col);
    Tensor resp = response_map(fm, hc, wc);
    save_ppm(o.out, render_map_ppm(resp));
    std::cout << "wrote response map for val sample " << sample << " anchor (" << hc << "," << wc
              << ") to " << o.out << "\n";
    return 0;
}

int cmd_render(const CommonOpts& o, std::size_t sample) {
    Checkpoint ck = read_checkpoint(o.checkpoint);
    Model model = model_from_checkpoint(ck);
    Dataset data = read_dataset(o.data);
    std::vector<Tensor> masks = read_sealed_masks(o.data, "val");
    if (sample >= data.val.size())
        throw ContractError("render: sample index " + std::to_string(sample) + " out of range");
    Tensor pred = predict_mask(score(embed(data.val[sample].image, model.backbone), model.clf));
    save_ppm(o.out + "_pred.ppm", render_mask_ppm(pred));
    save_ppm(o.out + "_gt.ppm", render_mask_ppm(masks[sample]));
    std::cout << "wrote " << o.out << "_pred.ppm and " << o.out << "_gt.ppm\n";
    return 0;
}

int cmd_ablate(const CommonOpts& o, const std::vector<std::size_t>& m_values,
               const std::vector<std::size_t>& k_values, const std::vector<std::string>& modes) {
    Config base = resolve_config(o, true);
    Dataset data = read_dataset(o.data);

    struct Cell {
        Config cfg;
        std::string label;
    };
    std::vector<Cell> cells;
    if (!modes.empty()) {
        for (const std::string& m : modes) {
            Cell cell{base, m};
            cell.cfg.mode = parse_mode(m);
            cells.push_back(std::move(cell));
        }
    } else {
        for (std::size_t m : m_values) {
            Cell cell{base, ""};
            cell.cfg.memory_capacity = m;
            cells.push_back(std::move(cell));
        }
        for (std::size_t k : k_values) {
            Cell cell{base, ""};
            cell.cfg.top_k = k;
            cells.push_back(std::move(cell));
        }
    }
    if (cells.empty()) throw ConfigError("ablate: nothing to sweep");

    std::ofstream csv(o.report, std::ios::trunc);
    if (!csv) throw IoError("cannot open report file " + o.report);
    csv << "mode,memory_capacity,top_k,miou_all,miou_base,miou_novel\n";
    csv.flush();
    std::vector<Tensor> masks = read_sealed_masks(o.data, "val");
    for (const Cell& cell : cells) {
        cell.cfg.validate();
        TrainResult res = train(cell.cfg, data);
        MiouReport rep = evaluate_miou(res.model, data.val, masks, cell.cfg.base_count(),
                                       cell.cfg.ignore_id);
        csv << mode_name(cell.cfg.mode) << ',' << cell.cfg.memory_capacity << ','
            << cell.cfg.top_k << ',' << fmt(rep.mean_all) << ',' << fmt(rep.mean_base) << ','
            << fmt(rep.mean_novel) << "\n";
        csv.flush();  // keep a partial table if a later cell aborts
        std::cout << "ablate cell mode=" << mode_name(cell.cfg.mode)
                  << " M=" << cell.cfg.memory_capacity << " K=" << cell.cfg.top_k << " novel "
                  << fmt(rep.mean_novel) << "\n";
    }
    return 0;
}

// LARVSEG_THREADS caps worker threads. All pipelines here run single-threaded
// (the cap is honored trivially), but the value is still validated so scripts
// fail loudly on typos.
void check_thread_env() {
    const char* env = std::getenv("LARVSEG_THREADS");
    if (env == nullptr) return;
    std::istringstream is(env);
    long long n = 0;
    if (!(is >> n) || !is.eof() || n < 1)
        throw ConfigError("LARVSEG_THREADS must be a positive integer, got '" + std::string(env) +
                          "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic vocabulary-extension segmentation workbench"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, resp_o, render_o, ablate_o;
    std::size_t resp_sample = 0, render_sample = 0;
    std::int64_t resp_row = -1, resp_col = -1;
    std::vector<std::size_t> ablate_m, ablate_k;
    std::vector<std::string> ablate_modes;

    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    add_config_flags(gen, gen_o);
    gen->add_option("--out", gen_o.out, "output dataset directory")->required();

    CLI::App* tr = app.add_subcommand("train", "train a model on a generated dataset");
    add_config_flags(tr, train_o);
    tr->add_option("--data", train_o.data, "dataset directory")->required();
    tr->add_option("--out", train_o.out, "output directory for checkpoints and metrics")
        ->required();
    tr->add_option("--mode", train_o.mode,
                   "training mode: supervised|baseline|larvseg|single-image-ca");
    tr->add_option("--checkpoint", train_o.checkpoint, "resume from this checkpoint");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
    ev->add_option("--checkpoint", eval_o.checkpoint, "checkpoint file")->required();
    ev->add_option("--data", eval_o.data, "dataset directory")->required();
    ev->add_option("--report", eval_o.report, "write a key,value CSV report here");

    CLI::App* rm = app.add_subcommand("respmap", "render a response map for a val sample");
    rm->add_option("--checkpoint", resp_o.checkpoint, "checkpoint file")->required();
    rm->add_option("--data", resp_o.data, "dataset directory")->required();
    rm->add_option("--sample", resp_sample, "val sample index");
    rm->add_option("--row", resp_row, "anchor row (default: center)");
    rm->add_option("--col", resp_col, "anchor column (default: center)");
    rm->add_option("--out", resp_o.out, "output PPM path")->required();

    CLI::App* rd = app.add_subcommand("render", "render predicted and ground-truth masks");
    rd->add_option("--checkpoint", render_o.checkpoint, "checkpoint file")->required();
    rd->add_option("--data", render_o.data, "dataset directory")->required();
    rd->add_option("--sample", render_sample, "val sample index");
    rd->add_option("--out", render_o.out, "output path prefix")->required();

    CLI::App* ab = app.add_subcommand("ablate", "train and evaluate a sweep of configs");
    add_config_flags(ab, ablate_o);
    ab->add_option("--data", ablate_o.data, "dataset directory")->required();
    ab->add_option("--report", ablate_o.report, "output CSV table")->required();
    ab->add_option("--m-values", ablate_m, "memory capacities to sweep at the configured K")
        ->delimiter(',');
    ab->add_option("--k-values", ablate_k, "top-K values to sweep at the configured M")
        ->delimiter(',');
    ab->add_option("--modes", ablate_modes, "training modes to sweep instead of M/K")
        ->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        check_thread_env();
        if (gen->parsed()) return cmd_gen(gen_o);
        if (tr->parsed()) return cmd_train(train_o);
        if (ev->parsed()) return cmd_eval(eval_o);
        if (rm->parsed()) return cmd_respmap(resp_o, resp_sample, resp_row, resp_col);
        if (rd->parsed()) return cmd_render(render_o, render_sample);
        if (ab->parsed()) return cmd_ablate(ablate_o, ablate_m, ablate_k, ablate_modes);
    } catch (const ConfigError& e) {
        std::cerr << "larvseg: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "larvseg: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "larvseg: " << e.what() << "\n";
        return 4;
    } catch (const TrainingAbort& e) {
        std::cerr << "larvseg: " << e.what() << "\n";
        return 5;
    } catch (const Error& e) {  // contract, domain and dimension errors
        std::cerr << "larvseg: " << e.what() << "\n";
        return 6;
    } catch (const std::exception& e) {
        std::cerr << "larvseg: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
