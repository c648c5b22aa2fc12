#include "estf/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>

#include "estf/ablate.hpp"
#include "estf/checkpoint.hpp"
#include "estf/config.hpp"
#include "estf/dataset.hpp"
#include "estf/eval.hpp"
#include "estf/gradcheck.hpp"
#include "estf/synth.hpp"
#include "estf/train.hpp"

namespace estf {

namespace {

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

struct GenArgs {
    std::size_t classes = 10, per_class = 50;
    double duration = 5.0, noise_rate = 100.0;
    std::uint64_t seed = 0;
    std::uint16_t width = 64, height = 64;
    std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
    DatasetSpec spec;
    spec.classes = a.classes;
    spec.per_class = a.per_class;
    spec.duration_s = a.duration;
    spec.noise_rate = a.noise_rate;
    spec.seed = a.seed;
    spec.width = a.width;
    spec.height = a.height;
    const Manifest m = generate_dataset(spec, a.out);
    const auto counts = split_counts(a.per_class);
    out << "generated " << m.entries.size() << " samples in " << a.classes << " classes (train/val/test per class "
        << counts.train << "/" << counts.val << "/" << counts.test << ")\n";
    out << "wrote " << (m.root / "manifest.csv").string() << "\n";
    out << "wrote " << (m.root / "classes.txt").string() << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string data, config, out;
    std::optional<std::uint64_t> seed;
};

RunConfig load_run_config(const std::string& path) { return path.empty() ? RunConfig{} : read_config_file(path); }

int cmd_train(const TrainArgs& a, std::ostream& out) {
    RunConfig cfg = load_run_config(a.config);
    if (a.seed) cfg.train.seed = *a.seed;
    const Manifest manifest = read_manifest(a.data);
    if (manifest.class_names.size() != cfg.model.num_classes) {
        throw ConfigError("model.num_classes = " + std::to_string(cfg.model.num_classes) + " but the dataset has " +
                          std::to_string(manifest.class_names.size()) + " classes");
    }
    TrainOptions opt;
    opt.out_dir = a.out;
    opt.on_epoch = [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << " lr=" << sci(r.lr) << " loss=" << fixed(r.train_loss)
            << " train_top1=" << fixed(r.train_top1) << " val_top1=" << fixed(r.val_top1) << "\n"
            << std::flush;
    };
    const auto result = train(cfg.model, cfg.train, manifest, opt);
    out << "best epoch " << result.best_epoch << "\n";
    for (const char* f : {"effective.cfg", "curve.csv", "best.ckpt", "final.ckpt"}) {
        out << "wrote " << (std::filesystem::path(a.out) / f).string() << "\n";
    }
    return kExitOk;
}

struct EvalArgs {
    std::string data, checkpoint, split = "test", out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto ck = load_checkpoint(a.checkpoint);
    const Manifest manifest = read_manifest(a.data);
    const auto report = evaluate(ck.params, ck.config, manifest, parse_split(a.split));
    out << "split " << report.split << ": samples=" << report.samples << " top1=" << fixed(report.top1)
        << " top5=" << fixed(report.top5) << " mean_accuracy=" << fixed(report.mean_accuracy) << "\n";
    const auto files = write_report(a.out, report);
    out << "wrote " << files.report.string() << "\n";
    out << "wrote " << files.confusion.string() << "\n";
    return kExitOk;
}

struct PredictArgs {
    std::string checkpoint, input, data;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
    const auto ck = load_checkpoint(a.checkpoint);
    std::vector<std::string> names;
    if (!a.data.empty()) names = read_manifest(a.data).class_names;
    const Tensor logits = estf_forward(prepare_input(read_event_file(a.input), ck.config), ck.params, ck.config);
    const std::size_t C = logits.size();
    const double mx = *std::max_element(logits.data().begin(), logits.data().end());
    double z = 0;
    for (double v : logits.data()) z += std::exp(v - mx);
    std::vector<std::size_t> order(C);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return logits[i] > logits[j]; });
    for (std::size_t r = 0; r < std::min<std::size_t>(5, C); ++r) {
        const std::size_t c = order[r];
        const std::string name = c < names.size() ? names[c] : "class" + std::to_string(c);
        out << r + 1 << " " << name << " " << fixed(std::exp(logits[c] - mx) / z, 6) << "\n";
    }
    return kExitOk;
}

struct GradcheckArgs {
    double tol = 1e-4, h = 1e-6;
    std::size_t seeds = 100, coords = 0;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    bool ok = true;
    for (const auto& r : run_primitive_checks(primitive_checks(), a.seeds, a.h, a.tol)) {
        out << (r.passed ? "PASS" : "FAIL") << " primitive " << r.name << " max_rel_error=" << sci(r.max_rel_error)
            << " seeds=" << r.seeds_run << "\n";
        ok = ok && r.passed;
    }
    for (bool double_residual : {true, false}) {
        auto cfg = toy_model_config();
        cfg.fusion_double_residual = double_residual;
        const std::string tag = double_residual ? "model" : "model(single-residual fusion)";
        for (const auto& g : model_grad_check(cfg, 1, a.h, a.tol, a.coords)) {
            out << (g.passed ? "PASS" : "FAIL") << " " << tag << " " << g.name
                << " max_rel_error=" << sci(g.max_rel_error) << " coords=" << g.checked << "\n";
            ok = ok && g.passed;
        }
    }
    out << (ok ? "all gradient checks passed" : "gradient check FAILED") << " at tol " << sci(a.tol) << "\n";
    return ok ? kExitOk : kExitFailure;
}

struct AblateArgs {
    std::string axis, data, config, out;
    std::vector<std::uint64_t> seeds = {0};
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
    const RunConfig base = load_run_config(a.config);
    const Manifest manifest = read_manifest(a.data);
    const auto rows = run_ablation(parse_ablation_axis(a.axis), base, manifest, a.seeds,
                                   [&](const std::string& line) { out << line << "\n" << std::flush; });
    std::filesystem::create_directories(a.out);
    const auto path = std::filesystem::path(a.out) / "ablation.csv";
    std::ofstream(path) << ablation_csv(rows);
    if (!std::filesystem::exists(path)) throw std::runtime_error("cannot write " + path.string());
    out << "wrote " << path.string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Event-stream spatial-temporal transformer", args.empty() ? "estf" : args[0]};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "generate a synthetic event dataset");
    g->add_option("--classes", gen.classes, "number of motion classes")
        ->check(CLI::Range(std::size_t{1}, motion_classes().size()));
    g->add_option("--per-class", gen.per_class, "samples per class")->check(CLI::PositiveNumber);
    g->add_option("--duration", gen.duration, "seconds per sample")->check(CLI::PositiveNumber);
    g->add_option("--noise-rate", gen.noise_rate, "background events per second")->check(CLI::NonNegativeNumber);
    g->add_option("--seed", gen.seed, "dataset seed");
    g->add_option("--width", gen.width, "sensor width")->check(CLI::Range(1, 65535));
    g->add_option("--height", gen.height, "sensor height")->check(CLI::Range(1, 65535));
    g->add_option("--out", gen.out, "output directory")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train a model");
    t->add_option("--data", tr.data, "dataset directory")->required();
    t->add_option("--config", tr.config, "run config file");
    t->add_option("--seed", tr.seed, "overrides train.seed");
    t->add_option("--out", tr.out, "output directory")->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    e->add_option("--data", ev.data, "dataset directory")->required();
    e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
    e->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    e->add_option("--out", ev.out, "report directory")->required();

    PredictArgs pr;
    auto* p = app.add_subcommand("predict", "top-5 classes for one event file");
    p->add_option("--checkpoint", pr.checkpoint, "checkpoint file")->required();
    p->add_option("--input", pr.input, "event file (.evs or .csv)")->required();
    p->add_option("--data", pr.data, "dataset directory for class names");

    GradcheckArgs gc;
    auto* c = app.add_subcommand("gradcheck", "finite-difference check of every backward");
    c->add_option("--tol", gc.tol, "max relative error")->check(CLI::PositiveNumber);
    c->add_option("--step", gc.h, "finite-difference step in [1e-6, 1e-4]");
    c->add_option("--seeds", gc.seeds, "random instances per primitive")->check(CLI::PositiveNumber);
    c->add_option("--coords", gc.coords, "coordinates sampled per model array (0 = all)");

    AblateArgs ab;
    auto* a = app.add_subcommand("ablate", "sweep one axis and tabulate validation accuracy");
    a->add_option("--axis", ab.axis, "frames, patches, depth or components")
        ->required()
        ->check(CLI::IsMember({"frames", "patches", "depth", "components"}));
    a->add_option("--data", ab.data, "dataset directory")->required();
    a->add_option("--config", ab.config, "base run config file");
    a->add_option("--seeds", ab.seeds, "comma-separated training seeds")->delimiter(',');
    a->add_option("--out", ab.out, "output directory")->required();

    std::vector<const char*> argv;
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        err << (args.empty() ? "estf" : args[0]) << ": usage error: " << ex.what() << "\n";
        err << "run with --help for usage\n";
        return kExitUsage;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (*g) return cmd_gen(gen, out);
        if (*t) return cmd_train(tr, out);
        if (*e) return cmd_eval(ev, out);
        if (*p) return cmd_predict(pr, out);
        if (*c) return cmd_gradcheck(gc, out);
        if (*a) return cmd_ablate(ab, out);
    } catch (const std::exception& ex) {
        err << name << ": " << ex.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace estf
