#include "dsfwsi/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dsfwsi/config.hpp"
#include "dsfwsi/evaluator.hpp"
#include "dsfwsi/hooknet.hpp"
#include "dsfwsi/parallel.hpp"
#include "dsfwsi/pretrainer.hpp"

namespace dsfwsi {

namespace {

std::string one_line(std::string s) {
    for (auto& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

void write_resolved(const fs::path& dir, json cfg, const std::vector<std::string>& args) {
    fs::create_directories(dir);
    cfg["code_version"] = DSFWSI_VERSION;
    cfg["command_line"] = args;
    cfg["num_workers"] = env_workers();
    atomic_write_text(dir / "resolved_config.json", cfg.dump(2) + "\n");
}

ExperimentConfig load_experiment(const std::optional<std::string>& path) {
    if (!path) return ExperimentConfig{};
    return ExperimentConfig::from_json(load_json_file(*path));
}

void apply_ablations(PretrainConfig& cfg, const std::vector<std::string>& ablations) {
    for (const auto& a : ablations) {
        if (a == "ctfm")
            cfg.ctfm_enabled = false;
        else if (a == "dsl")
            cfg.dsl_enabled = false;
        else if (a == "mask")  // masking only: no permutation
            cfg.ctfm.shuffle = false;
        else if (a == "jigsaw")  // jigsaw only: no masking
            cfg.ctfm.mask = false;
        else
            throw ArgumentError("unknown ablation '" + a + "'");
    }
    if (!cfg.ctfm.shuffle && !cfg.ctfm.mask)
        throw ConfigError("--ablate mask and --ablate jigsaw are mutually exclusive");
}

fs::path manifest_dir_of(const fs::path& manifest) {
    auto dir = manifest.parent_path();
    return dir.empty() ? fs::path(".") : dir;
}

Metrics metrics_from_json(const json& j, const fs::path& source) {
    try {
        Metrics m;
        m.fold = j.value("fold", -1);
        m.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
        m.support = j.at("support").get<std::vector<std::int64_t>>();
        m.mean_f1 = j.at("mean_f1").get<double>();
        m.micro_f1 = j.value("micro_f1", 0.0);
        m.accuracy = j.at("accuracy").get<double>();
        m.pixels = j.value("pixels", std::int64_t{0});
        m.train_groups = j.value("train_groups", std::int64_t{0});
        m.val_groups = j.value("val_groups", std::int64_t{0});
        return m;
    } catch (const json::exception& e) {
        throw ParseError("metrics file '" + source.string() + "': " + e.what());
    }
}

json metrics_json(const Metrics& m) {
    return {{"fold", m.fold},         {"mean_f1", m.mean_f1},       {"micro_f1", m.micro_f1},
            {"accuracy", m.accuracy}, {"per_class_f1", m.per_class_f1}, {"support", m.support},
            {"pixels", m.pixels}};
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Dual-branch self-supervised pretraining and HookNet fine-tuning for whole-slide images", "dsfwsi"};
    app.require_subcommand(1);
    app.set_version_flag("--version", DSFWSI_VERSION);

    std::optional<std::string> config_path, out_dir;

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic slide set, tile it and write a manifest");
    std::string synth_config;
    std::string synth_out;
    synth->add_option("--config", synth_config, "Synthetic dataset JSON")->required();
    synth->add_option("--out", synth_out, "Dataset directory")->required();

    // tile
    auto* tile = app.add_subcommand("tile", "Tile a slide index into context groups");
    std::string tile_slides, tile_out;
    tile->add_option("--slides", tile_slides, "slides.csv")->required();
    tile->add_option("--out", tile_out, "Dataset directory")->required();
    tile->add_option("--config", config_path, "Experiment config JSON");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "Self-supervised dual-branch pretraining");
    std::string pt_manifest, pt_out;
    std::optional<std::uint64_t> pt_seed;
    std::vector<std::string> pt_ablate;
    std::optional<std::string> pt_resume;
    bool pt_all_groups = false, pt_no_aug = false;
    std::optional<int> pt_fold;
    pretrain->add_option("--manifest", pt_manifest, "manifest.csv")->required();
    pretrain->add_option("--out", pt_out, "Run directory")->required();
    pretrain->add_option("--config", config_path, "Experiment config JSON");
    pretrain->add_option("--seed", pt_seed, "Random seed (default 0)");
    pretrain->add_option("--ablate", pt_ablate, "Disable a component")
        ->check(CLI::IsMember({"ctfm", "dsl", "mask", "jigsaw"}));
    pretrain->add_option("--resume", pt_resume, "Checkpoint directory to resume from");
    pretrain->add_flag("--all-groups", pt_all_groups, "Pretrain on every group, not only the training folds");
    pretrain->add_option("--fold", pt_fold, "Held-out fold excluded from pretraining");
    pretrain->add_flag("--no-aug", pt_no_aug, "Identity augmentation (debug)");

    // finetune
    auto* finetune = app.add_subcommand("finetune", "Supervised HookNet fine-tuning");
    std::string ft_manifest, ft_out, ft_init;
    std::optional<double> ft_fraction;
    std::optional<int> ft_fold;
    std::optional<std::uint64_t> ft_seed;
    finetune->add_option("--manifest", ft_manifest, "manifest.csv")->required();
    finetune->add_option("--init", ft_init, "'random' or a pretraining checkpoint directory")->required();
    finetune->add_option("--fraction", ft_fraction, "Labelled fraction of the training split");
    finetune->add_option("--fold", ft_fold, "Validation fold");
    finetune->add_option("--out", ft_out, "Run directory")->required();
    finetune->add_option("--config", config_path, "Experiment config JSON");
    finetune->add_option("--seed", ft_seed, "Random seed (default 0)");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Score dumped predictions or a saved model");
    std::optional<std::string> ev_predictions, ev_model, ev_manifest;
    std::optional<int> ev_fold;
    evaluate->add_option("--predictions", ev_predictions, "Prediction directory with index.json");
    evaluate->add_option("--model", ev_model, "Saved fine-tuned model directory");
    evaluate->add_option("--manifest", ev_manifest, "manifest.csv (with --model)");
    evaluate->add_option("--config", config_path, "Experiment config JSON (with --model)");
    evaluate->add_option("--fold", ev_fold, "Validation fold (with --model)");
    evaluate->add_option("--out", out_dir, "Output directory");

    // report
    auto* report = app.add_subcommand("report", "Aggregate fine-tuning runs (mean and std)");
    std::vector<std::string> rp_runs;
    bool rp_population = false;
    report->add_option("--runs", rp_runs, "Run directories containing metrics.json")->required();
    report->add_option("--out", out_dir, "Output directory (default: current directory)");
    report->add_flag("--population", rp_population, "Population instead of sample standard deviation");

    std::vector<std::string> argv_store = args;
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    auto fail = [&](const std::string& kind, const std::string& message, int code) {
        err << json{{"error", kind}, {"message", one_line(message)}}.dump() << std::endl;
        return code;
    };

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << DSFWSI_VERSION << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return kExitOk;
        return fail("usage", e.what(), kExitUsage);
    }

    const int workers = env_workers();
    try {
        if (*synth) {
            const auto file = parse_synth_config(load_json_file(synth_config));
            write_resolved(synth_out, {{"synthetic", to_json(file.synthetic)}, {"tiling", to_json(file.tiling)}},
                           args);
            generate_synthetic_dataset(file.synthetic, synth_out);
            const auto groups = tile_dataset(fs::path(synth_out) / "slides.csv", file.tiling, synth_out);
            out << json{{"status", "ok"},
                        {"slides", file.synthetic.slides},
                        {"groups", groups.size()},
                        {"manifest", (fs::path(synth_out) / "manifest.csv").string()}}
                       .dump()
                << std::endl;
        } else if (*tile) {
            auto cfg = load_experiment(config_path);
            write_resolved(tile_out, cfg.to_json(), args);
            const auto groups = tile_dataset(tile_slides, cfg.tiling, tile_out);
            out << json{{"status", "ok"},
                        {"groups", groups.size()},
                        {"manifest", (fs::path(tile_out) / "manifest.csv").string()}}
                       .dump()
                << std::endl;
        } else if (*pretrain) {
            auto cfg = load_experiment(config_path);
            cfg.set_seed(pt_seed.value_or(cfg.seed));
            apply_ablations(cfg.pretrain, pt_ablate);
            if (pt_no_aug) cfg.pretrain.augmentation = AugmentationConfig::identity();
            if (pt_fold) cfg.finetune.fold = *pt_fold;
            cfg.pretrain.validate();
            cfg.finetune.validate();

            auto groups = read_manifest(pt_manifest);
            if (groups.empty()) throw ValidationError("manifest '" + pt_manifest + "' has no groups");
            if (cfg.m > 0 && groups.front().m() != cfg.m)
                throw ConfigError("ctfm.m is " + std::to_string(cfg.m) + " but the manifest has " +
                                  std::to_string(groups.front().m()) + " targets per group");
            std::vector<ContextGroup> used = groups;
            if (!pt_all_groups) {
                const auto folds = split_folds(groups, cfg.finetune.folds, cfg.finetune.split_seed);
                used = fold_partition(groups, folds, cfg.finetune.fold).first;
            }
            json resolved = cfg.to_json();
            resolved["ablate"] = pt_ablate;
            resolved["all_groups"] = pt_all_groups;
            resolved["pretrain_groups"] = used.size();
            resolved["pretrain_hash"] = cfg.pretrain.hash();
            write_resolved(pt_out, resolved, args);

            PretrainRunOptions ro;
            ro.out_dir = pt_out;
            ro.workers = workers;
            if (pt_resume) ro.resume_from = fs::path(*pt_resume);
            auto state = run_pretraining(used, manifest_dir_of(pt_manifest), cfg.pretrain, ro);
            const auto log = read_loss_log(fs::path(pt_out) / "loss_log.csv");
            out << json{{"status", "ok"},
                        {"epochs", state.epoch},
                        {"steps", state.step},
                        {"groups", used.size()},
                        {"final_loss", log.empty() ? json(nullptr) : json(log.back().total)},
                        {"checkpoint", (fs::path(pt_out) / "checkpoint").string()}}
                       .dump()
                << std::endl;
        } else if (*finetune) {
            auto cfg = load_experiment(config_path);
            cfg.set_seed(ft_seed.value_or(cfg.seed));
            if (ft_fraction) cfg.finetune.fraction = *ft_fraction;
            if (ft_fold) cfg.finetune.fold = *ft_fold;
            cfg.finetune.validate();

            auto groups = read_manifest(ft_manifest);
            FinetuneRunOptions ro;
            ro.out_dir = fs::path(ft_out);
            ro.workers = workers;
            if (ft_init != "random") {
                if (!fs::is_directory(ft_init))
                    throw ArgumentError("--init must be 'random' or a checkpoint directory, got '" + ft_init + "'");
                ro.init_checkpoint = fs::path(ft_init);
            }
            json resolved = cfg.to_json();
            resolved["init"] = ft_init;
            write_resolved(ft_out, resolved, args);
            auto result = run_finetune(groups, manifest_dir_of(ft_manifest), cfg.finetune, ro);
            out << json{{"status", "ok"},
                        {"fraction", cfg.finetune.fraction},
                        {"fold", cfg.finetune.fold},
                        {"train_groups", result.train_groups},
                        {"val_groups", result.val_groups},
                        {"best_epoch", result.best_epoch},
                        {"mean_f1", result.best.mean_f1},
                        {"accuracy", result.best.accuracy},
                        {"metrics", (fs::path(ft_out) / "metrics.json").string()}}
                       .dump()
                << std::endl;
        } else if (*evaluate) {
            if (static_cast<bool>(ev_predictions) == static_cast<bool>(ev_model))
                return fail("usage", "evaluate needs exactly one of --predictions or --model", kExitUsage);
            Metrics metrics;
            fs::path dest;
            json resolved;
            if (ev_predictions) {
                const fs::path dir = *ev_predictions;
                const auto index = load_json_file(dir / "index.json");
                const int classes = index.at("classes").get<int>();
                const int ignore = index.value("ignore_index", 255);
                ConfusionCounts counts(classes);
                for (const auto& p : index.at("patches")) {
                    const auto pred = read_label(dir / p.at("prediction").get<std::string>());
                    const auto lab = read_label(p.at("label").get<std::string>());
                    if (pred.size() != lab.size())
                        throw PreconditionError("prediction and label sizes differ for " +
                                                p.at("patch_id").get<std::string>());
                    counts += confusion_counts(std::span<const std::uint8_t>(pred.data, pred.total()),
                                               std::span<const std::uint8_t>(lab.data, lab.total()), classes,
                                               ignore);
                }
                metrics = make_metrics(counts);
                dest = out_dir ? fs::path(*out_dir) : dir;
                resolved = {{"predictions", dir.string()}, {"classes", classes}, {"ignore_index", ignore}};
            } else {
                if (!ev_manifest) return fail("usage", "--model requires --manifest", kExitUsage);
                auto cfg = load_experiment(config_path);
                if (ev_fold) cfg.finetune.fold = *ev_fold;
                cfg.finetune.validate();
                auto model = load_hooknet(*ev_model);
                cfg.finetune.classes = model->options().classes;
                auto groups = read_manifest(*ev_manifest);
                const auto folds = split_folds(groups, cfg.finetune.folds, cfg.finetune.split_seed);
                const auto val = fold_partition(groups, folds, cfg.finetune.fold).second;
                const auto data = load_seg_data(val, manifest_dir_of(*ev_manifest), cfg.finetune, workers);
                metrics = make_metrics(evaluate_model(model, data, cfg.finetune), cfg.finetune.fold);
                dest = out_dir ? fs::path(*out_dir) : fs::path(*ev_model).parent_path();
                resolved = cfg.to_json();
                resolved["model"] = *ev_model;
            }
            write_resolved(dest, resolved, args);
            atomic_write_text(dest / "evaluation.json", metrics_json(metrics).dump(2) + "\n");
            auto line = metrics_json(metrics);
            line["status"] = "ok";
            out << line.dump() << std::endl;
        } else if (*report) {
            std::vector<Metrics> runs;
            for (const auto& r : rp_runs) runs.push_back(metrics_from_json(load_json_file(fs::path(r) / "metrics.json"), r));
            for (std::size_t i = 0; i < runs.size(); ++i)
                if (runs[i].fold < 0) runs[i].fold = static_cast<int>(i);
            const auto summary = aggregate_cv(runs, rp_population);
            const fs::path dest = out_dir ? fs::path(*out_dir) : fs::path(".");
            write_resolved(dest, {{"runs", rp_runs}, {"population_std", rp_population}}, args);
            atomic_write_text(dest / "report.csv", report_csv(runs));
            atomic_write_text(dest / "report.json", report_json(summary));
            out << json{{"status", "ok"},
                        {"runs", runs.size()},
                        {"mean_f1", summary.f1.mean},
                        {"std_f1", summary.f1.std},
                        {"report", (dest / "report.json").string()}}
                       .dump()
                << std::endl;
        }
    } catch (const ConfigError& e) {
        return fail(e.kind(), e.what(), kExitConfig);
    } catch (const ArgumentError& e) {
        return fail("usage", e.what(), kExitUsage);
    } catch (const Error& e) {
        return fail(e.kind(), e.what(), kExitFailure);
    } catch (const json::exception& e) {
        return fail("parse", e.what(), kExitFailure);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), kExitFailure);
    }
    return kExitOk;
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace dsfwsi
