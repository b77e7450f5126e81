#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "fbn/checkpoint.hpp"
#include "fbn/config.hpp"
#include "fbn/interpret.hpp"
#include "fbn/metrics.hpp"
#include "fbn/trainer.hpp"

#ifndef FBN_VERSION
#define FBN_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::int64_t seed = -1;  // -1 = keep the config's seed
    int jobs = 0;            // 0 = keep the config's worker count
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config, "JSON run configuration");
    cmd->add_option("--set", a.sets, "override a config key, key=value")
        ->take_all();
    cmd->add_option("--out", a.out, "run directory (default: runs/<cmd>-<time>)");
    cmd->add_option("--seed", a.seed, "override train.seed");
    cmd->add_option("--jobs", a.jobs, "worker parallelism cap");
}

fbn::RunConfig resolve_config(const CommonArgs& a) {
    fbn::RunConfig cfg = fbn::parse_config(a.config, a.sets);
    if (a.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(a.seed);
    if (a.jobs > 0) cfg.train.jobs = a.jobs;
    return cfg;
}

fs::path make_run_dir(const CommonArgs& a, const std::string& name) {
    fs::path dir;
    if (!a.out.empty()) {
        dir = a.out;
    } else {
        const auto now = std::chrono::system_clock::now();
        const auto t = std::chrono::system_clock::to_time_t(now);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
        dir = fs::path("runs") / (name + "-" + stamp);
    }
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) fbn::raise(fbn::ErrorCode::WriteError, "cannot open " + p.string());
    f << text;
    if (!f) fbn::raise(fbn::ErrorCode::WriteError, "short write to " + p.string());
}

// resolved config, seed and toolchain record: enough to replay the run
void write_run_records(const fs::path& dir, const fbn::RunConfig& cfg) {
    write_text(dir / "resolved_config.json", fbn::config_to_json(cfg).dump(2) + "\n");
    write_text(dir / "seed.json", json{{"seed", cfg.train.seed}}.dump(2) + "\n");
    json versions{
        {"foundbionet", FBN_VERSION},
        {"compiler", __VERSION__},
        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                      std::to_string(EIGEN_MAJOR_VERSION) + "." +
                      std::to_string(EIGEN_MINOR_VERSION)},
        {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                     std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                     std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
        {"rng", "splitmix64 + box-muller"},
    };
    write_text(dir / "versions.json", versions.dump(2) + "\n");
}

// manifest rows -> normalized, cropped, labeled cases ready for the model
std::vector<fbn::Case> load_cases(const fbn::RunConfig& cfg) {
    if (cfg.manifest.empty())
        fbn::raise(fbn::ErrorCode::ConfigError,
                   "data.manifest is required for this command");
    const fs::path manifest_path = cfg.manifest;
    const fbn::Manifest manifest = fbn::load_manifest(manifest_path);
    const fs::path root = manifest_path.parent_path();

    std::vector<fbn::Case> cases;
    cases.reserve(manifest.size());
    for (const auto& row : manifest.rows) {
        fs::path bundle = row.bundle_path;
        if (bundle.is_relative()) bundle = root / bundle;
        fbn::Case c = fbn::load_case(bundle);
        c.id = row.case_id;
        if (row.idh_label) c.idh_label = row.idh_label;
        for (auto& seq : c.sequences) seq = fbn::zscore_normalize(seq, cfg.normalize);
        cases.push_back(fbn::crop_fixed(c, cfg.model.backbone.input_size));
    }
    return cases;
}

void write_scores_csv(const fs::path& p, const std::vector<std::string>& ids,
                      const fbn::ScoredSet& set) {
    std::ostringstream out;
    out.precision(17);
    out << "case_id,label,score\n";
    for (std::size_t i = 0; i < set.scores.size(); ++i)
        out << ids[i] << "," << set.labels[i] << "," << set.scores[i] << "\n";
    write_text(p, out.str());
}

fbn::ScoredSet read_scores_csv(const fs::path& p, std::vector<std::string>& ids) {
    std::ifstream f(p);
    if (!f) fbn::raise(fbn::ErrorCode::ConfigError, "cannot read scores " + p.string());
    std::string line;
    if (!std::getline(f, line) || line.rfind("case_id,label,score", 0) != 0)
        fbn::raise(fbn::ErrorCode::CorruptBundle,
                   "expected case_id,label,score header in " + p.string());
    fbn::ScoredSet set;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id, label, score;
        if (!std::getline(row, id, ',') || !std::getline(row, label, ',') ||
            !std::getline(row, score))
            fbn::raise(fbn::ErrorCode::CorruptBundle, "bad scores row: " + line);
        ids.push_back(id);
        set.labels.push_back(std::stoi(label));
        set.scores.push_back(std::stod(score));
    }
    return set;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

// --- subcommands -------------------------------------------------------------

int run_phantom(const CommonArgs& args, int n_flag) {
    fbn::RunConfig cfg = resolve_config(args);
    if (n_flag > 0) cfg.phantom.n_cases = n_flag;
    cfg.phantom.master_seed = cfg.train.seed;
    const fs::path dir = make_run_dir(args, "phantom");
    write_run_records(dir, cfg);
    const fbn::Manifest m = fbn::generate_dataset(cfg.phantom, dir);
    std::cout << "wrote " << m.size() << " bundles and manifest.csv under " << dir
              << "\n";
    return 0;
}

int run_train(const CommonArgs& args) {
    fbn::RunConfig cfg = resolve_config(args);
    cfg.model.validate();
    cfg.train.validate();
    const fs::path dir = make_run_dir(args, "train");
    write_run_records(dir, cfg);

    const std::vector<fbn::Case> cases = load_cases(cfg);
    std::vector<int> labels;
    for (const auto& c : cases) {
        if (!c.idh_label)
            fbn::raise(fbn::ErrorCode::MissingLabel, "unlabeled case " + c.id);
        labels.push_back(*c.idh_label);
    }
    const auto folds = fbn::stratified_folds(labels, cfg.folds, cfg.train.seed);
    std::vector<fbn::Case> train_set, val_set;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const bool in_val =
            std::find(folds[0].begin(), folds[0].end(), i) != folds[0].end();
        (in_val ? val_set : train_set).push_back(cases[i]);
    }

    const fbn::FoldResult r =
        fbn::train_fold(train_set, val_set, cfg.model, cfg.train, dir, 0);
    write_scores_csv(dir / "scores.csv", r.val_ids, r.val_scores);

    const auto bm =
        fbn::binary_metrics(fbn::confusion_counts(r.val_scores, cfg.threshold));
    std::cout << "best epoch " << r.best_epoch << " of " << r.history.size()
              << "; val acc " << fmt(bm.acc) << " auc " << fmt(fbn::auc(r.val_scores))
              << "\ncheckpoint: " << r.checkpoint_path << "\n";
    return 0;
}

int run_crossval(const CommonArgs& args) {
    fbn::RunConfig cfg = resolve_config(args);
    cfg.model.validate();
    cfg.train.validate();
    const fs::path dir = make_run_dir(args, "crossval");
    write_run_records(dir, cfg);

    const std::vector<fbn::Case> cases = load_cases(cfg);
    const fbn::CVResult cv =
        fbn::cross_validate(cases, cfg.folds, cfg.model, cfg.train, dir);
    fbn::write_cv_csv(cv, dir / "cv.csv");

    for (std::size_t f = 0; f < cv.folds.size(); ++f)
        std::cout << "fold " << f << ": acc " << fmt(cv.fold_acc[f]) << " f1 "
                  << fmt(cv.fold_f1[f]) << " mcc " << fmt(cv.fold_mcc[f]) << " auc "
                  << fmt(cv.fold_auc[f]) << "\n";
    std::cout << "mean: acc " << fmt(fbn::mean_of(cv.fold_acc)) << " +/- "
              << fmt(fbn::std_of(cv.fold_acc)) << ", auc "
              << fmt(fbn::mean_of(cv.fold_auc)) << " +/- "
              << fmt(fbn::std_of(cv.fold_auc)) << "\n";
    return 0;
}

std::vector<fbn::AblationCell> build_grid(const fbn::RunConfig& cfg,
                                          const std::string& grid_path) {
    std::vector<fbn::AblationCell> cells;
    const json base = fbn::config_to_json(cfg);
    if (grid_path.empty()) {
        // the canonical stream ablation
        for (const auto& [name, tafe_on, cmd_on] :
             {std::tuple{"tafe+cmd", true, true}, {"tafe_only", true, false},
              {"cmd_only", false, true}}) {
            fbn::ModelConfig m = cfg.model;
            m.tafe_on = tafe_on;
            m.cmd_on = cmd_on;
            cells.push_back({name, m});
        }
        return cells;
    }
    std::ifstream f(grid_path);
    if (!f)
        fbn::raise(fbn::ErrorCode::ConfigError, "cannot read grid " + grid_path);
    json doc = json::parse(f, nullptr, false);
    if (doc.is_discarded() || !doc.is_array())
        fbn::raise(fbn::ErrorCode::ConfigError,
                   "grid must be a JSON array of {name, set} objects");
    for (const auto& cell : doc) {
        if (!cell.is_object() || !cell.contains("name"))
            fbn::raise(fbn::ErrorCode::ConfigError, "grid cell needs a name");
        std::vector<std::string> ovs;
        if (cell.contains("set"))
            for (const auto& [k, v] : cell["set"].items())
                ovs.push_back(k + "=" + v.dump());
        const fbn::RunConfig cell_cfg = fbn::config_from_json(base, ovs);
        cells.push_back({cell["name"].get<std::string>(), cell_cfg.model});
    }
    return cells;
}

int run_ablate(const CommonArgs& args, const std::string& grid_path) {
    fbn::RunConfig cfg = resolve_config(args);
    cfg.train.validate();
    const fs::path dir = make_run_dir(args, "ablate");
    write_run_records(dir, cfg);

    const std::vector<fbn::Case> cases = load_cases(cfg);
    const auto grid = build_grid(cfg, grid_path);
    const auto table = fbn::run_ablation(cases, grid, cfg.train, cfg.folds,
                                         cfg.ablation_seeds, dir);
    fbn::write_ablation_csv(table, dir / "ablation.csv");
    for (const auto& row : table)
        std::cout << row.name << ": acc " << fmt(row.acc_mean) << " +/- "
                  << fmt(row.acc_std) << ", auc " << fmt(row.auc_mean) << " +/- "
                  << fmt(row.auc_std) << " (" << row.runs << " runs)\n";
    return 0;
}

int run_evaluate(const CommonArgs& args, const std::vector<std::string>& checkpoints,
                 const std::string& reference) {
    fbn::RunConfig cfg = resolve_config(args);
    cfg.model.validate();
    const fs::path dir = make_run_dir(args, "evaluate");
    write_run_records(dir, cfg);

    const std::vector<fbn::Case> cases = load_cases(cfg);
    std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
    const fbn::EnsemblePrediction pred =
        fbn::predict_ensemble(paths, cases, cfg.model);

    fbn::ScoredSet set;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        if (!cases[i].idh_label)
            fbn::raise(fbn::ErrorCode::MissingLabel, "unlabeled case " + cases[i].id);
        ids.push_back(cases[i].id);
        set.scores.push_back(pred.mean[i][1]);  // positive-class probability
        set.labels.push_back(*cases[i].idh_label);
    }
    write_scores_csv(dir / "scores.csv", ids, set);

    const auto bm = fbn::binary_metrics(fbn::confusion_counts(set, cfg.threshold));
    const auto ci = fbn::delong_ci(set, cfg.ci_level);
    json report{{"cases", set.scores.size()},
                {"checkpoints", checkpoints.size()},
                {"acc", bm.acc},
                {"f1", bm.f1},
                {"mcc", bm.mcc},
                {"auc", ci.estimate},
                {"auc_ci_low", ci.ci_low},
                {"auc_ci_high", ci.ci_high},
                {"ci_level", cfg.ci_level}};

    std::cout << "acc " << fmt(bm.acc) << " f1 " << fmt(bm.f1) << " mcc "
              << fmt(bm.mcc) << "\nauc " << fmt(ci.estimate) << " ["
              << fmt(ci.ci_low) << ", " << fmt(ci.ci_high) << "] at "
              << cfg.ci_level << "\n";

    if (!reference.empty()) {
        std::vector<std::string> ref_ids;
        const fbn::ScoredSet ref_raw = read_scores_csv(reference, ref_ids);
        std::map<std::string, std::pair<double, int>> by_id;
        for (std::size_t i = 0; i < ref_ids.size(); ++i)
            by_id[ref_ids[i]] = {ref_raw.scores[i], ref_raw.labels[i]};
        fbn::ScoredSet ref;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto it = by_id.find(ids[i]);
            if (it == by_id.end())
                fbn::raise(fbn::ErrorCode::PairingError,
                           "case " + ids[i] + " missing from reference scores");
            ref.scores.push_back(it->second.first);
            ref.labels.push_back(it->second.second);
        }
        const auto test = fbn::delong_paired_test(set, ref);
        report["auc_delta_vs_reference"] = test.estimate;
        report["p_vs_reference"] = test.p_value;
        std::cout << "vs reference: delta auc " << fmt(test.estimate) << ", p = "
                  << test.p_value << fbn::significance_stars(test.p_value) << "\n";
    }
    write_text(dir / "report.json", report.dump(2) + "\n");
    return 0;
}

int run_occlusion(const CommonArgs& args, const std::string& checkpoint,
                  const std::string& case_id) {
    fbn::RunConfig cfg = resolve_config(args);
    cfg.model.validate();
    const fs::path dir = make_run_dir(args, "occlusion");
    write_run_records(dir, cfg);

    const std::vector<fbn::Case> cases = load_cases(cfg);
    const fbn::Case* picked = nullptr;
    if (case_id.empty()) {
        picked = &cases.front();
    } else {
        for (const auto& c : cases)
            if (c.id == case_id) picked = &c;
        if (!picked)
            fbn::raise(fbn::ErrorCode::IndexError,
                       "case " + case_id + " not in the manifest");
    }

    fbn::Model model(cfg.model);
    fbn::load_checkpoint(checkpoint, model.params(), cfg.model.signature());

    const int target = cfg.occlusion.target
                           ? *cfg.occlusion.target
                           : (picked->idh_label ? *picked->idh_label : -1);
    const fbn::Volume raw =
        fbn::occlusion_raw(model, *picked, cfg.occlusion, cfg.train.jobs);
    const double base = fbn::case_probability(model, *picked, target);
    const fbn::Volume sal = fbn::occlusion_postprocess(raw, cfg.occlusion, base);

    const auto dims = picked->dims();
    const std::int64_t slice =
        cfg.overlay_slice >= 0 ? cfg.overlay_slice : dims[0] / 2;
    fbn::export_overlay(sal, *picked, cfg.overlay_sequence, slice,
                        cfg.overlay_alpha, dir / "overlay.png");

    std::cout << "case " << picked->id << ": baseline p(class " << target << ") = "
              << fmt(base) << "\n";
    if (picked->mask) {
        double in_sum = 0, out_sum = 0;
        std::int64_t in_n = 0, out_n = 0;
        for (std::size_t i = 0; i < sal.voxels.size(); ++i) {
            if (picked->mask->voxels[i] > 0.0f) {
                in_sum += sal.voxels[i];
                ++in_n;
            } else {
                out_sum += sal.voxels[i];
                ++out_n;
            }
        }
        if (in_n > 0 && out_n > 0)
            std::cout << "mean saliency inside tumor " << fmt(in_sum / in_n)
                      << ", outside " << fmt(out_sum / out_n) << "\n";
    }
    std::cout << "overlay: " << (dir / "overlay.png") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FoundBioNet: IDH classification from multi-sequence MRI"};
    app.require_subcommand(1);

    CommonArgs phantom_args;
    int phantom_n = 0;
    auto* phantom = app.add_subcommand("phantom", "generate a synthetic dataset");
    add_common(phantom, phantom_args);
    phantom->add_option("--n", phantom_n, "number of cases");

    CommonArgs train_args;
    auto* train = app.add_subcommand("train", "train one stratified fold");
    add_common(train, train_args);

    CommonArgs cv_args;
    auto* crossval = app.add_subcommand("crossval", "k-fold cross-validation");
    add_common(crossval, cv_args);

    CommonArgs ablate_args;
    std::string grid_path;
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
    add_common(ablate, ablate_args);
    ablate->add_option("--grid", grid_path,
                       "JSON array of {name, set:{key: value}} cells");

    CommonArgs eval_args;
    std::vector<std::string> checkpoints;
    std::string reference;
    auto* evaluate =
        app.add_subcommand("evaluate", "score checkpoints against a manifest");
    add_common(evaluate, eval_args);
    evaluate->add_option("--checkpoints", checkpoints, "checkpoint files (ensemble)")
        ->required()
        ->take_all();
    evaluate->add_option("--reference", reference,
                         "scores.csv to compare against (paired DeLong)");

    CommonArgs occ_args;
    std::string checkpoint, case_id;
    auto* occlusion =
        app.add_subcommand("occlusion", "occlusion saliency map and overlay");
    add_common(occlusion, occ_args);
    occlusion->add_option("--checkpoint", checkpoint, "trained model weights")
        ->required();
    occlusion->add_option("--case", case_id, "case id (default: first in manifest)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help() << "\n";
        return 2;
    }

    try {
        if (phantom->parsed()) return run_phantom(phantom_args, phantom_n);
        if (train->parsed()) return run_train(train_args);
        if (crossval->parsed()) return run_crossval(cv_args);
        if (ablate->parsed()) return run_ablate(ablate_args, grid_path);
        if (evaluate->parsed()) return run_evaluate(eval_args, checkpoints, reference);
        if (occlusion->parsed()) return run_occlusion(occ_args, checkpoint, case_id);
    } catch (const fbn::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return fbn::exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
