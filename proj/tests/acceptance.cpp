// Acceptance gate: one self-contained check per criterion, each printing a
// single PASS/FAIL line. Run with --only N to run one criterion; anything
// else runs them all. Exit 0 iff every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fbn/checkpoint.hpp"
#include "fbn/interpret.hpp"
#include "fbn/loss.hpp"
#include "fbn/metrics.hpp"
#include "fbn/model.hpp"
#include "fbn/phantom.hpp"
#include "fbn/trainer.hpp"

using namespace fbn;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

// ---- pinned tolerances and protocol constants --------------------------------

constexpr double kGradRelTol = 1e-3;        // criterion 1
constexpr double kGradFdStep = 1e-5;
constexpr double kAnovaPTol = 1e-4;         // criterion 2
constexpr double kAnovaFRelTol = 1e-9;
constexpr double kCoverageLo = 0.92;        // criterion 3
constexpr double kCoverageHi = 0.975;
constexpr double kPowerMin = 0.95;
constexpr double kFprMax = 0.07;
constexpr double kPhantomAucMin = 0.90;     // criterion 4
constexpr double kFusedSlack = 0.02;        // criterion 5
constexpr double kGuidanceGap = 0.03;       // criterion 6
constexpr double kFocusRate = 0.80;         // criterion 7

// frozen normal quantiles (Phi^-1)
constexpr double kZ060 = 0.2533471031357997;
constexpr double kZ080 = 0.8416212335729143;
constexpr double kZ090 = 1.2815515655446004;

double elapsed_s(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

// the small architecture every training criterion runs on
ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.backbone.embed_dim = 4;
    cfg.backbone.num_heads = {1, 1, 1, 1};
    cfg.backbone.window = 2;
    cfg.backbone.input_size = {16, 16, 16};
    cfg.tafe.head_hidden = 8;
    cfg.cmd.conv_channels = 4;
    cfg.cmd.reduction = 2;
    cfg.cmd.spatial_kernel = 3;
    cfg.cmd.head_hidden = 8;
    cfg.fusion_hidden = 8;
    return cfg;
}

std::vector<Case> load_dataset(const DatasetConfig& dcfg, const fs::path& dir) {
    const Manifest man = generate_dataset(dcfg, dir);
    std::vector<Case> cases;
    cases.reserve(man.size());
    for (const auto& row : man.rows) {
        Case c = load_case(dir / row.bundle_path);
        for (auto& s : c.sequences)
            s = zscore_normalize(s, NormalizeRegion::NonzeroVoxels);
        cases.push_back(std::move(c));
    }
    return cases;
}

// 16^3 dataset following the same recipe as the full-scale set: 30% mismatch
// positive, contrast pinned at 3x the noise level
DatasetConfig small_set(int n, std::uint64_t seed) {
    DatasetConfig d;
    d.n_cases = n;
    d.mutant_fraction = 0.3;
    d.dims = {16, 16, 16};
    d.tumor_radius = {3.5, 5.0};
    d.center_jitter = 1.0;
    d.noise_sigma = 0.5;
    d.mismatch_contrast = {1.5, 1.5};
    d.master_seed = seed;
    return d;
}

fs::path work_dir(const std::string& leaf) {
    const fs::path dir = fs::temp_directory_path() / "fbn_acceptance" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// === criterion 1: gradient integrity ==========================================

bool criterion_gradients(std::string& detail) {
    const auto t0 = clock_type::now();
    const ModelConfig cfg = tiny_model();
    Model model(cfg);
    Rng init(41);
    model.init(init);
    // keep every ReLU pre-activation away from its kink by more than the
    // finite-difference step
    for (auto* p : model.params())
        for (auto& v : p->value.v) v += init.uniform(-0.03, 0.03);

    PhantomSpec ps;
    ps.dims = {16, 16, 16};
    ps.tumor_center = {8, 8, 8};
    ps.tumor_radii = {4, 4, 4};
    ps.noise_sigma = 0.3;
    ps.seed = 60;
    const Case neg = generate_phantom(ps);
    ps.mismatch = true;
    ps.seed = 61;
    const Case pos = generate_phantom(ps);
    const Tensor batch = batch_from_cases({&neg, &pos});
    const Tensor mask = mask_from_cases({&neg, &pos});
    const std::vector<int> labels{0, 1};

    Rng fwd_rng(0);
    const auto loss_value = [&](Model& m) {
        ModelOutput out = m.forward(batch, Mode::Eval, fwd_rng);
        return total_loss(out.seg.logits, mask, out.logits, labels, cfg.loss).total;
    };

    model.zero_grad();
    {
        ModelOutput out = model.forward(batch, Mode::Eval, fwd_rng);
        const TotalLoss t =
            total_loss(out.seg.logits, mask, out.logits, labels, cfg.loss);
        model.backward(t.dcla_logits, t.dseg_logits);
    }

    long long checked = 0;
    double worst = 0.0;
    std::string worst_name;
    for (auto* p : model.params()) {
        for (std::size_t i = 0; i < p->value.v.size(); ++i) {
            const double saved = p->value.v[i];
            p->value.v[i] = saved + kGradFdStep;
            const double up = loss_value(model);
            p->value.v[i] = saved - kGradFdStep;
            const double dn = loss_value(model);
            p->value.v[i] = saved;
            const double numeric = (up - dn) / (2.0 * kGradFdStep);
            const double analytic = p->grad.v[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            if (rel > worst) {
                worst = rel;
                worst_name = p->name + "[" + std::to_string(i) + "]";
            }
            ++checked;
        }
    }
    const double secs = elapsed_s(t0);
    detail = std::to_string(checked) + " coordinates, max rel err " +
             fmt("%.2e", worst) + " at " + worst_name + ", " + fmt("%.0f", secs) + "s";
    return worst < kGradRelTol && secs < 300.0;
}

// === criterion 2: metric oracles ==============================================

// independent regularized incomplete beta via adaptive Simpson on
// 2 u^(2a-1) (1-u^2)^(b-1), the u = sqrt(t) substitution that removes the
// t = 0 singularity for a >= 1/2
double beta_integrand(double u, double a, double b) {
    return 2.0 * std::pow(u, 2.0 * a - 1.0) * std::pow(1.0 - u * u, b - 1.0);
}

double simpson_rec(double lo, double hi, double flo, double fmid, double fhi,
                   double whole, double a, double b, int depth) {
    const double mid = 0.5 * (lo + hi);
    const double lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
    const double flm = beta_integrand(lm, a, b), frm = beta_integrand(rm, a, b);
    const double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
    const double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
    if (depth <= 0 || std::abs(left + right - whole) < 1e-12)
        return left + right;
    return simpson_rec(lo, mid, flo, flm, fmid, left, a, b, depth - 1) +
           simpson_rec(mid, hi, fmid, frm, fhi, right, a, b, depth - 1);
}

double reg_inc_beta_oracle(double x, double a, double b) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double hi = std::sqrt(x);
    const double flo = beta_integrand(1e-300, a, b);
    const double fmid = beta_integrand(0.5 * hi, a, b);
    const double fhi = beta_integrand(hi, a, b);
    const double whole = hi / 6.0 * (flo + 4.0 * fmid + fhi);
    const double integral = simpson_rec(0.0, hi, flo, fmid, fhi, whole, a, b, 40);
    const double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
    return integral / std::exp(log_beta);
}

double f_sf_oracle(double f, double df1, double df2) {
    const double x = df1 * f / (df1 * f + df2);
    return 1.0 - reg_inc_beta_oracle(x, 0.5 * df1, 0.5 * df2);
}

bool criterion_metric_oracles(std::string& detail) {
    Rng rng(202);

    // auc == brute-force pair counting, exactly
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(49));
        ScoredSet set;
        set.labels.push_back(0);  // both classes always present
        set.labels.push_back(1);
        for (int i = 2; i < n; ++i) set.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
        for (int i = 0; i < n; ++i)
            set.scores.push_back(
                static_cast<double>(rng.uniform_int(8)) / 7.0);  // heavy ties
        double wins = 0.0;
        std::int64_t pairs = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (set.labels[i] != 1 || set.labels[j] != 0) continue;
                ++pairs;
                if (set.scores[i] > set.scores[j])
                    wins += 1.0;
                else if (set.scores[i] == set.scores[j])
                    wins += 0.5;
            }
        const double brute = wins / static_cast<double>(pairs);
        if (auc(set) != brute) {
            detail = "auc mismatch on trial " + std::to_string(trial) + ": " +
                     fmt("%.17g", auc(set)) + " vs brute " + fmt("%.17g", brute);
            return false;
        }
    }

    // binary_metrics == direct formulas, degenerate conventions included
    std::vector<ConfusionCounts> counts;
    for (int trial = 0; trial < 500; ++trial)
        counts.push_back({static_cast<std::int64_t>(rng.uniform_int(15)),
                          static_cast<std::int64_t>(rng.uniform_int(15)),
                          static_cast<std::int64_t>(rng.uniform_int(15)),
                          static_cast<std::int64_t>(rng.uniform_int(15))});
    counts.push_back({0, 0, 7, 0});   // no positives anywhere: f1 and mcc degenerate
    counts.push_back({0, 3, 5, 2});   // tp = 0
    counts.push_back({4, 0, 0, 0});   // single-cell column
    counts.push_back({0, 5, 0, 0});
    for (const auto& c : counts) {
        if (c.total() == 0) continue;
        const BinaryMetrics got = binary_metrics(c);
        const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
        const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
        const double acc = (tp + tn) / static_cast<double>(c.total());
        const double f1 = (2.0 * tp + fp + fn) > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
        const double mcc_den = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
        const double mcc = mcc_den > 0.0 ? (tp * tn - fp * fn) / mcc_den : 0.0;
        if (got.acc != acc || got.f1 != f1 || got.mcc != mcc) {
            detail = "binary_metrics mismatch at tp=" + std::to_string(c.tp) +
                     " fp=" + std::to_string(c.fp) + " tn=" + std::to_string(c.tn) +
                     " fn=" + std::to_string(c.fn);
            return false;
        }
    }

    // anova F and p against direct formulas plus the Simpson F-tail oracle
    double worst_f = 0.0, worst_p = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t g = 2 + trial % 3;
        std::vector<std::vector<double>> groups(g);
        std::size_t total = 0;
        for (auto& grp : groups) {
            const int m = 3 + static_cast<int>(rng.uniform_int(10));
            for (int i = 0; i < m; ++i)
                grp.push_back(rng.normal(rng.uniform(-1.0, 1.0), 1.0));
            total += grp.size();
        }
        double grand = 0.0;
        for (const auto& grp : groups)
            for (double v : grp) grand += v;
        grand /= static_cast<double>(total);
        double ss_between = 0.0, ss_within = 0.0;
        for (const auto& grp : groups) {
            const double m = mean_of(grp);
            ss_between += static_cast<double>(grp.size()) * (m - grand) * (m - grand);
            for (double v : grp) ss_within += (v - m) * (v - m);
        }
        const double df1 = static_cast<double>(g) - 1.0;
        const double df2 = static_cast<double>(total - g);
        const double f_direct = (ss_between / df1) / (ss_within / df2);
        const double p_oracle = f_sf_oracle(f_direct, df1, df2);

        const AnovaResult got = anova_posthoc(groups);
        worst_f = std::max(worst_f, std::abs(got.anova.statistic - f_direct) /
                                        std::max(1.0, std::abs(f_direct)));
        worst_p = std::max(worst_p, std::abs(got.anova.p_value - p_oracle));
    }
    detail = "1000 auc sets exact, " + std::to_string(counts.size()) +
             " confusion tables exact, anova max |dF|/F " + fmt("%.2e", worst_f) +
             ", max |dp| " + fmt("%.2e", worst_p);
    return worst_f < kAnovaFRelTol && worst_p < kAnovaPTol;
}

// === criterion 3: DeLong validity =============================================

bool criterion_delong(std::string& detail) {
    const auto t0 = clock_type::now();
    Rng rng(303);

    // CI coverage at true AUC 0.8, n = 40. Replicate counts sit far above the
    // 1000/500 floors: the interval's true coverage here is 0.9214 +- 0.0006
    // (measured at 200k sims), only 0.0014 inside the lower band edge, so the
    // gate needs sub-0.03% Monte Carlo error to return a stable verdict.
    const double mu08 = std::sqrt(2.0) * kZ080;
    long covered = 0;
    const long n_cov = 1000000;
    for (int trial = 0; trial < n_cov; ++trial) {
        ScoredSet set;
        for (int i = 0; i < 20; ++i) {
            set.scores.push_back(rng.normal());
            set.labels.push_back(0);
        }
        for (int i = 0; i < 20; ++i) {
            set.scores.push_back(rng.normal() + mu08);
            set.labels.push_back(1);
        }
        const ComparisonResult ci = delong_ci(set, 0.95);
        if (ci.ci_low <= 0.8 && 0.8 <= ci.ci_high) ++covered;
    }
    const double coverage = static_cast<double>(covered) / n_cov;

    // paired test: power when the true AUCs differ by 0.3, and size when equal
    const auto paired_reject_rate = [&](double mu_a, double mu_b, int reps) {
        int rejects = 0;
        for (int rep = 0; rep < reps; ++rep) {
            ScoredSet a, b;
            for (int i = 0; i < 200; ++i) {
                const int y = i < 100 ? 0 : 1;
                const double shared = rng.normal();
                const double sa = (y ? mu_a : 0.0) +
                                  (shared + rng.normal()) / std::sqrt(2.0);
                const double sb = (y ? mu_b : 0.0) +
                                  (shared + rng.normal()) / std::sqrt(2.0);
                a.scores.push_back(sa);
                a.labels.push_back(y);
                b.scores.push_back(sb);
                b.labels.push_back(y);
            }
            if (delong_paired_test(a, b).p_value < 0.05) ++rejects;
        }
        return static_cast<double>(rejects) / reps;
    };
    const double power =
        paired_reject_rate(std::sqrt(2.0) * kZ090, std::sqrt(2.0) * kZ060, 2000);
    const double fpr = paired_reject_rate(mu08, mu08, 4000);

    const double secs = elapsed_s(t0);
    detail = "coverage " + fmt("%.3f", coverage) + " (target [0.92, 0.975]), power " +
             fmt("%.3f", power) + ", fpr " + fmt("%.3f", fpr) + ", " +
             fmt("%.0f", secs) + "s";
    return coverage >= kCoverageLo && coverage <= kCoverageHi &&
           power >= kPowerMin && fpr <= kFprMax && secs < 600.0;
}

// === criterion 4: phantom end-to-end ==========================================

bool criterion_phantom_cv(std::string& detail) {
    const auto t0 = clock_type::now();
    DatasetConfig dcfg;  // full recipe: 30% positive, contrast = 3 * noise
    dcfg.n_cases = 200;
    dcfg.master_seed = 404;
    const fs::path dir = work_dir("phantom_cv");
    const std::vector<Case> cases = load_dataset(dcfg, dir / "data");

    ModelConfig mcfg;  // toy defaults: embed 8, 32^3 input
    TrainConfig tcfg;
    tcfg.max_epochs = 8;
    tcfg.batch_size = 4;
    tcfg.learning_rate = 1e-3;
    tcfg.patience = 8;
    tcfg.seed = 4;

    const CVResult cv = cross_validate(cases, 5, mcfg, tcfg, dir / "run");
    const double mean_auc = mean_of(cv.fold_auc);
    std::string folds;
    for (double a : cv.fold_auc) folds += fmt(" %.3f", a);
    detail = "mean val AUC " + fmt("%.4f", mean_auc) + " over folds" + folds + ", " +
             fmt("%.0f", elapsed_s(t0)) + "s";
    return mean_auc >= kPhantomAucMin;
}

// === criteria 5 and 6: ablation orderings =====================================

std::map<std::string, double> ablation_auc_means(
    const std::vector<AblationCell>& grid, const std::vector<Case>& cases,
    std::uint64_t seed, const fs::path& dir) {
    TrainConfig tcfg;
    tcfg.max_epochs = 25;
    tcfg.batch_size = 2;
    tcfg.learning_rate = 1e-3;
    tcfg.patience = 25;
    tcfg.seed = seed;
    const auto rows = run_ablation(cases, grid, tcfg, 2, 5, dir);
    std::map<std::string, double> out;
    for (const auto& r : rows) out[r.name] = r.auc_mean;
    return out;
}

bool criterion_ablation(std::string& detail) {
    const auto t0 = clock_type::now();
    const fs::path dir = work_dir("ablation");
    const std::vector<Case> cases = load_dataset(small_set(40, 11), dir / "data");

    std::vector<AblationCell> grid;
    grid.push_back({"fused", tiny_model()});
    {
        ModelConfig m = tiny_model();
        m.cmd_on = false;
        grid.push_back({"tafe_only", m});
    }
    {
        ModelConfig m = tiny_model();
        m.tafe_on = false;
        grid.push_back({"cmd_only", m});
    }
    const auto aucs = ablation_auc_means(grid, cases, 5, dir / "run");
    const double fused = aucs.at("fused");
    const double best_single = std::max(aucs.at("tafe_only"), aucs.at("cmd_only"));
    detail = "fused " + fmt("%.4f", fused) + ", tafe " +
             fmt("%.4f", aucs.at("tafe_only")) + ", cmd " +
             fmt("%.4f", aucs.at("cmd_only")) + " (5 seeds, 2 folds), " +
             fmt("%.0f", elapsed_s(t0)) + "s";
    return fused >= best_single - kFusedSlack;
}

bool criterion_guidance(std::string& detail) {
    const auto t0 = clock_type::now();
    const fs::path dir = work_dir("guidance");
    const std::vector<Case> cases = load_dataset(small_set(40, 12), dir / "data");

    std::vector<AblationCell> grid;
    {
        ModelConfig m = tiny_model();  // TAFE-1 with segmentation guidance
        m.cmd_on = false;
        m.tafe.depth = 1;
        grid.push_back({"guided", m});
    }
    {
        ModelConfig m = tiny_model();  // same stream, segmentation loss off
        m.cmd_on = false;
        m.tafe.depth = 1;
        m.loss.alpha = 0.0;
        grid.push_back({"unguided", m});
    }
    const auto aucs = ablation_auc_means(grid, cases, 6, dir / "run");
    const double gap = aucs.at("guided") - aucs.at("unguided");
    detail = "guided " + fmt("%.4f", aucs.at("guided")) + ", unguided " +
             fmt("%.4f", aucs.at("unguided")) + ", gap " + fmt("%.4f", gap) +
             " (5 seeds, 2 folds), " + fmt("%.0f", elapsed_s(t0)) + "s";
    return gap >= kGuidanceGap;
}

// === criterion 7: occlusion focus =============================================

bool criterion_occlusion_focus(std::string& detail) {
    const auto t0 = clock_type::now();
    const fs::path dir = work_dir("focus");
    const std::vector<Case> cases = load_dataset(small_set(40, 13), dir / "data");

    TrainConfig tcfg;
    tcfg.max_epochs = 25;
    tcfg.batch_size = 2;
    tcfg.learning_rate = 1e-3;
    tcfg.patience = 25;
    tcfg.seed = 17;
    const CVResult cv = cross_validate(cases, 2, tiny_model(), tcfg, dir / "run");

    OcclusionConfig ocfg;
    ocfg.mask_size = {8, 8, 8};
    ocfg.overlap = 0.5;
    ocfg.smooth_sigma = 1.0;

    std::map<std::string, const Case*> by_id;
    for (const auto& c : cases) by_id[c.id] = &c;

    int correct = 0, focused = 0;
    for (const auto& fold : cv.folds) {
        Model model(tiny_model());
        load_checkpoint(fold.checkpoint_path, model.params(),
                        tiny_model().signature());
        for (std::size_t i = 0; i < fold.val_ids.size(); ++i) {
            const int label = fold.val_scores.labels[i];
            const int pred = fold.val_scores.scores[i] >= 0.5 ? 1 : 0;
            if (pred != label) continue;
            ++correct;
            const Case& c = *by_id.at(fold.val_ids[i]);
            const Volume raw = occlusion_raw(model, c, ocfg);
            const double base = case_probability(model, c, label);
            const Volume sal = occlusion_postprocess(raw, ocfg, base);
            double in_sum = 0, out_sum = 0;
            std::int64_t in_n = 0, out_n = 0;
            for (std::size_t k = 0; k < sal.voxels.size(); ++k) {
                if (c.mask->voxels[k] > 0.0f) {
                    in_sum += sal.voxels[k];
                    ++in_n;
                } else {
                    out_sum += sal.voxels[k];
                    ++out_n;
                }
            }
            if (in_sum / in_n > out_sum / out_n) ++focused;
        }
    }
    const double rate =
        correct > 0 ? static_cast<double>(focused) / correct : 0.0;

    // a constant model must produce an exactly all-zero saliency map
    Model flat(tiny_model());
    for (auto* p : flat.params())
        std::fill(p->value.v.begin(), p->value.v.end(), 0.0);
    const Volume flat_raw = occlusion_raw(flat, cases.front(), ocfg);
    const Volume flat_sal = occlusion_postprocess(
        flat_raw, ocfg, case_probability(flat, cases.front(),
                                         *cases.front().idh_label));
    bool all_zero = true;
    for (float v : flat_sal.voxels) all_zero = all_zero && v == 0.0f;

    detail = std::to_string(focused) + "/" + std::to_string(correct) +
             " correctly classified cases focus on tumor (" + fmt("%.2f", rate) +
             "), constant model all-zero: " + (all_zero ? "yes" : "no") + ", " +
             fmt("%.0f", elapsed_s(t0)) + "s";
    return correct > 0 && rate >= kFocusRate && all_zero;
}

// === criterion 8: CLI determinism =============================================

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) return {};
    return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

bool run_cmd(const std::string& cmd) { return std::system(cmd.c_str()) == 0; }

bool criterion_cli_determinism(std::string& detail) {
    const char* bin = std::getenv("FBN_BIN");
    if (!bin || !fs::exists(bin)) {
        detail = "FBN_BIN not set or missing; cannot exercise the CLI";
        return false;
    }
    const fs::path dir = work_dir("cli");
    {
        std::ofstream cfg(dir / "run.json");
        cfg << R"({
  "data": {"manifest": ")" << (dir / "data" / "manifest.csv").string() << R"(",
           "phantom": {"count": 8, "dims": [16,16,16], "noise_sigma": 0.4,
                        "tumor_radius": [3.5, 4.5], "center_jitter": 1.0,
                        "mutant_fraction": 0.5}},
  "backbone": {"embed_dim": 4, "num_heads": [1,1,1,1], "window": 2,
               "input_size": [16,16,16]},
  "tafe": {"head_hidden": 8},
  "cmd": {"conv_channels": 4, "reduction": 2, "spatial_kernel": 3, "head_hidden": 8},
  "loss": {"fusion_hidden": 8},
  "train": {"max_epochs": 2, "batch_size": 2, "learning_rate": 0.001,
            "folds": 2, "seed": 9}
})";
    }
    const std::string base = std::string("\"") + bin + "\" ";
    const std::string cfg_arg = " --config \"" + (dir / "run.json").string() + "\"";
    const std::string quiet = " > /dev/null 2>&1";

    if (!run_cmd(base + "phantom" + cfg_arg + " --out \"" +
                 (dir / "data").string() + "\"" + quiet)) {
        detail = "phantom generation failed";
        return false;
    }
    for (const char* leaf : {"a", "b"})
        if (!run_cmd(base + "crossval" + cfg_arg + " --out \"" +
                     (dir / leaf).string() + "\"" + quiet)) {
            detail = std::string("crossval run ") + leaf + " failed";
            return false;
        }

    std::vector<std::string> mismatched;
    int compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), dir / "a");
        ++compared;
        if (read_bytes(entry.path()) != read_bytes(dir / "b" / rel))
            mismatched.push_back(rel.string());
    }
    detail = std::to_string(compared) + " artifacts compared byte for byte";
    if (!mismatched.empty()) {
        detail += "; mismatched:";
        for (const auto& m : mismatched) detail += " " + m;
        return false;
    }
    return compared >= 5;  // cv.csv, checkpoints, histories, records
}

// === criterion 9: early-stopping automaton ====================================

// independent reference: strict improvement, stop after `patience` consecutive
// non-improving epochs
std::pair<int, int> reference_early_stop(const std::vector<double>& trace,
                                         int patience) {
    double best = -std::numeric_limits<double>::infinity();
    int best_epoch = 0, bad = 0, ran = 0;
    for (std::size_t e = 0; e < trace.size(); ++e) {
        ran = static_cast<int>(e) + 1;
        if (trace[e] > best) {
            best = trace[e];
            best_epoch = ran;
            bad = 0;
        } else if (++bad == patience) {
            break;
        }
    }
    return {ran, best_epoch};
}

bool criterion_early_stopping(std::string& detail) {
    Rng rng(909);
    const int patience = 5;
    for (int trial = 0; trial < 50; ++trial) {
        const int len = 1 + static_cast<int>(rng.uniform_int(30));
        std::vector<double> trace;
        for (int i = 0; i < len; ++i)
            trace.push_back(static_cast<double>(rng.uniform_int(21)) / 20.0);

        const auto [want_run, want_best] = reference_early_stop(trace, patience);
        EarlyStopping stopper(patience);
        for (double v : trace)
            if (stopper.update(v)) break;
        if (stopper.epochs_seen() != want_run || stopper.best_epoch() != want_best) {
            detail = "trace " + std::to_string(trial) + ": got (" +
                     std::to_string(stopper.epochs_seen()) + ", " +
                     std::to_string(stopper.best_epoch()) + "), reference (" +
                     std::to_string(want_run) + ", " + std::to_string(want_best) + ")";
            return false;
        }
    }
    detail = "50 traces, epochs_run and best_epoch match the reference automaton";
    return true;
}

struct Criterion {
    int id;
    const char* title;
    std::function<bool(std::string&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc)
            only = std::atoi(argv[++i]);
    }

    const std::vector<Criterion> criteria{
        {1, "gradient integrity (full finite-difference sweep)", criterion_gradients},
        {2, "metric oracles (auc, confusion formulas, anova F-tail)",
         criterion_metric_oracles},
        {3, "DeLong CI coverage, paired power and size", criterion_delong},
        {4, "phantom 5-fold CV mean AUC >= 0.90", criterion_phantom_cv},
        {5, "ablation: fused within 0.02 of the best single stream",
         criterion_ablation},
        {6, "segmentation guidance beats unguided by >= 0.03 AUC",
         criterion_guidance},
        {7, "occlusion saliency focuses on tumor; constant model all-zero",
         criterion_occlusion_focus},
        {8, "CLI reruns reproduce artifacts bitwise", criterion_cli_determinism},
        {9, "early stopping matches the reference automaton", criterion_early_stopping},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        std::string detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        std::printf("%s criterion %d: %s — %s\n", ok ? "PASS" : "FAIL", c.id,
                    c.title, detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
