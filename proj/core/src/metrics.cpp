#include "fbn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "fbn/errors.hpp"
#include "fbn/special.hpp"

namespace fbn {

ConfusionCounts confusion_counts(const ScoredSet& set, double threshold) {
    if (set.scores.size() != set.labels.size())
        raise(ErrorCode::ShapeError, "scores and labels differ in length");
    ConfusionCounts c;
    for (std::size_t i = 0; i < set.scores.size(); ++i) {
        const bool pred = set.scores[i] >= threshold;
        const bool truth = set.labels[i] == 1;
        if (pred && truth)
            ++c.tp;
        else if (pred && !truth)
            ++c.fp;
        else if (!pred && truth)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

BinaryMetrics binary_metrics(const ConfusionCounts& c) {
    if (c.total() <= 0) raise(ErrorCode::InsufficientData, "empty confusion matrix");
    BinaryMetrics m;
    m.acc = double(c.tp + c.tn) / double(c.total());

    const double f1_den = double(2 * c.tp + c.fp + c.fn);
    m.f1 = f1_den > 0.0 ? 2.0 * double(c.tp) / f1_den : 0.0;

    const double d1 = double(c.tp + c.fp), d2 = double(c.tp + c.fn);
    const double d3 = double(c.tn + c.fp), d4 = double(c.tn + c.fn);
    if (d1 == 0.0 || d2 == 0.0 || d3 == 0.0 || d4 == 0.0) {
        m.mcc = 0.0;
    } else {
        m.mcc = (double(c.tp) * double(c.tn) - double(c.fp) * double(c.fn)) /
                std::sqrt(d1 * d2 * d3 * d4);
    }
    return m;
}

namespace {

void split_by_label(const ScoredSet& set, std::vector<double>& pos, std::vector<double>& neg) {
    if (set.scores.size() != set.labels.size())
        raise(ErrorCode::ShapeError, "scores and labels differ in length");
    for (std::size_t i = 0; i < set.scores.size(); ++i) {
        if (set.labels[i] == 1)
            pos.push_back(set.scores[i]);
        else if (set.labels[i] == 0)
            neg.push_back(set.scores[i]);
        else
            raise(ErrorCode::InvalidLabel, "label must be 0 or 1");
    }
    if (pos.empty() || neg.empty())
        raise(ErrorCode::DegenerateLabels, "AUC needs both classes present");
}

// Placement values: v10[i] over positives, v01[j] over negatives; their mean
// is the Mann-Whitney AUC.
void placements(const std::vector<double>& pos, const std::vector<double>& neg,
                std::vector<double>& v10, std::vector<double>& v01) {
    v10.assign(pos.size(), 0.0);
    v01.assign(neg.size(), 0.0);
    for (std::size_t i = 0; i < pos.size(); ++i)
        for (std::size_t j = 0; j < neg.size(); ++j) {
            const double psi = pos[i] > neg[j] ? 1.0 : (pos[i] == neg[j] ? 0.5 : 0.0);
            v10[i] += psi;
            v01[j] += psi;
        }
    for (auto& v : v10) v /= double(neg.size());
    for (auto& v : v01) v /= double(pos.size());
}

double sample_var(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / double(v.size() - 1);
}

}  // namespace

double auc(const ScoredSet& set) {
    std::vector<double> pos, neg;
    split_by_label(set, pos, neg);
    double sum = 0.0;
    for (double p : pos)
        for (double n : neg) sum += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    return sum / (double(pos.size()) * double(neg.size()));
}

ComparisonResult delong_ci(const ScoredSet& set, double level) {
    if (!(level > 0.0 && level < 1.0))
        raise(ErrorCode::ConfigError, "confidence level must be in (0,1)");
    std::vector<double> pos, neg;
    split_by_label(set, pos, neg);
    if (pos.size() < 2 || neg.size() < 2)
        raise(ErrorCode::DegenerateLabels, "DeLong CI needs >= 2 cases per class");

    std::vector<double> v10, v01;
    placements(pos, neg, v10, v01);
    const double a = mean_of(v10);
    const double var = sample_var(v10) / double(pos.size()) + sample_var(v01) / double(neg.size());

    const double z = normal_quantile(0.5 + level / 2.0);
    const double half = z * std::sqrt(std::max(var, 0.0));

    ComparisonResult r;
    r.estimate = a;
    r.statistic = a;
    r.p_value = 1.0;
    r.ci_low = std::max(0.0, a - half);
    r.ci_high = std::min(1.0, a + half);
    r.method = "delong-ci";
    return r;
}

ComparisonResult delong_paired_test(const ScoredSet& a, const ScoredSet& b) {
    if (a.labels != b.labels || a.scores.size() != b.scores.size())
        raise(ErrorCode::PairingError, "paired test needs identical cases and labels");

    std::vector<double> pos_a, neg_a, pos_b, neg_b;
    split_by_label(a, pos_a, neg_a);
    split_by_label(b, pos_b, neg_b);

    std::vector<double> v10_a, v01_a, v10_b, v01_b;
    placements(pos_a, neg_a, v10_a, v01_a);
    placements(pos_b, neg_b, v10_b, v01_b);

    std::vector<double> d10(v10_a.size()), d01(v01_a.size());
    for (std::size_t i = 0; i < d10.size(); ++i) d10[i] = v10_a[i] - v10_b[i];
    for (std::size_t j = 0; j < d01.size(); ++j) d01[j] = v01_a[j] - v01_b[j];

    const double diff = mean_of(v10_a) - mean_of(v10_b);
    const double var = sample_var(d10) / double(d10.size()) + sample_var(d01) / double(d01.size());

    ComparisonResult r;
    r.estimate = diff;
    r.method = "delong-paired";
    if (var <= 0.0) {
        // Identical placements: no sampling variability in the difference.
        r.statistic = diff == 0.0 ? 0.0
                                  : std::copysign(std::numeric_limits<double>::infinity(), diff);
        r.p_value = diff == 0.0 ? 1.0 : 0.0;
        r.ci_low = r.ci_high = diff;
        return r;
    }
    const double se = std::sqrt(var);
    r.statistic = diff / se;
    r.p_value = normal_two_sided_p(r.statistic);
    const double z = normal_quantile(0.975);
    r.ci_low = diff - z * se;
    r.ci_high = diff + z * se;
    return r;
}

AnovaResult anova_posthoc(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) raise(ErrorCode::InsufficientData, "ANOVA needs >= 2 groups");
    for (const auto& g : groups)
        if (g.size() < 2) raise(ErrorCode::InsufficientData, "each group needs >= 2 samples");

    const std::size_t k = groups.size();
    std::size_t n_total = 0;
    double grand_sum = 0.0;
    for (const auto& g : groups) {
        n_total += g.size();
        for (double x : g) grand_sum += x;
    }
    const double grand_mean = grand_sum / double(n_total);

    double ssb = 0.0, ssw = 0.0;
    for (const auto& g : groups) {
        const double m = mean_of(g);
        ssb += double(g.size()) * (m - grand_mean) * (m - grand_mean);
        for (double x : g) ssw += (x - m) * (x - m);
    }
    const double df_b = double(k - 1);
    const double df_w = double(n_total - k);

    AnovaResult out;
    out.anova.method = "one-way-anova";
    if (ssw <= 0.0) {
        out.anova.statistic = ssb <= 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
        out.anova.p_value = ssb <= 0.0 ? 1.0 : 0.0;
    } else {
        out.anova.statistic = (ssb / df_b) / (ssw / df_w);
        out.anova.p_value = f_survival(out.anova.statistic, df_b, df_w);
    }
    out.anova.estimate = out.anova.statistic;
    out.anova.ci_low = out.anova.ci_high = out.anova.estimate;

    // Welch t for every pair, Bonferroni-corrected.
    const double n_pairs = double(k * (k - 1) / 2);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            const auto& a = groups[i];
            const auto& b = groups[j];
            const double ma = mean_of(a), mb = mean_of(b);
            const double va = sample_var(a), vb = sample_var(b);
            const double sa = va / double(a.size()), sb = vb / double(b.size());

            PairwiseComparison pc;
            pc.group_a = i;
            pc.group_b = j;
            pc.result.method = "welch-t+bonferroni";
            pc.result.estimate = ma - mb;
            if (sa + sb <= 0.0) {
                pc.result.statistic = ma == mb ? 0.0
                                               : std::copysign(
                                                     std::numeric_limits<double>::infinity(),
                                                     ma - mb);
                pc.result.p_value = ma == mb ? 1.0 : 0.0;
                pc.result.ci_low = pc.result.ci_high = ma - mb;
            } else {
                const double se = std::sqrt(sa + sb);
                const double df = (sa + sb) * (sa + sb) /
                                  (sa * sa / double(a.size() - 1) + sb * sb / double(b.size() - 1));
                pc.result.statistic = (ma - mb) / se;
                pc.result.p_value =
                    std::min(1.0, student_t_two_sided_p(pc.result.statistic, df) * n_pairs);
                const double tq = student_t_quantile(0.975, df);
                pc.result.ci_low = (ma - mb) - tq * se;
                pc.result.ci_high = (ma - mb) + tq * se;
            }
            out.pairwise.push_back(std::move(pc));
        }
    }
    return out;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) raise(ErrorCode::InsufficientData, "mean of empty vector");
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

double std_of(const std::vector<double>& v, StdMode mode) {
    if (v.empty()) raise(ErrorCode::InsufficientData, "std of empty vector");
    if (v.size() == 1) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    const double den = mode == StdMode::Sample ? double(v.size() - 1) : double(v.size());
    return std::sqrt(s / den);
}

std::string significance_stars(double p) {
    if (p < 0.0001) return "***";
    if (p < 0.001) return "**";
    if (p < 0.05) return "*";
    return "";
}

namespace {

ScoredSet pool_folds(const std::vector<ScoredSet>& folds) {
    ScoredSet pooled;
    for (const auto& f : folds) {
        pooled.scores.insert(pooled.scores.end(), f.scores.begin(), f.scores.end());
        pooled.labels.insert(pooled.labels.end(), f.labels.begin(), f.labels.end());
    }
    return pooled;
}

}  // namespace

MetricsReport report(const std::vector<ModelPredictions>& models,
                     std::optional<std::size_t> reference, StdMode mode) {
    if (models.empty()) raise(ErrorCode::InsufficientData, "report needs >= 1 model");
    if (reference && *reference >= models.size())
        raise(ErrorCode::ConfigError, "reference model index out of range");

    MetricsReport rep;
    rep.std_mode = mode;
    rep.reference = reference;

    for (std::size_t mi = 0; mi < models.size(); ++mi) {
        const auto& model = models[mi];
        if (model.folds.empty())
            raise(ErrorCode::InsufficientData, "model " + model.name + " has no folds");

        std::vector<double> accs, f1s, mccs, aucs;
        for (const auto& fold : model.folds) {
            const BinaryMetrics bm = binary_metrics(confusion_counts(fold));
            accs.push_back(bm.acc);
            f1s.push_back(bm.f1);
            mccs.push_back(bm.mcc);
            aucs.push_back(auc(fold));
        }

        ReportRow row;
        row.model = model.name;
        row.acc_mean = mean_of(accs);
        row.acc_std = std_of(accs, mode);
        row.f1_mean = mean_of(f1s);
        row.f1_std = std_of(f1s, mode);
        row.mcc_mean = mean_of(mccs);
        row.mcc_std = std_of(mccs, mode);
        row.auc_mean = mean_of(aucs);
        row.auc_std = std_of(aucs, mode);

        if (reference && mi != *reference) {
            const ScoredSet pooled = pool_folds(model.folds);
            const ScoredSet ref_pooled = pool_folds(models[*reference].folds);
            const auto cmp = delong_paired_test(pooled, ref_pooled);
            row.p_vs_reference = cmp.p_value;
            row.significance = significance_stars(cmp.p_value);
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

void write_report_csv(const MetricsReport& rep, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(ErrorCode::WriteError, "cannot write report " + path.string());
    f << "model,acc_mean,acc_std,f1_mean,f1_std,mcc_mean,mcc_std,auc_mean,auc_std,"
         "p_vs_reference,significance\n";
    f.precision(6);
    f << std::fixed;
    for (const auto& r : rep.rows) {
        f << r.model << ',' << r.acc_mean << ',' << r.acc_std << ',' << r.f1_mean << ','
          << r.f1_std << ',' << r.mcc_mean << ',' << r.mcc_std << ',' << r.auc_mean << ','
          << r.auc_std << ',';
        if (r.p_vs_reference) f << *r.p_vs_reference;
        f << ',' << r.significance << '\n';
    }
    if (!f) raise(ErrorCode::WriteError, "short write on report " + path.string());
}

std::string format_report(const MetricsReport& rep) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    os << "model                 ACC             F1              MCC             AUC          p vs ref\n";
    for (const auto& r : rep.rows) {
        char line[256];
        std::snprintf(line, sizeof(line), "%-20s", r.model.c_str());
        os << line;
        for (auto [m, s] : {std::pair{r.acc_mean, r.acc_std}, {r.f1_mean, r.f1_std},
                            {r.mcc_mean, r.mcc_std}, {r.auc_mean, r.auc_std}}) {
            std::snprintf(line, sizeof(line), " %.4f +- %.4f", m, s);
            os << line;
        }
        if (r.p_vs_reference) {
            std::snprintf(line, sizeof(line), "  %.4g%s", *r.p_vs_reference,
                          r.significance.c_str());
            os << line;
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace fbn
