#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fbn {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::int64_t total() const { return tp + fp + tn + fn; }
};

struct BinaryMetrics {
    double acc = 0.0, f1 = 0.0, mcc = 0.0;
};

// Per-case positive-class probabilities with their binary labels.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;
};

ConfusionCounts confusion_counts(const ScoredSet& set, double threshold = 0.5);

// acc = (TP+TN)/total, f1 = 2TP/(2TP+FP+FN), mcc with the zero-denominator
// convention mcc = 0 (and f1 = 0 when 2TP+FP+FN = 0).
BinaryMetrics binary_metrics(const ConfusionCounts& counts);

// Mann-Whitney estimator: mean over (positive, negative) pairs of
// [s_p > s_n] + 0.5 [s_p == s_n]. Throws DegenerateLabels when one class is
// absent.
double auc(const ScoredSet& set);

struct ComparisonResult {
    double estimate = 0.0;   // the quantity the CI covers
    double statistic = 0.0;  // z, F or t depending on method
    double p_value = 1.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::string method;
};

// AUC with a DeLong variance CI, clipped to [0,1]. Needs >= 2 cases per class.
ComparisonResult delong_ci(const ScoredSet& set, double level = 0.95);

// Paired DeLong test for two score vectors over the same cases. estimate is
// AUC_A - AUC_B, statistic the z-score; identical scores give p = 1.
ComparisonResult delong_paired_test(const ScoredSet& a, const ScoredSet& b);

struct PairwiseComparison {
    std::size_t group_a = 0, group_b = 0;
    ComparisonResult result;
};

struct AnovaResult {
    ComparisonResult anova;  // estimate = statistic = F
    std::vector<PairwiseComparison> pairwise;
};

// One-way ANOVA plus Welch t post-hoc pairwise tests, Bonferroni-corrected.
// Throws InsufficientData below 2 groups or 2 samples per group.
AnovaResult anova_posthoc(const std::vector<std::vector<double>>& groups);

enum class StdMode { Sample, Population };

double mean_of(const std::vector<double>& v);
double std_of(const std::vector<double>& v, StdMode mode = StdMode::Sample);

// "*" p<0.05, "**" p<0.001, "***" p<0.0001 (else empty).
std::string significance_stars(double p);

struct ModelPredictions {
    std::string name;
    std::vector<ScoredSet> folds;
};

struct ReportRow {
    std::string model;
    double acc_mean = 0, acc_std = 0;
    double f1_mean = 0, f1_std = 0;
    double mcc_mean = 0, mcc_std = 0;
    double auc_mean = 0, auc_std = 0;
    std::optional<double> p_vs_reference;  // paired DeLong on pooled scores
    std::string significance;
};

struct MetricsReport {
    std::vector<ReportRow> rows;
    StdMode std_mode = StdMode::Sample;
    std::optional<std::size_t> reference;  // index into rows
};

MetricsReport report(const std::vector<ModelPredictions>& models,
                     std::optional<std::size_t> reference = std::nullopt,
                     StdMode mode = StdMode::Sample);

void write_report_csv(const MetricsReport& rep, const std::filesystem::path& path);
std::string format_report(const MetricsReport& rep);

}  // namespace fbn
