#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fbn/metrics.hpp"
#include "fbn/model.hpp"
#include "fbn/optim.hpp"

namespace fbn {

struct AugmentConfig {
    bool flip = true;
    bool rotate = true;
    bool intensity_scale = true;
    double scale_lo = 0.9;
    double scale_hi = 1.1;
};

struct TrainConfig {
    int max_epochs = 100;
    int batch_size = 2;
    double learning_rate = 1e-4;
    int patience = 5;
    std::uint64_t seed = 0;
    AugmentConfig augment;
    bool oversample_minority = true;
    int jobs = 1;

    void validate() const;
};

// Strict-improvement early stopping: stops after `patience` consecutive
// epochs without a new best value. Epochs are 1-based.
class EarlyStopping {
  public:
    explicit EarlyStopping(int patience);

    bool update(double value);  // feed once per epoch; true = stop now
    int best_epoch() const { return best_epoch_; }
    double best_value() const { return best_; }
    int epochs_seen() const { return epoch_; }

  private:
    int patience_;
    int epoch_ = 0;
    int best_epoch_ = 0;
    int bad_ = 0;
    double best_;
};

// In-place geometric primitives behind the augmenter.
void flip_axis(Volume& v, int axis);
void rotate90(Volume& v, int a, int b);  // quarter turn in a square plane

// Axis flips (p = 0.5 each), one random right-angle rotation in a square
// plane, and a global intensity scale. Geometric transforms hit every
// sequence and the mask identically; the intensity scale spares the mask.
Case augment_case(const Case& c, const AugmentConfig& cfg, Rng& rng);

struct EpochRecord {
    int epoch = 0;
    double l_total = 0, l_seg = 0, l_cla = 0;
    double val_acc = 0, val_auc = 0;
};

struct FoldResult {
    int fold_index = 0;
    int best_epoch = 0;
    std::vector<EpochRecord> history;
    std::filesystem::path checkpoint_path;
    ScoredSet val_scores;  // best-epoch positive-class probabilities
    std::vector<std::string> val_ids;
};

// Positive-class probabilities for every case, in order, eval mode.
ScoredSet score_cases(Model& model, const std::vector<Case>& cases);

FoldResult train_fold(const std::vector<Case>& train_cases, const std::vector<Case>& val_cases,
                      const ModelConfig& mcfg, const TrainConfig& tcfg,
                      const std::filesystem::path& out_dir, int fold_index = 0);

// fold -> case indices of its validation set; round-robin per label group
// after a seeded shuffle.
std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels, int k,
                                                       std::uint64_t seed);

struct CVResult {
    std::vector<FoldResult> folds;
    std::vector<double> fold_acc, fold_f1, fold_mcc, fold_auc;
};

CVResult cross_validate(const std::vector<Case>& cases, int k, const ModelConfig& mcfg,
                        const TrainConfig& tcfg, const std::filesystem::path& out_dir);

void write_cv_csv(const CVResult& cv, const std::filesystem::path& path);

struct EnsemblePrediction {
    std::vector<std::vector<double>> mean;                 // [case][class]
    std::vector<std::vector<std::vector<double>>> member;  // [member][case][class]
};

EnsemblePrediction predict_ensemble(const std::vector<std::filesystem::path>& checkpoints,
                                    const std::vector<Case>& cases, const ModelConfig& mcfg);

struct AblationCell {
    std::string name;
    ModelConfig model;
};

struct AblationRow {
    std::string name;
    int runs = 0;  // folds x seeds entering the aggregate
    double acc_mean = 0, acc_std = 0;
    double f1_mean = 0, f1_std = 0;
    double mcc_mean = 0, mcc_std = 0;
    double auc_mean = 0, auc_std = 0;
};

// Cross-validates every grid cell over a shared seed ladder and aggregates
// per-fold validation metrics.
std::vector<AblationRow> run_ablation(const std::vector<Case>& cases,
                                      const std::vector<AblationCell>& grid,
                                      const TrainConfig& tcfg, int k, int n_seeds,
                                      const std::filesystem::path& out_dir);

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::filesystem::path& path);

}  // namespace fbn
