#include "fbn/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "fbn/checkpoint.hpp"

namespace fbn {

namespace {

void for_all_volumes(Case& c, const std::function<void(Volume&)>& fn, bool include_mask) {
    for (auto& s : c.sequences) fn(s);
    if (include_mask && c.mask) fn(*c.mask);
}

struct FoldMetrics {
    double acc, f1, mcc, auc;
};

FoldMetrics metrics_of(const ScoredSet& scores) {
    BinaryMetrics bm = binary_metrics(confusion_counts(scores));
    bool saw0 = false, saw1 = false;
    for (int l : scores.labels) (l ? saw1 : saw0) = true;
    // a single-class validation fold cannot rank pairs; score it as chance
    double a = (saw0 && saw1) ? auc(scores) : 0.5;
    return {bm.acc, bm.f1, bm.mcc, a};
}

}  // namespace

void flip_axis(Volume& v, int axis) {
    const auto d = v.dims;
    Volume out(d[0], d[1], d[2]);
    out.spacing = v.spacing;
    for (std::int64_t z = 0; z < d[0]; ++z)
        for (std::int64_t y = 0; y < d[1]; ++y)
            for (std::int64_t x = 0; x < d[2]; ++x) {
                std::int64_t src[3] = {z, y, x};
                src[axis] = d[axis] - 1 - src[axis];
                out.at(z, y, x) = v.at(src[0], src[1], src[2]);
            }
    v = std::move(out);
}

void rotate90(Volume& v, int a, int b) {
    const auto d = v.dims;
    Volume out(d[0], d[1], d[2]);
    out.spacing = v.spacing;
    const std::int64_t n = d[a];
    for (std::int64_t z = 0; z < d[0]; ++z)
        for (std::int64_t y = 0; y < d[1]; ++y)
            for (std::int64_t x = 0; x < d[2]; ++x) {
                std::int64_t idx[3] = {z, y, x};
                std::int64_t src[3] = {z, y, x};
                src[a] = idx[b];
                src[b] = n - 1 - idx[a];
                out.at(z, y, x) = v.at(src[0], src[1], src[2]);
            }
    v = std::move(out);
}

void TrainConfig::validate() const {
    if (max_epochs < 1) raise(ErrorCode::ConfigError, "max_epochs must be >= 1");
    if (batch_size < 1) raise(ErrorCode::ConfigError, "batch_size must be >= 1");
    if (learning_rate <= 0.0) raise(ErrorCode::ConfigError, "learning_rate must be positive");
    if (patience < 1) raise(ErrorCode::ConfigError, "patience must be >= 1");
    if (jobs < 1) raise(ErrorCode::ConfigError, "jobs must be >= 1");
    if (augment.scale_lo > augment.scale_hi || augment.scale_lo <= 0.0)
        raise(ErrorCode::ConfigError, "intensity scale range is invalid");
}

EarlyStopping::EarlyStopping(int patience)
    : patience_(patience), best_(-std::numeric_limits<double>::infinity()) {
    if (patience < 1) raise(ErrorCode::ConfigError, "patience must be >= 1");
}

bool EarlyStopping::update(double value) {
    ++epoch_;
    if (value > best_) {
        best_ = value;
        best_epoch_ = epoch_;
        bad_ = 0;
    } else {
        ++bad_;
    }
    return bad_ >= patience_;
}

Case augment_case(const Case& c, const AugmentConfig& cfg, Rng& rng) {
    Case out = c;
    if (cfg.flip)
        for (int axis = 0; axis < 3; ++axis)
            if (rng.bernoulli(0.5))
                for_all_volumes(out, [axis](Volume& v) { flip_axis(v, axis); }, true);
    if (cfg.rotate) {
        const auto d = out.dims();
        std::vector<std::pair<int, int>> planes;
        if (d[0] == d[1]) planes.emplace_back(0, 1);
        if (d[0] == d[2]) planes.emplace_back(0, 2);
        if (d[1] == d[2]) planes.emplace_back(1, 2);
        if (!planes.empty()) {
            auto [a, b] = planes[rng.uniform_int(planes.size())];
            const int quarter_turns = static_cast<int>(rng.uniform_int(4));
            for (int t = 0; t < quarter_turns; ++t)
                for_all_volumes(out, [a, b](Volume& v) { rotate90(v, a, b); }, true);
        }
    }
    if (cfg.intensity_scale) {
        const float f = static_cast<float>(rng.uniform(cfg.scale_lo, cfg.scale_hi));
        for_all_volumes(out, [f](Volume& v) {
            for (auto& x : v.voxels) x *= f;
        }, false);
    }
    return out;
}

ScoredSet score_cases(Model& model, const std::vector<Case>& cases) {
    ScoredSet set;
    Rng quiet(0);
    for (const auto& c : cases) {
        Tensor batch = batch_from_cases({&c});
        ModelOutput out = model.forward(batch, Mode::Eval, quiet);
        Tensor p = softmax_lastdim(out.logits);
        set.scores.push_back(p[1]);
        set.labels.push_back(c.idh_label.value_or(-1));
    }
    return set;
}

FoldResult train_fold(const std::vector<Case>& train_cases, const std::vector<Case>& val_cases,
                      const ModelConfig& mcfg, const TrainConfig& tcfg,
                      const std::filesystem::path& out_dir, int fold_index) {
    mcfg.validate();
    tcfg.validate();
    if (train_cases.empty() || val_cases.empty())
        raise(ErrorCode::EmptySplit, "fold " + std::to_string(fold_index) +
                                         " has an empty train or validation side");
    for (const auto& c : train_cases)
        if (!c.idh_label) raise(ErrorCode::MissingLabel, "case " + c.id + " is unlabeled");
    for (const auto& c : val_cases)
        if (!c.idh_label) raise(ErrorCode::MissingLabel, "case " + c.id + " is unlabeled");
    std::filesystem::create_directories(out_dir);

    Model model(mcfg);
    Rng init_rng(Rng::derive(tcfg.seed, 1));
    model.init(init_rng);
    AdamConfig acfg;
    acfg.lr = tcfg.learning_rate;
    Adam opt(model.params(), acfg);

    // minority oversampling to a 1:1 epoch composition
    std::vector<std::size_t> base_idx(train_cases.size());
    for (std::size_t i = 0; i < base_idx.size(); ++i) base_idx[i] = i;
    std::vector<std::size_t> minority;
    std::int64_t n1 = 0;
    for (const auto& c : train_cases) n1 += *c.idh_label;
    const std::int64_t n0 = static_cast<std::int64_t>(train_cases.size()) - n1;
    const int minority_label = n1 < n0 ? 1 : 0;
    for (std::size_t i = 0; i < train_cases.size(); ++i)
        if (*train_cases[i].idh_label == minority_label) minority.push_back(i);
    const std::int64_t deficit =
        tcfg.oversample_minority && !minority.empty() ? std::abs(n0 - n1) : 0;

    EarlyStopping stopper(tcfg.patience);
    FoldResult result;
    result.fold_index = fold_index;
    std::vector<Tensor> best_params;

    for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
        Rng erng(Rng::derive(tcfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));

        std::vector<std::size_t> order = base_idx;
        for (std::int64_t i = 0; i < deficit; ++i)
            order.push_back(minority[static_cast<std::size_t>(
                erng.uniform_int(minority.size()))]);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[erng.uniform_int(i)]);

        double sum_total = 0, sum_seg = 0, sum_cla = 0;
        std::int64_t seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(tcfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(tcfg.batch_size));
            std::vector<Case> batch_cases;
            batch_cases.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i)
                batch_cases.push_back(augment_case(train_cases[order[i]], tcfg.augment, erng));
            std::vector<const Case*> ptrs;
            for (const auto& c : batch_cases) ptrs.push_back(&c);

            Tensor batch = batch_from_cases(ptrs);
            Tensor mask = mask_from_cases(ptrs);
            std::vector<int> y = labels_from_cases(ptrs);

            ModelOutput out = model.forward(batch, Mode::Train, erng);
            TotalLoss t = total_loss(out.seg.logits, mask, out.logits, y, mcfg.loss);
            if (!std::isfinite(t.total))
                raise(ErrorCode::DivergenceError,
                      "non-finite loss at fold " + std::to_string(fold_index) + " epoch " +
                          std::to_string(epoch) + " batch " + std::to_string(start) +
                          " (seg " + std::to_string(t.seg) + ", cla " + std::to_string(t.cla) +
                          ")");
            opt.zero_grad();
            model.backward(t.dcla_logits, t.dseg_logits);
            opt.step();

            const auto n = static_cast<std::int64_t>(stop - start);
            sum_total += t.total * static_cast<double>(n);
            sum_seg += t.seg * static_cast<double>(n);
            sum_cla += t.cla * static_cast<double>(n);
            seen += n;
        }

        ScoredSet val = score_cases(model, val_cases);
        FoldMetrics fm = metrics_of(val);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.l_total = sum_total / static_cast<double>(seen);
        rec.l_seg = sum_seg / static_cast<double>(seen);
        rec.l_cla = sum_cla / static_cast<double>(seen);
        rec.val_acc = fm.acc;
        rec.val_auc = fm.auc;
        result.history.push_back(rec);

        const bool stop = stopper.update(fm.acc);
        if (stopper.best_epoch() == epoch) {
            best_params.clear();
            for (auto* p : model.params()) best_params.push_back(p->value);
        }
        if (stop) break;
    }

    result.best_epoch = stopper.best_epoch();
    {
        auto params = model.params();
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
    }

    result.checkpoint_path = out_dir / ("fold" + std::to_string(fold_index) + ".ckpt");
    save_checkpoint(result.checkpoint_path, model.params(), mcfg.signature());

    result.val_scores = score_cases(model, val_cases);
    for (const auto& c : val_cases) result.val_ids.push_back(c.id);

    std::ofstream hist(out_dir / ("history_fold" + std::to_string(fold_index) + ".jsonl"),
                       std::ios::trunc);
    if (!hist) raise(ErrorCode::WriteError, "cannot write fold history");
    for (const auto& r : result.history) {
        nlohmann::json line{{"epoch", r.epoch},       {"l_total", r.l_total},
                            {"l_seg", r.l_seg},       {"l_cla", r.l_cla},
                            {"val_acc", r.val_acc},   {"val_auc", r.val_auc}};
        hist << line.dump() << "\n";
    }
    return result;
}

std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels, int k,
                                                       std::uint64_t seed) {
    if (k < 2) raise(ErrorCode::ConfigError, "need at least 2 folds");
    std::vector<std::size_t> by_label[2];
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            raise(ErrorCode::InvalidLabel, "fold labels must be binary");
        by_label[labels[i]].push_back(i);
    }
    if (labels.size() < static_cast<std::size_t>(k))
        raise(ErrorCode::StratificationError,
              "cannot make " + std::to_string(k) + " folds from " +
                  std::to_string(labels.size()) + " cases");
    if (by_label[0].empty() || by_label[1].empty())
        raise(ErrorCode::StratificationError, "both classes must be present to stratify");

    std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
    for (int lab = 0; lab < 2; ++lab) {
        auto& group = by_label[lab];
        Rng rng(Rng::derive(seed, 40 + static_cast<std::uint64_t>(lab)));
        for (std::size_t i = group.size(); i > 1; --i)
            std::swap(group[i - 1], group[rng.uniform_int(i)]);
        for (std::size_t j = 0; j < group.size(); ++j)
            folds[j % static_cast<std::size_t>(k)].push_back(group[j]);
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

CVResult cross_validate(const std::vector<Case>& cases, int k, const ModelConfig& mcfg,
                        const TrainConfig& tcfg, const std::filesystem::path& out_dir) {
    std::vector<int> labels;
    labels.reserve(cases.size());
    for (const auto& c : cases) {
        if (!c.idh_label) raise(ErrorCode::MissingLabel, "case " + c.id + " is unlabeled");
        labels.push_back(*c.idh_label);
    }
    auto folds = stratified_folds(labels, k, tcfg.seed);

    CVResult cv;
    cv.folds.resize(static_cast<std::size_t>(k));

    auto run_one = [&](int f) {
        std::vector<Case> train, val;
        std::vector<bool> in_val(cases.size(), false);
        for (auto i : folds[static_cast<std::size_t>(f)]) in_val[i] = true;
        for (std::size_t i = 0; i < cases.size(); ++i)
            (in_val[i] ? val : train).push_back(cases[i]);
        TrainConfig fold_cfg = tcfg;
        fold_cfg.seed = Rng::derive(tcfg.seed, 100 + static_cast<std::uint64_t>(f));
        cv.folds[static_cast<std::size_t>(f)] =
            train_fold(train, val, mcfg, fold_cfg, out_dir, f);
    };

    const int jobs = std::min(tcfg.jobs, k);
    if (jobs <= 1) {
        for (int f = 0; f < k; ++f) run_one(f);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr failure;
        std::mutex mu;
        for (int w = 0; w < jobs; ++w)
            pool.emplace_back([&, w] {
                for (int f = w; f < k; f += jobs) {
                    try {
                        run_one(f);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(mu);
                        if (!failure) failure = std::current_exception();
                        return;
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    for (const auto& fr : cv.folds) {
        FoldMetrics fm = metrics_of(fr.val_scores);
        cv.fold_acc.push_back(fm.acc);
        cv.fold_f1.push_back(fm.f1);
        cv.fold_mcc.push_back(fm.mcc);
        cv.fold_auc.push_back(fm.auc);
    }
    return cv;
}

void write_cv_csv(const CVResult& cv, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(ErrorCode::WriteError, "cannot write " + path.string());
    f << "fold,best_epoch,epochs_run,acc,f1,mcc,auc\n";
    std::ostringstream row;
    row.precision(17);
    for (std::size_t i = 0; i < cv.folds.size(); ++i) {
        row.str("");
        row << cv.folds[i].fold_index << "," << cv.folds[i].best_epoch << ","
            << cv.folds[i].history.size() << "," << cv.fold_acc[i] << "," << cv.fold_f1[i]
            << "," << cv.fold_mcc[i] << "," << cv.fold_auc[i] << "\n";
        f << row.str();
    }
    row.str("");
    row << "mean,,," << mean_of(cv.fold_acc) << "," << mean_of(cv.fold_f1) << ","
        << mean_of(cv.fold_mcc) << "," << mean_of(cv.fold_auc) << "\n";
    row << "std,,," << std_of(cv.fold_acc) << "," << std_of(cv.fold_f1) << ","
        << std_of(cv.fold_mcc) << "," << std_of(cv.fold_auc) << "\n";
    f << row.str();
    if (!f) raise(ErrorCode::WriteError, "short write on " + path.string());
}

EnsemblePrediction predict_ensemble(const std::vector<std::filesystem::path>& checkpoints,
                                    const std::vector<Case>& cases, const ModelConfig& mcfg) {
    if (checkpoints.empty())
        raise(ErrorCode::ConfigError, "ensemble prediction needs at least one checkpoint");
    EnsemblePrediction pred;
    const int n_cls = mcfg.tafe.n_cls;
    pred.mean.assign(cases.size(), std::vector<double>(static_cast<std::size_t>(n_cls), 0.0));

    Rng quiet(0);
    for (const auto& path : checkpoints) {
        Model model(mcfg);
        Rng rng(0);
        model.init(rng);
        load_checkpoint(path, model.params(), mcfg.signature(), true);
        std::vector<std::vector<double>> member;
        member.reserve(cases.size());
        for (const auto& c : cases) {
            ModelOutput out = model.forward(batch_from_cases({&c}), Mode::Eval, quiet);
            Tensor p = softmax_lastdim(out.logits);
            member.emplace_back(p.v);
        }
        for (std::size_t i = 0; i < cases.size(); ++i)
            for (int j = 0; j < n_cls; ++j)
                pred.mean[i][static_cast<std::size_t>(j)] +=
                    member[i][static_cast<std::size_t>(j)] /
                    static_cast<double>(checkpoints.size());
        pred.member.push_back(std::move(member));
    }
    return pred;
}

std::vector<AblationRow> run_ablation(const std::vector<Case>& cases,
                                      const std::vector<AblationCell>& grid,
                                      const TrainConfig& tcfg, int k, int n_seeds,
                                      const std::filesystem::path& out_dir) {
    if (n_seeds < 1) raise(ErrorCode::ConfigError, "need at least one seed");
    std::vector<AblationRow> rows;
    for (const auto& cell : grid) {
        std::vector<double> acc, f1, mcc, aucs;
        for (int s = 0; s < n_seeds; ++s) {
            TrainConfig run_cfg = tcfg;
            run_cfg.seed = Rng::derive(tcfg.seed, 7000 + static_cast<std::uint64_t>(s));
            auto run_dir = out_dir / cell.name / ("seed" + std::to_string(s));
            std::filesystem::create_directories(run_dir);
            CVResult cv = cross_validate(cases, k, cell.model, run_cfg, run_dir);
            write_cv_csv(cv, run_dir / "cv.csv");
            acc.insert(acc.end(), cv.fold_acc.begin(), cv.fold_acc.end());
            f1.insert(f1.end(), cv.fold_f1.begin(), cv.fold_f1.end());
            mcc.insert(mcc.end(), cv.fold_mcc.begin(), cv.fold_mcc.end());
            aucs.insert(aucs.end(), cv.fold_auc.begin(), cv.fold_auc.end());
        }
        AblationRow row;
        row.name = cell.name;
        row.runs = static_cast<int>(acc.size());
        row.acc_mean = mean_of(acc);
        row.acc_std = std_of(acc);
        row.f1_mean = mean_of(f1);
        row.f1_std = std_of(f1);
        row.mcc_mean = mean_of(mcc);
        row.mcc_std = std_of(mcc);
        row.auc_mean = mean_of(aucs);
        row.auc_std = std_of(aucs);
        rows.push_back(row);
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(ErrorCode::WriteError, "cannot write " + path.string());
    f << "config,runs,acc_mean,acc_std,f1_mean,f1_std,mcc_mean,mcc_std,auc_mean,auc_std\n";
    std::ostringstream row;
    row.precision(17);
    for (const auto& r : rows) {
        row.str("");
        row << r.name << "," << r.runs << "," << r.acc_mean << "," << r.acc_std << ","
            << r.f1_mean << "," << r.f1_std << "," << r.mcc_mean << "," << r.mcc_std << ","
            << r.auc_mean << "," << r.auc_std << "\n";
        f << row.str();
    }
    if (!f) raise(ErrorCode::WriteError, "short write on " + path.string());
}

}  // namespace fbn
