#pragma once

// Training protocol: one video per batch, seeded per-epoch shuffling, k-fold
// cross-validation, and precision@K averaged over the final epochs.

#include <algorithm>
#include <functional>
#include <mutex>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mrp/autodiff.hpp"
#include "mrp/config.hpp"
#include "mrp/metrics.hpp"
#include "mrp/models.hpp"
#include "mrp/optim.hpp"
#include "mrp/rankloss.hpp"
#include "mrp/resample.hpp"
#include "mrp/types.hpp"

namespace mrp {

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Seeded shuffle cut into `folds` contiguous test blocks; every record is
/// tested exactly once.
inline std::vector<Fold> make_folds(std::size_t n_records, std::size_t folds, std::uint64_t seed) {
    if (folds < 2) throw ArgumentError("need at least 2 folds");
    if (n_records < folds) {
        throw ArgumentError(std::to_string(n_records) + " records cannot fill " + std::to_string(folds) + " folds");
    }
    std::vector<std::size_t> order(n_records);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0xf01d));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Fold> out(folds);
    for (std::size_t f = 0; f < folds; ++f) {
        const std::size_t lo = f * n_records / folds, hi = (f + 1) * n_records / folds;
        for (std::size_t i = 0; i < n_records; ++i) {
            (i >= lo && i < hi ? out[f].test : out[f].train).push_back(order[i]);
        }
        std::sort(out[f].train.begin(), out[f].train.end());
        std::sort(out[f].test.begin(), out[f].test.end());
    }
    return out;
}

/// Model input and targets for one video under a config's data case.
struct PreparedVideo {
    std::string id;
    Matrix input;                  // rows = scored segments
    std::vector<double> target;    // one value per input row
    std::vector<double> eval_gt;   // ground truth at evaluation length
    bool degenerate = false;
};

inline PreparedVideo prepare_video(const DatasetRecord& rec, const TrainConfig& cfg) {
    PreparedVideo v;
    v.id = rec.id();
    v.degenerate = rec.degenerate_curve || rec.ground_truth.is_constant();
    if (cfg.data_case == DataCase::interpolate_gt) {
        v.input = rec.features.features;
        v.target = interpolate_curve(rec.ground_truth, rec.features.length()).scores;
        v.eval_gt = rec.ground_truth.scores();
    } else {
        if (rec.features.length() < cfg.target_len) {
            throw ValidationError("video '" + v.id + "' has " + std::to_string(rec.features.length()) +
                                  " segments, fewer than " + std::to_string(cfg.target_len) + " bins");
        }
        v.input = bin_features(rec.features, cfg.target_len).features;
        v.target = cfg.target_len == kCurveLength ? rec.ground_truth.scores()
                                                  : bin_curve(rec.ground_truth, cfg.target_len).scores;
        v.eval_gt = v.target;
    }
    if (static_cast<std::size_t>(v.input.cols()) != cfg.model.input_dim) {
        throw ShapeError("video '" + v.id + "' has feature width " + std::to_string(v.input.cols()) +
                         ", model expects " + std::to_string(cfg.model.input_dim));
    }
    return v;
}

/// Eval-mode scores brought to the evaluation length.
inline std::vector<double> predict_eval(ScoringModel& model, const PreparedVideo& v, std::size_t eval_len) {
    const auto scores = model.score(v.input);
    return scores.size() == eval_len ? scores : resize_scores(scores, eval_len);
}

/// Mean precision@K over the given videos, one entry per k.
inline std::vector<double> evaluate_precision(ScoringModel& model, std::span<const PreparedVideo> videos,
                                              std::span<const std::size_t> ks, std::size_t eval_len) {
    std::vector<double> sums(ks.size(), 0.0);
    for (const auto& v : videos) {
        const auto pred = ranking_from_scores(predict_eval(model, v, eval_len));
        const auto gt = ranking_from_scores(v.eval_gt);
        for (std::size_t i = 0; i < ks.size(); ++i) sums[i] += precision_at_k(pred, gt, ks[i]);
    }
    for (auto& s : sums) s /= static_cast<double>(std::max<std::size_t>(videos.size(), 1));
    return sums;
}

struct FoldReport {
    std::string run;
    std::size_t fold = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<std::size_t> ks;
    std::vector<std::size_t> eval_epochs;
    std::vector<std::vector<double>> precision;  // [epoch][k], parallel to eval_epochs
    std::vector<double> window_mean;             // per k over the evaluation window
    std::vector<double> train_loss;              // mean per epoch
    std::size_t skipped_degenerate = 0;          // per epoch
    std::vector<std::string> test_ids;

    friend bool operator==(const FoldReport&, const FoldReport&) = default;
};

inline void to_json(nlohmann::json& j, const FoldReport& r) {
    j = {{"run", r.run},
         {"fold", r.fold},
         {"seed", r.seed},
         {"config_hash", r.config_hash},
         {"ks", r.ks},
         {"eval_epochs", r.eval_epochs},
         {"precision", r.precision},
         {"window_mean", r.window_mean},
         {"train_loss", r.train_loss},
         {"skipped_degenerate", r.skipped_degenerate},
         {"test_ids", r.test_ids}};
}

/// A trained fold: its report plus the final model and optimizer state.
struct FoldResult {
    FoldReport report;
    ScoringModel model;
    AdamState adam;
};

using EpochCallback = std::function<void(const FoldReport&, std::size_t epoch)>;

inline std::uint64_t fold_seed(const TrainConfig& cfg, std::size_t fold) { return derive_seed(cfg.seed, fold); }

inline FoldResult train_fold(const TrainConfig& cfg, std::span<const DatasetRecord> records, const Fold& fold,
                             std::size_t fold_index, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    const std::uint64_t fseed = fold_seed(cfg, fold_index);
    std::vector<PreparedVideo> train, test;
    for (auto i : fold.train) train.push_back(prepare_video(records[i], cfg));
    for (auto i : fold.test) test.push_back(prepare_video(records[i], cfg));

    FoldResult res{{}, ScoringModel(cfg.model, derive_seed(fseed, 1)), {}};
    auto& model = res.model;
    auto& report = res.report;
    res.adam = AdamState::for_parameters(model.parameters());
    report.run = cfg.name;
    report.fold = fold_index;
    report.seed = fseed;
    report.config_hash = config_hash(cfg);
    report.ks = cfg.ks;
    for (const auto& v : test) report.test_ids.push_back(v.id);

    Rng order_rng(derive_seed(fseed, 2));
    Rng dropout_rng(derive_seed(fseed, 3));
    const std::uint64_t pair_seed = derive_seed(fseed, 4);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        double loss_sum = 0.0;
        std::size_t used = 0, skipped = 0;
        for (auto vi : order) {
            const auto& v = train[vi];
            if (v.degenerate) {
                ++skipped;
                continue;
            }
            const auto targets = build_targets(v.target, cfg.max_pairs, derive_seed(pair_seed, epoch * train.size() + vi));
            model.parameters().zero_grad();
            ad::Tape tape;
            const ad::Var pred = model.forward(tape.input(v.input), true, dropout_rng);
            const ad::Var loss = margin_rank_loss(pred, targets, cfg.margin);
            tape.backward(loss);
            adam_step(model.parameters(), res.adam, cfg.optimizer);
            loss_sum += loss.value()(0, 0);
            ++used;
        }
        report.train_loss.push_back(used ? loss_sum / static_cast<double>(used) : 0.0);
        report.skipped_degenerate = skipped;
        if (epoch >= cfg.first_eval_epoch() || cfg.eval_every_epoch) {
            report.eval_epochs.push_back(epoch);
            report.precision.push_back(evaluate_precision(model, test, cfg.ks, cfg.eval_len()));
        }
        if (on_epoch) on_epoch(report, epoch);
    }

    report.window_mean.assign(cfg.ks.size(), 0.0);
    std::size_t counted = 0;
    for (std::size_t e = 0; e < report.eval_epochs.size(); ++e) {
        if (report.eval_epochs[e] < cfg.first_eval_epoch()) continue;
        for (std::size_t k = 0; k < cfg.ks.size(); ++k) report.window_mean[k] += report.precision[e][k];
        ++counted;
    }
    for (auto& m : report.window_mean) m /= static_cast<double>(counted);
    return res;
}

/// Folds to run for a config, in ascending order.
inline std::vector<std::size_t> selected_folds(const TrainConfig& cfg) {
    if (!cfg.run_folds.empty()) {
        auto f = cfg.run_folds;
        std::sort(f.begin(), f.end());
        f.erase(std::unique(f.begin(), f.end()), f.end());
        return f;
    }
    std::vector<std::size_t> all(cfg.folds);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
}

/// Trains every selected fold, up to `jobs` at a time. Each fold's seeds
/// derive from the run seed and the fold index, so results do not depend on
/// `jobs`. `on_fold` runs on the worker thread that finished the fold.
inline std::vector<FoldReport> train_one(const TrainConfig& cfg, std::span<const DatasetRecord> records,
                                         std::size_t jobs = 1,
                                         const std::function<void(const FoldResult&)>& on_fold = {}) {
    cfg.validate();
    const auto folds = make_folds(records.size(), cfg.folds, cfg.seed);
    const auto chosen = selected_folds(cfg);
    std::vector<FoldReport> out(chosen.size());
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr failure;
    auto worker = [&] {
        while (true) {
            std::size_t slot;
            {
                std::lock_guard lock(mu);
                if (next >= chosen.size() || failure) return;
                slot = next++;
            }
            try {
                auto res = train_fold(cfg, records, folds[chosen[slot]], chosen[slot]);
                if (on_fold) on_fold(res);
                std::lock_guard lock(mu);
                out[slot] = std::move(res.report);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    jobs = std::clamp<std::size_t>(jobs, 1, chosen.size());
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < jobs; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

struct SummaryRow {
    std::string run;
    std::string model;
    std::string data_case;
    std::vector<std::size_t> ks;
    std::vector<Summary> precision;  // per k, across folds
};

inline SummaryRow summarize_run(const TrainConfig& cfg, std::span<const FoldReport> reports) {
    SummaryRow row{cfg.name, std::string(to_string(cfg.model.kind)), std::string(to_string(cfg.data_case)), cfg.ks, {}};
    if (cfg.data_case == DataCase::bin_features && cfg.target_len == 10) row.data_case += "@10";
    for (std::size_t k = 0; k < cfg.ks.size(); ++k) {
        std::vector<double> xs;
        for (const auto& r : reports) xs.push_back(r.window_mean.at(k));
        row.precision.push_back(summarize(xs));
    }
    return row;
}

inline void to_json(nlohmann::json& j, const SummaryRow& r) {
    j = {{"run", r.run}, {"model", r.model}, {"case", r.data_case}, {"ks", r.ks}};
    auto& p = j["precision"] = nlohmann::json::object();
    for (std::size_t k = 0; k < r.ks.size(); ++k) {
        p[std::to_string(r.ks[k])] = {{"mean", r.precision[k].mean}, {"sd", r.precision[k].sd}, {"folds", r.precision[k].n}};
    }
}

/// Fixed-width table: one row per run, precision as percent mean ± sd.
inline std::string format_summary_table(std::span<const SummaryRow> rows) {
    std::vector<std::size_t> ks;
    for (const auto& r : rows) {
        for (auto k : r.ks) {
            if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
        }
    }
    std::sort(ks.begin(), ks.end());
    std::string out;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-22s %-20s %-16s", "run", "model", "case");
    out += buf;
    for (auto k : ks) {
        std::snprintf(buf, sizeof buf, " %14s", ("P@" + std::to_string(k)).c_str());
        out += buf;
    }
    out += '\n';
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-22s %-20s %-16s", r.run.c_str(), r.model.c_str(), r.data_case.c_str());
        out += buf;
        for (auto k : ks) {
            const auto it = std::find(r.ks.begin(), r.ks.end(), k);
            if (it == r.ks.end()) {
                std::snprintf(buf, sizeof buf, " %14s", "-");
            } else {
                const auto& s = r.precision[static_cast<std::size_t>(it - r.ks.begin())];
                std::snprintf(buf, sizeof buf, " %7.1f ± %4.1f", 100.0 * s.mean, 100.0 * s.sd);
            }
            out += buf;
        }
        out += '\n';
    }
    return out;
}

}  // namespace mrp
