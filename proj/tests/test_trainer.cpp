#include <gtest/gtest.h>

#include <set>

#include "mrp/checkpoint.hpp"
#include "mrp/dataset.hpp"
#include "mrp/trainer.hpp"
#include "support/tempdir.hpp"

namespace mrp {
namespace {

const std::vector<DatasetRecord>& small_dataset() {
    static const auto records = generate_synthetic(10, {100, 130}, SyntheticLaw::random(3, 0.05, 3));
    return records;
}

TrainConfig tiny_config(ModelKind kind = ModelKind::fc) {
    TrainConfig c;
    c.name = "tiny";
    c.model.kind = kind;
    c.model.hidden = 8;
    c.epochs = 3;
    c.eval_window = 2;
    c.run_folds = {0};
    c.seed = 11;
    c.optimizer.lr = 1e-3;
    return c;
}

TEST(Folds, FiveHundredRecords) {
    const auto folds = make_folds(500, 5, 1);
    ASSERT_EQ(folds.size(), 5u);
    std::set<std::size_t> tested;
    for (const auto& f : folds) {
        EXPECT_EQ(f.test.size(), 100u);
        EXPECT_EQ(f.train.size(), 400u);
        for (auto i : f.test) EXPECT_TRUE(tested.insert(i).second);
        std::set<std::size_t> train(f.train.begin(), f.train.end());
        for (auto i : f.test) EXPECT_FALSE(train.count(i));
    }
    EXPECT_EQ(tested.size(), 500u);
}

TEST(Folds, TenRecordsPartition) {
    const auto folds = make_folds(10, 5, 9);
    std::set<std::size_t> all;
    for (const auto& f : folds) {
        EXPECT_EQ(f.test.size(), 2u);
        all.insert(f.test.begin(), f.test.end());
    }
    EXPECT_EQ(all.size(), 10u);
    EXPECT_NE(make_folds(10, 5, 9)[0].test, make_folds(10, 5, 10)[0].test);
    EXPECT_EQ(make_folds(10, 5, 9)[0].test, folds[0].test);
    EXPECT_THROW(make_folds(4, 5, 0), ArgumentError);
    EXPECT_THROW(make_folds(4, 1, 0), ArgumentError);
}

TEST(Prepare, CasesShapeInputsAndTargets) {
    const auto& rec = small_dataset()[0];
    auto c = tiny_config();
    const auto binned = prepare_video(rec, c);
    EXPECT_EQ(binned.input.rows(), 100);
    EXPECT_EQ(binned.target, rec.ground_truth.scores());

    c.target_len = 10;
    const auto ten = prepare_video(rec, c);
    EXPECT_EQ(ten.input.rows(), 10);
    EXPECT_EQ(ten.target, bin_curve(rec.ground_truth, 10).scores);
    EXPECT_EQ(ten.eval_gt, ten.target);

    c.data_case = DataCase::interpolate_gt;
    c.target_len = 0;
    const auto interp = prepare_video(rec, c);
    EXPECT_EQ(static_cast<std::size_t>(interp.input.rows()), rec.features.length());
    EXPECT_EQ(interp.target.size(), rec.features.length());
    EXPECT_EQ(interp.target.front(), rec.ground_truth[0]);
    EXPECT_EQ(interp.target.back(), rec.ground_truth[99]);
    EXPECT_EQ(interp.eval_gt, rec.ground_truth.scores());
}

TEST(Train, WindowMeanIsMeanOfWindowEpochs) {
    auto c = tiny_config();
    c.eval_every_epoch = true;
    const auto reports = train_one(c, small_dataset());
    ASSERT_EQ(reports.size(), 1u);
    const auto& r = reports[0];
    EXPECT_EQ(r.eval_epochs, (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(r.train_loss.size(), 3u);
    for (std::size_t k = 0; k < c.ks.size(); ++k) {
        EXPECT_NEAR(r.window_mean[k], (r.precision[1][k] + r.precision[2][k]) / 2.0, 1e-15);
    }
    EXPECT_EQ(r.test_ids.size(), 2u);
    EXPECT_EQ(r.config_hash, config_hash(c));
}

TEST(Train, WindowOnlyByDefault) {
    const auto r = train_one(tiny_config(), small_dataset()).at(0);
    EXPECT_EQ(r.eval_epochs, (std::vector<std::size_t>{1, 2}));
}

TEST(Train, DeterministicGivenSeed) {
    const auto a = train_one(tiny_config(), small_dataset());
    const auto b = train_one(tiny_config(), small_dataset());
    EXPECT_EQ(a, b);
    auto other = tiny_config();
    other.seed = 12;
    EXPECT_NE(train_one(other, small_dataset())[0].train_loss, a[0].train_loss);
}

TEST(Train, JobsDoNotChangeResults) {
    auto c = tiny_config();
    c.epochs = 2;
    c.eval_window = 1;
    c.run_folds = {0, 3, 4};
    const auto serial = train_one(c, small_dataset(), 1);
    const auto parallel = train_one(c, small_dataset(), 3);
    EXPECT_EQ(serial, parallel);
    EXPECT_EQ(serial[1].fold, 3u);
}

TEST(Train, LossDecreasesOnLearnableData) {
    auto c = tiny_config();
    c.epochs = 15;
    c.eval_window = 5;
    c.model.hidden = 16;
    const auto r = train_one(c, small_dataset()).at(0);
    EXPECT_LT(r.train_loss.back(), r.train_loss.front());
}

TEST(Train, TenShotModeUsesSmallKs) {
    const nlohmann::json j = {{"model", "fc"}, {"target_len", 10}, {"epochs", 2}, {"eval_window", 1},
                              {"run_folds", {1}}, {"network", {{"hidden", 4}}}};
    const auto c = train_config_from_json(j);
    EXPECT_EQ(c.margin, 0.05);
    EXPECT_EQ(c.ks, (std::vector<std::size_t>{1, 3, 5}));
    const auto r = train_one(c, small_dataset()).at(0);
    EXPECT_EQ(r.window_mean.size(), 3u);
}

TEST(Train, DegenerateVideosAreSkipped) {
    auto records = small_dataset();
    records[0].ground_truth = ReplayCurve::constant(0.5);
    records[0].degenerate_curve = true;
    records[1].ground_truth = ReplayCurve::constant(0.5);
    records[1].degenerate_curve = true;
    auto c = tiny_config();
    const auto folds = make_folds(records.size(), c.folds, c.seed);
    std::size_t expect = 0;
    for (auto i : folds[0].train) expect += i <= 1;
    const auto r = train_one(c, records).at(0);
    EXPECT_EQ(r.skipped_degenerate, expect);
}

TEST(Train, AttentionAblationRuns) {
    auto c = tiny_config(ModelKind::pglsum_no_residual);
    c.epochs = 1;
    c.eval_window = 1;
    c.model.global_heads = 8;
    const auto r = train_one(c, std::span(small_dataset()).first(5)).at(0);
    EXPECT_EQ(r.window_mean.size(), 3u);
    for (double p : r.window_mean) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
    }
}

TEST(Train, EvaluationLeavesParametersAlone) {
    const auto c = tiny_config();
    ScoringModel m(c.model, 5);
    const auto before = m.parameters()[0].value;
    std::vector<PreparedVideo> vids{prepare_video(small_dataset()[0], c)};
    const auto a = evaluate_precision(m, vids, c.ks, c.eval_len());
    const auto b = evaluate_precision(m, vids, c.ks, c.eval_len());
    EXPECT_EQ(a, b);
    EXPECT_EQ(m.parameters()[0].value, before);
}

TEST(Summary, TableHasOneRowPerRun) {
    auto c = tiny_config();
    FoldReport a, b;
    a.window_mean = {0.2, 0.4, 0.6};
    b.window_mean = {0.4, 0.4, 0.6};
    const std::vector<FoldReport> reports{a, b};
    const auto row = summarize_run(c, reports);
    EXPECT_NEAR(row.precision[0].mean, 0.3, 1e-15);
    EXPECT_NEAR(row.precision[0].sd, std::sqrt(0.02), 1e-15);
    const std::vector<SummaryRow> rows{row};
    const auto table = format_summary_table(rows);
    EXPECT_NE(table.find("P@15"), std::string::npos);
    EXPECT_NE(table.find("30.0 ± 14.1"), std::string::npos);
    const nlohmann::json j = row;
    EXPECT_EQ(j["precision"]["50"]["mean"], 0.6);
}

TEST(Checkpoint, RoundTripKeepsFloat32Values) {
    testing::TempDir dir;
    auto c = tiny_config();
    const auto folds = make_folds(small_dataset().size(), c.folds, c.seed);
    auto res = train_fold(c, small_dataset(), folds[0], 0);
    const auto path = dir.path() / "fold0.ckpt";
    save_checkpoint(path, c, 0, res.model, res.adam);
    const auto ck = load_checkpoint(path);
    EXPECT_EQ(ck.config_hash, config_hash(c));
    EXPECT_EQ(ck.fold, 0u);
    EXPECT_EQ(ck.adam.step, res.adam.step);
    ASSERT_EQ(ck.model.parameters().size(), res.model.parameters().size());
    for (std::size_t i = 0; i < res.model.parameters().size(); ++i) {
        const Matrix rounded = res.model.parameters()[i].value.cast<float>().cast<double>();
        EXPECT_EQ(ck.model.parameters()[i].value, rounded);
        EXPECT_EQ(ck.adam.v[i], res.adam.v[i].cast<float>().cast<double>());
    }
    // a second save of the loaded state is byte-identical
    save_checkpoint(dir.path() / "again.ckpt", ck.config, ck.fold, ck.model, ck.adam);
    save_checkpoint(dir.path() / "again2.ckpt", ck.config, ck.fold, ck.model, ck.adam);
    EXPECT_EQ(detail::read_file_bytes(dir.path() / "again.ckpt"), detail::read_file_bytes(dir.path() / "again2.ckpt"));
}

TEST(Checkpoint, CorruptionIsDetected) {
    testing::TempDir dir;
    const auto c = tiny_config();
    ScoringModel m(c.model, 1);
    const auto adam = AdamState::for_parameters(m.parameters());
    const auto path = dir.path() / "m.ckpt";
    save_checkpoint(path, c, 2, m, adam);
    auto bytes = detail::read_file_bytes(path);

    auto write = [&](const std::vector<char>& b) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(b.data(), static_cast<std::streamsize>(b.size()));
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    write(bad_magic);
    EXPECT_THROW(load_checkpoint(path), FormatError);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 4);
    write(truncated);
    EXPECT_THROW(load_checkpoint(path), FormatError);

    std::string text(bytes.begin(), bytes.end());
    const auto at = text.find("\"hidden\":8");
    ASSERT_NE(at, std::string::npos);
    text.replace(at, 10, "\"hidden\":9");
    write(std::vector<char>(text.begin(), text.end()));
    EXPECT_THROW(load_checkpoint(path), ValidationError);

    EXPECT_THROW(load_checkpoint(dir.path() / "missing.ckpt"), Error);
}

}  // namespace
}  // namespace mrp
