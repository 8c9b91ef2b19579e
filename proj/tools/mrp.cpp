// mrp: dataset generation, training, evaluation, study tooling and the study
// service. JSON goes to stdout, human-readable tables to stderr.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mrp/checkpoint.hpp"
#include "mrp/config.hpp"
#include "mrp/dataset.hpp"
#include "mrp/metrics.hpp"
#include "mrp/study.hpp"
#include "mrp/trainer.hpp"
#include "mrp/study_service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : mrp::Error {
    using Error::Error;
};

bool quiet = false;

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

void table(const std::string& text) {
    if (!quiet) std::cerr << text << std::flush;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

json read_json(const fs::path& p) { return mrp::detail::read_json_file(p); }

// ---- gen-synth

struct GenOpts {
    fs::path out;
    std::size_t videos = 40;
    std::size_t t_min = 100, t_max = 300;
    std::uint64_t seed = 0;
    double noise = 0.05;
    std::size_t window = 5;
    bool force = false;
};

int cmd_gen_synth(const GenOpts& o) {
    if (o.t_max < o.t_min) throw UsageError("--t-max must be >= --t-min");
    if (fs::exists(o.out) && !fs::is_directory(o.out)) throw mrp::Error(o.out.string() + " exists and is not a directory");
    if (fs::is_directory(o.out) && !fs::is_empty(o.out)) {
        if (!o.force) throw mrp::Error(o.out.string() + " is not empty (use --force to replace it)");
        fs::remove_all(o.out);
    }
    const auto law = mrp::SyntheticLaw::random(o.seed, o.noise, o.window);
    const auto records = mrp::generate_synthetic(o.videos, {o.t_min, o.t_max}, law);
    mrp::write_dataset(o.out, records);
    std::size_t degenerate = 0, segments = 0;
    for (const auto& r : records) {
        degenerate += r.degenerate_curve;
        segments += r.features.length();
    }
    emit({{"out", o.out.string()},
          {"videos", records.size()},
          {"segments", segments},
          {"degenerate", degenerate},
          {"seed", o.seed},
          {"noise", o.noise},
          {"window", o.window},
          {"t_range", {o.t_min, o.t_max}}});
    table("wrote " + std::to_string(records.size()) + " videos (" + std::to_string(segments) + " segments) to " +
          o.out.string() + "\n");
    return 0;
}

// ---- train

struct TrainOpts {
    fs::path data, config, out;
    std::size_t jobs = 1;
};

int cmd_train(const TrainOpts& o) {
    const auto records = mrp::load_dataset(o.data);
    const auto runs = mrp::resolve_train_configs(mrp::read_config_file(o.config));
    fs::create_directories(o.out);
    std::vector<mrp::SummaryRow> rows;
    json summary = json::array();
    for (const auto& cfg : runs) {
        const fs::path dir = o.out / cfg.name;
        fs::create_directories(dir);
        mrp::detail::write_text_file(dir / "config.json", json(cfg).dump(2) + "\n");
        std::mutex mu;
        const auto reports = mrp::train_one(cfg, records, o.jobs, [&](const mrp::FoldResult& r) {
            const auto stem = "fold" + std::to_string(r.report.fold);
            mrp::save_checkpoint(dir / (stem + ".ckpt"), cfg, r.report.fold, r.model, r.adam);
            mrp::detail::write_text_file(dir / (stem + ".json"), json(r.report).dump(2) + "\n");
            std::lock_guard lock(mu);
            table(cfg.name + " fold " + std::to_string(r.report.fold) + ": P@" + std::to_string(cfg.ks[0]) + " " +
                  fmt("%.3f", r.report.window_mean[0]) + "\n");
        });
        rows.push_back(mrp::summarize_run(cfg, reports));
        json row = rows.back();
        row["config_hash"] = mrp::config_hash(cfg);
        row["folds"] = mrp::selected_folds(cfg);
        summary.push_back(row);
    }
    const auto text = mrp::format_summary_table(rows);
    mrp::detail::write_text_file(o.out / "summary.json", summary.dump(2) + "\n");
    mrp::detail::write_text_file(o.out / "summary.txt", text);
    emit({{"out", o.out.string()}, {"runs", summary}});
    table(text);
    return 0;
}

// ---- eval

struct EvalOpts {
    fs::path checkpoint, data;
    std::vector<std::size_t> ks;
    bool all = false;
};

int cmd_eval(const EvalOpts& o) {
    auto ck = mrp::load_checkpoint(o.checkpoint);
    const auto records = mrp::load_dataset(o.data);
    const auto& cfg = ck.config;
    const auto ks = o.ks.empty() ? cfg.ks : o.ks;
    for (auto k : ks) {
        if (k < 1 || k > cfg.eval_len()) {
            throw UsageError("--k " + std::to_string(k) + " outside [1, " + std::to_string(cfg.eval_len()) +
                             "] for case " + std::string(mrp::to_string(cfg.data_case)));
        }
    }
    std::vector<std::size_t> ids;
    if (o.all) {
        ids.resize(records.size());
        std::iota(ids.begin(), ids.end(), std::size_t{0});
    } else {
        if (ck.fold >= cfg.folds) throw mrp::ValidationError("checkpoint fold outside its config's folds");
        ids = mrp::make_folds(records.size(), cfg.folds, cfg.seed).at(ck.fold).test;
    }
    std::vector<mrp::PreparedVideo> videos;
    for (auto i : ids) {
        try {
            videos.push_back(mrp::prepare_video(records[i], cfg));
        } catch (const mrp::Error& e) {
            throw mrp::ValidationError("video '" + records[i].id() + "' does not fit the checkpoint's data case (" +
                                       std::string(mrp::to_string(cfg.data_case)) + "): " + e.what());
        }
    }
    json per_video = json::array();
    std::vector<double> mean(ks.size(), 0.0);
    for (const auto& v : videos) {
        const auto p = mrp::evaluate_precision(ck.model, std::span(&v, 1), ks, cfg.eval_len());
        json pv = {{"video_id", v.id}};
        for (std::size_t i = 0; i < ks.size(); ++i) {
            pv[std::to_string(ks[i])] = p[i];
            mean[i] += p[i] / static_cast<double>(videos.size());
        }
        per_video.push_back(pv);
    }
    json precision = json::object();
    std::string text = "P@K over " + std::to_string(videos.size()) + " videos:";
    for (std::size_t i = 0; i < ks.size(); ++i) {
        precision[std::to_string(ks[i])] = mean[i];
        text += "  P@" + std::to_string(ks[i]) + " " + fmt("%.1f", 100.0 * mean[i]);
    }
    emit({{"checkpoint", o.checkpoint.string()},
          {"run", cfg.name},
          {"fold", ck.fold},
          {"config_hash", ck.config_hash},
          {"split", o.all ? "all" : "test"},
          {"ks", ks},
          {"precision", precision},
          {"per_video", per_video}});
    table(text + "\n");
    return 0;
}

// ---- study

std::vector<mrp::StudySession> read_sessions(const fs::path& p) {
    const auto j = read_json(p);
    const json* arr = &j;
    if (j.is_object() && j.contains("sessions")) arr = &j.at("sessions");
    std::vector<mrp::StudySession> out;
    if (arr->is_array()) {
        for (const auto& s : *arr) out.push_back(s.get<mrp::StudySession>());
    } else {
        out.push_back(arr->get<mrp::StudySession>());
    }
    return out;
}

int cmd_schedule(std::size_t n, std::optional<std::uint64_t> seed) {
    const auto base = mrp::mergesort_schedule(n);
    json j = {{"n", n}, {"count", base.size()}, {"pairs", base}};
    if (seed) {
        const auto p = mrp::permute_schedule(base, *seed);
        j["seed"] = *seed;
        j["permutation"] = p.permutation;
        j["control_position"] = p.schedule.control_position;
        j["total_steps"] = p.schedule.total_steps();
        j["shot_pairs"] = p.schedule.pairs;
    }
    emit(j);
    table(std::to_string(base.size()) + " comparisons for n = " + std::to_string(n) + "\n");
    return 0;
}

int cmd_reconstruct(const fs::path& answers) {
    const auto sessions = read_sessions(answers);
    json out = json::array();
    std::size_t accepted = 0, cycles = 0;
    for (const auto& s : sessions) {
        json r = {{"session_id", s.answers.session_id}, {"video_id", s.answers.video_id}};
        if (!mrp::control_passed(s.schedule, s.answers.answers)) {
            r["status"] = "rejected_control";
        } else {
            const auto rec = mrp::reconstruct_ranking(s.answers, s.schedule);
            r["status"] = "accepted";
            r.update(json(rec));
            ++accepted;
            cycles += rec.had_cycles;
        }
        out.push_back(r);
    }
    emit(out);
    table(std::to_string(accepted) + " of " + std::to_string(sessions.size()) + " sessions accepted, " +
          std::to_string(cycles) + " with cycles\n");
    return 0;
}

int cmd_alpha(const fs::path& file, const std::string& metric_name) {
    const auto metric = mrp::parse_alpha_metric(metric_name);
    const auto sessions = read_sessions(file);
    std::map<std::string, std::vector<mrp::RankingOf>> by_video;
    for (const auto& s : sessions) {
        if (!mrp::control_passed(s.schedule, s.answers.answers)) continue;
        by_video[s.answers.video_id].push_back(mrp::reconstruct_ranking(s.answers, s.schedule).ranking);
    }
    json per_video = json::array();
    std::vector<double> alphas;
    for (const auto& [video, rankings] : by_video) {
        json v = {{"video_id", video}, {"raters", rankings.size()}, {"alpha", nullptr}};
        if (rankings.size() >= 2) {
            try {
                const double a = mrp::krippendorff_alpha(mrp::rank_position_matrix(rankings), metric);
                v["alpha"] = a;
                alphas.push_back(a);
            } catch (const mrp::UndefinedAlpha&) {
            }
        }
        per_video.push_back(v);
    }
    json j = {{"metric", metric_name}, {"per_video", per_video}, {"videos_with_alpha", alphas.size()}};
    if (!alphas.empty()) {
        const auto s = mrp::summarize(alphas);
        j["mean"] = s.mean;
        j["sd"] = s.sd;
        table("alpha (" + metric_name + ") over " + std::to_string(alphas.size()) + " videos: " + fmt("%.4f", s.mean) +
              " ± " + fmt("%.4f", s.sd) + "\n");
    } else {
        j["mean"] = nullptr;
        j["sd"] = nullptr;
        table("alpha undefined: no video has two accepted raters\n");
    }
    emit(j);
    return 0;
}

struct SimOpts {
    std::size_t users = 10;
    std::size_t videos = 1;
    std::string policy = "gt";
    std::uint64_t seed = 0;
    fs::path data;
    fs::path out;
};

int cmd_simulate(const SimOpts& o) {
    mrp::AnswerPolicy policy;
    try {
        policy = mrp::parse_policy(o.policy);
    } catch (const mrp::ArgumentError& err) {
        throw UsageError(err.what());
    }
    std::vector<std::pair<std::string, mrp::ReplayCurve>> gts;
    if (!o.data.empty()) {
        const auto records = mrp::load_dataset(o.data);
        for (std::size_t i = 0; i < std::min(o.videos, records.size()); ++i) {
            gts.emplace_back(records[i].id(), records[i].ground_truth);
        }
    } else {
        for (std::size_t v = 0; v < o.videos; ++v) {
            mrp::Rng rng(mrp::derive_seed(o.seed, 0x6770000 + v));
            std::vector<double> curve(mrp::kCurveLength);
            for (auto& x : curve) x = mrp::uniform01(rng);
            gts.emplace_back("sim-video-" + std::to_string(v), mrp::ReplayCurve(std::move(curve)));
        }
    }
    std::vector<mrp::StudySession> all;
    std::array<std::vector<double>, 3> columns;
    std::size_t rejected = 0;
    for (std::size_t v = 0; v < gts.size(); ++v) {
        const auto& [video, gt] = gts[v];
        const auto shots = mrp::bin_curve(gt, mrp::kStudyShots).scores;
        std::vector<mrp::StudySession> sessions;
        for (std::size_t u = 0; u < o.users; ++u) {
            auto s = mrp::simulate_session(shots, policy, mrp::derive_seed(o.seed, v * o.users + u), video);
            s.answers.user_id = "user-" + std::to_string(u);
            sessions.push_back(std::move(s));
        }
        try {
            const auto ev = mrp::evaluate_users(sessions, gt);
            for (const auto& up : ev.per_user) {
                for (std::size_t i = 0; i < 3; ++i) columns[i].push_back(up.precision[i]);
            }
            rejected += ev.rejected;
        } catch (const mrp::EmptyReport&) {
            rejected += sessions.size();
        }
        all.insert(all.end(), sessions.begin(), sessions.end());
    }
    json precision = nullptr;
    std::string text = "policy " + o.policy + ": " + std::to_string(all.size()) + " sessions, " +
                       std::to_string(rejected) + " rejected";
    if (!columns[0].empty()) {
        precision = json::object();
        for (std::size_t i = 0; i < 3; ++i) {
            const auto s = mrp::summarize(columns[i]);
            precision[std::to_string(mrp::kUserKs[i])] = {{"mean", s.mean}, {"sd", s.sd}};
            text += "  P@" + std::to_string(mrp::kUserKs[i]) + " " + fmt("%.3f", s.mean);
        }
    }
    if (!o.out.empty()) mrp::detail::write_text_file(o.out, json(all).dump() + "\n");
    emit({{"policy", o.policy},
          {"users_per_video", o.users},
          {"videos", gts.size()},
          {"sessions", all.size()},
          {"accepted", all.size() - rejected},
          {"rejected", rejected},
          {"precision", precision},
          {"out", o.out.empty() ? json() : json(o.out.string())}});
    table(text + "\n");
    return 0;
}

// ---- serve-study

int cmd_serve(const fs::path& config, std::optional<int> port) {
    const json doc = config.empty() ? json::object() : mrp::read_config_file(config);
    auto cfg = mrp::service_config_from_json(doc);
    if (port) cfg.port = *port;

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);  // before any thread starts

    mrp::StudyService svc(cfg);
    const int bound = svc.start();
    emit({{"listening", cfg.host}, {"port", bound}, {"data_dir", cfg.data_dir.string()},
          {"studies", svc.store().study_ids()}});
    table("serving studies on http://" + cfg.host + ":" + std::to_string(bound) + " (Ctrl-C to stop)\n");
    int sig = 0;
    sigwait(&set, &sig);
    svc.stop();
    table("stopped\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Most Replayed prediction: training, evaluation and the pairwise user study"};
    app.require_subcommand(1);
    app.add_flag("-q,--quiet", quiet, "Suppress human-readable tables on stderr");

    GenOpts gen;
    auto* g = app.add_subcommand("gen-synth", "Generate a seeded synthetic dataset");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--videos", gen.videos, "Number of videos")->check(CLI::PositiveNumber);
    g->add_option("--t-min", gen.t_min, "Minimum segments per video")->check(CLI::Range(10, 1 << 20));
    g->add_option("--t-max", gen.t_max, "Maximum segments per video")->check(CLI::Range(10, 1 << 20));
    g->add_option("--seed", gen.seed, "Seed of the feature-to-score law");
    g->add_option("--noise", gen.noise, "Per-segment score noise (std)")->check(CLI::NonNegativeNumber);
    g->add_option("--window", gen.window, "Moving-average width on raw scores")->check(CLI::PositiveNumber);
    g->add_flag("--force", gen.force, "Replace a non-empty output directory");

    TrainOpts tr;
    auto* t = app.add_subcommand("train", "Cross-validated training of every run in a config");
    t->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    t->add_option("--config", tr.config, "TOML or JSON run config")->required()->check(CLI::ExistingFile);
    t->add_option("--out", tr.out, "Output directory")->required();
    t->add_option("--jobs", tr.jobs, "Folds trained in parallel")->check(CLI::PositiveNumber);

    EvalOpts ev;
    auto* e = app.add_subcommand("eval", "Precision@K of a checkpoint");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    e->add_option("--k", ev.ks, "Comma-separated K values (default: the run's)")->delimiter(',');
    e->add_flag("--all", ev.all, "Evaluate every video, not only the checkpoint's test fold");

    auto* st = app.add_subcommand("study", "Pairwise user-study tools");
    st->require_subcommand(1);
    std::size_t sched_n = mrp::kStudyShots;
    std::optional<std::uint64_t> sched_seed;
    auto* ss = st->add_subcommand("schedule", "MergeSort comparison schedule");
    ss->add_option("--n", sched_n, "Number of shots")->check(CLI::Range(2, 64));
    ss->add_option("--seed", sched_seed, "Also draw a session permutation and control position");
    fs::path answers_file;
    auto* sr = st->add_subcommand("reconstruct", "Rankings from recorded sessions");
    sr->add_option("--answers", answers_file, "Session JSON (object, array, or {sessions: [...]})")
        ->required()
        ->check(CLI::ExistingFile);
    fs::path alpha_file;
    std::string alpha_metric = "ordinal";
    auto* sa = st->add_subcommand("alpha", "Krippendorff's alpha per video");
    sa->add_option("--sessions", alpha_file, "Session JSON")->required()->check(CLI::ExistingFile);
    sa->add_option("--metric", alpha_metric, "nominal, ordinal or interval")
        ->check(CLI::IsMember({"nominal", "ordinal", "interval"}));
    SimOpts sim;
    auto* sm = st->add_subcommand("simulate", "Simulated participants answering under a policy");
    sm->add_option("--users", sim.users, "Sessions per video")->check(CLI::PositiveNumber);
    sm->add_option("--videos", sim.videos, "Number of videos")->check(CLI::PositiveNumber);
    sm->add_option("--policy", sim.policy, "random | gt | noisy:P");
    sm->add_option("--seed", sim.seed, "Seed");
    sm->add_option("--data", sim.data, "Take ground truth from this dataset")->check(CLI::ExistingDirectory);
    sm->add_option("--out", sim.out, "Write the sessions here");

    fs::path serve_config;
    std::optional<int> serve_port;
    auto* sv = app.add_subcommand("serve-study", "Run the study HTTP service until interrupted");
    sv->add_option("--config", serve_config, "TOML or JSON service config")->check(CLI::ExistingFile);
    sv->add_option("--port", serve_port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return 2;
    }

    try {
        if (*g) return cmd_gen_synth(gen);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_eval(ev);
        if (*ss) return cmd_schedule(sched_n, sched_seed);
        if (*sr) return cmd_reconstruct(answers_file);
        if (*sa) return cmd_alpha(alpha_file, alpha_metric);
        if (*sm) return cmd_simulate(sim);
        if (*sv) return cmd_serve(serve_config, serve_port);
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 2;
}
