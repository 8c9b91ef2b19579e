#pragma once

// Study and session state behind the HTTP service.
//
// On disk, per study:
//   <data_dir>/studies/<study_id>/log.jsonl      append-only event log
//   <data_dir>/studies/<study_id>/snapshot.json  state after the first `log_lines` events
//
// Events: study, session, answer, complete, close. A restart loads the
// snapshot and replays the log tail, so an in-progress session resumes at
// its last persisted answer.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mrp/config.hpp"
#include "mrp/dataset.hpp"
#include "mrp/metrics.hpp"
#include "mrp/rng.hpp"
#include "mrp/study.hpp"

namespace mrp {

/// Error carrying the HTTP status and machine-readable code it maps to.
struct ServiceError : Error {
    int status;
    std::string code;
    ServiceError(int status_, std::string code_, const std::string& message)
        : Error(message), status(status_), code(std::move(code_)) {}
};

inline ServiceError not_found(const std::string& what) { return {404, "not_found", what}; }
inline ServiceError conflict(const std::string& what) { return {409, "conflict", what}; }
inline ServiceError invalid(const std::string& what) { return {422, "validation_error", what}; }

struct ClipManifest {
    std::vector<std::string> shot_clips;
    std::string full_video;
    std::string control_clip;
};

struct StudyDefinition {
    std::string study_id;
    std::string video_id;
    ClipManifest clips;
    std::size_t required_sessions = 10;
    std::optional<ReplayCurve> ground_truth;
    std::optional<std::uint64_t> seed;
};

inline void to_json(nlohmann::json& j, const StudyDefinition& d) {
    j = {{"study_id", d.study_id},
         {"video_id", d.video_id},
         {"clip_manifest",
          {{"shot_clips", d.clips.shot_clips}, {"full_video", d.clips.full_video}, {"control_clip", d.clips.control_clip}}},
         {"required_sessions", d.required_sessions},
         {"ground_truth", d.ground_truth ? nlohmann::json(d.ground_truth->scores()) : nlohmann::json()}};
    if (d.seed) j["seed"] = *d.seed;
}

/// Parses and validates a study registration body; ServiceError 422 on any
/// violation.
inline StudyDefinition study_definition_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw invalid("study definition must be a JSON object");
    StudyDefinition d;
    try {
        d.study_id = j.at("study_id").get<std::string>();
        d.video_id = j.value("video_id", d.study_id);
        const auto& m = j.at("clip_manifest");
        d.clips.shot_clips = m.at("shot_clips").get<std::vector<std::string>>();
        d.clips.full_video = m.at("full_video").get<std::string>();
        d.clips.control_clip = m.at("control_clip").get<std::string>();
        d.required_sessions = j.value("required_sessions", d.required_sessions);
        if (j.contains("ground_truth") && !j.at("ground_truth").is_null()) {
            d.ground_truth = ReplayCurve(j.at("ground_truth").get<std::vector<double>>());
        }
        if (j.contains("seed") && !j.at("seed").is_null()) d.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw invalid(std::string("malformed study definition: ") + e.what());
    } catch (const ValidationError& e) {
        throw invalid(std::string("ground_truth: ") + e.what());
    }
    static const std::regex id_re("[A-Za-z0-9_-]{1,64}");
    if (!std::regex_match(d.study_id, id_re)) {
        throw invalid("study_id must be 1-64 characters of [A-Za-z0-9_-]");
    }
    if (d.clips.shot_clips.size() != kStudyShots) {
        throw invalid("clip_manifest.shot_clips has " + std::to_string(d.clips.shot_clips.size()) + " entries, need " +
                      std::to_string(kStudyShots));
    }
    auto nonempty = [](const std::string& s, const std::string& what) {
        if (s.empty()) throw invalid(what + " is empty");
    };
    for (std::size_t i = 0; i < d.clips.shot_clips.size(); ++i) {
        nonempty(d.clips.shot_clips[i], "shot_clips[" + std::to_string(i) + "]");
    }
    nonempty(d.clips.full_video, "full_video");
    nonempty(d.clips.control_clip, "control_clip");
    if (d.required_sessions == 0) throw invalid("required_sessions must be positive");
    return d;
}

struct ServiceConfig {
    std::filesystem::path data_dir = "study-data";
    std::filesystem::path clip_dir;  // empty: clips are hosted elsewhere
    std::string clip_url_prefix = "/clips";
    std::string host = "127.0.0.1";
    int port = 8080;
    std::uint64_t seed = 0;  // for studies registered without one
    std::string intro_text =
        "Most Replayed data marks the parts of a video that viewers rewatch most. You will first see the whole "
        "video sped up, then pairs of short clips from it.";
    std::string prompt = "Guess which of the two video shots has the greater 'Most replayed' score.";
    std::string control_prompt = "Attention check: choose CONTROL for this pair.";
};

/// Reads the [service] table of a TOML/JSON config (or the root when absent),
/// then applies MRP_STUDY_DATA_DIR and MRP_CLIP_DIR.
inline ServiceConfig service_config_from_json(const nlohmann::json& doc) {
    ServiceConfig c;
    const nlohmann::json& j = doc.contains("service") ? doc.at("service") : doc;
    detail::reject_unknown(j,
                           {"data_dir", "clip_dir", "clip_url_prefix", "host", "port", "seed", "intro_text", "prompt",
                            "control_prompt"},
                           "service");
    try {
        c.data_dir = j.value("data_dir", c.data_dir.string());
        c.clip_dir = j.value("clip_dir", c.clip_dir.string());
        c.clip_url_prefix = j.value("clip_url_prefix", c.clip_url_prefix);
        c.host = j.value("host", c.host);
        c.port = j.value("port", c.port);
        c.seed = j.value("seed", c.seed);
        c.intro_text = j.value("intro_text", c.intro_text);
        c.prompt = j.value("prompt", c.prompt);
        c.control_prompt = j.value("control_prompt", c.control_prompt);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value in [service]: ") + e.what());
    }
    if (const char* v = std::getenv("MRP_STUDY_DATA_DIR"); v && *v) c.data_dir = v;
    if (const char* v = std::getenv("MRP_CLIP_DIR"); v && *v) c.clip_dir = v;
    if (c.port < 0 || c.port > 65535) throw ConfigError("port outside [0, 65535]");
    if (c.clip_url_prefix.empty() || c.clip_url_prefix.front() != '/') {
        throw ConfigError("clip_url_prefix must start with '/'");
    }
    return c;
}

enum class SessionStatus { in_progress, accepted, rejected_control };

inline std::string_view to_string(SessionStatus s) {
    switch (s) {
        case SessionStatus::in_progress: return "in_progress";
        case SessionStatus::accepted: return "accepted";
        case SessionStatus::rejected_control: return "rejected_control";
    }
    return "?";
}

struct SessionState {
    std::string session_id;
    std::string user_id;
    std::uint64_t seed = 0;
    PermutedSchedule schedule;
    std::vector<Choice> answers;
    SessionStatus status = SessionStatus::in_progress;
    std::optional<ReconstructedRanking> result;
    bool current_served = false;  // not persisted: a restart requires a re-fetch

    std::size_t cursor() const { return answers.size(); }
    std::size_t total_steps() const { return schedule.schedule.total_steps(); }

    SessionAnswers as_answers(const std::string& video_id) const {
        return {session_id, user_id, video_id, schedule.permutation, answers,
                control_passed(schedule.schedule, answers)};
    }
};

struct StudyState {
    StudyDefinition definition;
    std::uint64_t seed = 0;
    std::size_t sessions_created = 0;
    bool closed = false;
    std::vector<std::string> session_order;
    std::map<std::string, SessionState> sessions;
    std::size_t log_lines = 0;

    std::size_t count(SessionStatus s) const {
        std::size_t n = 0;
        for (const auto& [_, ss] : sessions) n += ss.status == s;
        return n;
    }
};

namespace detail {

inline nlohmann::json session_snapshot(const SessionState& s) {
    std::vector<std::string> answers;
    for (auto c : s.answers) answers.emplace_back(to_string(c));
    nlohmann::json j = {{"session_id", s.session_id},
                        {"user_id", s.user_id},
                        {"seed", s.seed},
                        {"permutation", s.schedule.permutation},
                        {"control_position", s.schedule.schedule.control_position},
                        {"answers", answers},
                        {"status", std::string(to_string(s.status))}};
    if (s.result) j["ranking"] = s.result->ranking.order;
    return j;
}

inline SessionStatus parse_status(const std::string& s) {
    if (s == "in_progress") return SessionStatus::in_progress;
    if (s == "accepted") return SessionStatus::accepted;
    if (s == "rejected_control") return SessionStatus::rejected_control;
    throw FormatError("unknown session status '" + s + "'");
}

}  // namespace detail

/// Thread-safe study store. Every mutating call appends to the study's log
/// before it returns; completions also rewrite the snapshot.
class StudyStore {
public:
    explicit StudyStore(ServiceConfig cfg) : cfg_(std::move(cfg)) { load_all(); }

    const ServiceConfig& config() const { return cfg_; }

    /// Registers a study; the returned object lists manifest URLs that could
    /// not be resolved against the clip directory.
    nlohmann::json create_study(const nlohmann::json& body) {
        auto def = study_definition_from_json(body);
        std::lock_guard lock(mu_);
        if (studies_.count(def.study_id)) throw conflict("study '" + def.study_id + "' already exists");
        StudyState st;
        st.definition = def;
        st.seed = def.seed.value_or(derive_seed(cfg_.seed, fnv1a(def.study_id)));
        st.definition.seed = st.seed;
        std::filesystem::create_directories(study_dir(def.study_id));
        auto& ref = studies_.emplace(def.study_id, std::move(st)).first->second;
        append(ref, {{"event", "study"}, {"definition", ref.definition}});
        return {{"study_id", def.study_id}, {"unresolved_urls", unresolved_urls(def.clips)}};
    }

    nlohmann::json study_info(const std::string& study_id) {
        std::lock_guard lock(mu_);
        const auto& st = study(study_id);
        return {{"definition", st.definition},
                {"closed", st.closed},
                {"sessions_created", st.sessions_created},
                {"n_accepted", st.count(SessionStatus::accepted)},
                {"n_rejected", st.count(SessionStatus::rejected_control)},
                {"n_in_progress", st.count(SessionStatus::in_progress)}};
    }

    void close_study(const std::string& study_id) {
        std::lock_guard lock(mu_);
        auto& st = study(study_id);
        if (st.closed) return;
        st.closed = true;
        append(st, {{"event", "close"}});
    }

    nlohmann::json create_session(const std::string& study_id, const std::string& user_id) {
        std::lock_guard lock(mu_);
        auto& st = study(study_id);
        if (st.closed) throw ServiceError(410, "gone", "study '" + study_id + "' is closed");
        const std::size_t counter = st.sessions_created;
        SessionState s;
        s.seed = derive_seed(st.seed, counter);
        s.session_id = study_id + "-" + std::to_string(counter) + "-" + hex64(s.seed).substr(0, 8);
        s.user_id = user_id.empty() ? "anon-" + std::to_string(counter) : user_id;
        s.schedule = permute_schedule(mergesort_schedule(kStudyShots), s.seed);
        st.sessions_created = counter + 1;
        st.session_order.push_back(s.session_id);
        session_index_[s.session_id] = study_id;
        append(st, {{"event", "session"},
                    {"session_id", s.session_id},
                    {"user_id", s.user_id},
                    {"seed", s.seed},
                    {"permutation", s.schedule.permutation},
                    {"control_position", s.schedule.schedule.control_position}});
        const auto& ref = st.sessions.emplace(s.session_id, std::move(s)).first->second;
        return {{"session_id", ref.session_id},
                {"intro_text", cfg_.intro_text},
                {"full_video_url", st.definition.clips.full_video},
                {"total_steps", ref.total_steps()}};
    }

    nlohmann::json session_info(const std::string& session_id) {
        std::lock_guard lock(mu_);
        auto [st, s] = session(session_id);
        nlohmann::json j = {{"session_id", s.session_id},
                            {"study_id", st.definition.study_id},
                            {"user_id", s.user_id},
                            {"status", std::string(to_string(s.status))},
                            {"cursor", s.cursor()},
                            {"total_steps", s.total_steps()},
                            {"full_video_url", st.definition.clips.full_video},
                            {"intro_text", cfg_.intro_text}};
        return j;
    }

    /// Serves step k. Already-answered steps may be re-fetched; the next
    /// unanswered step is the only one reachable ahead of the cursor.
    nlohmann::json step(const std::string& session_id, std::size_t k) {
        std::lock_guard lock(mu_);
        auto [st, s] = session(session_id);
        if (k >= s.total_steps()) throw not_found("step " + std::to_string(k) + " does not exist");
        if (k > s.cursor()) {
            throw conflict("step " + std::to_string(k) + " requested before step " + std::to_string(s.cursor()) +
                           " was answered");
        }
        const auto& clips = st.definition.clips;
        const auto pair = s.schedule.schedule.pair_at(k);
        nlohmann::json j = {{"step", k}, {"total_steps", s.total_steps()}};
        if (pair) {
            j["left_clip_url"] = clips.shot_clips[pair->left];
            j["right_clip_url"] = clips.shot_clips[pair->right];
            j["prompt"] = cfg_.prompt;
        } else {
            j["left_clip_url"] = clips.control_clip;
            j["right_clip_url"] = clips.control_clip;
            j["prompt"] = cfg_.control_prompt;
        }
        j["choices"] = {"left", "right", "control"};
        if (k < s.cursor()) {
            j["answered"] = to_string(s.answers[k]);
        } else if (s.status == SessionStatus::in_progress) {
            s.current_served = true;
        }
        return j;
    }

    void answer(const std::string& session_id, std::size_t k, const nlohmann::json& body) {
        std::optional<Choice> choice;
        if (body.is_object() && body.contains("choice") && body.at("choice").is_string()) {
            try {
                choice = parse_choice(body.at("choice").get<std::string>());
            } catch (const ArgumentError&) {
            }
        }
        if (!choice) throw invalid("choice must be one of left, right, control");
        std::lock_guard lock(mu_);
        auto [st, s] = session(session_id);
        if (s.status != SessionStatus::in_progress) throw conflict("session is already complete");
        if (k >= s.total_steps()) throw not_found("step " + std::to_string(k) + " does not exist");
        if (k < s.cursor()) throw conflict("step " + std::to_string(k) + " is already answered");
        if (k > s.cursor() || !s.current_served) {
            throw conflict("step " + std::to_string(k) + " has not been served (cursor " + std::to_string(s.cursor()) +
                           ")");
        }
        append(st, {{"event", "answer"}, {"session_id", session_id}, {"step", k}, {"choice", to_string(*choice)}});
        s.answers.push_back(*choice);
        s.current_served = false;
    }

    /// Finalizes a fully answered session. Repeating the call returns the
    /// stored outcome.
    nlohmann::json complete(const std::string& session_id) {
        std::lock_guard lock(mu_);
        auto [st, s] = session(session_id);
        if (s.status == SessionStatus::in_progress) {
            if (s.cursor() < s.total_steps()) {
                throw conflict(std::to_string(s.cursor()) + " of " + std::to_string(s.total_steps()) +
                               " steps answered");
            }
            finalize(st, s);
            nlohmann::json ev = {{"event", "complete"}, {"session_id", session_id},
                                 {"status", std::string(to_string(s.status))}};
            if (s.result) ev["ranking"] = s.result->ranking.order;
            append(st, ev);
            if (st.count(SessionStatus::accepted) >= st.definition.required_sessions && !st.closed) {
                st.closed = true;
                append(st, {{"event", "close"}});
            }
            write_snapshot(st);
        }
        nlohmann::json j = {{"status", std::string(to_string(s.status))}};
        if (s.result) j["ranking"] = *s.result;
        return j;
    }

    /// Aggregate over accepted sessions. Without accepted sessions this is a
    /// conflict unless `allow_empty` is set.
    nlohmann::json results(const std::string& study_id, bool allow_empty) {
        std::lock_guard lock(mu_);
        const auto& st = study(study_id);
        std::vector<StudySession> accepted;
        std::vector<RankingOf> rankings;
        nlohmann::json per_user = nlohmann::json::array();
        for (const auto& id : st.session_order) {
            const auto& s = st.sessions.at(id);
            if (s.status != SessionStatus::accepted) continue;
            accepted.push_back({s.schedule.schedule, s.as_answers(st.definition.video_id)});
            rankings.push_back(s.result->ranking);
            per_user.push_back({{"session_id", s.session_id},
                                {"user_id", s.user_id},
                                {"ranking", s.result->ranking.order},
                                {"had_cycles", s.result->had_cycles},
                                {"precision", nullptr}});
        }
        if (accepted.empty() && !allow_empty) {
            throw conflict("study '" + study_id + "' has no accepted sessions (pass allow_empty=1)");
        }
        nlohmann::json j = {{"study_id", study_id},
                            {"video_id", st.definition.video_id},
                            {"n_accepted", accepted.size()},
                            {"n_rejected", st.count(SessionStatus::rejected_control)},
                            {"n_in_progress", st.count(SessionStatus::in_progress)},
                            {"per_user", per_user},
                            {"precision", nullptr},
                            {"krippendorff_alpha", nullptr},
                            {"alpha_metric", "ordinal"}};
        if (st.definition.ground_truth && !accepted.empty()) {
            const auto eval = evaluate_users(accepted, *st.definition.ground_truth);
            nlohmann::json summary;
            for (std::size_t i = 0; i < kUserKs.size(); ++i) {
                const auto key = std::to_string(kUserKs[i]);
                summary[key] = {{"mean", eval.summary[i].mean}, {"sd", eval.summary[i].sd}};
                for (std::size_t u = 0; u < eval.per_user.size(); ++u) {
                    j["per_user"][u]["precision"][key] = eval.per_user[u].precision[i];
                }
            }
            j["precision"] = summary;
            j["gt_ranking"] = ranking_from_scores(bin_curve(*st.definition.ground_truth, kStudyShots).scores).order;
        }
        if (rankings.size() >= 2) {
            try {
                j["krippendorff_alpha"] = krippendorff_alpha(rank_position_matrix(rankings), AlphaMetric::ordinal);
            } catch (const UndefinedAlpha&) {
            }
        }
        return j;
    }

    std::vector<std::string> study_ids() const {
        std::lock_guard lock(mu_);
        std::vector<std::string> ids;
        for (const auto& [id, _] : studies_) ids.push_back(id);
        return ids;
    }

private:
    std::filesystem::path study_dir(const std::string& id) const { return cfg_.data_dir / "studies" / id; }

    StudyState& study(const std::string& id) {
        const auto it = studies_.find(id);
        if (it == studies_.end()) throw not_found("no study '" + id + "'");
        return it->second;
    }

    std::pair<StudyState&, SessionState&> session(const std::string& id) {
        const auto it = session_index_.find(id);
        if (it == session_index_.end()) throw not_found("no session '" + id + "'");
        auto& st = studies_.at(it->second);
        return {st, st.sessions.at(id)};
    }

    nlohmann::json unresolved_urls(const ClipManifest& clips) const {
        nlohmann::json out = nlohmann::json::array();
        if (cfg_.clip_dir.empty()) return out;
        const auto prefix = cfg_.clip_url_prefix + "/";
        auto check = [&](const std::string& url) {
            if (!url.starts_with(prefix)) return;
            if (!std::filesystem::is_regular_file(cfg_.clip_dir / url.substr(prefix.size()))) out.push_back(url);
        };
        for (const auto& u : clips.shot_clips) check(u);
        check(clips.full_video);
        check(clips.control_clip);
        return out;
    }

    void finalize(const StudyState& st, SessionState& s) {
        if (control_passed(s.schedule.schedule, s.answers)) {
            s.status = SessionStatus::accepted;
            s.result = reconstruct_ranking(s.as_answers(st.definition.video_id), s.schedule.schedule);
        } else {
            s.status = SessionStatus::rejected_control;
            s.result.reset();
        }
    }

    void append(StudyState& st, const nlohmann::json& event) {
        std::ofstream out(study_dir(st.definition.study_id) / "log.jsonl", std::ios::app | std::ios::binary);
        out << event.dump() << '\n';
        out.flush();
        if (!out) throw Error("cannot append to the log of study '" + st.definition.study_id + "'");
        ++st.log_lines;
    }

    void write_snapshot(const StudyState& st) const {
        nlohmann::json sessions = nlohmann::json::array();
        for (const auto& id : st.session_order) sessions.push_back(detail::session_snapshot(st.sessions.at(id)));
        const nlohmann::json j = {{"log_lines", st.log_lines},
                                  {"definition", st.definition},
                                  {"seed", st.seed},
                                  {"sessions_created", st.sessions_created},
                                  {"closed", st.closed},
                                  {"sessions", sessions}};
        const auto path = study_dir(st.definition.study_id) / "snapshot.json";
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out << j.dump(1) << '\n';
            if (!out) throw Error("cannot write snapshot " + path.string());
        }
        std::filesystem::rename(tmp, path);
    }

    void add_session(StudyState& st, const nlohmann::json& ev) {
        SessionState s;
        s.session_id = ev.at("session_id").get<std::string>();
        s.user_id = ev.at("user_id").get<std::string>();
        s.seed = ev.at("seed").get<std::uint64_t>();
        s.schedule = permute_schedule(mergesort_schedule(kStudyShots), ev.at("permutation").get<std::vector<std::size_t>>(),
                                      ev.at("control_position").get<std::size_t>());
        if (ev.contains("answers")) {
            for (const auto& a : ev.at("answers")) s.answers.push_back(parse_choice(a.get<std::string>()));
        }
        if (ev.contains("status")) s.status = detail::parse_status(ev.at("status").get<std::string>());
        if (ev.contains("ranking")) {
            finalize(st, s);
            if (!s.result || s.result->ranking.order != ev.at("ranking").get<std::vector<std::size_t>>()) {
                throw FormatError("stored ranking of session '" + s.session_id + "' does not match its answers");
            }
        }
        st.session_order.push_back(s.session_id);
        session_index_[s.session_id] = st.definition.study_id;
        st.sessions.emplace(s.session_id, std::move(s));
    }

    void replay(StudyState& st, const nlohmann::json& ev) {
        const auto type = ev.at("event").get<std::string>();
        if (type == "session") {
            add_session(st, ev);
            st.sessions_created = std::max(st.sessions_created, st.session_order.size());
        } else if (type == "answer") {
            auto& s = st.sessions.at(ev.at("session_id").get<std::string>());
            if (ev.at("step").get<std::size_t>() != s.cursor()) throw FormatError("answer out of order in log");
            s.answers.push_back(parse_choice(ev.at("choice").get<std::string>()));
        } else if (type == "complete") {
            auto& s = st.sessions.at(ev.at("session_id").get<std::string>());
            finalize(st, s);
            if (to_string(s.status) != ev.at("status").get<std::string>()) {
                throw FormatError("logged outcome of session '" + s.session_id + "' does not match its answers");
            }
        } else if (type == "close") {
            st.closed = true;
        } else if (type != "study") {
            throw FormatError("unknown log event '" + type + "'");
        }
    }

    void load_study(const std::filesystem::path& dir) {
        const auto log_path = dir / "log.jsonl";
        std::ifstream in(log_path, std::ios::binary);
        if (!in) return;
        std::vector<std::string> lines;
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::size_t start = 0;
        while (start < text.size()) {
            const auto nl = text.find('\n', start);
            if (nl == std::string::npos) break;  // torn final write: never acknowledged, drop it
            lines.push_back(text.substr(start, nl - start));
            start = nl + 1;
        }
        if (start < text.size()) std::filesystem::resize_file(log_path, start);
        if (lines.empty()) return;

        StudyState st;
        std::size_t from = 0;
        try {
            const auto snap_path = dir / "snapshot.json";
            if (std::filesystem::exists(snap_path)) {
                const auto snap = detail::read_json_file(snap_path);
                st.definition = study_definition_from_json(snap.at("definition"));
                st.seed = snap.at("seed").get<std::uint64_t>();
                st.closed = snap.at("closed").get<bool>();
                for (const auto& s : snap.at("sessions")) add_session(st, s);
                st.sessions_created = snap.at("sessions_created").get<std::size_t>();
                from = snap.at("log_lines").get<std::size_t>();
                if (from > lines.size()) throw FormatError("snapshot is ahead of the log");
            } else {
                const auto first = nlohmann::json::parse(lines[0]);
                if (first.at("event") != "study") throw FormatError("log does not start with a study event");
                st.definition = study_definition_from_json(first.at("definition"));
                st.seed = st.definition.seed.value_or(0);
            }
            for (std::size_t i = from; i < lines.size(); ++i) replay(st, nlohmann::json::parse(lines[i]));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(dir.string() + ": corrupt study log: " + e.what());
        } catch (const ServiceError& e) {
            throw FormatError(dir.string() + ": corrupt study definition: " + e.what());
        }
        st.log_lines = lines.size();
        const auto id = st.definition.study_id;
        studies_.emplace(id, std::move(st));
    }

    void load_all() {
        const auto root = cfg_.data_dir / "studies";
        std::filesystem::create_directories(root);
        std::vector<std::filesystem::path> dirs;
        for (const auto& e : std::filesystem::directory_iterator(root)) {
            if (e.is_directory()) dirs.push_back(e.path());
        }
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) load_study(d);
    }

    ServiceConfig cfg_;
    mutable std::mutex mu_;
    std::map<std::string, StudyState> studies_;
    std::map<std::string, std::string> session_index_;
};

}  // namespace mrp
