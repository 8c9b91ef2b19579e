#pragma once

// Pairwise-comparison user study: MergeSort comparison schedules, per-user
// permutation with an attention check, and graph-based ranking
// reconstruction.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mrp/common.hpp"
#include "mrp/metrics.hpp"
#include "mrp/resample.hpp"
#include "mrp/rng.hpp"
#include "mrp/types.hpp"

namespace mrp {

/// The session failed its attention check and is excluded.
struct RejectedSession : Error {
    using Error::Error;
};

/// No accepted session to aggregate.
struct EmptyReport : Error {
    using Error::Error;
};

inline constexpr std::size_t kStudyShots = 10;

struct ShotPair {
    std::size_t left;
    std::size_t right;

    friend bool operator==(const ShotPair&, const ShotPair&) = default;
};

enum class Choice { left, right, control };

inline std::string_view to_string(Choice c) {
    switch (c) {
        case Choice::left: return "left";
        case Choice::right: return "right";
        case Choice::control: return "control";
    }
    return "?";
}

inline Choice parse_choice(std::string_view s) {
    if (s == "left") return Choice::left;
    if (s == "right") return Choice::right;
    if (s == "control") return Choice::control;
    throw ArgumentError("choice must be left, right or control, got '" + std::string(s) + "'");
}

/// Comparison trace of top-down MergeSort (left half gets the ceiling) on the
/// identity sequence 0..n-1, in execution order.
inline std::vector<ShotPair> mergesort_schedule(std::size_t n = kStudyShots) {
    if (n < 2 || n > 64) throw ArgumentError("schedule size must lie in [2, 64], got " + std::to_string(n));
    std::vector<ShotPair> trace;
    std::vector<std::size_t> seq(n), buf(n);
    std::iota(seq.begin(), seq.end(), std::size_t{0});
    std::function<void(std::size_t, std::size_t)> sort = [&](std::size_t lo, std::size_t hi) {
        if (hi - lo < 2) return;
        const std::size_t mid = lo + (hi - lo + 1) / 2;
        sort(lo, mid);
        sort(mid, hi);
        std::size_t i = lo, j = mid, k = lo;
        while (i < mid && j < hi) {
            trace.push_back({seq[i], seq[j]});
            buf[k++] = seq[j] < seq[i] ? seq[j++] : seq[i++];
        }
        while (i < mid) buf[k++] = seq[i++];
        while (j < hi) buf[k++] = seq[j++];
        std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
                  seq.begin() + static_cast<std::ptrdiff_t>(lo));
    };
    sort(0, n);
    return trace;
}

/// A participant's comparison sequence: the real pairs in shot indices plus
/// one control entry.
struct ComparisonSchedule {
    std::size_t n = kStudyShots;
    std::vector<ShotPair> pairs;
    std::size_t control_position = 0;

    std::size_t total_steps() const { return pairs.size() + 1; }
    bool is_control(std::size_t step) const { return step == control_position; }

    /// Real pair served at `step`; the control step has none.
    std::optional<ShotPair> pair_at(std::size_t step) const {
        if (step >= total_steps()) throw ArgumentError("step " + std::to_string(step) + " out of range");
        if (step == control_position) return std::nullopt;
        return pairs[step < control_position ? step : step - 1];
    }

    friend bool operator==(const ComparisonSchedule&, const ComparisonSchedule&) = default;
};

struct PermutedSchedule {
    ComparisonSchedule schedule;
    std::vector<std::size_t> permutation;  // base index -> shot
};

inline std::size_t schedule_size(std::span<const ShotPair> base) {
    if (base.empty()) throw ArgumentError("empty base schedule");
    std::size_t n = 0;
    for (const auto& p : base) {
        if (p.left == p.right) throw ArgumentError("schedule pair compares shot " + std::to_string(p.left) + " with itself");
        n = std::max({n, p.left + 1, p.right + 1});
    }
    return n;
}

inline bool is_permutation_of(std::span<const std::size_t> pi, std::size_t n) {
    if (pi.size() != n) return false;
    std::vector<bool> seen(n, false);
    for (auto v : pi) {
        if (v >= n || seen[v]) return false;
        seen[v] = true;
    }
    return true;
}

inline std::vector<std::size_t> invert_permutation(std::span<const std::size_t> pi) {
    std::vector<std::size_t> inv(pi.size());
    for (std::size_t i = 0; i < pi.size(); ++i) inv[pi[i]] = i;
    return inv;
}

inline PermutedSchedule permute_schedule(std::span<const ShotPair> base, std::vector<std::size_t> pi,
                                         std::size_t control_position) {
    const std::size_t n = schedule_size(base);
    if (!is_permutation_of(pi, n)) throw ArgumentError("permutation is not a bijection on " + std::to_string(n) + " shots");
    if (control_position > base.size()) throw ArgumentError("control position out of range");
    PermutedSchedule out;
    out.schedule.n = n;
    out.schedule.control_position = control_position;
    for (const auto& p : base) out.schedule.pairs.push_back({pi[p.left], pi[p.right]});
    out.permutation = std::move(pi);
    return out;
}

/// Seeded uniform permutation and uniform control position.
inline PermutedSchedule permute_schedule(std::span<const ShotPair> base, std::uint64_t seed) {
    const std::size_t n = schedule_size(base);
    Rng rng(seed);
    std::vector<std::size_t> pi(n);
    std::iota(pi.begin(), pi.end(), std::size_t{0});
    std::shuffle(pi.begin(), pi.end(), rng);
    std::uniform_int_distribution<std::size_t> pos(0, base.size());
    return permute_schedule(base, std::move(pi), pos(rng));
}

struct SessionAnswers {
    std::string session_id;
    std::string user_id;
    std::string video_id;
    std::vector<std::size_t> permutation;
    std::vector<Choice> answers;
    bool passed_control = false;
};

inline bool control_passed(const ComparisonSchedule& schedule, std::span<const Choice> answers) {
    return schedule.control_position < answers.size() && answers[schedule.control_position] == Choice::control;
}

struct ReconstructedRanking {
    RankingOf ranking;  // over shots, best-first
    bool had_cycles = false;
    std::vector<std::vector<std::size_t>> cycle_groups;  // shot sets, each sorted
    std::vector<std::size_t> wins;                       // per shot

    friend bool operator==(const ReconstructedRanking&, const ReconstructedRanking&) = default;
};

namespace detail {

struct Tarjan {
    const std::vector<std::vector<std::size_t>>& adj;
    std::vector<std::size_t> index, low, comp;
    std::vector<bool> on_stack;
    std::vector<std::size_t> stack;
    std::size_t counter = 0, components = 0;
    static constexpr std::size_t unset = static_cast<std::size_t>(-1);

    explicit Tarjan(const std::vector<std::vector<std::size_t>>& g)
        : adj(g), index(g.size(), unset), low(g.size(), 0), comp(g.size(), unset), on_stack(g.size(), false) {
        for (std::size_t v = 0; v < g.size(); ++v) {
            if (index[v] == unset) visit(v);
        }
    }

    void visit(std::size_t v) {
        index[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
        for (auto w : adj[v]) {
            if (index[w] == unset) {
                visit(w);
                low[v] = std::min(low[v], low[w]);
            } else if (on_stack[w]) {
                low[v] = std::min(low[v], index[w]);
            }
        }
        if (low[v] == index[v]) {
            std::size_t w;
            do {
                w = stack.back();
                stack.pop_back();
                on_stack[w] = false;
                comp[w] = components;
            } while (w != v);
            ++components;
        }
    }
};

}  // namespace detail

/// Winner -> loser graph over the answers, mapped back through the session's
/// permutation; strongly connected components are condensed and emitted in a
/// depth-first topological order (every component after all components that
/// beat it). Ties go to more wins, then to the lower base index, so the result
/// does not depend on which permutation the participant saw.
inline ReconstructedRanking reconstruct_ranking(const SessionAnswers& session, const ComparisonSchedule& schedule) {
    const std::size_t n = schedule.n;
    if (session.answers.size() != schedule.total_steps()) {
        throw ArgumentError("expected " + std::to_string(schedule.total_steps()) + " answers, got " +
                            std::to_string(session.answers.size()));
    }
    if (!is_permutation_of(session.permutation, n)) {
        throw ArgumentError("session permutation is not a bijection on " + std::to_string(n) + " shots");
    }
    if (!control_passed(schedule, session.answers)) {
        throw RejectedSession("session '" + session.session_id + "' failed the attention check");
    }
    const auto inv = invert_permutation(session.permutation);

    std::vector<std::vector<std::size_t>> beats(n);  // base space
    std::vector<std::size_t> wins(n, 0);
    for (std::size_t step = 0; step < schedule.total_steps(); ++step) {
        const auto pair = schedule.pair_at(step);
        if (!pair) continue;
        if (pair->left >= n || pair->right >= n) throw ArgumentError("schedule pair out of range");
        const Choice c = session.answers[step];
        if (c == Choice::control) continue;  // no preference recorded
        const std::size_t a = inv[pair->left], b = inv[pair->right];
        const std::size_t winner = c == Choice::left ? a : b, loser = c == Choice::left ? b : a;
        beats[winner].push_back(loser);
        ++wins[winner];
    }

    const detail::Tarjan scc(beats);
    const std::size_t nc = scc.components;
    std::vector<std::vector<std::size_t>> members(nc), preds(nc);
    for (std::size_t v = 0; v < n; ++v) members[scc.comp[v]].push_back(v);
    for (std::size_t v = 0; v < n; ++v) {
        for (auto w : beats[v]) {
            if (scc.comp[v] != scc.comp[w]) preds[scc.comp[w]].push_back(scc.comp[v]);
        }
    }
    auto before = [&](std::size_t a, std::size_t b) { return wins[a] != wins[b] ? wins[a] > wins[b] : a < b; };
    std::vector<std::size_t> lead(nc);
    for (std::size_t c = 0; c < nc; ++c) {
        std::sort(members[c].begin(), members[c].end(), before);
        lead[c] = members[c].front();
    }
    auto comp_before = [&](std::size_t a, std::size_t b) { return before(lead[a], lead[b]); };
    for (auto& p : preds) {
        std::sort(p.begin(), p.end(), comp_before);
        p.erase(std::unique(p.begin(), p.end()), p.end());
    }

    std::vector<std::size_t> roots(nc);
    std::iota(roots.begin(), roots.end(), std::size_t{0});
    std::sort(roots.begin(), roots.end(), comp_before);
    std::vector<bool> done(nc, false);
    std::vector<std::size_t> base_order;
    std::function<void(std::size_t)> emit = [&](std::size_t c) {
        if (done[c]) return;
        done[c] = true;
        for (auto p : preds[c]) emit(p);
        base_order.insert(base_order.end(), members[c].begin(), members[c].end());
    };
    for (auto c : roots) emit(c);

    ReconstructedRanking out;
    out.wins.assign(n, 0);
    for (std::size_t v = 0; v < n; ++v) out.wins[session.permutation[v]] = wins[v];
    for (auto v : base_order) out.ranking.order.push_back(session.permutation[v]);
    for (std::size_t c = 0; c < nc; ++c) {
        if (members[c].size() < 2) continue;
        std::vector<std::size_t> group;
        for (auto v : members[c]) group.push_back(session.permutation[v]);
        std::sort(group.begin(), group.end());
        out.cycle_groups.push_back(std::move(group));
    }
    std::sort(out.cycle_groups.begin(), out.cycle_groups.end());
    out.had_cycles = !out.cycle_groups.empty();
    return out;
}

struct StudySession {
    ComparisonSchedule schedule;
    SessionAnswers answers;
};

struct UserPrecision {
    std::string session_id;
    std::array<double, 3> precision{};  // @1, @3, @5
};

struct UserEvaluation {
    std::vector<UserPrecision> per_user;
    std::array<Summary, 3> summary{};
    std::size_t accepted = 0;
    std::size_t rejected = 0;
};

inline constexpr std::array<std::size_t, 3> kUserKs = {1, 3, 5};

/// Precision@{1,3,5} of each accepted session's ranking against the ground
/// truth binned to the session's shot count.
inline UserEvaluation evaluate_users(std::span<const StudySession> sessions, const ReplayCurve& gt) {
    UserEvaluation out;
    std::array<std::vector<double>, 3> columns;
    for (const auto& s : sessions) {
        if (!control_passed(s.schedule, s.answers.answers)) {
            ++out.rejected;
            continue;
        }
        const auto rec = reconstruct_ranking(s.answers, s.schedule);
        const auto gt_rank = ranking_from_scores(bin_curve(gt, s.schedule.n).scores);
        UserPrecision up{s.answers.session_id, {}};
        for (std::size_t i = 0; i < kUserKs.size(); ++i) {
            up.precision[i] = precision_at_k(rec.ranking, gt_rank, kUserKs[i]);
            columns[i].push_back(up.precision[i]);
        }
        out.per_user.push_back(std::move(up));
        ++out.accepted;
    }
    if (out.accepted == 0) throw EmptyReport("no accepted session to evaluate");
    for (std::size_t i = 0; i < 3; ++i) out.summary[i] = summarize(columns[i]);
    return out;
}

/// Raters x shots matrix of 1-based rank positions, one row per ranking.
inline Matrix rank_position_matrix(std::span<const RankingOf> rankings) {
    if (rankings.empty()) throw ArgumentError("no rankings");
    const std::size_t n = rankings.front().size();
    Matrix m(static_cast<Eigen::Index>(rankings.size()), static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < rankings.size(); ++r) {
        if (rankings[r].size() != n) throw ArgumentError("rankings differ in length");
        const auto pos = rankings[r].positions();
        for (std::size_t i = 0; i < n; ++i) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = static_cast<double>(pos[i] + 1);
        }
    }
    return m;
}

// Simulated participants.

struct AnswerPolicy {
    enum class Kind { random, gt, noisy } kind = Kind::random;
    double flip = 0.0;          // noisy: probability of inverting the truthful answer
    double control_miss = 0.0;  // probability of failing the attention check
};

inline AnswerPolicy parse_policy(std::string_view spec) {
    AnswerPolicy p;
    if (spec == "random") {
        p.kind = AnswerPolicy::Kind::random;
    } else if (spec == "gt") {
        p.kind = AnswerPolicy::Kind::gt;
    } else if (spec.starts_with("noisy:")) {
        p.kind = AnswerPolicy::Kind::noisy;
        const std::string rest(spec.substr(6));
        std::size_t used = 0;
        try {
            p.flip = std::stod(rest, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != rest.size() || rest.empty() || !(p.flip >= 0.0 && p.flip <= 1.0)) {
            throw ArgumentError("noisy policy needs a probability in [0, 1], got '" + rest + "'");
        }
    } else {
        throw ArgumentError("policy must be random, gt or noisy:p, got '" + std::string(spec) + "'");
    }
    return p;
}

/// Answers to every step of `schedule`; `shot_scores` (one per shot) drive the
/// gt and noisy policies, higher score wins, ties go left.
inline std::vector<Choice> simulate_answers(const ComparisonSchedule& schedule, std::span<const double> shot_scores,
                                            const AnswerPolicy& policy, Rng& rng) {
    if (policy.kind != AnswerPolicy::Kind::random && shot_scores.size() != schedule.n) {
        throw ArgumentError("policy needs " + std::to_string(schedule.n) + " shot scores, got " +
                            std::to_string(shot_scores.size()));
    }
    std::vector<Choice> out;
    out.reserve(schedule.total_steps());
    for (std::size_t step = 0; step < schedule.total_steps(); ++step) {
        const auto pair = schedule.pair_at(step);
        if (!pair) {
            const bool miss = policy.control_miss > 0.0 && uniform01(rng) < policy.control_miss;
            out.push_back(miss ? (uniform01(rng) < 0.5 ? Choice::left : Choice::right) : Choice::control);
            continue;
        }
        bool left_wins;
        if (policy.kind == AnswerPolicy::Kind::random) {
            left_wins = uniform01(rng) < 0.5;
        } else {
            left_wins = shot_scores[pair->left] >= shot_scores[pair->right];
            if (policy.kind == AnswerPolicy::Kind::noisy && uniform01(rng) < policy.flip) left_wins = !left_wins;
        }
        out.push_back(left_wins ? Choice::left : Choice::right);
    }
    return out;
}

/// One simulated participant on a fresh permutation drawn from `seed`.
inline StudySession simulate_session(std::span<const double> shot_scores, const AnswerPolicy& policy,
                                     std::uint64_t seed, std::string video_id = "", std::size_t n = kStudyShots) {
    const auto base = mergesort_schedule(n);
    auto permuted = permute_schedule(base, derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    StudySession s;
    s.schedule = std::move(permuted.schedule);
    s.answers.session_id = "sim-" + std::to_string(seed);
    s.answers.user_id = s.answers.session_id;
    s.answers.video_id = std::move(video_id);
    s.answers.permutation = std::move(permuted.permutation);
    s.answers.answers = simulate_answers(s.schedule, shot_scores, policy, rng);
    s.answers.passed_control = control_passed(s.schedule, s.answers.answers);
    return s;
}

// JSON

inline void to_json(nlohmann::json& j, const ShotPair& p) { j = nlohmann::json::array({p.left, p.right}); }

inline void from_json(const nlohmann::json& j, ShotPair& p) {
    if (!j.is_array() || j.size() != 2) throw FormatError("pair must be a 2-element array");
    p.left = j.at(0).get<std::size_t>();
    p.right = j.at(1).get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const RankingOf& r) { j = r.order; }

inline void from_json(const nlohmann::json& j, RankingOf& r) {
    r.order = j.get<std::vector<std::size_t>>();
    if (!r.is_permutation()) throw FormatError("ranking is not a permutation");
}

inline void to_json(nlohmann::json& j, const ReconstructedRanking& r) {
    j = {{"ranking", r.ranking}, {"had_cycles", r.had_cycles}, {"cycle_groups", r.cycle_groups}, {"wins", r.wins}};
}

inline void to_json(nlohmann::json& j, const StudySession& s) {
    std::vector<std::string> answers;
    for (auto c : s.answers.answers) answers.emplace_back(to_string(c));
    j = {{"session_id", s.answers.session_id},
         {"user_id", s.answers.user_id},
         {"video_id", s.answers.video_id},
         {"n", s.schedule.n},
         {"permutation", s.answers.permutation},
         {"pairs", s.schedule.pairs},
         {"control_position", s.schedule.control_position},
         {"answers", answers},
         {"passed_control", control_passed(s.schedule, s.answers.answers)}};
}

inline void from_json(const nlohmann::json& j, StudySession& s) {
    try {
        s.answers.session_id = j.value("session_id", "");
        s.answers.user_id = j.value("user_id", "");
        s.answers.video_id = j.value("video_id", "");
        s.schedule.n = j.value("n", kStudyShots);
        s.schedule.pairs = j.at("pairs").get<std::vector<ShotPair>>();
        s.schedule.control_position = j.at("control_position").get<std::size_t>();
        s.answers.permutation = j.at("permutation").get<std::vector<std::size_t>>();
        s.answers.answers.clear();
        for (const auto& a : j.at("answers")) s.answers.answers.push_back(parse_choice(a.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed session: ") + e.what());
    } catch (const ArgumentError& e) {
        throw FormatError(std::string("malformed session: ") + e.what());
    }
    s.answers.passed_control = control_passed(s.schedule, s.answers.answers);
}

}  // namespace mrp
