// Library walkthrough: one simulated participant compares the 10 shots of a
// video, their ranking is reconstructed and scored against the ground truth.

#include <cstdio>

#include "mrp/study.hpp"

int main() {
    using namespace mrp;

    std::vector<double> curve(kCurveLength);
    for (std::size_t i = 0; i < curve.size(); ++i) curve[i] = 0.5 + 0.5 * std::sin(0.13 * static_cast<double>(i));
    const ReplayCurve gt(curve);
    const auto shots = bin_curve(gt, kStudyShots).scores;

    const auto session = simulate_session(shots, parse_policy("noisy:0.1"), 42, "demo");
    std::printf("schedule: %zu comparisons + 1 attention check at step %zu\n", session.schedule.pairs.size(),
                session.schedule.control_position);

    const auto rec = reconstruct_ranking(session.answers, session.schedule);
    const auto truth = ranking_from_scores(shots);
    std::printf("reconstructed:");
    for (auto s : rec.ranking.order) std::printf(" %zu", s);
    std::printf("\nground truth: ");
    for (auto s : truth.order) std::printf(" %zu", s);
    std::printf("\ncycles: %s\n", rec.had_cycles ? "yes" : "no");
    for (std::size_t k : kUserKs) std::printf("precision@%zu = %.2f\n", k, precision_at_k(rec.ranking, truth, k));
}
