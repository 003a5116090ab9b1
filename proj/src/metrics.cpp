#include "deskseg/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "deskseg/errors.hpp"

namespace deskseg {

double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("dice mask lengths disagree: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    std::size_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > 1 || b[i] > 1) throw ValueError("dice masks must be binary");
        na += a[i];
        nb += b[i];
        inter += a[i] & b[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double roc_auc(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) {
        throw ShapeError("roc_auc needs one label per score");
    }
    std::size_t n_pos = 0;
    for (const auto l : labels) {
        if (l > 1) throw ValueError("roc_auc labels must be binary");
        n_pos += l;
    }
    const std::size_t n = scores.size();
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw MetricError("roc_auc needs both classes, got " + std::to_string(n_pos) +
                          " positives out of " + std::to_string(n));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });
    // average rank over tie groups, ranks are 1-based
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t t = i; t <= j; ++t) {
            if (labels[order[t]]) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos);
    const double nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

}  // namespace deskseg
