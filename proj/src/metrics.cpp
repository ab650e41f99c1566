#include "tabdeco/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "tabdeco/errors.hpp"

namespace tabdeco {

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw DataError("auroc: " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(labels.size()) + " labels");
    }
    const size_t n = scores.size();
    int64_t positives = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) {
            throw DataError("auroc: labels must be 0 or 1");
        }
        positives += y;
    }
    const int64_t negatives = static_cast<int64_t>(n) - positives;
    if (positives == 0 || negatives == 0) {
        throw DataError("auroc: undefined metric, labels contain a single class");
    }

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // 1-based mid-ranks over tied score runs
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) {
            ++j;
        }
        const double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }

    const double p = static_cast<double>(positives);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

double accuracy(const std::vector<float>& logits, int64_t n_classes,
                const std::vector<int64_t>& labels) {
    if (labels.empty()) {
        throw DataError("accuracy: empty input");
    }
    if (logits.size() != labels.size() * static_cast<size_t>(n_classes)) {
        throw DataError("accuracy: logits size does not match labels x classes");
    }
    int64_t correct = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        const float* row = logits.data() + static_cast<int64_t>(i) * n_classes;
        int64_t best = 0;
        for (int64_t j = 1; j < n_classes; ++j) {
            if (row[j] > row[best]) {
                best = j;
            }
        }
        if (best == labels[i]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace tabdeco
