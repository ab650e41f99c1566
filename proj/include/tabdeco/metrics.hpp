#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tabdeco {

struct MetricsReport {
    std::string metric_name;
    double value = 0.0;
    int64_t n_samples = 0;
    int64_t positive_count = 0;  // binary only
    double mean_loss = 0.0;
};

// Rank-based AUROC with mid-ranks for tied scores: equals the probability
// that a random positive outscores a random negative, ties counting 1/2.
// Requires at least one positive and one negative label.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Fraction of rows whose argmax logit equals the label; argmax ties break
// toward the lowest class index. logits is row-major (n x n_classes).
double accuracy(const std::vector<float>& logits, int64_t n_classes,
                const std::vector<int64_t>& labels);

}  // namespace tabdeco
