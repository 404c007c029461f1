#pragma once

// Frozen-embedding quality probes: multinomial logistic regression and
// cosine k-nearest neighbours.

#include "reldistill/embedding.hpp"

#include <span>
#include <utility>
#include <vector>

namespace rd::probe {

struct ClassificationMetrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
};

// F1 per label over the union of true and predicted labels (zero when a
// label has no true and no predicted members). Weighted F1 weights by true
// support.
ClassificationMetrics classification_metrics(std::span<const int> truth, std::span<const int> predicted);

struct LinearProbeOptions {
    double l2 = 1e-4;
    int max_steps = 1000;
    double grad_tol = 1e-6;
};

// Fits on standardized training features; DegenerateLabelsError with fewer
// than two training classes.
std::vector<int> linear_probe_predict(const Matrix& train_emb, std::span<const int> train_labels,
                                      const Matrix& query_emb, const LinearProbeOptions& options = {});
ClassificationMetrics eval_linear_probe(const Matrix& train_emb, std::span<const int> train_labels,
                                        const Matrix& val_emb, std::span<const int> val_labels,
                                        const LinearProbeOptions& options = {});

// Cosine distance; equal distances are ordered by training row. Vote ties go
// to the smallest summed distance, then the smallest class id.
std::vector<int> knn_predict(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& query_emb,
                             int k);
ClassificationMetrics eval_knn(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& val_emb,
                               std::span<const int> val_labels, int k);

struct KnnSweep {
    int best_k = 0;
    ClassificationMetrics best;
    std::vector<std::pair<int, ClassificationMetrics>> all;
};

// Best by accuracy; ties keep the smaller k.
KnnSweep eval_knn_sweep(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& val_emb,
                        std::span<const int> val_labels, std::span<const int> ks);

}  // namespace rd::probe
