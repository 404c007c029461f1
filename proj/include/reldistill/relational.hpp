#pragma once

// Dimension-agnostic relational distillation: per-batch cosine similarity
// structure of each teacher is turned into row-wise softmax distributions
// over the other samples, and the student is pulled toward them with a KL
// divergence. Nothing here depends on the teachers' embedding widths.

#include "reldistill/embedding.hpp"

#include <span>
#include <vector>

namespace rd::relational {

inline constexpr double kEpsilonNorm = 1e-12;

enum class Reduction {
    mean_anchors,  // divide the per-teacher anchor sum by N
    sum_anchors,   // literal sum over anchors
};

// Row-wise l2 normalization. Throws ZeroVectorError if any row norm is
// <= kEpsilonNorm.
Matrix l2_normalize(const Matrix& embeddings);
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& embeddings);

// S = Ê Êᵀ. When assume_normalized is false the rows are normalized first.
Matrix cosine_similarity_matrix(const Matrix& embeddings, bool assume_normalized = false);

// Row i: softmax over { S_ij / tau : j != i }, diagonal exactly 0.
Matrix relational_distribution(const Matrix& similarity, double tau);

struct DistillationLoss {
    double total = 0.0;               // (1/K) Σ_k component_k
    std::vector<double> per_teacher;  // Σ_i KL(p_k(.|i) || q(.|i)), after anchor reduction
};

// Multi-teacher KL distillation loss. All matrices share the row count N
// (N >= 2); teacher widths are arbitrary. When `student_grad` is non-null it
// receives dL/d(student) with the same shape as `student`.
DistillationLoss distillation_loss(const Matrix& student, std::span<const Matrix> teachers,
                                   double tau, Reduction reduction = Reduction::mean_anchors,
                                   Matrix* student_grad = nullptr);

// Same, with sample-id alignment checks (ShapeMismatchError on any mismatch).
DistillationLoss distillation_loss(const EmbeddingMatrix& student,
                                   std::span<const EmbeddingMatrix> teachers, double tau,
                                   Reduction reduction = Reduction::mean_anchors);

// Element-wise loop implementation of the same quantity. Shares no code
// with distillation_loss; it exists to cross-check it.
double oracle_distillation_loss(const EmbeddingMatrix& student,
                                std::span<const EmbeddingMatrix> teachers, double tau,
                                Reduction reduction = Reduction::mean_anchors);

// Backpropagates dL/dÊ through row normalization given the raw rows and
// their normalized counterparts.
Matrix normalize_backward(const Matrix& raw, const Matrix& normalized, const Matrix& grad_normalized);

}  // namespace rd::relational
