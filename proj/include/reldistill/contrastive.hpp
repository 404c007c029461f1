#pragma once

// Supervised contrastive loss, the instance-level (two-view) contrastive
// loss, the cross-entropy head used by the purely supervised strategies, and
// the lambda-blended Stage I objective for the six training strategies.

#include "reldistill/embedding.hpp"
#include "reldistill/relational.hpp"

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rd::contrastive {

enum class Strategy { sup, sup_distill, unsup, unsup_distill, supcon, supcon_distill };

inline constexpr std::array<Strategy, 6> kAllStrategies = {
    Strategy::sup,    Strategy::sup_distill,    Strategy::unsup,
    Strategy::unsup_distill, Strategy::supcon, Strategy::supcon_distill};

std::string_view to_string(Strategy s) noexcept;
// Accepts the hyphenated names ("supcon-distill"); ConfigError otherwise.
Strategy parse_strategy(std::string_view name);

bool uses_distillation(Strategy s) noexcept;
bool uses_labels(Strategy s) noexcept;
bool uses_two_views(Strategy s) noexcept;
bool uses_classifier_head(Strategy s) noexcept;

enum class AnchorReduction {
    mean_used,  // average over anchors that have at least one positive
    sum,        // literal sum over anchors
};

struct ContrastiveLoss {
    double value = 0.0;
    int anchors_used = 0;
    int anchors_skipped = 0;
};

struct LabeledBatch {
    EmbeddingMatrix embeddings;
    std::vector<int> labels;
};

// Anchors with no same-label partner are skipped and counted. Throws
// NoPositivePairsError if every anchor is skipped.
ContrastiveLoss supcon_loss(const Matrix& embeddings, std::span<const int> labels, double tau,
                            AnchorReduction reduction = AnchorReduction::mean_used,
                            Matrix* grad = nullptr);
ContrastiveLoss supcon_loss(const LabeledBatch& batch, double tau,
                            AnchorReduction reduction = AnchorReduction::mean_used);

// Normalized-temperature cross entropy over the 2N stacked views; the only
// positive of view_a row i is view_b row i and vice versa.
double unsup_contrastive_loss(const Matrix& view_a, const Matrix& view_b, double tau,
                              Matrix* grad_a = nullptr, Matrix* grad_b = nullptr);
double unsup_contrastive_loss(const EmbeddingMatrix& view_a, const EmbeddingMatrix& view_b, double tau);

// Affine map from the student embedding to class logits.
struct ClassifierHead {
    Matrix weight;  // C x D
    Vector bias;    // C
};

// Mean softmax cross entropy over the batch. Labels index rows of weight.
double cross_entropy_loss(const Matrix& embeddings, std::span<const int> labels,
                          const ClassifierHead& head, Matrix* grad_embeddings = nullptr,
                          ClassifierHead* grad_head = nullptr);

// What the non-distillation slot of a LossBreakdown holds for a strategy.
enum class Objective { cross_entropy, instance_contrastive, supcon };

struct LossBreakdown {
    double total = 0.0;
    // Primary objective of the strategy: SupCon for supcon*, cross entropy
    // for sup*, instance contrastive for unsup*.
    double supcon_component = 0.0;
    double distill_component = 0.0;
    double lambda = 1.0;
    int anchors_used = 0;
    int anchors_skipped = 0;
    Objective primary = Objective::supcon;
};

struct Stage1Inputs {
    const Matrix* embeddings = nullptr;      // student outputs, N x D
    const Matrix* second_view = nullptr;     // unsup strategies
    std::span<const int> labels;             // sup and supcon strategies
    std::span<const Matrix> teacher_views;   // distillation strategies, N rows each
    const ClassifierHead* head = nullptr;    // sup strategies
};

struct Stage1Gradients {
    Matrix embeddings;
    Matrix second_view;
    ClassifierHead head;
};

struct Stage1LossConfig {
    double lambda = 0.75;
    double tau_supcon = 0.1;
    double tau_distill = 0.1;
    relational::Reduction distill_reduction = relational::Reduction::mean_anchors;
    AnchorReduction supcon_reduction = AnchorReduction::mean_used;
};

// lambda * primary + (1 - lambda) * distillation for *-distill strategies;
// lambda is forced to 1 for the others. Throws ConfigError when an input the
// strategy needs is missing.
LossBreakdown total_stage1_loss(const Stage1Inputs& inputs, Strategy strategy,
                                const Stage1LossConfig& config, Stage1Gradients* grads = nullptr);

LossBreakdown total_stage1_loss(const LabeledBatch& batch, std::span<const EmbeddingMatrix> teacher_views,
                                double lambda, double tau, Strategy strategy);

}  // namespace rd::contrastive
