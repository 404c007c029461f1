#pragma once

// Stage II: gated attention pooling over bags of patch embeddings, a linear
// survival head, binary cross entropy with L1 on the attention network, and
// cross-validated training with early stopping.

#include "reldistill/embedding.hpp"
#include "reldistill/folds.hpp"
#include "reldistill/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rd::mil {

inline constexpr double kHorizonMonths = 60.0;
inline constexpr double kProbabilityClamp = 1e-7;

// 1 when the event happened within the horizon.
int horizon_label(double time_months, int event, double horizon = kHorizonMonths);

struct Bag {
    std::string slide_id;
    std::string patient_id;
    Matrix features;  // N x d
    int label = 0;
    double time_months = 0.0;
    int event = 0;
};

// ShapeError on an empty bag, ConfigError on an inconsistent label.
void validate(const Bag& bag, double horizon = kHorizonMonths);

struct AttentionParams {
    Matrix V;      // L x d
    Matrix U;      // L x d, gating branch
    Vector w;      // L
    Vector w_c;    // d
    double b = 0.0;
    bool gated = true;

    Eigen::Index hidden() const noexcept { return V.rows(); }
    Eigen::Index dim() const noexcept { return V.cols(); }
};

AttentionParams init_attention(Eigen::Index dim, Eigen::Index hidden, bool gated, std::uint64_t seed);
AttentionParams zeros_like(const AttentionParams& p);

nn::Parameters to_parameters(const AttentionParams& p);
AttentionParams from_parameters(const nn::Parameters& params, bool gated);

Vector attention_weights(const Matrix& H, const AttentionParams& params);
Vector bag_pool(const Matrix& H, const Vector& a);

struct SlidePrediction {
    double logit = 0.0;
    double probability = 0.5;
    Vector attention;
};

SlidePrediction predict_slide(const Matrix& H, const AttentionParams& params);
SlidePrediction predict_slide(const Bag& bag, const AttentionParams& params);

// Which attention tensors the L1 penalty covers. The head is excluded by
// default.
struct L1Scope {
    bool attention = true;  // V, U, w
    bool head = false;      // w_c
};

// Summed BCE over the predictions (probabilities clamped to [eps, 1 - eps])
// plus l1_coeff * (|V|_1 + |U|_1 + |w|_1).
double stage2_loss(std::span<const SlidePrediction> predictions, std::span<const int> labels,
                   const AttentionParams& params, double l1_coeff = 5e-4, L1Scope scope = {});

// Loss and gradient for a minibatch of bags. Clamped probabilities pass no
// gradient; the L1 subgradient at 0 is 0.
double stage2_loss_and_grad(std::span<const Matrix> bags, std::span<const int> labels,
                            const AttentionParams& params, double l1_coeff, AttentionParams* grad,
                            L1Scope scope = {});

enum class AucLevel { patient, slide };

struct Stage2Config {
    Eigen::Index hidden = 512;
    bool gated = true;
    double learning_rate = 2e-4;
    int epochs = 100;
    int patience = 10;
    double l1_coeff = 5e-4;
    L1Scope l1_scope;
    AucLevel auc_level = AucLevel::patient;
    std::uint64_t seed = 0;
    int threads = 1;  // folds trained concurrently; 0 = hardware concurrency
};

void validate(const Stage2Config& config);

struct FoldModel {
    int fold = 0;
    AttentionParams params;
    int best_epoch = 0;
    int epochs_run = 0;
    double best_score = 0.0;
    std::vector<double> val_scores;   // per epoch: validation AUC, or -loss when AUC is undefined
    std::vector<double> train_losses;
    bool score_is_auc = true;
};

struct OutOfFoldPrediction {
    std::string patient_id;
    std::string slide_id;
    int fold = 0;
    double logit = 0.0;
    double probability = 0.5;
};

struct Stage2Result {
    std::vector<FoldModel> folds;
    std::vector<OutOfFoldPrediction> predictions;  // bag input order
};

Stage2Result train_stage2(std::span<const Bag> bags, const cohort::FoldAssignment& folds, const Stage2Config& config);

// Mean probability per patient, in order of first appearance.
struct PatientPrediction {
    std::string patient_id;
    double probability = 0.0;
    int fold = 0;
};
std::vector<PatientPrediction> patient_level(std::span<const OutOfFoldPrediction> predictions);

// ---- storage -----------------------------------------------------------------

// bags/<slide_id>.emb, one MDEMB1 file per slide.
void write_bag_features(const std::filesystem::path& bag_dir, const Bag& bag);
Matrix read_bag_features(const std::filesystem::path& bag_dir, const std::string& slide_id);

void write_attention_csv(const std::filesystem::path& path, std::span<const std::string> slide_ids,
                         std::span<const Vector> attention);
void write_predictions_csv(const std::filesystem::path& path, std::span<const OutOfFoldPrediction> predictions);
std::vector<OutOfFoldPrediction> read_predictions_csv(const std::filesystem::path& path);

}  // namespace rd::mil
