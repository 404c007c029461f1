#pragma once

// Stage I: training the student encoder under one of the six strategies,
// checkpoints, and embedding extraction.

#include "reldistill/contrastive.hpp"
#include "reldistill/dataset.hpp"
#include "reldistill/encoder.hpp"
#include "reldistill/teachers.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rd::student {

struct Stage1Config {
    contrastive::Strategy strategy = contrastive::Strategy::supcon_distill;
    double lambda = 0.75;
    double tau = 0.1;
    int epochs = 50;
    int batch_size = 256;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double lr_floor = 0.0;          // cosine annealing end point
    std::uint64_t seed = 0;
    AugmentationConfig augmentation;
    double val_fraction = 0.15;     // of groups, when no split is supplied
    relational::Reduction distill_reduction = relational::Reduction::mean_anchors;
    contrastive::AnchorReduction supcon_reduction = contrastive::AnchorReduction::mean_used;
};

void validate(const Stage1Config& config);
nlohmann::json to_json(const Stage1Config& config);
Stage1Config stage1_config_from_json(const nlohmann::json& j);

struct EpochRecord {
    int epoch = 0;
    double total = 0.0;
    double supcon = 0.0;
    double distill = 0.0;
    double lr = 0.0;
    std::optional<double> val_total;
};

struct Checkpoint {
    Encoder encoder;
    std::optional<contrastive::ClassifierHead> head;  // sup strategies only
    Stage1Config config;
    std::vector<std::string> class_names;
    int epoch = 0;
    std::vector<EpochRecord> history;
};

// <dir>/weights.bin, config.json, history.csv, validation.csv
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct TrainResult {
    Checkpoint best;        // lowest validation total loss
    Checkpoint last;
    double initial_train_loss = 0.0;  // clean inputs, before the first step
    double final_train_loss = 0.0;    // clean inputs, after the last step
    Split split;
};

// `ensemble` may be null for strategies without distillation. When `split`
// is empty a group-disjoint one is derived from config.val_fraction.
TrainResult train_stage1(const LabeledDataset& dataset, const teachers::TeacherEnsemble* ensemble,
                         const EncoderConfig& encoder_config, const Stage1Config& config,
                         std::optional<Split> split = std::nullopt);

// Mean total loss over contiguous batches of `rows` with clean inputs.
contrastive::LossBreakdown evaluate_stage1_loss(const Encoder& encoder,
                                                const contrastive::ClassifierHead* head,
                                                const LabeledDataset& dataset,
                                                std::span<const std::size_t> rows,
                                                const teachers::TeacherEnsemble* ensemble,
                                                const Stage1Config& config);

// Deterministic inference in row order. ShapeError on incompatible inputs.
EmbeddingMatrix embed(const Encoder& encoder, const Matrix& inputs, std::vector<std::string> ids,
                      Eigen::Index chunk = 256);
EmbeddingMatrix embed(const Checkpoint& checkpoint, const Matrix& inputs, std::vector<std::string> ids);

}  // namespace rd::student
