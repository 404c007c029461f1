#pragma once

#include "reldistill/encoder.hpp"
#include "reldistill/rng.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace rd::student {

using InputSpec = std::variant<VectorInput, ImageInput>;

// Labeled samples for Stage I. Image inputs are stored flattened (H x W x C,
// values in [0, 1]); the dataset's channel statistics are attached for the
// encoder's input normalization.
struct LabeledDataset {
    Matrix inputs;
    std::vector<std::string> ids;
    std::vector<int> labels;                // indices into class_names
    std::vector<std::string> class_names;   // sorted
    std::vector<std::string> groups;        // patient/source per sample; empty = one group per sample
    InputSpec input = VectorInput{0};
    InputNormalization normalization;

    std::size_t size() const noexcept { return ids.size(); }
    const std::string& group_of(std::size_t i) const { return groups.empty() ? ids[i] : groups[i]; }
    LabeledDataset subset(std::span<const std::size_t> rows) const;
};

// MDEMB1 feature file + labels CSV with columns sample_id,label and an
// optional group column (patient or source slide).
LabeledDataset load_vector_dataset(const std::filesystem::path& embeddings,
                                   const std::filesystem::path& labels_csv);

// <root>/<class>/<image files>; images are resized to `size`.
LabeledDataset load_image_folder(const std::filesystem::path& root, const ImageInput& size);

// Mean and standard deviation per channel over all pixels.
InputNormalization channel_statistics(const Matrix& inputs, int channels);

// Writes a vector dataset (features + ids + labels.csv).
void write_vector_dataset(const std::filesystem::path& dir, const LabeledDataset& dataset);

struct AugmentationConfig {
    bool enabled = true;
    bool flips = true;               // horizontal and vertical, p = 0.5 each
    double max_rotation_deg = 90.0;  // uniform in [-max, max]; 0 disables
    bool color_jitter = true;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double hue = 0.1;
    double vector_noise = 0.1;       // additive Gaussian jitter for vector inputs
};

Matrix augment(const Matrix& inputs, const InputSpec& spec, const AugmentationConfig& config, Rng& rng);

// Group-disjoint split: a seeded `fraction` of the groups go to validation.
struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};
Split group_split(const LabeledDataset& dataset, double fraction, std::uint64_t seed);

}  // namespace rd::student
