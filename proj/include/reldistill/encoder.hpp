#pragma once

// Student encoders: a small MLP over feature vectors and a ViT over images
// (flattened H x W x C, row-major, channel fastest). Both map a batch of
// inputs (rows) to embed_dim-wide embeddings and support backpropagation of
// an upstream embedding gradient into their parameters.

#include "reldistill/embedding.hpp"
#include "reldistill/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <variant>
#include <vector>

namespace rd::student {

struct MlpArch {
    std::vector<int> hidden_sizes;
};

struct VitArch {
    int patch_size = 16;
    int depth = 12;
    int heads = 6;
    int width = 384;
};

struct VectorInput {
    int dim = 0;
};

struct ImageInput {
    int height = 224;
    int width = 224;
    int channels = 3;
};

struct EncoderConfig {
    std::variant<MlpArch, VitArch> architecture = MlpArch{{256}};
    int embed_dim = 768;
    std::variant<VectorInput, ImageInput> input = VectorInput{16};

    Eigen::Index input_size() const;
};

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Per-channel standardization applied to image inputs before the network.
// Empty for vector inputs (identity).
struct InputNormalization {
    std::vector<double> mean;
    std::vector<double> stddev;
};

// Saved activations of one forward pass, consumed by backward.
struct Tape {
    std::vector<Matrix> saved;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(EncoderConfig config, nn::Parameters params, InputNormalization norm = {});

    const EncoderConfig& config() const noexcept { return config_; }
    const nn::Parameters& params() const noexcept { return params_; }
    nn::Parameters& params() noexcept { return params_; }
    const InputNormalization& normalization() const noexcept { return norm_; }
    void set_normalization(InputNormalization norm) { norm_ = std::move(norm); }

    Eigen::Index input_size() const { return config_.input_size(); }
    int embed_dim() const noexcept { return config_.embed_dim; }

    // Inference; reentrant. Throws ShapeError on an input-width mismatch.
    Matrix forward(const Matrix& inputs) const;
    // Training forward that records what backward needs.
    Matrix forward(const Matrix& inputs, Tape& tape) const;
    // Accumulates dL/dparams into grads given dL/d(outputs).
    void backward(const Tape& tape, const Matrix& grad_outputs, nn::Gradients& grads) const;

private:
    Matrix normalize_inputs(const Matrix& inputs) const;

    EncoderConfig config_;
    nn::Parameters params_;
    InputNormalization norm_;
};

// ConfigError on inconsistent configurations (ViT on vector input, patch
// size not dividing the image, width not divisible by heads, ...).
void validate(const EncoderConfig& config);

// Deterministic initialization from seed.
Encoder build_encoder(const EncoderConfig& config, std::uint64_t seed);

}  // namespace rd::student
