#pragma once

#include "reldistill/embedding.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace rd::nn {

// Named list of parameter tensors. Gradients use the same indexing.
struct Parameters {
    std::vector<std::string> names;
    std::vector<Matrix> values;

    std::size_t add(std::string name, Matrix init) {
        names.push_back(std::move(name));
        values.push_back(std::move(init));
        return values.size() - 1;
    }
    std::size_t size() const noexcept { return values.size(); }
    Matrix& operator[](std::size_t i) { return values[i]; }
    const Matrix& operator[](std::size_t i) const { return values[i]; }
    long long scalar_count() const;
};

using Gradients = std::vector<Matrix>;

Gradients zeros_like(const Parameters& params);
bool all_finite(const Gradients& grads);

// Adam with decoupled weight decay; weight_decay = 0 gives plain Adam.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(Parameters& params, const Gradients& grads, double lr);
    long long steps_taken() const noexcept { return t_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    long long t_ = 0;
    std::vector<Matrix> m_, v_;
};

// Cosine annealing from `peak` at step 0 to `floor` at step total_steps - 1.
double cosine_lr(long long step, long long total_steps, double peak, double floor = 0.0);

// Serialization of parameter lists: "RDPARAM1" | u32 count | per tensor:
// u32 name length, name, u32 rows, u32 cols, rows*cols f64 (row-major).
std::string encode_parameters(const Parameters& params);
Parameters decode_parameters(std::string_view bytes, const std::string& origin);

}  // namespace rd::nn
