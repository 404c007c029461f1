#include "reldistill/nn.hpp"

#include "reldistill/errors.hpp"

#include <cmath>
#include <cstring>

namespace rd::nn {

long long Parameters::scalar_count() const {
    long long n = 0;
    for (const auto& v : values) n += v.size();
    return n;
}

Gradients zeros_like(const Parameters& params) {
    Gradients g;
    g.reserve(params.size());
    for (const auto& v : params.values) g.push_back(Matrix::Zero(v.rows(), v.cols()));
    return g;
}

bool all_finite(const Gradients& grads) {
    for (const auto& g : grads)
        if (!g.allFinite()) return false;
    return true;
}

void AdamW::step(Parameters& params, const Gradients& grads, double lr) {
    if (grads.size() != params.size()) throw ShapeMismatchError("optimizer: gradient count mismatch");
    if (m_.empty()) {
        m_ = zeros_like(params);
        v_ = zeros_like(params);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = params.values[i];
        const Matrix& g = grads[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        if (weight_decay_ != 0.0) p -= (lr * weight_decay_) * p;
        const Matrix update =
            (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
        p -= lr * update;
    }
}

double cosine_lr(long long step, long long total_steps, double peak, double floor) {
    if (total_steps <= 1) return peak;
    const double progress = static_cast<double>(std::min(step, total_steps - 1)) /
                            static_cast<double>(total_steps - 1);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view in, std::size_t& off, const std::string& origin) {
    if (off + 4 > in.size()) throw IntegrityError(origin + ": truncated parameter blob");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    off += 4;
    return v;
}

constexpr char kParamMagic[8] = {'R', 'D', 'P', 'A', 'R', 'A', 'M', '1'};

}  // namespace

std::string encode_parameters(const Parameters& params) {
    std::string out(kParamMagic, 8);
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& m = params.values[i];
        put_u32(out, static_cast<std::uint32_t>(params.names[i].size()));
        out += params.names[i];
        put_u32(out, static_cast<std::uint32_t>(m.rows()));
        put_u32(out, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                std::uint64_t bits;
                const double v = m(r, c);
                std::memcpy(&bits, &v, 8);
                for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
            }
        }
    }
    return out;
}

Parameters decode_parameters(std::string_view bytes, const std::string& origin) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kParamMagic, 8) != 0) {
        throw FormatError(origin + ": not a parameter blob");
    }
    std::size_t off = 8;
    const std::uint32_t count = get_u32(bytes, off, origin);
    Parameters params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(bytes, off, origin);
        if (off + len > bytes.size()) throw IntegrityError(origin + ": truncated parameter name");
        std::string name(bytes.substr(off, len));
        off += len;
        const std::uint32_t rows = get_u32(bytes, off, origin);
        const std::uint32_t cols = get_u32(bytes, off, origin);
        const std::size_t need = static_cast<std::size_t>(rows) * cols * 8;
        if (off + need > bytes.size()) throw IntegrityError(origin + ": truncated tensor '" + name + "'");
        Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                std::uint64_t bits = 0;
                for (int b = 0; b < 8; ++b)
                    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off + b])) << (8 * b);
                off += 8;
                double v;
                std::memcpy(&v, &bits, 8);
                m(r, c) = v;
            }
        }
        params.add(std::move(name), std::move(m));
    }
    if (off != bytes.size()) throw IntegrityError(origin + ": trailing bytes after parameters");
    return params;
}

}  // namespace rd::nn
