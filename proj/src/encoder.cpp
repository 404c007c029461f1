#include "reldistill/encoder.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/rng.hpp"

#include <cmath>

namespace rd::student {

using nlohmann::json;

Eigen::Index EncoderConfig::input_size() const {
    if (const auto* v = std::get_if<VectorInput>(&input)) return v->dim;
    const auto& img = std::get<ImageInput>(input);
    return static_cast<Eigen::Index>(img.height) * img.width * img.channels;
}

json to_json(const EncoderConfig& config) {
    json j;
    if (const auto* mlp = std::get_if<MlpArch>(&config.architecture)) {
        j["architecture"] = {{"type", "mlp"}, {"hidden_sizes", mlp->hidden_sizes}};
    } else {
        const auto& vit = std::get<VitArch>(config.architecture);
        j["architecture"] = {{"type", "vit"},
                             {"patch_size", vit.patch_size},
                             {"depth", vit.depth},
                             {"heads", vit.heads},
                             {"width", vit.width}};
    }
    j["embed_dim"] = config.embed_dim;
    if (const auto* v = std::get_if<VectorInput>(&config.input)) {
        j["input"] = {{"type", "vector"}, {"dim", v->dim}};
    } else {
        const auto& img = std::get<ImageInput>(config.input);
        j["input"] = {{"type", "image"}, {"height", img.height}, {"width", img.width}, {"channels", img.channels}};
    }
    return j;
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    try {
        const auto& arch = j.at("architecture");
        if (arch.at("type") == "mlp") {
            c.architecture = MlpArch{arch.at("hidden_sizes").get<std::vector<int>>()};
        } else if (arch.at("type") == "vit") {
            c.architecture = VitArch{arch.at("patch_size").get<int>(), arch.at("depth").get<int>(),
                                     arch.at("heads").get<int>(), arch.at("width").get<int>()};
        } else {
            throw ConfigError("unknown architecture type " + arch.at("type").dump());
        }
        c.embed_dim = j.at("embed_dim").get<int>();
        const auto& in = j.at("input");
        if (in.at("type") == "vector") {
            c.input = VectorInput{in.at("dim").get<int>()};
        } else if (in.at("type") == "image") {
            c.input = ImageInput{in.at("height").get<int>(), in.at("width").get<int>(), in.at("channels").get<int>()};
        } else {
            throw ConfigError("unknown input type " + in.at("type").dump());
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("encoder config: ") + e.what());
    }
    return c;
}

void validate(const EncoderConfig& config) {
    if (config.embed_dim <= 0) throw ConfigError("embed_dim must be positive");
    if (const auto* mlp = std::get_if<MlpArch>(&config.architecture)) {
        const auto* v = std::get_if<VectorInput>(&config.input);
        if (v == nullptr) throw ConfigError("mlp encoders take vector inputs; got an image input spec");
        if (v->dim <= 0) throw ConfigError("vector input dim must be positive");
        for (int h : mlp->hidden_sizes)
            if (h <= 0) throw ConfigError("mlp hidden sizes must be positive");
        return;
    }
    const auto& vit = std::get<VitArch>(config.architecture);
    const auto* img = std::get_if<ImageInput>(&config.input);
    if (img == nullptr) throw ConfigError("vit encoders take image inputs; got a vector input spec");
    if (vit.patch_size <= 0 || vit.depth < 0 || vit.heads <= 0 || vit.width <= 0) {
        throw ConfigError("vit patch_size, heads and width must be positive, depth nonnegative");
    }
    if (vit.width % vit.heads != 0) throw ConfigError("vit width must be divisible by heads");
    if (img->height <= 0 || img->width <= 0 || img->channels <= 0) throw ConfigError("image dims must be positive");
    if (img->height % vit.patch_size != 0 || img->width % vit.patch_size != 0) {
        throw ConfigError("image size must be a multiple of the patch size");
    }
}

namespace {

constexpr double kLayerNormEps = 1e-6;

// ---- MLP ---------------------------------------------------------------

std::size_t mlp_layers(const MlpArch& a) { return a.hidden_sizes.size() + 1; }

nn::Parameters init_mlp(const MlpArch& arch, int in_dim, int out_dim, Rng& rng) {
    nn::Parameters p;
    int fan_in = in_dim;
    for (std::size_t l = 0; l < mlp_layers(arch); ++l) {
        const bool last = l + 1 == mlp_layers(arch);
        const int fan_out = last ? out_dim : arch.hidden_sizes[l];
        const double sd = std::sqrt((last ? 1.0 : 2.0) / fan_in);
        p.add("mlp." + std::to_string(l) + ".weight", rng.normal_matrix(fan_out, fan_in, sd));
        p.add("mlp." + std::to_string(l) + ".bias", Matrix::Zero(1, fan_out));
        fan_in = fan_out;
    }
    return p;
}

Matrix mlp_forward(const MlpArch& arch, const nn::Parameters& p, const Matrix& x, Tape* tape) {
    Matrix a = x;
    const std::size_t layers = mlp_layers(arch);
    for (std::size_t l = 0; l < layers; ++l) {
        Matrix z = a * p[2 * l].transpose();
        z.rowwise() += p[2 * l + 1].row(0);
        if (tape) {
            tape->saved.push_back(std::move(a));
            tape->saved.push_back(z);
        }
        a = (l + 1 == layers) ? std::move(z) : Matrix(z.cwiseMax(0.0));
    }
    return a;
}

void mlp_backward(const MlpArch& arch, const nn::Parameters& p, const Tape& tape, const Matrix& grad_out,
                  nn::Gradients& g) {
    Matrix d = grad_out;
    for (std::size_t l = mlp_layers(arch); l-- > 0;) {
        const Matrix& in = tape.saved[2 * l];
        g[2 * l] += d.transpose() * in;
        g[2 * l + 1] += d.colwise().sum();
        if (l == 0) break;
        d = d * p[2 * l];
        const Matrix& pre = tape.saved[2 * (l - 1) + 1];
        d = d.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    }
}

// ---- ViT ---------------------------------------------------------------

struct BlockIdx {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct VitLayout {
    std::size_t patch_w, patch_b, cls, pos;
    std::vector<BlockIdx> blocks;
    std::size_t ln_g, ln_b, head_w, head_b;
    int patch_dim, tokens, width, heads, embed;
    int grid_h, grid_w, patch, channels, image_w;
};

VitLayout vit_layout(const VitArch& arch, const ImageInput& img, int embed_dim) {
    VitLayout L{};
    std::size_t i = 0;
    L.patch_w = i++;
    L.patch_b = i++;
    L.cls = i++;
    L.pos = i++;
    for (int b = 0; b < arch.depth; ++b) {
        BlockIdx k{};
        k.ln1_g = i++; k.ln1_b = i++; k.qkv_w = i++; k.qkv_b = i++; k.proj_w = i++; k.proj_b = i++;
        k.ln2_g = i++; k.ln2_b = i++; k.fc1_w = i++; k.fc1_b = i++; k.fc2_w = i++; k.fc2_b = i++;
        L.blocks.push_back(k);
    }
    L.ln_g = i++;
    L.ln_b = i++;
    L.head_w = i++;
    L.head_b = i++;
    L.patch = arch.patch_size;
    L.channels = img.channels;
    L.image_w = img.width;
    L.grid_h = img.height / arch.patch_size;
    L.grid_w = img.width / arch.patch_size;
    L.patch_dim = arch.patch_size * arch.patch_size * img.channels;
    L.tokens = L.grid_h * L.grid_w + 1;
    L.width = arch.width;
    L.heads = arch.heads;
    L.embed = embed_dim;
    return L;
}

nn::Parameters init_vit(const VitLayout& L, Rng& rng) {
    nn::Parameters p;
    const int w = L.width;
    const double sd = 0.02;
    p.add("vit.patch.weight", rng.normal_matrix(w, L.patch_dim, sd));
    p.add("vit.patch.bias", Matrix::Zero(1, w));
    p.add("vit.cls", rng.normal_matrix(1, w, sd));
    p.add("vit.pos", rng.normal_matrix(L.tokens, w, sd));
    for (std::size_t b = 0; b < L.blocks.size(); ++b) {
        const std::string pre = "vit.block" + std::to_string(b) + ".";
        p.add(pre + "ln1.gamma", Matrix::Ones(1, w));
        p.add(pre + "ln1.beta", Matrix::Zero(1, w));
        p.add(pre + "qkv.weight", rng.normal_matrix(3 * w, w, sd));
        p.add(pre + "qkv.bias", Matrix::Zero(1, 3 * w));
        p.add(pre + "proj.weight", rng.normal_matrix(w, w, sd));
        p.add(pre + "proj.bias", Matrix::Zero(1, w));
        p.add(pre + "ln2.gamma", Matrix::Ones(1, w));
        p.add(pre + "ln2.beta", Matrix::Zero(1, w));
        p.add(pre + "fc1.weight", rng.normal_matrix(4 * w, w, sd));
        p.add(pre + "fc1.bias", Matrix::Zero(1, 4 * w));
        p.add(pre + "fc2.weight", rng.normal_matrix(w, 4 * w, sd));
        p.add(pre + "fc2.bias", Matrix::Zero(1, w));
    }
    p.add("vit.ln.gamma", Matrix::Ones(1, w));
    p.add("vit.ln.beta", Matrix::Zero(1, w));
    p.add("vit.head.weight", rng.normal_matrix(L.embed, w, sd));
    p.add("vit.head.bias", Matrix::Zero(1, L.embed));
    return p;
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = x * w.transpose();
    y.rowwise() += b.row(0);
    return y;
}

// Returns y; xhat and inv_std are written for backward.
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, Matrix& xhat, Vector& inv_std) {
    const Eigen::Index n = x.rows();
    const double w = static_cast<double>(x.cols());
    xhat.resize(x.rows(), x.cols());
    inv_std.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = x.row(r).sum() / w;
        const double var = (x.row(r).array() - mu).square().sum() / w;
        inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
    }
    Matrix y = xhat.array().rowwise() * gamma.row(0).array();
    y.rowwise() += beta.row(0);
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& inv_std, const Matrix& gamma,
                           Matrix& dgamma, Matrix& dbeta) {
    dgamma += dy.cwiseProduct(xhat).colwise().sum();
    dbeta += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
    const double w = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_d = dxhat.row(r).sum() / w;
        const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / w;
        dx.row(r) = inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
    }
    return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

void softmax_rows(Matrix& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
}

Matrix extract_patches(const VitLayout& L, const Eigen::Ref<const Eigen::RowVectorXd>& image) {
    Matrix patches(L.grid_h * L.grid_w, L.patch_dim);
    for (int py = 0; py < L.grid_h; ++py) {
        for (int px = 0; px < L.grid_w; ++px) {
            const int row = py * L.grid_w + px;
            int col = 0;
            for (int dy = 0; dy < L.patch; ++dy) {
                for (int dx = 0; dx < L.patch; ++dx) {
                    const Eigen::Index base =
                        (static_cast<Eigen::Index>(py * L.patch + dy) * L.image_w + (px * L.patch + dx)) * L.channels;
                    for (int c = 0; c < L.channels; ++c) patches(row, col++) = image(base + c);
                }
            }
        }
    }
    return patches;
}

// Per-sample forward; pushes activations onto tape when non-null.
Eigen::RowVectorXd vit_sample_forward(const VitLayout& L, const nn::Parameters& p,
                                      const Eigen::Ref<const Eigen::RowVectorXd>& image, Tape* tape) {
    const int w = L.width;
    const int dh = w / L.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix patches = extract_patches(L, image);
    Matrix x(L.tokens, w);
    x.row(0) = p[L.cls].row(0);
    x.bottomRows(L.tokens - 1) = linear(patches, p[L.patch_w], p[L.patch_b]);
    x += p[L.pos];
    if (tape) tape->saved.push_back(std::move(patches));

    for (const BlockIdx& k : L.blocks) {
        Matrix xhat1;
        Vector inv1;
        const Matrix x1 = layer_norm(x, p[k.ln1_g], p[k.ln1_b], xhat1, inv1);
        const Matrix qkv = linear(x1, p[k.qkv_w], p[k.qkv_b]);
        Matrix attn(static_cast<Eigen::Index>(L.heads) * L.tokens, L.tokens);
        Matrix o(L.tokens, w);
        for (int h = 0; h < L.heads; ++h) {
            const auto q = qkv.middleCols(h * dh, dh);
            const auto kk = qkv.middleCols(w + h * dh, dh);
            const auto v = qkv.middleCols(2 * w + h * dh, dh);
            Matrix a = (q * kk.transpose()) * scale;
            softmax_rows(a);
            o.middleCols(h * dh, dh) = a * v;
            attn.middleRows(static_cast<Eigen::Index>(h) * L.tokens, L.tokens) = a;
        }
        const Matrix x_mid = x + linear(o, p[k.proj_w], p[k.proj_b]);
        Matrix xhat2;
        Vector inv2;
        const Matrix x2 = layer_norm(x_mid, p[k.ln2_g], p[k.ln2_b], xhat2, inv2);
        const Matrix h1 = linear(x2, p[k.fc1_w], p[k.fc1_b]);
        const Matrix act = h1.unaryExpr([](double t) { return gelu(t); });
        Matrix x_out = x_mid + linear(act, p[k.fc2_w], p[k.fc2_b]);
        if (tape) {
            tape->saved.push_back(xhat1);
            tape->saved.push_back(inv1);
            tape->saved.push_back(x1);
            tape->saved.push_back(qkv);
            tape->saved.push_back(std::move(attn));
            tape->saved.push_back(std::move(o));
            tape->saved.push_back(xhat2);
            tape->saved.push_back(inv2);
            tape->saved.push_back(x2);
            tape->saved.push_back(h1);
            tape->saved.push_back(act);
        }
        x = std::move(x_out);
    }
    Matrix xhat_f;
    Vector inv_f;
    const Matrix cls_out = layer_norm(x.topRows(1), p[L.ln_g], p[L.ln_b], xhat_f, inv_f);
    if (tape) {
        tape->saved.push_back(xhat_f);
        tape->saved.push_back(inv_f);
        tape->saved.push_back(cls_out);
    }
    return linear(cls_out, p[L.head_w], p[L.head_b]).row(0);
}

constexpr std::size_t kBlockSaved = 11;

void vit_sample_backward(const VitLayout& L, const nn::Parameters& p, const Tape& tape, std::size_t base,
                         const Eigen::RowVectorXd& grad_out, nn::Gradients& g) {
    const int w = L.width;
    const int dh = w / L.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t nb = L.blocks.size();
    const std::size_t tail = base + 1 + kBlockSaved * nb;
    const Matrix& xhat_f = tape.saved[tail];
    const Vector inv_f = tape.saved[tail + 1];
    const Matrix& cls_out = tape.saved[tail + 2];

    g[L.head_w] += grad_out.transpose() * cls_out;
    g[L.head_b] += grad_out;
    const Matrix d_cls = grad_out * p[L.head_w];
    Matrix dx = Matrix::Zero(L.tokens, w);
    dx.topRows(1) = layer_norm_backward(d_cls, xhat_f, inv_f, p[L.ln_g], g[L.ln_g], g[L.ln_b]);

    for (std::size_t b = nb; b-- > 0;) {
        const BlockIdx& k = L.blocks[b];
        const std::size_t s = base + 1 + kBlockSaved * b;
        const Matrix& xhat1 = tape.saved[s];
        const Vector inv1 = tape.saved[s + 1];
        const Matrix& x1 = tape.saved[s + 2];
        const Matrix& qkv = tape.saved[s + 3];
        const Matrix& attn = tape.saved[s + 4];
        const Matrix& o = tape.saved[s + 5];
        const Matrix& xhat2 = tape.saved[s + 6];
        const Vector inv2 = tape.saved[s + 7];
        const Matrix& x2 = tape.saved[s + 8];
        const Matrix& h1 = tape.saved[s + 9];
        const Matrix& act = tape.saved[s + 10];

        // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        g[k.fc2_w] += dx.transpose() * act;
        g[k.fc2_b] += dx.colwise().sum();
        Matrix d_act = dx * p[k.fc2_w];
        const Matrix d_h1 = d_act.cwiseProduct(h1.unaryExpr([](double t) { return gelu_grad(t); }));
        g[k.fc1_w] += d_h1.transpose() * x2;
        g[k.fc1_b] += d_h1.colwise().sum();
        const Matrix d_x2 = d_h1 * p[k.fc1_w];
        Matrix d_mid = dx + layer_norm_backward(d_x2, xhat2, inv2, p[k.ln2_g], g[k.ln2_g], g[k.ln2_b]);

        // attention branch: x_mid = x + proj(mhsa(ln1(x)))
        g[k.proj_w] += d_mid.transpose() * o;
        g[k.proj_b] += d_mid.colwise().sum();
        const Matrix d_o = d_mid * p[k.proj_w];
        Matrix d_qkv(L.tokens, 3 * w);
        for (int h = 0; h < L.heads; ++h) {
            const auto q = qkv.middleCols(h * dh, dh);
            const auto kk = qkv.middleCols(w + h * dh, dh);
            const auto v = qkv.middleCols(2 * w + h * dh, dh);
            const auto a = attn.middleRows(static_cast<Eigen::Index>(h) * L.tokens, L.tokens);
            const auto d_oh = d_o.middleCols(h * dh, dh);
            const Matrix d_a = d_oh * v.transpose();
            d_qkv.middleCols(2 * w + h * dh, dh) = a.transpose() * d_oh;
            Matrix d_s = a.cwiseProduct(d_a);
            const Vector row_dot = d_s.rowwise().sum();
            d_s = a.cwiseProduct(d_a.colwise() - row_dot) * scale;
            d_qkv.middleCols(h * dh, dh) = d_s * kk;
            d_qkv.middleCols(w + h * dh, dh) = d_s.transpose() * q;
        }
        g[k.qkv_w] += d_qkv.transpose() * x1;
        g[k.qkv_b] += d_qkv.colwise().sum();
        const Matrix d_x1 = d_qkv * p[k.qkv_w];
        dx = d_mid + layer_norm_backward(d_x1, xhat1, inv1, p[k.ln1_g], g[k.ln1_g], g[k.ln1_b]);
    }

    g[L.pos] += dx;
    g[L.cls] += dx.topRows(1);
    const Matrix d_patch_tokens = dx.bottomRows(L.tokens - 1);
    const Matrix& patches = tape.saved[base];
    g[L.patch_w] += d_patch_tokens.transpose() * patches;
    g[L.patch_b] += d_patch_tokens.colwise().sum();
}

std::size_t vit_saved_per_sample(const VitLayout& L) { return 1 + kBlockSaved * L.blocks.size() + 3; }

}  // namespace

Encoder::Encoder(EncoderConfig config, nn::Parameters params, InputNormalization norm)
    : config_(std::move(config)), params_(std::move(params)), norm_(std::move(norm)) {
    validate(config_);
}

Matrix Encoder::normalize_inputs(const Matrix& inputs) const {
    if (inputs.cols() != input_size()) {
        throw ShapeError("encoder expects inputs of width " + std::to_string(input_size()) + ", got " +
                         std::to_string(inputs.cols()));
    }
    if (norm_.mean.empty()) return inputs;
    const auto channels = static_cast<Eigen::Index>(norm_.mean.size());
    Matrix out = inputs;
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
        const auto ch = static_cast<std::size_t>(c % channels);
        out.col(c) = (out.col(c).array() - norm_.mean[ch]) / norm_.stddev[ch];
    }
    return out;
}

Matrix Encoder::forward(const Matrix& inputs) const {
    const Matrix x = normalize_inputs(inputs);
    if (const auto* mlp = std::get_if<MlpArch>(&config_.architecture)) {
        return mlp_forward(*mlp, params_, x, nullptr);
    }
    const VitLayout L =
        vit_layout(std::get<VitArch>(config_.architecture), std::get<ImageInput>(config_.input), config_.embed_dim);
    Matrix out(x.rows(), config_.embed_dim);
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = vit_sample_forward(L, params_, x.row(i), nullptr);
    return out;
}

Matrix Encoder::forward(const Matrix& inputs, Tape& tape) const {
    tape.saved.clear();
    const Matrix x = normalize_inputs(inputs);
    if (const auto* mlp = std::get_if<MlpArch>(&config_.architecture)) {
        return mlp_forward(*mlp, params_, x, &tape);
    }
    const VitLayout L =
        vit_layout(std::get<VitArch>(config_.architecture), std::get<ImageInput>(config_.input), config_.embed_dim);
    Matrix out(x.rows(), config_.embed_dim);
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = vit_sample_forward(L, params_, x.row(i), &tape);
    return out;
}

void Encoder::backward(const Tape& tape, const Matrix& grad_outputs, nn::Gradients& grads) const {
    if (grads.size() != params_.size()) throw ShapeMismatchError("encoder backward: gradient list mismatch");
    if (const auto* mlp = std::get_if<MlpArch>(&config_.architecture)) {
        mlp_backward(*mlp, params_, tape, grad_outputs, grads);
        return;
    }
    const VitLayout L =
        vit_layout(std::get<VitArch>(config_.architecture), std::get<ImageInput>(config_.input), config_.embed_dim);
    const std::size_t per = vit_saved_per_sample(L);
    for (Eigen::Index i = 0; i < grad_outputs.rows(); ++i) {
        vit_sample_backward(L, params_, tape, static_cast<std::size_t>(i) * per, grad_outputs.row(i), grads);
    }
}

Encoder build_encoder(const EncoderConfig& config, std::uint64_t seed) {
    validate(config);
    Rng rng(seed);
    nn::Parameters params;
    if (const auto* mlp = std::get_if<MlpArch>(&config.architecture)) {
        params = init_mlp(*mlp, std::get<VectorInput>(config.input).dim, config.embed_dim, rng);
    } else {
        params = init_vit(vit_layout(std::get<VitArch>(config.architecture), std::get<ImageInput>(config.input),
                                     config.embed_dim),
                          rng);
    }
    return Encoder(config, std::move(params));
}

}  // namespace rd::student
