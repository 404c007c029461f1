#include "reldistill/contrastive.hpp"

#include "reldistill/errors.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace rd::contrastive {

std::string_view to_string(Strategy s) noexcept {
    switch (s) {
        case Strategy::sup: return "sup";
        case Strategy::sup_distill: return "sup-distill";
        case Strategy::unsup: return "unsup";
        case Strategy::unsup_distill: return "unsup-distill";
        case Strategy::supcon: return "supcon";
        case Strategy::supcon_distill: return "supcon-distill";
    }
    return "?";
}

Strategy parse_strategy(std::string_view name) {
    for (Strategy s : kAllStrategies) {
        if (to_string(s) == name) return s;
    }
    throw ConfigError("unknown strategy '" + std::string(name) +
                      "' (expected sup, sup-distill, unsup, unsup-distill, supcon, supcon-distill)");
}

bool uses_distillation(Strategy s) noexcept {
    return s == Strategy::sup_distill || s == Strategy::unsup_distill || s == Strategy::supcon_distill;
}
bool uses_labels(Strategy s) noexcept {
    return s == Strategy::sup || s == Strategy::sup_distill || s == Strategy::supcon ||
           s == Strategy::supcon_distill;
}
bool uses_two_views(Strategy s) noexcept { return s == Strategy::unsup || s == Strategy::unsup_distill; }
bool uses_classifier_head(Strategy s) noexcept { return s == Strategy::sup || s == Strategy::sup_distill; }

namespace {

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw InvalidTemperatureError("temperature must be positive, got " + std::to_string(tau));
    }
}

// SupCon over already-normalized rows. Writes dL/dS (S = unit unitᵀ) when
// grad_s is non-null.
ContrastiveLoss supcon_on_unit(const Matrix& unit, std::span<const int> labels, double tau,
                               AnchorReduction reduction, Matrix* grad_s) {
    const Eigen::Index n = unit.rows();
    const Matrix logits = (unit * unit.transpose()) / tau;

    ContrastiveLoss out;
    Vector anchor_loss = Vector::Zero(n);
    std::vector<bool> used(static_cast<std::size_t>(n), false);
    Matrix softmax = Matrix::Zero(n, n);

    for (Eigen::Index l = 0; l < n; ++l) {
        int positives = 0;
        for (Eigen::Index p = 0; p < n; ++p) {
            if (p != l && labels[p] == labels[l]) ++positives;
        }
        if (positives == 0) {
            ++out.anchors_skipped;
            continue;
        }
        ++out.anchors_used;
        used[l] = true;
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index a = 0; a < n; ++a)
            if (a != l) mx = std::max(mx, logits(l, a));
        double z = 0.0;
        for (Eigen::Index a = 0; a < n; ++a)
            if (a != l) z += std::exp(logits(l, a) - mx);
        const double lse = mx + std::log(z);
        double positive_sum = 0.0;
        for (Eigen::Index a = 0; a < n; ++a) {
            if (a == l) continue;
            softmax(l, a) = std::exp(logits(l, a) - lse);
            if (labels[a] == labels[l]) positive_sum += logits(l, a);
        }
        anchor_loss(l) = lse - positive_sum / positives;
        // stash |P(l)| on the diagonal for the gradient pass
        softmax(l, l) = static_cast<double>(positives);
    }
    if (out.anchors_used == 0) {
        throw NoPositivePairsError("no anchor in the batch has a same-label partner");
    }
    const double scale = reduction == AnchorReduction::mean_used ? 1.0 / out.anchors_used : 1.0;
    out.value = anchor_loss.sum() * scale;

    if (grad_s != nullptr) {
        Matrix g = Matrix::Zero(n, n);
        for (Eigen::Index l = 0; l < n; ++l) {
            if (!used[l]) continue;
            const double positives = softmax(l, l);
            for (Eigen::Index a = 0; a < n; ++a) {
                if (a == l) continue;
                const double target = labels[a] == labels[l] ? 1.0 / positives : 0.0;
                g(l, a) = scale * (softmax(l, a) - target) / tau;
            }
        }
        *grad_s = g;
    }
    return out;
}

ContrastiveLoss supcon_with_grad(const Matrix& embeddings, std::span<const int> labels, double tau,
                                 AnchorReduction reduction, Matrix* grad) {
    check_tau(tau);
    if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows()) {
        throw ShapeMismatchError("supcon: " + std::to_string(labels.size()) + " labels for " +
                                 std::to_string(embeddings.rows()) + " embeddings");
    }
    if (embeddings.rows() < 2) {
        throw BatchTooSmallError("supcon needs at least 2 samples");
    }
    const Matrix unit = relational::l2_normalize(embeddings);
    Matrix grad_s;
    ContrastiveLoss out = supcon_on_unit(unit, labels, tau, reduction, grad ? &grad_s : nullptr);
    if (grad != nullptr) {
        const Matrix grad_unit = (grad_s + grad_s.transpose()) * unit;
        *grad = relational::normalize_backward(embeddings, unit, grad_unit);
    }
    return out;
}

}  // namespace

ContrastiveLoss supcon_loss(const Matrix& embeddings, std::span<const int> labels, double tau,
                            AnchorReduction reduction, Matrix* grad) {
    return supcon_with_grad(embeddings, labels, tau, reduction, grad);
}

ContrastiveLoss supcon_loss(const LabeledBatch& batch, double tau, AnchorReduction reduction) {
    return supcon_with_grad(batch.embeddings.values(), batch.labels, tau, reduction, nullptr);
}

double unsup_contrastive_loss(const Matrix& view_a, const Matrix& view_b, double tau, Matrix* grad_a,
                              Matrix* grad_b) {
    if (view_a.rows() != view_b.rows() || view_a.cols() != view_b.cols()) {
        throw ShapeMismatchError("contrastive views differ in shape");
    }
    if (view_a.rows() < 2) {
        throw BatchTooSmallError("instance contrastive loss needs at least 2 pairs");
    }
    const Eigen::Index n = view_a.rows();
    Matrix stacked(2 * n, view_a.cols());
    stacked << view_a, view_b;
    std::vector<int> instance(static_cast<std::size_t>(2 * n));
    for (Eigen::Index i = 0; i < n; ++i) {
        instance[i] = static_cast<int>(i);
        instance[n + i] = static_cast<int>(i);
    }
    const bool want_grad = grad_a != nullptr || grad_b != nullptr;
    Matrix grad;
    const ContrastiveLoss loss =
        supcon_with_grad(stacked, instance, tau, AnchorReduction::mean_used, want_grad ? &grad : nullptr);
    if (grad_a != nullptr) *grad_a = grad.topRows(n);
    if (grad_b != nullptr) *grad_b = grad.bottomRows(n);
    return loss.value;
}

double unsup_contrastive_loss(const EmbeddingMatrix& view_a, const EmbeddingMatrix& view_b, double tau) {
    if (view_a.ids() != view_b.ids()) {
        throw ShapeMismatchError("contrastive views are not paired in the same sample order");
    }
    return unsup_contrastive_loss(view_a.values(), view_b.values(), tau);
}

double cross_entropy_loss(const Matrix& embeddings, std::span<const int> labels, const ClassifierHead& head,
                          Matrix* grad_embeddings, ClassifierHead* grad_head) {
    const Eigen::Index n = embeddings.rows();
    const Eigen::Index classes = head.weight.rows();
    if (head.weight.cols() != embeddings.cols() || head.bias.size() != classes) {
        throw ShapeMismatchError("classifier head does not match embedding width");
    }
    if (static_cast<Eigen::Index>(labels.size()) != n || n == 0) {
        throw ShapeMismatchError("cross entropy: label count must equal the (nonzero) batch size");
    }
    Matrix logits = embeddings * head.weight.transpose();
    logits.rowwise() += head.bias.transpose();
    Matrix dlogits(n, classes);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= classes) {
            throw ShapeMismatchError("label " + std::to_string(y) + " outside the head's " +
                                     std::to_string(classes) + " classes");
        }
        const double mx = logits.row(i).maxCoeff();
        const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        loss += lse - logits(i, y);
        dlogits.row(i) = (logits.row(i).array() - lse).exp();
        dlogits(i, y) -= 1.0;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    dlogits *= inv_n;
    if (grad_embeddings != nullptr) *grad_embeddings = dlogits * head.weight;
    if (grad_head != nullptr) {
        grad_head->weight = dlogits.transpose() * embeddings;
        grad_head->bias = dlogits.colwise().sum().transpose();
    }
    return loss * inv_n;
}

LossBreakdown total_stage1_loss(const Stage1Inputs& in, Strategy strategy, const Stage1LossConfig& config,
                                Stage1Gradients* grads) {
    const std::string name(to_string(strategy));
    if (in.embeddings == nullptr) throw ConfigError(name + ": student embeddings are required");
    const Matrix& z = *in.embeddings;
    const Eigen::Index n = z.rows();
    if (uses_distillation(strategy) && in.teacher_views.empty()) {
        throw ConfigError(name + " requires teacher views (no teacher ensemble supplied)");
    }
    if (uses_labels(strategy) && in.labels.empty()) {
        throw ConfigError(name + " requires class labels");
    }
    if (uses_two_views(strategy) && in.second_view == nullptr) {
        throw ConfigError(name + " requires a second augmented view");
    }
    if (uses_classifier_head(strategy) && in.head == nullptr) {
        throw ConfigError(name + " requires a classifier head");
    }
    const bool blended = uses_distillation(strategy);
    if (blended && !(config.lambda >= 0.0 && config.lambda <= 1.0)) {
        throw ConfigError("lambda must lie in [0, 1], got " + std::to_string(config.lambda));
    }

    LossBreakdown out;
    out.lambda = blended ? config.lambda : 1.0;
    const bool want = grads != nullptr;
    Matrix g_primary = Matrix::Zero(n, z.cols());
    Matrix g_second;
    ClassifierHead g_head;

    switch (strategy) {
        case Strategy::sup:
        case Strategy::sup_distill:
            out.primary = Objective::cross_entropy;
            out.supcon_component =
                cross_entropy_loss(z, in.labels, *in.head, want ? &g_primary : nullptr, want ? &g_head : nullptr);
            out.anchors_used = static_cast<int>(n);
            break;
        case Strategy::unsup:
        case Strategy::unsup_distill:
            out.primary = Objective::instance_contrastive;
            out.supcon_component = unsup_contrastive_loss(z, *in.second_view, config.tau_supcon,
                                                          want ? &g_primary : nullptr, want ? &g_second : nullptr);
            out.anchors_used = static_cast<int>(n);
            break;
        case Strategy::supcon:
        case Strategy::supcon_distill: {
            out.primary = Objective::supcon;
            try {
                const ContrastiveLoss c = supcon_loss(z, in.labels, config.tau_supcon, config.supcon_reduction,
                                                      want ? &g_primary : nullptr);
                out.supcon_component = c.value;
                out.anchors_used = c.anchors_used;
                out.anchors_skipped = c.anchors_skipped;
            } catch (const NoPositivePairsError&) {
                if (!blended) throw;
                out.supcon_component = 0.0;
                out.anchors_used = 0;
                out.anchors_skipped = static_cast<int>(n);
                g_primary.setZero();
            }
            break;
        }
    }

    Matrix g_distill;
    if (blended) {
        const auto d = relational::distillation_loss(z, in.teacher_views, config.tau_distill,
                                                     config.distill_reduction, want ? &g_distill : nullptr);
        out.distill_component = d.total;
    }
    out.total = out.lambda * out.supcon_component + (1.0 - out.lambda) * out.distill_component;

    if (want) {
        grads->embeddings = out.lambda * g_primary;
        if (blended) grads->embeddings += (1.0 - out.lambda) * g_distill;
        if (uses_two_views(strategy)) grads->second_view = out.lambda * g_second;
        if (uses_classifier_head(strategy)) {
            grads->head.weight = out.lambda * g_head.weight;
            grads->head.bias = out.lambda * g_head.bias;
        }
    }
    return out;
}

LossBreakdown total_stage1_loss(const LabeledBatch& batch, std::span<const EmbeddingMatrix> teacher_views,
                                double lambda, double tau, Strategy strategy) {
    if (uses_two_views(strategy) || uses_classifier_head(strategy)) {
        throw ConfigError(std::string(to_string(strategy)) +
                          " needs a second view or classifier head; use the Stage1Inputs overload");
    }
    std::vector<Matrix> views;
    for (const auto& t : teacher_views) {
        if (t.ids() != batch.embeddings.ids()) {
            throw ShapeMismatchError("teacher view sample order differs from the batch");
        }
        views.push_back(t.values());
    }
    Stage1Inputs in;
    in.embeddings = &batch.embeddings.values();
    in.labels = batch.labels;
    in.teacher_views = views;
    Stage1LossConfig config;
    config.lambda = lambda;
    config.tau_supcon = tau;
    config.tau_distill = tau;
    return total_stage1_loss(in, strategy, config);
}

}  // namespace rd::contrastive
