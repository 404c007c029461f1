#include "reldistill/relational.hpp"

#include "reldistill/errors.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace rd::relational {

namespace {

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw InvalidTemperatureError("temperature must be a positive finite number, got " +
                                      std::to_string(tau));
    }
}

void check_batch(Eigen::Index n) {
    if (n < 2) {
        throw BatchTooSmallError("relational distributions need at least 2 samples, got " +
                                 std::to_string(n));
    }
}

// Row-wise log-softmax of S/tau excluding the diagonal. Diagonal entries are
// set to -inf.
Matrix log_relational(const Matrix& s, double tau) {
    const Eigen::Index n = s.rows();
    Matrix out(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) mx = std::max(mx, s(i, j) / tau);
        }
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) acc += std::exp(s(i, j) / tau - mx);
        }
        const double lse = mx + std::log(acc);
        for (Eigen::Index j = 0; j < n; ++j) {
            out(i, j) = (j == i) ? -std::numeric_limits<double>::infinity() : s(i, j) / tau - lse;
        }
    }
    return out;
}

}  // namespace

Matrix l2_normalize(const Matrix& embeddings) {
    Matrix out(embeddings.rows(), embeddings.cols());
    for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
        const double norm = embeddings.row(i).norm();
        if (!(norm > kEpsilonNorm)) {
            throw ZeroVectorError("row " + std::to_string(i) + " has norm " + std::to_string(norm) +
                                  " (degenerate embedding)");
        }
        out.row(i) = embeddings.row(i) / norm;
    }
    return out;
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& embeddings) {
    return EmbeddingMatrix(l2_normalize(embeddings.values()), embeddings.ids());
}

Matrix cosine_similarity_matrix(const Matrix& embeddings, bool assume_normalized) {
    if (assume_normalized) {
        Matrix s = embeddings * embeddings.transpose();
        return 0.5 * (s + s.transpose());
    }
    const Matrix unit = l2_normalize(embeddings);
    Matrix s = unit * unit.transpose();
    return 0.5 * (s + s.transpose());
}

Matrix relational_distribution(const Matrix& similarity, double tau) {
    check_batch(similarity.rows());
    check_tau(tau);
    if (similarity.rows() != similarity.cols()) {
        throw ShapeError("similarity matrix must be square");
    }
    Matrix p = log_relational(similarity, tau);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            p(i, j) = (i == j) ? 0.0 : std::exp(p(i, j));
        }
    }
    return p;
}

Matrix normalize_backward(const Matrix& raw, const Matrix& normalized, const Matrix& grad_normalized) {
    Matrix grad(raw.rows(), raw.cols());
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const double norm = raw.row(i).norm();
        const double radial = normalized.row(i).dot(grad_normalized.row(i));
        grad.row(i) = (grad_normalized.row(i) - radial * normalized.row(i)) / norm;
    }
    return grad;
}

DistillationLoss distillation_loss(const Matrix& student, std::span<const Matrix> teachers,
                                   double tau, Reduction reduction, Matrix* student_grad) {
    check_tau(tau);
    if (teachers.empty()) {
        throw ConfigError("distillation needs at least one teacher");
    }
    const Eigen::Index n = student.rows();
    for (std::size_t k = 0; k < teachers.size(); ++k) {
        if (teachers[k].rows() != n) {
            throw ShapeMismatchError("teacher " + std::to_string(k) + " has " +
                                     std::to_string(teachers[k].rows()) + " rows, student has " +
                                     std::to_string(n));
        }
    }
    check_batch(n);

    const Matrix unit = l2_normalize(student);
    const Matrix log_q = log_relational(cosine_similarity_matrix(unit, true), tau);
    const double teacher_count = static_cast<double>(teachers.size());
    const double anchor_scale = reduction == Reduction::mean_anchors ? 1.0 / static_cast<double>(n) : 1.0;

    DistillationLoss result;
    result.per_teacher.reserve(teachers.size());
    Matrix teacher_sum = Matrix::Zero(n, n);

    for (const Matrix& teacher : teachers) {
        const Matrix log_p = log_relational(cosine_similarity_matrix(teacher), tau);
        double kl = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                if (i == j) continue;
                const double p = std::exp(log_p(i, j));
                teacher_sum(i, j) += p;
                if (p > 0.0) kl += p * (log_p(i, j) - log_q(i, j));
            }
        }
        result.per_teacher.push_back(kl * anchor_scale);
    }
    for (double component : result.per_teacher) result.total += component;
    result.total /= teacher_count;

    if (student_grad != nullptr) {
        // d/dS_ij Σ_k KL_k(i) = (K q_ij - Σ_k p_ij) / tau for j != i.
        Matrix g(n, n);
        const double scale = anchor_scale / (teacher_count * tau);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                g(i, j) = (i == j) ? 0.0
                                   : scale * (teacher_count * std::exp(log_q(i, j)) - teacher_sum(i, j));
            }
        }
        const Matrix grad_unit = (g + g.transpose()) * unit;
        *student_grad = normalize_backward(student, unit, grad_unit);
    }
    return result;
}

DistillationLoss distillation_loss(const EmbeddingMatrix& student,
                                   std::span<const EmbeddingMatrix> teachers, double tau,
                                   Reduction reduction) {
    std::vector<Matrix> views;
    views.reserve(teachers.size());
    for (std::size_t k = 0; k < teachers.size(); ++k) {
        if (teachers[k].ids() != student.ids()) {
            throw ShapeMismatchError("teacher " + std::to_string(k) +
                                     " sample ids differ from the student's (count or order)");
        }
        views.push_back(teachers[k].values());
    }
    return distillation_loss(student.values(), views, tau, reduction);
}

}  // namespace rd::relational
