// Scalar-loop reference for the relational distillation loss. Deliberately
// written without Eigen expressions or helpers from relational.cpp.

#include "reldistill/errors.hpp"
#include "reldistill/relational.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace rd::relational {

namespace {

using Rows = std::vector<std::vector<double>>;

Rows copy_rows(const Matrix& m) {
    Rows rows(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) rows[i][c] = m(i, c);
    return rows;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) s += a[c] * b[c];
    return s;
}

// p(j|i) for one anchor, entry i left at 0.
std::vector<double> anchor_distribution(const Rows& rows, std::size_t i, double tau) {
    const std::size_t n = rows.size();
    std::vector<double> logits(n, 0.0);
    const double ni = std::sqrt(dot(rows[i], rows[i]));
    if (!(ni > kEpsilonNorm)) throw ZeroVectorError("oracle: zero row " + std::to_string(i));
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double nj = std::sqrt(dot(rows[j], rows[j]));
        if (!(nj > kEpsilonNorm)) throw ZeroVectorError("oracle: zero row " + std::to_string(j));
        logits[j] = dot(rows[i], rows[j]) / (ni * nj) / tau;
        if (logits[j] > mx) mx = logits[j];
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        if (j != i) z += std::exp(logits[j] - mx);
    std::vector<double> p(n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        if (j != i) p[j] = std::exp(logits[j] - mx) / z;
    return p;
}

}  // namespace

double oracle_distillation_loss(const EmbeddingMatrix& student,
                                std::span<const EmbeddingMatrix> teachers, double tau,
                                Reduction reduction) {
    if (!(tau > 0.0)) throw InvalidTemperatureError("oracle: temperature must be positive");
    if (teachers.empty()) throw ConfigError("oracle: no teachers");
    for (const auto& t : teachers) {
        if (t.ids() != student.ids()) throw ShapeMismatchError("oracle: sample ids differ");
    }
    const std::size_t n = static_cast<std::size_t>(student.rows());
    if (n < 2) throw BatchTooSmallError("oracle: need at least 2 samples");

    const Rows z = copy_rows(student.values());
    double total = 0.0;
    for (const auto& teacher : teachers) {
        const Rows u = copy_rows(teacher.values());
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double> p = anchor_distribution(u, i, tau);
            const std::vector<double> q = anchor_distribution(z, i, tau);
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i || p[j] == 0.0) continue;
                total += p[j] * std::log(p[j] / q[j]);
            }
        }
    }
    total /= static_cast<double>(teachers.size());
    if (reduction == Reduction::mean_anchors) total /= static_cast<double>(n);
    return total;
}

}  // namespace rd::relational
