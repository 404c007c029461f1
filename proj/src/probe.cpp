#include "reldistill/probe.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/relational.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace rd::probe {

ClassificationMetrics classification_metrics(std::span<const int> truth, std::span<const int> predicted) {
    if (truth.size() != predicted.size()) throw ShapeMismatchError("truth and prediction lengths differ");
    if (truth.empty()) throw EmptyInputError("no samples to score");
    std::set<int> labels(truth.begin(), truth.end());
    labels.insert(predicted.begin(), predicted.end());
    std::map<int, double> tp, fp, fn, support;
    double correct = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        support[truth[i]] += 1.0;
        if (truth[i] == predicted[i]) {
            tp[truth[i]] += 1.0;
            correct += 1.0;
        } else {
            fp[predicted[i]] += 1.0;
            fn[truth[i]] += 1.0;
        }
    }
    ClassificationMetrics m;
    m.accuracy = correct / static_cast<double>(truth.size());
    double macro = 0.0, weighted = 0.0;
    for (int c : labels) {
        const double denom = 2.0 * tp[c] + fp[c] + fn[c];
        const double f1 = denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
        macro += f1;
        weighted += f1 * support[c];
    }
    m.macro_f1 = macro / static_cast<double>(labels.size());
    m.weighted_f1 = weighted / static_cast<double>(truth.size());
    return m;
}

namespace {

struct Standardizer {
    Eigen::RowVectorXd mean, scale;

    explicit Standardizer(const Matrix& x) {
        mean = x.colwise().mean();
        const Matrix centered = x.rowwise() - mean;
        scale = (centered.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt().matrix();
        for (Eigen::Index j = 0; j < scale.size(); ++j)
            if (!(scale(j) > 1e-12)) scale(j) = 1.0;
    }
    Matrix apply(const Matrix& x) const {
        return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    }
};

// Mean cross entropy + (l2 / 2) * ||W||^2 and its gradient. W is D x C with
// the bias as the last row (not penalized).
double logistic_objective(const Matrix& x1, const Matrix& onehot, const Matrix& w, double l2, Matrix* grad) {
    const double n = static_cast<double>(x1.rows());
    Matrix logits = x1 * w;
    const Eigen::VectorXd mx = logits.rowwise().maxCoeff();
    logits.colwise() -= mx;
    const Eigen::VectorXd lse = logits.array().exp().rowwise().sum().log().matrix();
    double loss = -(onehot.array() * (logits.colwise() - lse).array()).sum() / n;
    const auto D = w.rows() - 1;
    loss += 0.5 * l2 * w.topRows(D).squaredNorm();
    if (grad) {
        Matrix p = (logits.colwise() - lse).array().exp().matrix();
        *grad = x1.transpose() * (p - onehot) / n;
        grad->topRows(D) += l2 * w.topRows(D);
    }
    return loss;
}

}  // namespace

std::vector<int> linear_probe_predict(const Matrix& train_emb, std::span<const int> train_labels,
                                      const Matrix& query_emb, const LinearProbeOptions& options) {
    if (static_cast<std::size_t>(train_emb.rows()) != train_labels.size())
        throw ShapeMismatchError("train embeddings and labels differ in length");
    if (query_emb.rows() > 0 && query_emb.cols() != train_emb.cols())
        throw ShapeMismatchError("train and query embeddings differ in width");
    std::vector<int> classes(train_labels.begin(), train_labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) throw DegenerateLabelsError("linear probe needs at least two training classes");
    require_finite(train_emb, "train embeddings");

    const Standardizer st(train_emb);
    const Eigen::Index n = train_emb.rows(), D = train_emb.cols(), C = static_cast<Eigen::Index>(classes.size());
    Matrix x1(n, D + 1);
    x1.leftCols(D) = st.apply(train_emb);
    x1.col(D).setOnes();
    Matrix onehot = Matrix::Zero(n, C);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto c = std::lower_bound(classes.begin(), classes.end(), train_labels[static_cast<std::size_t>(i)]) - classes.begin();
        onehot(i, c) = 1.0;
    }

    Matrix w = Matrix::Zero(D + 1, C), grad;
    double f = logistic_objective(x1, onehot, w, options.l2, &grad);
    double step = 1.0;
    for (int it = 0; it < options.max_steps; ++it) {
        const double gn2 = grad.squaredNorm();
        if (std::sqrt(gn2) < options.grad_tol) break;
        // Armijo backtracking; the step grows again after each success
        step = std::min(step * 2.0, 1e4);
        Matrix candidate, cand_grad;
        double fc = 0.0;
        while (true) {
            candidate = w - step * grad;
            fc = logistic_objective(x1, onehot, candidate, options.l2, nullptr);
            if (fc <= f - 1e-4 * step * gn2 || step < 1e-12) break;
            step *= 0.5;
        }
        if (step < 1e-12) break;
        w = std::move(candidate);
        f = logistic_objective(x1, onehot, w, options.l2, &grad);
    }

    Matrix q1(query_emb.rows(), D + 1);
    if (query_emb.rows() > 0) q1.leftCols(D) = st.apply(query_emb);
    q1.col(D).setOnes();
    const Matrix scores = q1 * w;
    std::vector<int> out(static_cast<std::size_t>(query_emb.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        scores.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(best)];
    }
    return out;
}

ClassificationMetrics eval_linear_probe(const Matrix& train_emb, std::span<const int> train_labels,
                                        const Matrix& val_emb, std::span<const int> val_labels,
                                        const LinearProbeOptions& options) {
    if (static_cast<std::size_t>(val_emb.rows()) != val_labels.size())
        throw ShapeMismatchError("validation embeddings and labels differ in length");
    const auto pred = linear_probe_predict(train_emb, train_labels, val_emb, options);
    return classification_metrics(val_labels, pred);
}

std::vector<int> knn_predict(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& query_emb,
                             int k) {
    if (static_cast<std::size_t>(train_emb.rows()) != train_labels.size())
        throw ShapeMismatchError("train embeddings and labels differ in length");
    if (k <= 0 || k > train_emb.rows())
        throw ConfigError("k must lie in [1, " + std::to_string(train_emb.rows()) + "], got " + std::to_string(k));
    if (query_emb.rows() > 0 && query_emb.cols() != train_emb.cols())
        throw ShapeMismatchError("train and query embeddings differ in width");
    const Matrix tn = relational::l2_normalize(train_emb);
    const Matrix qn = query_emb.rows() > 0 ? relational::l2_normalize(query_emb) : query_emb;
    const Matrix dist = (1.0 - (qn * tn.transpose()).array()).matrix();

    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(qn.rows()));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(tn.rows()));
    for (Eigen::Index q = 0; q < qn.rows(); ++q) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Eigen::Index a, Eigen::Index b) {
            const double da = dist(q, a), db = dist(q, b);
            return da < db || (da == db && a < b);
        });
        std::map<int, std::pair<int, double>> votes;  // label -> (count, summed distance)
        for (int j = 0; j < k; ++j) {
            auto& v = votes[train_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])]];
            v.first += 1;
            v.second += dist(q, order[static_cast<std::size_t>(j)]);
        }
        int best = votes.begin()->first;
        auto best_v = votes.begin()->second;
        for (const auto& [label, v] : votes) {
            if (v.first > best_v.first || (v.first == best_v.first && v.second < best_v.second)) {
                best = label;
                best_v = v;
            }
        }
        out.push_back(best);
    }
    return out;
}

ClassificationMetrics eval_knn(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& val_emb,
                               std::span<const int> val_labels, int k) {
    if (static_cast<std::size_t>(val_emb.rows()) != val_labels.size())
        throw ShapeMismatchError("validation embeddings and labels differ in length");
    return classification_metrics(val_labels, knn_predict(train_emb, train_labels, val_emb, k));
}

KnnSweep eval_knn_sweep(const Matrix& train_emb, std::span<const int> train_labels, const Matrix& val_emb,
                        std::span<const int> val_labels, std::span<const int> ks) {
    if (ks.empty()) throw ConfigError("empty k sweep");
    KnnSweep sweep;
    for (int k : ks) {
        const auto m = eval_knn(train_emb, train_labels, val_emb, val_labels, k);
        sweep.all.emplace_back(k, m);
        if (sweep.all.size() == 1 || m.accuracy > sweep.best.accuracy ||
            (m.accuracy == sweep.best.accuracy && k < sweep.best_k)) {
            sweep.best = m;
            sweep.best_k = k;
        }
    }
    return sweep;
}

}  // namespace rd::probe
