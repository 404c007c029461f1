#include "reldistill/mil.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"
#include "reldistill/log.hpp"
#include "reldistill/rng.hpp"
#include "reldistill/survival.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>

namespace rd::mil {

namespace fs = std::filesystem;

int horizon_label(double time_months, int event, double horizon) {
    return event == 1 && time_months <= horizon ? 1 : 0;
}

void validate(const Bag& bag, double horizon) {
    if (bag.features.rows() < 1) throw ShapeError("bag '" + bag.slide_id + "' has no instances");
    if (bag.event != 0 && bag.event != 1) throw ConfigError("bag '" + bag.slide_id + "': event must be 0 or 1");
    if (!(bag.time_months >= 0.0)) throw ConfigError("bag '" + bag.slide_id + "': negative survival time");
    if (bag.label != horizon_label(bag.time_months, bag.event, horizon))
        throw ConfigError("bag '" + bag.slide_id + "': label disagrees with time and event at the horizon");
}

AttentionParams init_attention(Eigen::Index dim, Eigen::Index hidden, bool gated, std::uint64_t seed) {
    if (dim <= 0 || hidden <= 0) throw ConfigError("attention dims must be positive");
    Rng rng(seed);
    AttentionParams p;
    const double a = std::sqrt(6.0 / static_cast<double>(dim + hidden));
    p.V = rng.uniform_matrix(hidden, dim, a);
    p.U = rng.uniform_matrix(hidden, dim, a);
    p.w = rng.uniform_matrix(hidden, 1, std::sqrt(6.0 / static_cast<double>(hidden + 1)));
    p.w_c = rng.uniform_matrix(dim, 1, 1.0 / std::sqrt(static_cast<double>(dim)));
    p.b = 0.0;
    p.gated = gated;
    return p;
}

AttentionParams zeros_like(const AttentionParams& p) {
    AttentionParams z;
    z.V = Matrix::Zero(p.V.rows(), p.V.cols());
    z.U = Matrix::Zero(p.U.rows(), p.U.cols());
    z.w = Vector::Zero(p.w.size());
    z.w_c = Vector::Zero(p.w_c.size());
    z.gated = p.gated;
    return z;
}

nn::Parameters to_parameters(const AttentionParams& p) {
    nn::Parameters out;
    out.add("attention.V", p.V);
    out.add("attention.U", p.U);
    out.add("attention.w", p.w);
    out.add("head.w_c", p.w_c);
    out.add("head.b", Matrix::Constant(1, 1, p.b));
    return out;
}

AttentionParams from_parameters(const nn::Parameters& params, bool gated) {
    if (params.size() != 5) throw FormatError("attention model must hold 5 tensors");
    AttentionParams p;
    p.V = params[0];
    p.U = params[1];
    p.w = params[2].col(0);
    p.w_c = params[3].col(0);
    p.b = params[4](0, 0);
    p.gated = gated;
    if (p.U.rows() != p.V.rows() || p.U.cols() != p.V.cols() || p.w.size() != p.V.rows() || p.w_c.size() != p.V.cols())
        throw FormatError("attention model tensors have inconsistent shapes");
    return p;
}

namespace {

void check_shapes(const Matrix& H, const AttentionParams& p) {
    if (H.rows() < 1) throw ShapeError("bag has no instances");
    if (H.cols() != p.dim())
        throw ShapeError("bag feature dim " + std::to_string(H.cols()) + " does not match attention dim " +
                         std::to_string(p.dim()));
    if (p.w.size() != p.hidden() || p.w_c.size() != p.dim() || (p.gated && (p.U.rows() != p.hidden() || p.U.cols() != p.dim())))
        throw ShapeError("inconsistent attention parameter shapes");
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Forward {
    Matrix A;  // tanh(H V^T)
    Matrix G;  // sigmoid(H U^T); empty when not gated
    Vector a;
    Vector g;
    double logit = 0.0;
    double prob = 0.5;
};

Forward forward(const Matrix& H, const AttentionParams& p) {
    check_shapes(H, p);
    Forward f;
    f.A = (H * p.V.transpose()).array().tanh().matrix();
    Vector s;
    if (p.gated) {
        f.G = (H * p.U.transpose()).unaryExpr([](double x) { return sigmoid(x); });
        s = f.A.cwiseProduct(f.G) * p.w;
    } else {
        s = f.A * p.w;
    }
    const double mx = s.maxCoeff();
    f.a = (s.array() - mx).exp().matrix();
    f.a /= f.a.sum();
    f.g = H.transpose() * f.a;
    f.logit = p.w_c.dot(f.g) + p.b;
    f.prob = sigmoid(f.logit);
    return f;
}

double bce(double prob, int label) {
    const double pc = std::clamp(prob, kProbabilityClamp, 1.0 - kProbabilityClamp);
    return label == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

double l1_penalty(const AttentionParams& p, L1Scope scope) {
    double s = 0.0;
    if (scope.attention) {
        s += p.V.cwiseAbs().sum() + p.w.cwiseAbs().sum();
        if (p.gated) s += p.U.cwiseAbs().sum();
    }
    if (scope.head) s += p.w_c.cwiseAbs().sum();
    return s;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// BCE of one bag; accumulates the gradient of that BCE into grad.
double bag_backward(const Matrix& H, int label, const AttentionParams& p, AttentionParams& grad) {
    const Forward f = forward(H, p);
    const double loss = bce(f.prob, label);
    const bool clamped = f.prob < kProbabilityClamp || f.prob > 1.0 - kProbabilityClamp;
    const double dl = clamped ? 0.0 : f.prob - static_cast<double>(label);
    if (dl == 0.0) return loss;
    grad.w_c += dl * f.g;
    grad.b += dl;
    const Vector dg = dl * p.w_c;
    const Vector da = H * dg;
    const Vector ds = f.a.cwiseProduct((da.array() - f.a.dot(da)).matrix());
    const Matrix M = p.gated ? Matrix(f.A.cwiseProduct(f.G)) : f.A;
    grad.w += M.transpose() * ds;
    const Matrix dM = ds * p.w.transpose();
    if (p.gated) {
        const Matrix dpre_a = dM.cwiseProduct(f.G).cwiseProduct((1.0 - f.A.array().square()).matrix());
        const Matrix dpre_g = dM.cwiseProduct(f.A).cwiseProduct((f.G.array() * (1.0 - f.G.array())).matrix());
        grad.V += dpre_a.transpose() * H;
        grad.U += dpre_g.transpose() * H;
    } else {
        const Matrix dpre_a = dM.cwiseProduct((1.0 - f.A.array().square()).matrix());
        grad.V += dpre_a.transpose() * H;
    }
    return loss;
}

}  // namespace

Vector attention_weights(const Matrix& H, const AttentionParams& params) { return forward(H, params).a; }

Vector bag_pool(const Matrix& H, const Vector& a) {
    if (H.rows() < 1) throw ShapeError("bag has no instances");
    if (a.size() != H.rows()) throw ShapeError("attention length does not match bag size");
    if (std::abs(a.sum() - 1.0) > 1e-6) throw ShapeError("attention weights do not sum to 1");
    if (H.rows() == 1) return H.row(0).transpose();
    return H.transpose() * a;
}

SlidePrediction predict_slide(const Matrix& H, const AttentionParams& params) {
    Forward f = forward(H, params);
    SlidePrediction p;
    if (H.rows() == 1) {
        // exact pass-through for singleton bags
        f.g = H.row(0).transpose();
        f.logit = params.w_c.dot(f.g) + params.b;
        f.prob = sigmoid(f.logit);
    }
    p.logit = f.logit;
    p.probability = f.prob;
    p.attention = std::move(f.a);
    return p;
}

SlidePrediction predict_slide(const Bag& bag, const AttentionParams& params) {
    return predict_slide(bag.features, params);
}

double stage2_loss(std::span<const SlidePrediction> predictions, std::span<const int> labels,
                   const AttentionParams& params, double l1_coeff, L1Scope scope) {
    if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
    if (l1_coeff < 0.0) throw ConfigError("l1 coefficient must be non-negative");
    double loss = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) loss += bce(predictions[i].probability, labels[i]);
    return loss + l1_coeff * l1_penalty(params, scope);
}

double stage2_loss_and_grad(std::span<const Matrix> bags, std::span<const int> labels, const AttentionParams& params,
                            double l1_coeff, AttentionParams* grad, L1Scope scope) {
    if (bags.size() != labels.size()) throw ShapeError("bags and labels differ in length");
    if (l1_coeff < 0.0) throw ConfigError("l1 coefficient must be non-negative");
    AttentionParams g = zeros_like(params);
    double loss = 0.0;
    for (std::size_t i = 0; i < bags.size(); ++i) loss += bag_backward(bags[i], labels[i], params, g);
    loss += l1_coeff * l1_penalty(params, scope);
    if (grad) {
        if (l1_coeff > 0.0) {
            if (scope.attention) {
                g.V += l1_coeff * params.V.unaryExpr(&sign);
                g.w += l1_coeff * params.w.unaryExpr(&sign);
                if (params.gated) g.U += l1_coeff * params.U.unaryExpr(&sign);
            }
            if (scope.head) g.w_c += l1_coeff * params.w_c.unaryExpr(&sign);
        }
        *grad = std::move(g);
    }
    return loss;
}

void validate(const Stage2Config& c) {
    if (c.hidden <= 0) throw ConfigError("attention hidden size must be positive");
    if (!(c.learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (c.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (c.patience < 1) throw ConfigError("patience must be at least 1");
    if (!(c.l1_coeff >= 0.0)) throw ConfigError("l1 coefficient must be non-negative");
}

std::vector<PatientPrediction> patient_level(std::span<const OutOfFoldPrediction> predictions) {
    std::vector<PatientPrediction> out;
    std::unordered_map<std::string, std::pair<std::size_t, int>> index;  // -> (slot, slide count)
    for (const auto& p : predictions) {
        auto [it, fresh] = index.try_emplace(p.patient_id, out.size(), 0);
        if (fresh) out.push_back({p.patient_id, 0.0, p.fold});
        out[it->second.first].probability += p.probability;
        it->second.second += 1;
    }
    for (auto& p : out) p.probability /= index.at(p.patient_id).second;
    return out;
}

namespace {

struct Scored {
    double score;
    bool is_auc;
};

// Validation AUC at the configured level; -mean BCE when AUC is undefined.
Scored validation_score(std::span<const Bag* const> val, const AttentionParams& p, AucLevel level) {
    std::vector<OutOfFoldPrediction> preds;
    std::map<std::string, int> patient_label;
    double loss = 0.0;
    for (const Bag* b : val) {
        const SlidePrediction sp = predict_slide(*b, p);
        preds.push_back({b->patient_id, b->slide_id, 0, sp.logit, sp.probability});
        patient_label[b->patient_id] = b->label;
        loss += bce(sp.probability, b->label);
    }
    std::vector<double> scores;
    std::vector<int> labels;
    if (level == AucLevel::patient) {
        for (const auto& pp : patient_level(preds)) {
            scores.push_back(pp.probability);
            labels.push_back(patient_label.at(pp.patient_id));
        }
    } else {
        for (std::size_t i = 0; i < preds.size(); ++i) {
            scores.push_back(preds[i].probability);
            labels.push_back(val[i]->label);
        }
    }
    try {
        return {survival::roc_auc(scores, labels), true};
    } catch (const DegenerateLabelsError&) {
        return {-loss / static_cast<double>(std::max<std::size_t>(1, val.size())), false};
    }
}

FoldModel train_fold(int fold, std::span<const Bag> bags, const cohort::FoldAssignment& folds, const Stage2Config& config) {
    const auto& inner = folds.inner.at(static_cast<std::size_t>(fold));
    const std::set<std::string> train_patients(inner.train.begin(), inner.train.end());
    const std::set<std::string> val_patients(inner.val.begin(), inner.val.end());
    std::vector<const Bag*> train, val;
    for (const auto& b : bags) {
        if (train_patients.contains(b.patient_id)) train.push_back(&b);
        else if (val_patients.contains(b.patient_id)) val.push_back(&b);
    }
    if (train.empty()) throw ConfigError("fold " + std::to_string(fold) + " has no training bags");
    if (val.empty()) {
        log::warn("fold " + std::to_string(fold) + " has no validation bags; scoring on the training bags");
        val = train;
    }

    Rng rng(config.seed + static_cast<std::uint64_t>(fold));
    AttentionParams params = init_attention(bags.front().features.cols(), config.hidden, config.gated, rng.next_u64());
    nn::Parameters tensors = to_parameters(params);
    nn::AdamW adam(0.9, 0.999, 1e-8, 0.0);

    FoldModel model;
    model.fold = fold;
    model.params = params;
    bool have_best = false;
    int since_best = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<const Bag*> order = train;
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (const Bag* b : order) {
            AttentionParams grad;
            const Matrix* h = &b->features;
            const double loss = stage2_loss_and_grad(std::span<const Matrix>(h, 1), std::span<const int>(&b->label, 1),
                                                     params, config.l1_coeff, &grad, config.l1_scope);
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite stage II loss in fold " + std::to_string(fold) + ", epoch " +
                                      std::to_string(epoch) + " on slide '" + b->slide_id + "'");
            epoch_loss += loss;
            const nn::Parameters g = to_parameters(grad);
            adam.step(tensors, g.values, config.learning_rate);
            params = from_parameters(tensors, config.gated);
        }
        model.train_losses.push_back(epoch_loss / static_cast<double>(order.size()));
        const Scored s = validation_score(val, params, config.auc_level);
        model.val_scores.push_back(s.score);
        model.score_is_auc = s.is_auc;
        model.epochs_run = epoch;
        if (!have_best || s.score > model.best_score) {
            have_best = true;
            model.best_score = s.score;
            model.best_epoch = epoch;
            model.params = params;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    return model;
}

}  // namespace

Stage2Result train_stage2(std::span<const Bag> bags, const cohort::FoldAssignment& folds, const Stage2Config& config) {
    validate(config);
    if (bags.empty()) throw EmptyInputError("no bags to train on");
    folds.check();
    const Eigen::Index d = bags.front().features.cols();
    for (const auto& b : bags) {
        validate(b);
        if (b.features.cols() != d) throw ShapeError("bag '" + b.slide_id + "' has feature dim " + std::to_string(b.features.cols()));
        if (!folds.fold_of.contains(b.patient_id))
            throw MissingSampleError("patient '" + b.patient_id + "' has no fold assignment");
    }

    Stage2Result result;
    result.folds.resize(static_cast<std::size_t>(folds.k));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(folds.k));
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned workers = std::min<unsigned>(config.threads > 0 ? static_cast<unsigned>(config.threads) : hw,
                                                static_cast<unsigned>(folds.k));
    std::mutex mu;
    int next = 0;
    auto worker = [&] {
        while (true) {
            int f;
            {
                std::lock_guard lock(mu);
                if (next >= folds.k) return;
                f = next++;
            }
            try {
                result.folds[static_cast<std::size_t>(f)] = train_fold(f, bags, folds, config);
            } catch (...) {
                errors[static_cast<std::size_t>(f)] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    for (const auto& b : bags) {
        const int f = folds.fold_of.at(b.patient_id);
        const SlidePrediction sp = predict_slide(b, result.folds[static_cast<std::size_t>(f)].params);
        result.predictions.push_back({b.patient_id, b.slide_id, f, sp.logit, sp.probability});
    }
    return result;
}

void write_bag_features(const fs::path& bag_dir, const Bag& bag) {
    fs::create_directories(bag_dir);
    io::write_mdemb(bag_dir / (bag.slide_id + ".emb"), bag.features, io::DType::fp32);
}

Matrix read_bag_features(const fs::path& bag_dir, const std::string& slide_id) {
    return io::read_mdemb(bag_dir / (slide_id + ".emb"));
}

void write_attention_csv(const fs::path& path, std::span<const std::string> slide_ids, std::span<const Vector> attention) {
    if (slide_ids.size() != attention.size()) throw ShapeError("slide ids and attention vectors differ in count");
    io::CsvTable t;
    t.header = {"slide_id", "patch_index", "weight"};
    for (std::size_t i = 0; i < slide_ids.size(); ++i)
        for (Eigen::Index n = 0; n < attention[i].size(); ++n)
            t.rows.push_back({slide_ids[i], std::to_string(n), io::format_double(attention[i](n))});
    io::write_file_atomic(path, io::format_csv(t));
}

void write_predictions_csv(const fs::path& path, std::span<const OutOfFoldPrediction> predictions) {
    io::CsvTable t;
    t.header = {"patient_id", "slide_id", "fold", "probability"};
    for (const auto& p : predictions)
        t.rows.push_back({p.patient_id, p.slide_id, std::to_string(p.fold), io::format_double(p.probability)});
    io::write_file_atomic(path, io::format_csv(t));
}

std::vector<OutOfFoldPrediction> read_predictions_csv(const fs::path& path) {
    const io::CsvTable t = io::read_csv(path);
    const std::string origin = path.string();
    const auto pc = t.require_column("patient_id", origin);
    const auto sc = t.require_column("slide_id", origin);
    const auto fc = t.require_column("fold", origin);
    const auto prc = t.require_column("probability", origin);
    std::vector<OutOfFoldPrediction> out;
    for (const auto& row : t.rows) {
        OutOfFoldPrediction p;
        p.patient_id = row.at(pc);
        p.slide_id = row.at(sc);
        p.fold = static_cast<int>(io::parse_int(row.at(fc), "fold"));
        p.probability = io::parse_double(row.at(prc), "probability");
        p.logit = std::log(p.probability / (1.0 - p.probability));
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace rd::mil
