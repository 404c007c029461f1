#include "reldistill/student.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"
#include "reldistill/log.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rd::student {

namespace fs = std::filesystem;
using contrastive::Strategy;
using nlohmann::json;

void validate(const Stage1Config& c) {
    if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(c.tau > 0.0) || !std::isfinite(c.tau)) throw InvalidTemperatureError("tau must be positive");
    if (c.epochs < 0) throw ConfigError("epochs must be non-negative");
    if (c.batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (!(c.learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
    if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
    if (c.augmentation.max_rotation_deg < 0.0 || c.augmentation.max_rotation_deg > 90.0)
        throw ConfigError("rotation range must lie in [0, 90] degrees");
}

json to_json(const Stage1Config& c) {
    const auto& a = c.augmentation;
    return json{
        {"strategy", std::string(contrastive::to_string(c.strategy))},
        {"lambda", c.lambda},
        {"tau", c.tau},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"weight_decay", c.weight_decay},
        {"lr_floor", c.lr_floor},
        {"seed", c.seed},
        {"val_fraction", c.val_fraction},
        {"distill_reduction", c.distill_reduction == relational::Reduction::sum_anchors ? "sum" : "mean"},
        {"supcon_reduction", c.supcon_reduction == contrastive::AnchorReduction::sum ? "sum" : "mean"},
        {"augmentation",
         {{"enabled", a.enabled},
          {"flips", a.flips},
          {"max_rotation_deg", a.max_rotation_deg},
          {"color_jitter", a.color_jitter},
          {"brightness", a.brightness},
          {"contrast", a.contrast},
          {"saturation", a.saturation},
          {"hue", a.hue},
          {"vector_noise", a.vector_noise}}},
    };
}

Stage1Config stage1_config_from_json(const json& j) {
    Stage1Config c;
    try {
        if (j.contains("strategy")) c.strategy = contrastive::parse_strategy(j.at("strategy").get<std::string>());
        c.lambda = j.value("lambda", c.lambda);
        c.tau = j.value("tau", c.tau);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.lr_floor = j.value("lr_floor", c.lr_floor);
        c.seed = j.value("seed", c.seed);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        if (j.value("distill_reduction", std::string("mean")) == "sum") c.distill_reduction = relational::Reduction::sum_anchors;
        if (j.value("supcon_reduction", std::string("mean")) == "sum") c.supcon_reduction = contrastive::AnchorReduction::sum;
        if (j.contains("augmentation")) {
            const auto& a = j.at("augmentation");
            auto& o = c.augmentation;
            o.enabled = a.value("enabled", o.enabled);
            o.flips = a.value("flips", o.flips);
            o.max_rotation_deg = a.value("max_rotation_deg", o.max_rotation_deg);
            o.color_jitter = a.value("color_jitter", o.color_jitter);
            o.brightness = a.value("brightness", o.brightness);
            o.contrast = a.value("contrast", o.contrast);
            o.saturation = a.value("saturation", o.saturation);
            o.hue = a.value("hue", o.hue);
            o.vector_noise = a.value("vector_noise", o.vector_noise);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("stage1 config: ") + e.what());
    }
    validate(c);
    return c;
}

namespace {

contrastive::Stage1LossConfig loss_config(const Stage1Config& c) {
    contrastive::Stage1LossConfig lc;
    lc.lambda = c.lambda;
    lc.tau_supcon = c.tau;
    lc.tau_distill = c.tau;
    lc.distill_reduction = c.distill_reduction;
    lc.supcon_reduction = c.supcon_reduction;
    return lc;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

nn::Parameters head_parameters(const contrastive::ClassifierHead& head) {
    nn::Parameters p;
    p.add("head.weight", head.weight);
    p.add("head.bias", head.bias.transpose());
    return p;
}

contrastive::ClassifierHead head_from(const nn::Parameters& p) {
    return {p[0], p[1].row(0).transpose()};
}

struct BatchLoss {
    contrastive::LossBreakdown loss;
    bool skipped = false;
};

// One batch through the configured objective. `views_b` is only used by
// the two-view strategies.
BatchLoss batch_loss(const Matrix& za, const Matrix* zb, std::span<const int> labels,
                     const std::vector<Matrix>& teacher_views, const contrastive::ClassifierHead* head,
                     const Stage1Config& config, contrastive::Stage1Gradients* grads) {
    contrastive::Stage1Inputs in;
    in.embeddings = &za;
    in.second_view = zb;
    in.labels = labels;
    in.teacher_views = teacher_views;
    in.head = head;
    try {
        return {contrastive::total_stage1_loss(in, config.strategy, loss_config(config), grads), false};
    } catch (const NoPositivePairsError&) {
        return {{}, true};
    }
}

}  // namespace

contrastive::LossBreakdown evaluate_stage1_loss(const Encoder& encoder, const contrastive::ClassifierHead* head,
                                                const LabeledDataset& dataset, std::span<const std::size_t> rows,
                                                const teachers::TeacherEnsemble* ensemble,
                                                const Stage1Config& config) {
    contrastive::LossBreakdown acc;
    acc.total = acc.supcon_component = acc.distill_component = 0.0;
    double weight = 0.0;
    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (std::size_t start = 0; start < rows.size(); start += bs) {
        const auto batch = rows.subspan(start, std::min(bs, rows.size() - start));
        if (batch.size() < 2) continue;
        std::vector<std::string> ids;
        std::vector<int> labels;
        for (std::size_t r : batch) {
            ids.push_back(dataset.ids[r]);
            labels.push_back(dataset.labels[r]);
        }
        const Matrix z = encoder.forward(gather_rows(dataset.inputs, batch));
        std::vector<Matrix> views;
        if (contrastive::uses_distillation(config.strategy)) views = ensemble->batch_views(ids);
        const BatchLoss b = batch_loss(z, contrastive::uses_two_views(config.strategy) ? &z : nullptr, labels, views,
                                       head, config, nullptr);
        if (b.skipped) continue;
        const double w = static_cast<double>(batch.size());
        acc.total += w * b.loss.total;
        acc.supcon_component += w * b.loss.supcon_component;
        acc.distill_component += w * b.loss.distill_component;
        acc.lambda = b.loss.lambda;
        acc.primary = b.loss.primary;
        acc.anchors_used += b.loss.anchors_used;
        acc.anchors_skipped += b.loss.anchors_skipped;
        weight += w;
    }
    if (weight == 0.0) {
        acc.total = acc.supcon_component = acc.distill_component = std::nan("");
        return acc;
    }
    acc.total /= weight;
    acc.supcon_component /= weight;
    acc.distill_component /= weight;
    return acc;
}

TrainResult train_stage1(const LabeledDataset& dataset, const teachers::TeacherEnsemble* ensemble,
                         const EncoderConfig& encoder_config, const Stage1Config& config, std::optional<Split> split) {
    validate(config);
    validate(encoder_config);
    if (dataset.size() == 0) throw EmptyInputError("stage I dataset is empty");
    if (encoder_config.input.index() != dataset.input.index())
        throw ConfigError("encoder input type does not match the dataset");
    if (encoder_config.input_size() != dataset.inputs.cols())
        throw ShapeError("encoder expects inputs of width " + std::to_string(encoder_config.input_size()) +
                         ", dataset has " + std::to_string(dataset.inputs.cols()));
    const bool distill = contrastive::uses_distillation(config.strategy);
    if (distill) {
        if (ensemble == nullptr || ensemble->empty())
            throw ConfigError(std::string(contrastive::to_string(config.strategy)) + " requires a teacher ensemble");
        for (const auto& id : dataset.ids)
            if (!ensemble->contains(id)) throw MissingSampleError("teacher ensemble has no embedding for '" + id + "'");
    }
    if (config.batch_size < 3) log::warn("batch size below 3 leaves at most one negative per anchor");

    TrainResult result;
    result.split = split ? *std::move(split) : group_split(dataset, config.val_fraction, config.seed);
    const auto& train_rows = result.split.train;
    const auto& val_rows = result.split.val;
    if (train_rows.size() < 2) throw BatchTooSmallError("stage I needs at least 2 training samples");

    Rng root(config.seed);
    Rng shuffle_rng = root.split(1);
    Rng aug_rng = root.split(2);
    Rng head_rng = root.split(3);

    Encoder encoder = build_encoder(encoder_config, config.seed);
    encoder.set_normalization(dataset.normalization);
    nn::Parameters head_params;
    const bool with_head = contrastive::uses_classifier_head(config.strategy);
    if (with_head) {
        const auto C = static_cast<Eigen::Index>(dataset.class_names.size());
        head_params = head_parameters({head_rng.normal_matrix(C, encoder_config.embed_dim, 0.01), Vector::Zero(C)});
    }
    auto current_head = [&]() -> std::optional<contrastive::ClassifierHead> {
        if (!with_head) return std::nullopt;
        return head_from(head_params);
    };

    const double initial = [&] {
        const auto head = current_head();
        return evaluate_stage1_loss(encoder, head ? &*head : nullptr, dataset, train_rows, ensemble, config).total;
    }();
    result.initial_train_loss = initial;

    nn::AdamW enc_opt(0.9, 0.999, 1e-8, config.weight_decay);
    nn::AdamW head_opt(0.9, 0.999, 1e-8, config.weight_decay);
    const auto bs = static_cast<std::size_t>(config.batch_size);
    const std::size_t full = train_rows.size() / bs;
    const std::size_t batches_per_epoch = full + (train_rows.size() % bs >= 2 ? 1 : 0);
    const long long total_steps = static_cast<long long>(batches_per_epoch) * config.epochs;
    long long step = 0;

    Checkpoint snapshot;
    snapshot.config = config;
    snapshot.class_names = dataset.class_names;
    std::vector<EpochRecord> history;
    std::optional<double> best_score;
    const bool two_views = contrastive::uses_two_views(config.strategy);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order = train_rows;
        shuffle_rng.shuffle(order);
        EpochRecord rec;
        rec.epoch = epoch;
        double seen = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            const std::size_t start = b * bs;
            const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
            std::vector<std::string> ids;
            std::vector<int> labels;
            for (std::size_t r : batch) {
                ids.push_back(dataset.ids[r]);
                labels.push_back(dataset.labels[r]);
            }
            const Matrix clean = gather_rows(dataset.inputs, batch);
            Tape tape_a, tape_b;
            const Matrix za = encoder.forward(augment(clean, dataset.input, config.augmentation, aug_rng), tape_a);
            Matrix zb;
            if (two_views) zb = encoder.forward(augment(clean, dataset.input, config.augmentation, aug_rng), tape_b);
            std::vector<Matrix> views;
            if (distill) views = ensemble->batch_views(ids);
            const auto head = current_head();
            contrastive::Stage1Gradients grads;
            const BatchLoss bl = batch_loss(za, two_views ? &zb : nullptr, labels, views, head ? &*head : nullptr,
                                            config, &grads);
            const double lr = nn::cosine_lr(step, total_steps, config.learning_rate, config.lr_floor);
            ++step;
            rec.lr = lr;
            if (bl.skipped) {
                log::warn("epoch " + std::to_string(epoch) + ": batch without positive pairs skipped");
                continue;
            }
            if (!std::isfinite(bl.loss.total))
                throw DivergenceError("non-finite stage I loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step));
            nn::Gradients g = nn::zeros_like(encoder.params());
            encoder.backward(tape_a, grads.embeddings, g);
            if (two_views) encoder.backward(tape_b, grads.second_view, g);
            if (!nn::all_finite(g))
                throw DivergenceError("non-finite gradient at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(step));
            enc_opt.step(encoder.params(), g, lr);
            if (with_head) head_opt.step(head_params, {grads.head.weight, grads.head.bias.transpose()}, lr);

            const double w = static_cast<double>(batch.size());
            rec.total += w * bl.loss.total;
            rec.supcon += w * bl.loss.supcon_component;
            rec.distill += w * bl.loss.distill_component;
            seen += w;
        }
        if (seen > 0.0) {
            rec.total /= seen;
            rec.supcon /= seen;
            rec.distill /= seen;
        }
        const auto head = current_head();
        double score = rec.total;
        if (!val_rows.empty()) {
            const double v = evaluate_stage1_loss(encoder, head ? &*head : nullptr, dataset, val_rows, ensemble, config).total;
            if (std::isfinite(v)) {
                rec.val_total = v;
                score = v;
            }
        }
        history.push_back(rec);
        log::info("epoch " + std::to_string(epoch) + " loss " + io::format_double(rec.total) +
                  (rec.val_total ? " val " + io::format_double(*rec.val_total) : std::string()));
        if (!best_score || score < *best_score) {
            best_score = score;
            result.best.encoder = encoder;
            result.best.head = head;
            result.best.epoch = epoch;
        }
    }

    snapshot.encoder = encoder;
    snapshot.head = current_head();
    snapshot.epoch = config.epochs;
    snapshot.history = history;
    result.last = snapshot;
    if (!best_score) {
        result.best = snapshot;
    } else {
        result.best.config = config;
        result.best.class_names = dataset.class_names;
        result.best.history = history;
    }
    const auto head = current_head();
    result.final_train_loss =
        evaluate_stage1_loss(encoder, head ? &*head : nullptr, dataset, train_rows, ensemble, config).total;
    return result;
}

EmbeddingMatrix embed(const Encoder& encoder, const Matrix& inputs, std::vector<std::string> ids, Eigen::Index chunk) {
    if (inputs.rows() > 0 && inputs.cols() != encoder.input_size())
        throw ShapeError("encoder expects inputs of width " + std::to_string(encoder.input_size()) + ", got " +
                         std::to_string(inputs.cols()));
    Matrix out(inputs.rows(), encoder.embed_dim());
    for (Eigen::Index start = 0; start < inputs.rows(); start += chunk) {
        const Eigen::Index n = std::min(chunk, inputs.rows() - start);
        out.middleRows(start, n) = encoder.forward(inputs.middleRows(start, n));
    }
    return EmbeddingMatrix(std::move(out), std::move(ids));
}

EmbeddingMatrix embed(const Checkpoint& checkpoint, const Matrix& inputs, std::vector<std::string> ids) {
    return embed(checkpoint.encoder, inputs, std::move(ids));
}

// ---- checkpoint files ------------------------------------------------------

void save_checkpoint(const fs::path& dir, const Checkpoint& cp) {
    fs::create_directories(dir);
    nn::Parameters all = cp.encoder.params();
    if (cp.head) {
        const nn::Parameters h = head_parameters(*cp.head);
        for (std::size_t i = 0; i < h.size(); ++i) all.add(h.names[i], h[i]);
    }
    io::write_file_atomic(dir / "weights.bin", nn::encode_parameters(all));

    json cfg{
        {"format", "reldistill-checkpoint"},
        {"encoder", to_json(cp.encoder.config())},
        {"stage1", to_json(cp.config)},
        {"class_names", cp.class_names},
        {"epoch", cp.epoch},
        {"normalization", {{"mean", cp.encoder.normalization().mean}, {"std", cp.encoder.normalization().stddev}}},
    };
    io::write_file_atomic(dir / "config.json", cfg.dump(2) + "\n");

    io::CsvTable hist;
    hist.header = {"epoch", "total", "supcon", "distill", "lr"};
    io::CsvTable val;
    val.header = {"epoch", "val_total"};
    for (const auto& r : cp.history) {
        hist.rows.push_back({std::to_string(r.epoch), io::format_double(r.total), io::format_double(r.supcon),
                             io::format_double(r.distill), io::format_double(r.lr)});
        if (r.val_total) val.rows.push_back({std::to_string(r.epoch), io::format_double(*r.val_total)});
    }
    io::write_file_atomic(dir / "history.csv", io::format_csv(hist));
    io::write_file_atomic(dir / "validation.csv", io::format_csv(val));
}

Checkpoint load_checkpoint(const fs::path& dir) {
    json cfg;
    try {
        cfg = json::parse(io::read_file(dir / "config.json"));
    } catch (const json::exception& e) {
        throw FormatError((dir / "config.json").string() + ": " + e.what());
    }
    Checkpoint cp;
    const EncoderConfig ec = encoder_config_from_json(cfg.at("encoder"));
    cp.config = stage1_config_from_json(cfg.at("stage1"));
    cp.class_names = cfg.value("class_names", std::vector<std::string>{});
    cp.epoch = cfg.value("epoch", 0);
    InputNormalization norm;
    if (cfg.contains("normalization")) {
        norm.mean = cfg["normalization"].value("mean", std::vector<double>{});
        norm.stddev = cfg["normalization"].value("std", std::vector<double>{});
    }

    const fs::path weights = dir / "weights.bin";
    nn::Parameters all = nn::decode_parameters(io::read_file(weights), weights.string());
    nn::Parameters enc, head;
    for (std::size_t i = 0; i < all.size(); ++i) {
        (all.names[i].rfind("head.", 0) == 0 ? head : enc).add(all.names[i], std::move(all[i]));
    }
    const nn::Parameters expected = build_encoder(ec, 0).params();
    if (expected.size() != enc.size()) throw FormatError(weights.string() + ": parameter count does not match config");
    for (std::size_t i = 0; i < enc.size(); ++i) {
        if (enc.names[i] != expected.names[i] || enc[i].rows() != expected[i].rows() || enc[i].cols() != expected[i].cols())
            throw FormatError(weights.string() + ": tensor '" + enc.names[i] + "' does not match config");
    }
    cp.encoder = Encoder(ec, std::move(enc), std::move(norm));
    if (head.size() == 2) cp.head = head_from(head);

    if (fs::exists(dir / "history.csv")) {
        const io::CsvTable hist = io::read_csv(dir / "history.csv");
        for (const auto& row : hist.rows) {
            EpochRecord r;
            r.epoch = static_cast<int>(io::parse_int(row.at(0), "epoch"));
            r.total = io::parse_double(row.at(1), "total");
            r.supcon = io::parse_double(row.at(2), "supcon");
            r.distill = io::parse_double(row.at(3), "distill");
            r.lr = io::parse_double(row.at(4), "lr");
            cp.history.push_back(r);
        }
    }
    if (fs::exists(dir / "validation.csv")) {
        const io::CsvTable val = io::read_csv(dir / "validation.csv");
        for (const auto& row : val.rows) {
            const int e = static_cast<int>(io::parse_int(row.at(0), "epoch"));
            for (auto& r : cp.history)
                if (r.epoch == e) r.val_total = io::parse_double(row.at(1), "val_total");
        }
    }
    return cp;
}

}  // namespace rd::student
