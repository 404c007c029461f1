#include "common.hpp"

#include "reldistill/cohort.hpp"
#include "reldistill/mil.hpp"

#include <map>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json cmd_mil_train(const MilTrainOptions& o) {
    detail::require_out(o.out, "mil-train");
    detail::require_exists(o.cohort, "--cohort");
    RunManifest manifest;
    manifest.version = version();
    manifest.command = "mil-train";
    manifest.options = o;

    mil::Stage2Config cfg;
    cfg.hidden = o.hidden;
    cfg.gated = o.gated;
    cfg.learning_rate = o.lr;
    cfg.epochs = o.epochs;
    cfg.patience = o.patience;
    cfg.l1_coeff = o.l1;
    cfg.l1_scope.head = o.l1_head;
    if (o.auc_level == "patient") {
        cfg.auc_level = mil::AucLevel::patient;
    } else if (o.auc_level == "slide") {
        cfg.auc_level = mil::AucLevel::slide;
    } else {
        throw ConfigError("--auc-level must be patient or slide, got '" + o.auc_level + "'");
    }
    cfg.seed = o.seed;
    cfg.threads = o.threads;
    mil::validate(cfg);

    std::vector<cohort::PatientRecord> patients;
    std::vector<mil::Bag> bags;
    cohort::FoldAssignment folds;
    {
        PhaseTimer t(manifest, "load");
        const fs::path bag_dir = o.bags.empty() ? fs::path(o.cohort).parent_path() / "bags" : fs::path(o.bags);
        detail::require_exists(bag_dir, "--bags");
        patients = cohort::read_cohort_csv(o.cohort, o.covariates);
        manifest.add_input(o.cohort);
        manifest.add_input_dir(bag_dir, ".emb");
        bags = cohort::load_bags(patients, bag_dir);
    }
    {
        PhaseTimer t(manifest, "folds");
        if (!o.folds_file.empty()) {
            detail::require_exists(o.folds_file, "--folds-file");
            manifest.add_input(o.folds_file);
            folds = cohort::read_folds_json(o.folds_file);
        } else {
            if (o.folds < 2) throw ConfigError("--folds must be at least 2");
            if (static_cast<int>(patients.size()) < o.folds)
                throw ConfigError("--folds " + std::to_string(o.folds) + " needs at least that many patients, have " +
                                  std::to_string(patients.size()));
            folds = cohort::stratified_kfold(patients, o.covariates, o.folds, o.seed, o.inner_val);
        }
    }

    mil::Stage2Result result;
    {
        PhaseTimer t(manifest, "train");
        result = mil::train_stage2(bags, folds, cfg);
    }

    const fs::path out = o.out;
    {
        PhaseTimer t(manifest, "write");
        detail::ensure_dir(out / "models");
        cohort::write_folds_json(out / "folds.json", folds);
        mil::write_predictions_csv(out / "predictions.csv", result.predictions);

        json fold_info = json::array();
        io::CsvTable training;
        training.header = {"fold", "epoch", "train_loss", "val_score"};
        for (const auto& f : result.folds) {
            io::write_file_atomic(out / "models" / ("fold_" + std::to_string(f.fold) + ".bin"),
                                  nn::encode_parameters(mil::to_parameters(f.params)));
            fold_info.push_back({{"fold", f.fold},
                                 {"best_epoch", f.best_epoch},
                                 {"epochs_run", f.epochs_run},
                                 {"best_score", f.best_score},
                                 {"score", f.score_is_auc ? "val_auc" : "neg_val_bce"}});
            for (std::size_t e = 0; e < f.train_losses.size(); ++e)
                training.rows.push_back({std::to_string(f.fold), std::to_string(e + 1),
                                         io::format_double(f.train_losses[e]),
                                         e < f.val_scores.size() ? io::format_double(f.val_scores[e]) : ""});
        }
        const Eigen::Index dim = bags.empty() ? 0 : bags.front().features.cols();
        detail::write_json(out / "models" / "model.json",
                           {{"feature_dim", dim}, {"hidden", o.hidden}, {"gated", o.gated}, {"folds", fold_info}});
        io::write_file_atomic(out / "training.csv", io::format_csv(training));

        // Attention maps from each slide's out-of-fold model.
        std::map<int, const mil::FoldModel*> by_fold;
        for (const auto& f : result.folds) by_fold[f.fold] = &f;
        std::vector<std::string> slide_ids;
        std::vector<Vector> attention;
        for (const auto& bag : bags) {
            const int f = folds.fold_of.at(bag.patient_id);
            slide_ids.push_back(bag.slide_id);
            attention.push_back(mil::predict_slide(bag, by_fold.at(f)->params).attention);
        }
        mil::write_attention_csv(out / "attention.csv", slide_ids, attention);
    }
    write_manifest(out, manifest);

    json fold_summary = json::array();
    for (const auto& f : result.folds)
        fold_summary.push_back({{"fold", f.fold}, {"best_epoch", f.best_epoch}, {"best_score", f.best_score}});
    return {{"command", "mil-train"},
            {"out", out.string()},
            {"patients", patients.size()},
            {"slides", bags.size()},
            {"predictions", (out / "predictions.csv").string()},
            {"folds", fold_summary}};
}

}  // namespace rd::cli
