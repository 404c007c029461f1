#include "common.hpp"

#include "reldistill/cohort.hpp"
#include "reldistill/log.hpp"
#include "reldistill/mil.hpp"
#include "reldistill/survival.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>

namespace rd::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using survival::SurvivalRecord;

namespace {

struct PatientRisk {
    double risk = 0.0;
    std::optional<int> fold;
};

std::string id_list(const std::vector<std::string>& ids) {
    std::string s;
    const std::size_t shown = std::min<std::size_t>(ids.size(), 20);
    for (std::size_t i = 0; i < shown; ++i) s += (i ? ", " : "") + ids[i];
    if (ids.size() > shown) s += ", ... (" + std::to_string(ids.size() - shown) + " more)";
    return s;
}

// predictions.csv (per slide, averaged per patient) or patient_id,risk[,fold].
std::map<std::string, PatientRisk> read_risks(const fs::path& path) {
    const io::CsvTable t = io::read_csv(path);
    std::map<std::string, PatientRisk> out;
    if (t.column("probability") >= 0) {
        const auto preds = mil::read_predictions_csv(path);
        for (const auto& p : mil::patient_level(preds)) out[p.patient_id] = {p.probability, p.fold};
        return out;
    }
    const std::string origin = path.string();
    const std::size_t pc = t.require_column("patient_id", origin);
    const std::size_t rc = t.require_column("risk", origin);
    const int fc = t.column("fold");
    for (const auto& row : t.rows) {
        PatientRisk r;
        r.risk = io::parse_double(row[rc], origin + ": risk");
        if (!std::isfinite(r.risk)) throw NonFiniteError(origin + ": non-finite risk for '" + row[pc] + "'");
        if (fc >= 0) r.fold = static_cast<int>(io::parse_int(row[static_cast<std::size_t>(fc)], origin + ": fold"));
        if (!out.emplace(row[pc], r).second) throw ConfigError(origin + ": duplicate patient_id '" + row[pc] + "'");
    }
    return out;
}

json metric_json(const survival::MetricValue& v) {
    if (v.value) return *v.value;
    return {{"error", v.error}};
}

json row_json(const survival::MetricRow& r) {
    return {{"subgroup", r.subgroup},
            {"n", r.n},
            {"n_pos", r.n_pos},
            {"n_neg", r.n_neg},
            {"auc", metric_json(r.auc)},
            {"balanced_accuracy", metric_json(r.balanced_accuracy)},
            {"sensitivity", metric_json(r.sensitivity)},
            {"specificity", metric_json(r.specificity)},
            {"c_index", metric_json(r.c_index)}};
}

std::string mean_sd_text(double mean, double sd) {
    char buf[64];
    if (std::isnan(sd)) {
        std::snprintf(buf, sizeof buf, "%.2f", mean);
    } else {
        std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean, sd);
    }
    return buf;
}

json error_json(const Error& e) { return {{"error", e.kind()}, {"message", e.what()}}; }

void add_km_rows(io::CsvTable& table, const std::string& group, const std::vector<SurvivalRecord>& records) {
    std::vector<double> times;
    std::vector<int> events;
    for (const auto& r : records) {
        times.push_back(r.time_months);
        events.push_back(r.event);
    }
    table.rows.push_back({group, "0", "1", std::to_string(records.size()), "0", "1", "1"});
    if (records.empty()) return;
    const survival::KMCurve km = survival::km_estimate(times, events);
    for (std::size_t i = 0; i < km.event_times.size(); ++i)
        table.rows.push_back({group, io::format_double(km.event_times[i]), io::format_double(km.survival[i]),
                              std::to_string(km.at_risk[i]), std::to_string(km.events[i]),
                              io::format_double(km.lower[i]), io::format_double(km.upper[i])});
}

}  // namespace

json cmd_evaluate(const EvaluateOptions& o) {
    detail::require_out(o.out, "evaluate");
    detail::require_exists(o.predictions, "--predictions");
    detail::require_exists(o.cohort, "--cohort");
    survival::StratifyRule rule;
    if (o.rule == "median") {
        rule = survival::StratifyRule::median;
    } else if (o.rule == "threshold") {
        rule = survival::StratifyRule::threshold;
    } else {
        throw ConfigError("--rule must be median or threshold, got '" + o.rule + "'");
    }

    RunManifest manifest;
    manifest.version = version();
    manifest.command = "evaluate";
    manifest.options = o;

    std::vector<cohort::PatientRecord> patients;
    std::map<std::string, PatientRisk> risks;
    {
        PhaseTimer t(manifest, "load");
        patients = cohort::read_cohort_csv(o.cohort, o.covariates);
        risks = read_risks(o.predictions);
        manifest.add_input(o.predictions);
        manifest.add_input(o.cohort);
    }

    // Join on patient_id.
    std::set<std::string> known;
    for (const auto& p : patients) known.insert(p.patient_id);
    std::vector<std::string> unknown;
    for (const auto& [id, r] : risks)
        if (!known.count(id)) unknown.push_back(id);
    if (!unknown.empty())
        throw MissingSampleError("predictions name " + std::to_string(unknown.size()) +
                                 " patient(s) absent from the cohort: " + id_list(unknown));
    std::vector<cohort::PatientRecord> scored;
    std::vector<std::string> unscored;
    for (const auto& p : patients) {
        if (risks.count(p.patient_id)) {
            scored.push_back(p);
        } else {
            unscored.push_back(p.patient_id);
        }
    }
    if (scored.empty()) throw EmptyInputError("no cohort patient has a prediction");
    if (!unscored.empty())
        log::warn("evaluate: " + std::to_string(unscored.size()) + " cohort patient(s) have no prediction: " +
                  id_list(unscored));

    std::map<std::string, double> risk_by_patient;
    for (const auto& [id, r] : risks) risk_by_patient[id] = r.risk;
    const std::vector<SurvivalRecord> records = cohort::survival_records(scored, risk_by_patient);

    json metrics = {{"model", o.model_name},
                    {"n_patients", records.size()},
                    {"threshold", o.threshold},
                    {"seed", o.seed}};
    const auto metrics_start = std::chrono::steady_clock::now();

    // Per-fold classification metrics, then mean and sample sd across folds.
    std::map<int, std::vector<SurvivalRecord>> by_fold;
    for (const auto& r : records) {
        const auto& pr = risks.at(r.patient_id);
        if (pr.fold) by_fold[*pr.fold].push_back(r);
    }
    json per_fold = json::array();
    std::map<std::string, std::vector<double>> fold_values;
    const char* keys[] = {"auc", "balanced_accuracy", "sensitivity", "specificity", "c_index"};
    for (const auto& [fold, recs] : by_fold) {
        const survival::MetricRow row = survival::evaluate_records(recs, o.threshold);
        json j = row_json(row);
        j.erase("subgroup");
        j["fold"] = fold;
        per_fold.push_back(j);
        const survival::MetricValue* values[] = {&row.auc, &row.balanced_accuracy, &row.sensitivity,
                                                 &row.specificity, &row.c_index};
        for (std::size_t k = 0; k < 5; ++k)
            if (values[k]->value) fold_values[keys[k]].push_back(*values[k]->value);
    }
    metrics["per_fold"] = per_fold;
    json summary = json::object();
    for (const char* key : keys) {
        const auto it = fold_values.find(key);
        if (it == fold_values.end() || it->second.empty()) {
            summary[key] = {{"error", by_fold.empty() ? "NoFolds" : "Undefined"}};
            continue;
        }
        const survival::MeanSd ms = survival::mean_sd(it->second);
        summary[key] = {{"mean", ms.mean},
                        {"sd", std::isnan(ms.sd) ? json(nullptr) : json(ms.sd)},
                        {"n_folds", it->second.size()},
                        {"text", mean_sd_text(ms.mean, ms.sd)}};
    }
    metrics["summary"] = summary;

    json pooled = row_json(survival::evaluate_records(records, o.threshold));
    pooled.erase("subgroup");
    metrics["pooled"] = pooled;

    try {
        const survival::CoxResult cox = survival::cox_fit(records);
        metrics["cox"] = {{"beta", cox.beta},
                          {"hazard_ratio", cox.hazard_ratio},
                          {"ci_low", cox.ci_low},
                          {"ci_high", cox.ci_high},
                          {"p_value", cox.p_value},
                          {"standard_error", cox.standard_error},
                          {"iterations", cox.iterations},
                          {"text", survival::format_hazard_ratio(cox)}};
    } catch (const Error& e) {
        metrics["cox"] = error_json(e);
    }

    const auto [high, low] = survival::stratify_risk(records, rule, o.risk_threshold);
    std::vector<double> all_risks;
    for (const auto& r : records) all_risks.push_back(r.risk);
    json groups = {{"rule", o.rule},
                   {"cutoff", survival::stratify_risk(all_risks, rule, o.risk_threshold).cutoff},
                   {"n_high", high.size()},
                   {"n_low", low.size()}};
    try {
        const survival::LogRankResult lr = survival::logrank_test(high, low);
        groups["logrank"] = {{"chi_square", lr.chi_square},
                             {"p_value", lr.p_value},
                             {"observed_high", lr.observed_a},
                             {"expected_high", lr.expected_a}};
    } catch (const Error& e) {
        groups["logrank"] = error_json(e);
    }
    metrics["risk_groups"] = groups;

    json stratified = json::object();
    for (const auto& key : o.stratify_by) {
        json rows = json::array();
        for (const auto& row : survival::evaluate_stratified(records, key, o.threshold)) rows.push_back(row_json(row));
        stratified[key] = rows;
    }
    metrics["stratified"] = stratified;

    io::CsvTable km;
    km.header = {"group", "time", "survival", "at_risk", "events", "lower", "upper"};
    add_km_rows(km, "high", high);
    add_km_rows(km, "low", low);

    const fs::path out = o.out;
    manifest.phases.push_back({"metrics", detail::seconds_since(metrics_start)});
    detail::ensure_dir(out);
    detail::write_json(out / "metrics.json", metrics);
    io::write_file_atomic(out / "km_curves.csv", io::format_csv(km));
    write_manifest(out, manifest);

    json result = {{"command", "evaluate"}, {"out", out.string()}, {"pooled", pooled}, {"summary", summary}};
    result["cox"] = metrics["cox"];
    return result;
}

}  // namespace rd::cli
