#pragma once

// Cohort records, patient-disjoint stratified folds, subgroup filters and a
// synthetic cohort with a planted prognostic signal.

#include "reldistill/folds.hpp"
#include "reldistill/mil.hpp"
#include "reldistill/survival.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rd::cohort {

struct Outcome {
    int label = 0;
    double time_months = 0.0;
    int event = 0;
};

struct PatientRecord {
    std::string patient_id;
    std::map<std::string, double> covariates;
    Outcome outcome;
    std::map<std::string, std::string> subgroups;
    std::vector<std::string> slide_ids;
};

inline const std::vector<std::string> kDefaultCovariates = {"age", "bmi", "income"};

// One row per slide: patient_id, slide_id, label, time_months, event, then
// covariate and subgroup columns. Columns named in `covariate_keys` are
// parsed as numbers; every other extra column is a subgroup.
std::vector<PatientRecord> read_cohort_csv(const std::filesystem::path& path,
                                           std::span<const std::string> covariate_keys = kDefaultCovariates);
void write_cohort_csv(const std::filesystem::path& path, std::span<const PatientRecord> patients);

// Bags for every slide of the cohort, from <bag_dir>/<slide_id>.emb.
std::vector<mil::Bag> load_bags(std::span<const PatientRecord> patients, const std::filesystem::path& bag_dir);

FoldAssignment stratified_kfold(std::span<const PatientRecord> patients, std::span<const std::string> covariate_keys,
                                int k, std::uint64_t seed, double val_fraction = 0.15);

nlohmann::json to_json(const FoldAssignment& folds);
FoldAssignment fold_assignment_from_json(const nlohmann::json& j);
void write_folds_json(const std::filesystem::path& path, const FoldAssignment& folds);
FoldAssignment read_folds_json(const std::filesystem::path& path);

// Order-preserving filter; UnknownSubgroupError if no record has `key`.
std::vector<PatientRecord> subgroup_filter(std::span<const PatientRecord> records, const std::string& key,
                                           const std::string& value);
std::vector<survival::SurvivalRecord> subgroup_filter(std::span<const survival::SurvivalRecord> records,
                                                      const std::string& key, const std::string& value);

// Patient-level records with the given risk per patient id.
std::vector<survival::SurvivalRecord> survival_records(std::span<const PatientRecord> patients,
                                                       const std::map<std::string, double>& risk_by_patient);

// Each bag gets signal_fraction of its patches shifted by signal_strength * z
// along a fixed unit direction; the event hazard scales as
// exp(hazard_coef * z) with hazard_coef = kHazardPerSignal * signal_strength
// unless set. signal_strength = 0 plants nothing.
inline constexpr double kHazardPerSignal = 0.3;
inline constexpr double kStrongSignal = 20.0;

struct SynthCohortConfig {
    double signal_strength = kStrongSignal;
    int patches_per_bag = 32;
    double censoring_rate = 0.2;
    double horizon_months = 60.0;
    int feature_dim = 64;
    std::optional<double> hazard_coef;
    double signal_fraction = 0.25;       // of each bag's patches
    double base_median_months = 120.0;   // at z = 0
    double multi_slide_rate = 0.05;      // patients with a second slide
};

struct SynthCohort {
    std::vector<PatientRecord> patients;
    std::vector<mil::Bag> bags;
    std::map<std::string, double> latent;  // patient id -> z
};

SynthCohort synth_cohort(int n_patients, const SynthCohortConfig& config, std::uint64_t seed);

// <dir>/cohort.csv and <dir>/bags/<slide_id>.emb
void write_cohort(const std::filesystem::path& dir, const SynthCohort& cohort);

}  // namespace rd::cohort
