#pragma once

// Classification and time-to-event metrics: confusion-matrix rates, ROC AUC,
// Harrell's C, single-covariate Cox regression, Kaplan-Meier, log-rank and
// risk-group stratification.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rd::survival {

struct SurvivalRecord {
    std::string patient_id;
    double risk = 0.0;
    double time_months = 0.0;
    int event = 0;
    int label = 0;
    std::map<std::string, std::string> subgroups;
};

struct ConfusionMetrics {
    double sensitivity = 0.0;
    double specificity = 0.0;
    double balanced_accuracy = 0.0;
    int tp = 0, tn = 0, fp = 0, fn = 0;
};

// prob >= threshold predicts positive. DegenerateLabelsError names the
// undefined rate when a class is absent.
ConfusionMetrics confusion_metrics(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);

// Mann-Whitney with midranks (half credit for ties).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Harrell's C. A pair is comparable when one time is strictly shorter and
// that subject had the event; equal times are never comparable.
struct ConcordanceCounts {
    long long concordant = 0;
    long long tied = 0;
    long long comparable = 0;
};
ConcordanceCounts concordance_counts(std::span<const double> risks, std::span<const double> times,
                                     std::span<const int> events);
double concordance_index(std::span<const double> risks, std::span<const double> times, std::span<const int> events);
double concordance_index(std::span<const SurvivalRecord> records);

struct CoxOptions {
    int max_iterations = 50;
    double tolerance = 1e-8;    // on |score|
    bool check_variation = true;
};

struct CoxResult {
    double beta = 0.0;
    double hazard_ratio = 1.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double p_value = 1.0;
    double standard_error = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Newton-Raphson on the Breslow partial likelihood.
CoxResult cox_fit(std::span<const double> covariate, std::span<const double> times, std::span<const int> events,
                  const CoxOptions& options = {});
CoxResult cox_fit(std::span<const SurvivalRecord> records, const CoxOptions& options = {});

// "2.52 (95% CI: 1.73–3.65)"
std::string format_hazard_ratio(double hr, double low, double high);
std::string format_hazard_ratio(const CoxResult& result);

struct KMCurve {
    std::vector<double> event_times;
    std::vector<double> survival;
    std::vector<int> at_risk;
    std::vector<int> events;
    std::vector<double> lower;  // Greenwood 95% band, clamped to [0, 1]
    std::vector<double> upper;

    // Step function value (1 before the first event time).
    double at(double t) const;
};

KMCurve km_estimate(std::span<const double> times, std::span<const int> events);

struct LogRankResult {
    double chi_square = 0.0;
    double p_value = 1.0;
    double observed_a = 0.0;
    double expected_a = 0.0;
    double variance = 0.0;
};

LogRankResult logrank_test(std::span<const double> times_a, std::span<const int> events_a,
                           std::span<const double> times_b, std::span<const int> events_b);
LogRankResult logrank_test(std::span<const SurvivalRecord> group_a, std::span<const SurvivalRecord> group_b);

enum class StratifyRule { median, threshold };

struct RiskGroups {
    std::vector<std::size_t> high;
    std::vector<std::size_t> low;
    double cutoff = 0.0;
};

// risk > cutoff is high risk; ties at the cutoff go low.
RiskGroups stratify_risk(std::span<const double> risks, StratifyRule rule = StratifyRule::median,
                         double threshold = 0.5);
std::pair<std::vector<SurvivalRecord>, std::vector<SurvivalRecord>> stratify_risk(
    std::span<const SurvivalRecord> records, StratifyRule rule = StratifyRule::median, double threshold = 0.5);

// A metric that may be undefined on a partition.
struct MetricValue {
    std::optional<double> value;
    std::string error;  // exception kind when undefined
};

struct MetricRow {
    std::string subgroup;
    int n = 0;
    int n_pos = 0;
    int n_neg = 0;
    MetricValue auc, balanced_accuracy, sensitivity, specificity, c_index;
};

MetricRow evaluate_records(std::span<const SurvivalRecord> records, double threshold = 0.5);
// One row per distinct value of `key`, sorted by value.
std::vector<MetricRow> evaluate_stratified(std::span<const SurvivalRecord> records, const std::string& key,
                                           double threshold = 0.5);

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation; NaN for a single value
};
MeanSd mean_sd(std::span<const double> values);

}  // namespace rd::survival
