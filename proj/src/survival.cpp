#include "reldistill/survival.hpp"

#include "reldistill/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

namespace rd::survival {

namespace {

// two-sided 95% normal quantile
constexpr double kZ95 = 1.959963984540054;

void require_same_length(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw ShapeMismatchError(std::string(what) + ": input lengths differ");
}

void require_binary(std::span<const int> v, const char* what) {
    for (int x : v)
        if (x != 0 && x != 1) throw ConfigError(std::string(what) + " must be 0 or 1");
}

void require_times(std::span<const double> times) {
    for (double t : times)
        if (!(t >= 0.0) || !std::isfinite(t)) throw ConfigError("survival times must be finite and non-negative");
}

struct Columns {
    std::vector<double> risk, time;
    std::vector<int> event, label;
};

Columns columns(std::span<const SurvivalRecord> records) {
    Columns c;
    for (const auto& r : records) {
        c.risk.push_back(r.risk);
        c.time.push_back(r.time_months);
        c.event.push_back(r.event);
        c.label.push_back(r.label);
    }
    return c;
}

// Fenwick tree of counts over risk ranks.
class Fenwick {
public:
    explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
    void add(std::size_t i) {
        for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
    }
    // count of ranks < i
    long long prefix(std::size_t i) const {
        long long s = 0;
        for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
        return s;
    }

private:
    std::vector<long long> tree_;
};

}  // namespace

ConfusionMetrics confusion_metrics(std::span<const double> probs, std::span<const int> labels, double threshold) {
    require_same_length(probs.size(), labels.size(), "confusion_metrics");
    require_binary(labels, "labels");
    ConfusionMetrics m;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const bool pred = probs[i] >= threshold;
        if (labels[i] == 1) (pred ? m.tp : m.fn)++;
        else (pred ? m.fp : m.tn)++;
    }
    if (m.tp + m.fn == 0) throw DegenerateLabelsError("sensitivity undefined: no positive labels");
    if (m.tn + m.fp == 0) throw DegenerateLabelsError("specificity undefined: no negative labels");
    m.sensitivity = static_cast<double>(m.tp) / (m.tp + m.fn);
    m.specificity = static_cast<double>(m.tn) / (m.tn + m.fp);
    m.balanced_accuracy = 0.5 * (m.sensitivity + m.specificity);
    return m;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    require_same_length(scores.size(), labels.size(), "roc_auc");
    require_binary(labels, "labels");
    for (double s : scores)
        if (!std::isfinite(s)) throw NonFiniteError("roc_auc: non-finite score");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // twice the midrank keeps every quantity an integer
    long long rank_sum2 = 0, n1 = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const long long twice_mid = static_cast<long long>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum2 += twice_mid;
                ++n1;
            }
        }
        i = j;
    }
    const long long n0 = static_cast<long long>(n) - n1;
    if (n1 == 0 || n0 == 0) throw DegenerateLabelsError("roc_auc needs both classes");
    const long long u2 = rank_sum2 - n1 * (n1 + 1);  // 2 * Mann-Whitney U
    return (static_cast<double>(u2) / 2.0) / (static_cast<double>(n1) * static_cast<double>(n0));
}

ConcordanceCounts concordance_counts(std::span<const double> risks, std::span<const double> times,
                                     std::span<const int> events) {
    require_same_length(risks.size(), times.size(), "concordance_index");
    require_same_length(risks.size(), events.size(), "concordance_index");
    require_binary(events, "events");
    require_times(times);
    const std::size_t n = risks.size();
    std::vector<double> sorted_risk(risks.begin(), risks.end());
    std::sort(sorted_risk.begin(), sorted_risk.end());
    sorted_risk.erase(std::unique(sorted_risk.begin(), sorted_risk.end()), sorted_risk.end());
    auto rank = [&](double r) {
        return static_cast<std::size_t>(std::lower_bound(sorted_risk.begin(), sorted_risk.end(), r) - sorted_risk.begin());
    };

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

    ConcordanceCounts c;
    Fenwick tree(sorted_risk.size());
    long long inserted = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && times[order[j]] == times[order[i]]) ++j;
        // subjects in the tree have strictly longer times
        for (std::size_t k = i; k < j; ++k) {
            const std::size_t s = order[k];
            if (events[s] != 1) continue;
            const std::size_t r = rank(risks[s]);
            const long long below = tree.prefix(r);
            const long long upto = tree.prefix(r + 1);
            c.concordant += below;
            c.tied += upto - below;
            c.comparable += inserted;
        }
        for (std::size_t k = i; k < j; ++k) {
            tree.add(rank(risks[order[k]]));
            ++inserted;
        }
        i = j;
    }
    return c;
}

double concordance_index(std::span<const double> risks, std::span<const double> times, std::span<const int> events) {
    for (double r : risks)
        if (!std::isfinite(r)) throw NonFiniteError("concordance_index: non-finite risk");
    const ConcordanceCounts c = concordance_counts(risks, times, events);
    if (c.comparable == 0) throw NoComparablePairsError("concordance_index: no comparable pairs");
    return (static_cast<double>(c.concordant) + 0.5 * static_cast<double>(c.tied)) / static_cast<double>(c.comparable);
}

double concordance_index(std::span<const SurvivalRecord> records) {
    const Columns c = columns(records);
    return concordance_index(c.risk, c.time, c.event);
}

CoxResult cox_fit(std::span<const double> covariate, std::span<const double> times, std::span<const int> events,
                  const CoxOptions& options) {
    require_same_length(covariate.size(), times.size(), "cox_fit");
    require_same_length(covariate.size(), events.size(), "cox_fit");
    require_binary(events, "events");
    require_times(times);
    const std::size_t n = covariate.size();
    if (std::count(events.begin(), events.end(), 1) == 0) throw NoEventsError("cox_fit: no events");
    for (double x : covariate)
        if (!std::isfinite(x)) throw NonFiniteError("cox_fit: non-finite covariate");

    const double mean = std::accumulate(covariate.begin(), covariate.end(), 0.0) / static_cast<double>(n);
    std::vector<double> x(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = covariate[i] - mean;
        var += x[i] * x[i];
    }
    const double sd = std::sqrt(var / static_cast<double>(n));
    const auto [mn, mx] = std::minmax_element(covariate.begin(), covariate.end());
    if (options.check_variation && !(*mx - *mn > 1e-12 * std::max(1.0, std::abs(*mx))))
        throw DegenerateCovariateError("cox_fit: covariate is constant");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
    const double x_max = x.empty() ? 0.0 : *std::max_element(x.begin(), x.end());
    const double x_min = x.empty() ? 0.0 : *std::min_element(x.begin(), x.end());

    // log-likelihood, score and information at beta (Breslow ties)
    auto evaluate = [&](double beta, double& loglik, double& score, double& info) {
        const double shift = beta >= 0.0 ? beta * x_max : beta * x_min;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
        loglik = score = info = 0.0;
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && times[order[j]] == times[order[i]]) ++j;
            double d = 0.0, xsum = 0.0;
            for (std::size_t k = i; k < j; ++k) {
                const double xi = x[order[k]];
                const double e = std::exp(beta * xi - shift);
                s0 += e;
                s1 += e * xi;
                s2 += e * xi * xi;
                if (events[order[k]] == 1) {
                    d += 1.0;
                    xsum += xi;
                }
            }
            if (d > 0.0) {
                const double m1 = s1 / s0;
                loglik += beta * xsum - d * (std::log(s0) + shift);
                score += xsum - d * m1;
                info += d * (s2 / s0 - m1 * m1);
            }
            i = j;
        }
    };

    CoxResult res;
    double beta = 0.0, loglik = 0.0, score = 0.0, info = 0.0;
    evaluate(beta, loglik, score, info);
    for (int it = 0; it < options.max_iterations; ++it) {
        if (std::abs(score) < options.tolerance) {
            res.converged = true;
            break;
        }
        if (!(info > 0.0)) break;
        double step = score / info;
        double nl = 0.0, ns = 0.0, ni = 0.0;
        double candidate = beta + step;
        evaluate(candidate, nl, ns, ni);
        for (int halve = 0; halve < 30 && !(nl >= loglik); ++halve) {
            step *= 0.5;
            candidate = beta + step;
            evaluate(candidate, nl, ns, ni);
        }
        beta = candidate;
        loglik = nl;
        score = ns;
        info = ni;
        res.iterations = it + 1;
        if (std::abs(beta * sd) > 50.0)
            throw NonConvergenceError("cox_fit: monotone likelihood, coefficient diverges (beta = " +
                                      std::to_string(beta) + ")");
    }
    if (!res.converged && std::abs(score) < options.tolerance) res.converged = true;

    res.beta = beta;
    res.hazard_ratio = std::exp(beta);
    if (info > 0.0) {
        res.standard_error = 1.0 / std::sqrt(info);
        const double z = beta / res.standard_error;
        res.p_value = std::erfc(std::abs(z) / std::sqrt(2.0));
    } else {
        res.standard_error = std::numeric_limits<double>::infinity();
        res.p_value = 1.0;
    }
    // Separable data: the score flattens out while beta keeps growing, so
    // Newton can stop on the tolerance with a huge beta and a larger SE.
    if (std::abs(beta * sd) > 10.0 && res.standard_error > std::abs(beta))
        throw NonConvergenceError("cox_fit: monotone likelihood, coefficient diverges (beta = " + std::to_string(beta) +
                                  ")");
    res.ci_low = std::exp(beta - kZ95 * res.standard_error);
    res.ci_high = std::exp(beta + kZ95 * res.standard_error);
    return res;
}

CoxResult cox_fit(std::span<const SurvivalRecord> records, const CoxOptions& options) {
    const Columns c = columns(records);
    return cox_fit(c.risk, c.time, c.event, options);
}

std::string format_hazard_ratio(double hr, double low, double high) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.2f (95%% CI: %.2f–%.2f)", hr, low, high);
    return buf;
}

std::string format_hazard_ratio(const CoxResult& r) { return format_hazard_ratio(r.hazard_ratio, r.ci_low, r.ci_high); }

double KMCurve::at(double t) const {
    double s = 1.0;
    for (std::size_t i = 0; i < event_times.size() && event_times[i] <= t; ++i) s = survival[i];
    return s;
}

KMCurve km_estimate(std::span<const double> times, std::span<const int> events) {
    require_same_length(times.size(), events.size(), "km_estimate");
    if (times.empty()) throw EmptyInputError("km_estimate: no subjects");
    require_binary(events, "events");
    require_times(times);
    const std::size_t n = times.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

    KMCurve km;
    double s = 1.0, greenwood = 0.0;
    std::size_t at_risk = n;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        int d = 0;
        while (j < n && times[order[j]] == times[order[i]]) {
            d += events[order[j]];
            ++j;
        }
        if (d > 0) {
            const double nr = static_cast<double>(at_risk);
            s *= 1.0 - d / nr;
            greenwood = (static_cast<double>(d) < nr) ? greenwood + d / (nr * (nr - d))
                                                      : std::numeric_limits<double>::infinity();
            const double se = s * std::sqrt(greenwood);
            km.event_times.push_back(times[order[i]]);
            km.survival.push_back(s);
            km.at_risk.push_back(static_cast<int>(at_risk));
            km.events.push_back(d);
            km.lower.push_back(std::isfinite(se) ? std::clamp(s - kZ95 * se, 0.0, 1.0) : 0.0);
            km.upper.push_back(std::isfinite(se) ? std::clamp(s + kZ95 * se, 0.0, 1.0) : 1.0);
        }
        at_risk -= j - i;
        i = j;
    }
    return km;
}

LogRankResult logrank_test(std::span<const double> times_a, std::span<const int> events_a,
                           std::span<const double> times_b, std::span<const int> events_b) {
    require_same_length(times_a.size(), events_a.size(), "logrank_test");
    require_same_length(times_b.size(), events_b.size(), "logrank_test");
    if (times_a.empty() || times_b.empty()) throw EmptyInputError("logrank_test: a risk group is empty");
    require_binary(events_a, "events");
    require_binary(events_b, "events");
    require_times(times_a);
    require_times(times_b);
    struct Obs {
        double t;
        int event;
        int group;
    };
    std::vector<Obs> all;
    for (std::size_t i = 0; i < times_a.size(); ++i) all.push_back({times_a[i], events_a[i], 0});
    for (std::size_t i = 0; i < times_b.size(); ++i) all.push_back({times_b[i], events_b[i], 1});
    std::sort(all.begin(), all.end(), [](const Obs& a, const Obs& b) { return a.t < b.t; });

    LogRankResult r;
    double n_a = static_cast<double>(times_a.size()), n = static_cast<double>(all.size());
    double total_events = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        double d = 0.0, d_a = 0.0, leave_a = 0.0;
        while (j < all.size() && all[j].t == all[i].t) {
            d += all[j].event;
            if (all[j].group == 0) {
                d_a += all[j].event;
                leave_a += 1.0;
            }
            ++j;
        }
        if (d > 0.0) {
            r.observed_a += d_a;
            r.expected_a += d * n_a / n;
            if (n > 1.0) r.variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            total_events += d;
        }
        n_a -= leave_a;
        n -= static_cast<double>(j - i);
        i = j;
    }
    if (total_events == 0.0) throw NoEventsError("logrank_test: no events");
    const double diff = r.observed_a - r.expected_a;
    r.chi_square = r.variance > 0.0 ? diff * diff / r.variance : 0.0;
    r.p_value = std::erfc(std::sqrt(r.chi_square / 2.0));
    return r;
}

LogRankResult logrank_test(std::span<const SurvivalRecord> group_a, std::span<const SurvivalRecord> group_b) {
    const Columns a = columns(group_a), b = columns(group_b);
    return logrank_test(a.time, a.event, b.time, b.event);
}

RiskGroups stratify_risk(std::span<const double> risks, StratifyRule rule, double threshold) {
    if (risks.empty()) throw EmptyInputError("stratify_risk: no records");
    RiskGroups g;
    if (rule == StratifyRule::median) {
        std::vector<double> s(risks.begin(), risks.end());
        std::sort(s.begin(), s.end());
        const std::size_t m = s.size() / 2;
        g.cutoff = s.size() % 2 == 1 ? s[m] : 0.5 * (s[m - 1] + s[m]);
    } else {
        g.cutoff = threshold;
    }
    for (std::size_t i = 0; i < risks.size(); ++i) (risks[i] > g.cutoff ? g.high : g.low).push_back(i);
    return g;
}

std::pair<std::vector<SurvivalRecord>, std::vector<SurvivalRecord>> stratify_risk(
    std::span<const SurvivalRecord> records, StratifyRule rule, double threshold) {
    const Columns c = columns(records);
    const RiskGroups g = stratify_risk(c.risk, rule, threshold);
    std::pair<std::vector<SurvivalRecord>, std::vector<SurvivalRecord>> out;
    for (std::size_t i : g.high) out.first.push_back(records[i]);
    for (std::size_t i : g.low) out.second.push_back(records[i]);
    return out;
}

namespace {

template <typename F>
MetricValue guarded(F&& f) {
    MetricValue v;
    try {
        v.value = f();
    } catch (const Error& e) {
        v.error = e.kind();
    }
    return v;
}

}  // namespace

MetricRow evaluate_records(std::span<const SurvivalRecord> records, double threshold) {
    const Columns c = columns(records);
    MetricRow row;
    row.n = static_cast<int>(records.size());
    row.n_pos = static_cast<int>(std::count(c.label.begin(), c.label.end(), 1));
    row.n_neg = row.n - row.n_pos;
    row.auc = guarded([&] { return roc_auc(c.risk, c.label); });
    row.sensitivity = guarded([&] {
        if (row.n_pos == 0) throw DegenerateLabelsError("no positives");
        int tp = 0;
        for (std::size_t i = 0; i < c.risk.size(); ++i) tp += c.label[i] == 1 && c.risk[i] >= threshold;
        return static_cast<double>(tp) / row.n_pos;
    });
    row.specificity = guarded([&] {
        if (row.n_neg == 0) throw DegenerateLabelsError("no negatives");
        int tn = 0;
        for (std::size_t i = 0; i < c.risk.size(); ++i) tn += c.label[i] == 0 && c.risk[i] < threshold;
        return static_cast<double>(tn) / row.n_neg;
    });
    row.balanced_accuracy = guarded([&] { return confusion_metrics(c.risk, c.label, threshold).balanced_accuracy; });
    row.c_index = guarded([&] { return concordance_index(c.risk, c.time, c.event); });
    return row;
}

std::vector<MetricRow> evaluate_stratified(std::span<const SurvivalRecord> records, const std::string& key,
                                           double threshold) {
    std::map<std::string, std::vector<SurvivalRecord>> parts;
    for (const auto& r : records) {
        const auto it = r.subgroups.find(key);
        if (it == r.subgroups.end()) throw UnknownSubgroupError("unknown subgroup key '" + key + "'");
        parts[it->second].push_back(r);
    }
    std::vector<MetricRow> rows;
    for (const auto& [value, part] : parts) {
        MetricRow row = evaluate_records(part, threshold);
        row.subgroup = value;
        rows.push_back(std::move(row));
    }
    return rows;
}

MeanSd mean_sd(std::span<const double> values) {
    if (values.empty()) throw EmptyInputError("mean_sd: no values");
    MeanSd m;
    m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() < 2) {
        m.sd = std::numeric_limits<double>::quiet_NaN();
        return m;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return m;
}

}  // namespace rd::survival
