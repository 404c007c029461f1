#include <doctest.h>

#include "oracles.hpp"
#include "reldistill/errors.hpp"
#include "reldistill/survival.hpp"
#include "test_support.hpp"

#include <cmath>

using namespace rd;
using namespace rd::survival;

namespace {

struct Fixture {
    std::vector<double> risk, time;
    std::vector<int> event, label;
};

// Rounded risks and whole-month times so both kinds of tie occur; about
// 30% censored.
Fixture fixture(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Fixture f;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = rng.normal();
        f.risk.push_back(std::round(z * 4.0) / 4.0 + 0.3 * rng.normal());
        if (i % 7 == 0) f.risk.back() = 0.5;
        f.time.push_back(std::ceil(rng.exponential(0.02 * std::exp(0.8 * z))));
        f.event.push_back(rng.bernoulli(0.7) ? 1 : 0);
        f.label.push_back(f.event.back() == 1 && f.time.back() <= 60.0 ? 1 : 0);
    }
    return f;
}

// Breslow partial log-likelihood, straight from the definition.
double breslow_loglik(double b, const std::vector<double>& x, const std::vector<double>& t, const std::vector<int>& e) {
    double ll = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!e[i]) continue;
        double denom = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j)
            if (t[j] >= t[i]) denom += std::exp(b * x[j]);
        ll += b * x[i] - std::log(denom);
    }
    return ll;
}

double golden_max(const std::function<double(double)>& f, double lo, double hi) {
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    while (b - a > 1e-10) {
        const double c = b - g * (b - a), d = a + g * (b - a);
        if (f(c) > f(d)) b = d;
        else a = c;
    }
    return (a + b) / 2.0;
}

}  // namespace

TEST_CASE("AUC matches the pairwise oracle, ties included") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Fixture f = fixture(200, seed);
        CHECK(std::abs(roc_auc(f.risk, f.label) - oracle::auc(f.risk, f.label)) < 1e-12);
    }
    const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
    CHECK(roc_auc(s, std::vector<int>{0, 0, 1, 1}) == doctest::Approx(0.75));
    CHECK(roc_auc(std::vector<double>{1, 1}, std::vector<int>{0, 1}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(roc_auc(s, std::vector<int>{1, 1, 1, 1}), DegenerateLabelsError);
}

TEST_CASE("C-index matches the pairwise oracle on censored data") {
    for (std::uint64_t seed = 10; seed < 15; ++seed) {
        const Fixture f = fixture(200, seed);
        const double censored = static_cast<double>(std::count(f.event.begin(), f.event.end(), 0)) / 200.0;
        CHECK(censored > 0.2);
        CHECK(censored < 0.4);
        CHECK(std::abs(concordance_index(f.risk, f.time, f.event) - oracle::cindex(f.risk, f.time, f.event)) < 1e-12);
    }
}

TEST_CASE("C-index hand example") {
    // comparable: (0,1) (0,2) (1,2); concordant: 2, risk tie: 1
    const std::vector<double> risk = {3, 1, 1};
    const std::vector<double> time = {1, 2, 3};
    const std::vector<int> event = {1, 1, 0};
    const ConcordanceCounts c = concordance_counts(risk, time, event);
    CHECK(c.comparable == 3);
    CHECK(c.concordant == 2);
    CHECK(c.tied == 1);
    CHECK(concordance_index(risk, time, event) == doctest::Approx(2.5 / 3.0));
    // equal times are never comparable
    CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, std::vector<double>{5, 5}, std::vector<int>{1, 1}),
                    NoComparablePairsError);
}

TEST_CASE("confusion metrics") {
    const std::vector<double> p = {0.9, 0.5, 0.2, 0.7, 0.1};
    const std::vector<int> y = {1, 1, 1, 0, 0};
    const ConfusionMetrics m = confusion_metrics(p, y);
    CHECK(m.tp == 2);
    CHECK(m.fn == 1);
    CHECK(m.fp == 1);
    CHECK(m.tn == 1);
    CHECK(m.balanced_accuracy == doctest::Approx((2.0 / 3.0 + 0.5) / 2.0));
    CHECK_THROWS_AS(confusion_metrics(p, std::vector<int>{0, 0, 0, 0, 0}), DegenerateLabelsError);
}

TEST_CASE("Kaplan-Meier hand example") {
    const std::vector<double> t = {1, 2, 3, 4};
    const std::vector<int> e = {1, 0, 1, 0};
    const KMCurve km = km_estimate(t, e);
    CHECK(km.at(0.5) == 1.0);
    CHECK(km.at(1.0) == doctest::Approx(0.75));
    CHECK(km.at(2.5) == doctest::Approx(0.75));
    CHECK(km.at(3.0) == doctest::Approx(0.375));
    CHECK(km.at(10.0) == doctest::Approx(0.375));
    CHECK(km.at_risk.front() == 4);
    for (std::size_t i = 0; i < km.survival.size(); ++i) {
        CHECK(km.lower[i] <= km.survival[i]);
        CHECK(km.upper[i] >= km.survival[i]);
    }
}

TEST_CASE("Kaplan-Meier matches the product-limit oracle") {
    const Fixture f = fixture(200, 20);
    const KMCurve km = km_estimate(f.time, f.event);
    for (double t : {0.0, 5.0, 12.0, 30.0, 60.0, 100.0, 500.0}) CHECK(std::abs(km.at(t) - oracle::km(f.time, f.event, t)) < 1e-12);
}

TEST_CASE("log-rank on identical groups gives p = 1") {
    const Fixture f = fixture(80, 21);
    const LogRankResult r = logrank_test(f.time, f.event, f.time, f.event);
    CHECK(r.chi_square == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.p_value == doctest::Approx(1.0));
}

TEST_CASE("log-rank hand example") {
    // event times 1..4; group A dies at 1 and 2, B at 3 and 4.
    // E_A = 1/2 + 1/3, V = 1/4 + 2/9, O_A = 2
    const LogRankResult r = logrank_test(std::vector<double>{1, 2}, std::vector<int>{1, 1}, std::vector<double>{3, 4},
                                         std::vector<int>{1, 1});
    const double expected = 5.0 / 6.0, variance = 0.25 + 2.0 / 9.0;
    const double chi = std::pow(2.0 - expected, 2) / variance;
    CHECK(r.observed_a == 2.0);
    CHECK(r.expected_a == doctest::Approx(expected));
    CHECK(r.variance == doctest::Approx(variance));
    CHECK(r.chi_square == doctest::Approx(chi));
    CHECK(r.p_value == doctest::Approx(std::erfc(std::sqrt(chi / 2.0))));
}

TEST_CASE("Cox fit matches a direct maximization of the partial likelihood") {
    Rng rng(22);
    std::vector<double> x, t;
    std::vector<int> e;
    for (int i = 0; i < 60; ++i) {
        x.push_back(rng.normal());
        t.push_back(std::ceil(rng.exponential(0.1 * std::exp(0.5 * x.back()))));  // ties on purpose
        e.push_back(rng.bernoulli(0.75) ? 1 : 0);
    }
    const CoxResult fit = cox_fit(x, t, e);
    auto ll = [&](double b) { return breslow_loglik(b, x, t, e); };
    const double b_ref = golden_max(ll, -5.0, 5.0);
    CHECK(fit.converged);
    CHECK(std::abs(fit.beta - b_ref) < 1e-6);
    const double h = 1e-4;
    const double info = -(ll(b_ref + h) - 2.0 * ll(b_ref) + ll(b_ref - h)) / (h * h);
    CHECK(fit.standard_error == doctest::Approx(1.0 / std::sqrt(info)).epsilon(1e-4));
    CHECK(fit.hazard_ratio == doctest::Approx(std::exp(fit.beta)));
    CHECK(fit.ci_low == doctest::Approx(std::exp(fit.beta - 1.959963984540054 * fit.standard_error)).epsilon(1e-6));
    const double z = fit.beta / fit.standard_error;
    CHECK(fit.p_value == doctest::Approx(std::erfc(std::abs(z) / std::sqrt(2.0))));
}

TEST_CASE("Cox recovers a planted coefficient") {
    Rng rng(23);
    std::vector<double> x, t;
    std::vector<int> e;
    for (int i = 0; i < 2000; ++i) {
        x.push_back(rng.normal());
        const double event_time = rng.exponential(0.05 * std::exp(0.7 * x.back()));
        const double censor_time = rng.exponential(0.02);
        t.push_back(std::min(event_time, censor_time));
        e.push_back(event_time <= censor_time ? 1 : 0);
    }
    const CoxResult fit = cox_fit(x, t, e);
    CHECK(std::abs(fit.beta - 0.7) < 0.1);
    CHECK(fit.ci_low < std::exp(0.7));
    CHECK(fit.ci_high > std::exp(0.7));
    CHECK(fit.p_value < 1e-10);
}

TEST_CASE("Cox failure modes") {
    const std::vector<double> t = {1, 2, 3};
    CHECK_THROWS_AS(cox_fit(std::vector<double>{1, 1, 1}, t, std::vector<int>{1, 1, 1}), DegenerateCovariateError);
    CHECK_THROWS_AS(cox_fit(std::vector<double>{0, 1, 2}, t, std::vector<int>{0, 0, 0}), NoEventsError);
    // perfectly ordered risks: the likelihood keeps rising as beta grows
    CHECK_THROWS_AS(cox_fit(std::vector<double>{2, 1, 0}, t, std::vector<int>{1, 1, 1}), NonConvergenceError);
}

TEST_CASE("hazard ratio text") {
    CHECK(format_hazard_ratio(2.523, 1.7349, 3.6451) == "2.52 (95% CI: 1.73–3.65)");
    CoxResult r;
    r.hazard_ratio = 0.5;
    r.ci_low = 0.25;
    r.ci_high = 1.0;
    CHECK(format_hazard_ratio(r) == "0.50 (95% CI: 0.25–1.00)");
}

TEST_CASE("median split sends ties low") {
    const std::vector<double> r = {0.1, 0.5, 0.5, 0.9};
    const RiskGroups g = stratify_risk(r);
    CHECK(g.cutoff == doctest::Approx(0.5));
    CHECK(g.high == std::vector<std::size_t>{3});
    CHECK(g.low.size() == 3);
    const RiskGroups th = stratify_risk(r, StratifyRule::threshold, 0.3);
    CHECK(th.high.size() == 3);
}

TEST_CASE("stratified evaluation reports undefined metrics per subgroup") {
    std::vector<SurvivalRecord> recs;
    const double risks[] = {0.9, 0.2, 0.8, 0.1, 0.7, 0.6};
    const int labels[] = {1, 0, 1, 0, 1, 1};
    for (int i = 0; i < 6; ++i) {
        SurvivalRecord r;
        r.patient_id = "p" + std::to_string(i);
        r.risk = risks[i];
        r.label = labels[i];
        r.event = 1;
        r.time_months = 10.0 + i;
        r.subgroups["sex"] = i < 4 ? "F" : "M";
        recs.push_back(r);
    }
    const auto rows = evaluate_stratified(recs, "sex");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].subgroup == "F");
    CHECK(rows[0].auc.value.value() == doctest::Approx(1.0));
    CHECK(rows[1].n == 2);
    CHECK_FALSE(rows[1].auc.value.has_value());
    CHECK(rows[1].auc.error == "DegenerateLabelsError");
    CHECK_THROWS_AS(evaluate_stratified(recs, "site"), UnknownSubgroupError);
}

TEST_CASE("mean and sample sd") {
    const std::vector<double> v = {1, 2, 3, 4};
    const MeanSd m = mean_sd(v);
    CHECK(m.mean == 2.5);
    CHECK(m.sd == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(std::isnan(mean_sd(std::vector<double>{1}).sd));
}
