#include "reldistill/cohort.hpp"

#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"
#include "reldistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>

namespace rd::cohort {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- FoldAssignment --------------------------------------------------------

std::vector<std::string> FoldAssignment::test_patients(int fold) const {
    std::vector<std::string> out;
    for (const auto& [id, f] : fold_of)
        if (f == fold) out.push_back(id);
    return out;
}

void FoldAssignment::check() const {
    if (k < 2) throw ConfigError("fold count must be at least 2");
    std::vector<int> sizes(static_cast<std::size_t>(k), 0);
    for (const auto& [id, f] : fold_of) {
        if (f < 0 || f >= k) throw ConfigError("patient '" + id + "' has fold " + std::to_string(f) + " outside [0, k)");
        ++sizes[static_cast<std::size_t>(f)];
    }
    const auto [mn, mx] = std::minmax_element(sizes.begin(), sizes.end());
    if (*mx - *mn > 1) throw ConfigError("fold sizes differ by more than one patient");
    if (inner.size() != static_cast<std::size_t>(k)) throw ConfigError("expected one inner split per fold");
    for (int f = 0; f < k; ++f) {
        const auto& in = inner[static_cast<std::size_t>(f)];
        std::set<std::string> seen;
        for (const auto* part : {&in.train, &in.val}) {
            for (const auto& id : *part) {
                const auto it = fold_of.find(id);
                if (it == fold_of.end()) throw ConfigError("inner split names unknown patient '" + id + "'");
                if (it->second == f) throw ConfigError("fold " + std::to_string(f) + " trains on its test patient '" + id + "'");
                if (!seen.insert(id).second) throw ConfigError("inner splits of fold " + std::to_string(f) + " overlap");
            }
        }
        if (seen.size() != fold_of.size() - static_cast<std::size_t>(sizes[static_cast<std::size_t>(f)]))
            throw ConfigError("inner split of fold " + std::to_string(f) + " does not cover the training patients");
    }
}

// ---- cohort.csv --------------------------------------------------------------

namespace {

const std::set<std::string> kCoreColumns = {"patient_id", "slide_id", "label", "time_months", "event"};

}  // namespace

std::vector<PatientRecord> read_cohort_csv(const fs::path& path, std::span<const std::string> covariate_keys) {
    const io::CsvTable t = io::read_csv(path);
    const std::string origin = path.string();
    const auto pc = t.require_column("patient_id", origin);
    const auto sc = t.require_column("slide_id", origin);
    const auto lc = t.require_column("label", origin);
    const auto tc = t.require_column("time_months", origin);
    const auto ec = t.require_column("event", origin);
    const std::set<std::string> covs(covariate_keys.begin(), covariate_keys.end());

    std::vector<PatientRecord> patients;
    std::unordered_map<std::string, std::size_t> index;
    std::set<std::string> slides;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        if (row.size() != t.header.size()) throw FormatError(origin + ": row " + std::to_string(r + 2) + " has the wrong field count");
        const std::string where = origin + " row " + std::to_string(r + 2);
        Outcome o;
        o.label = static_cast<int>(io::parse_int(row[lc], where + " label"));
        o.time_months = io::parse_double(row[tc], where + " time_months");
        o.event = static_cast<int>(io::parse_int(row[ec], where + " event"));
        if ((o.label != 0 && o.label != 1) || (o.event != 0 && o.event != 1))
            throw ConfigError(where + ": label and event must be 0 or 1");
        if (!(o.time_months >= 0.0)) throw ConfigError(where + ": negative survival time");
        if (!slides.insert(row[sc]).second) throw ConfigError(where + ": duplicate slide_id '" + row[sc] + "'");

        auto [it, fresh] = index.try_emplace(row[pc], patients.size());
        if (fresh) {
            PatientRecord p;
            p.patient_id = row[pc];
            p.outcome = o;
            for (std::size_t c = 0; c < t.header.size(); ++c) {
                const auto& name = t.header[c];
                if (kCoreColumns.contains(name)) continue;
                if (covs.contains(name)) {
                    const double v = io::parse_double(row[c], where + " " + name);
                    if (!std::isfinite(v)) throw NonFiniteError(where + ": covariate '" + name + "' is not finite");
                    p.covariates[name] = v;
                } else {
                    p.subgroups[name] = row[c];
                }
            }
            patients.push_back(std::move(p));
        } else {
            const Outcome& prev = patients[it->second].outcome;
            if (prev.label != o.label || prev.event != o.event || prev.time_months != o.time_months)
                throw ConfigError(where + ": slides of patient '" + row[pc] + "' disagree on the outcome");
        }
        patients[it->second].slide_ids.push_back(row[sc]);
    }
    return patients;
}

void write_cohort_csv(const fs::path& path, std::span<const PatientRecord> patients) {
    std::set<std::string> cov_names, sub_names;
    for (const auto& p : patients) {
        for (const auto& [k, v] : p.covariates) cov_names.insert(k);
        for (const auto& [k, v] : p.subgroups) sub_names.insert(k);
    }
    io::CsvTable t;
    t.header = {"patient_id", "slide_id", "label", "time_months", "event"};
    // conventional column order first
    for (const auto& name : kDefaultCovariates)
        if (cov_names.erase(name)) t.header.push_back(name);
    t.header.insert(t.header.end(), cov_names.begin(), cov_names.end());
    for (const std::string name : {"treatment", "sex", "tumor_location"})
        if (sub_names.erase(name)) t.header.push_back(name);
    t.header.insert(t.header.end(), sub_names.begin(), sub_names.end());

    for (const auto& p : patients) {
        for (const auto& slide : p.slide_ids) {
            std::vector<std::string> row = {p.patient_id, slide, std::to_string(p.outcome.label),
                                            io::format_double(p.outcome.time_months), std::to_string(p.outcome.event)};
            for (std::size_t c = 5; c < t.header.size(); ++c) {
                const auto& name = t.header[c];
                if (const auto it = p.covariates.find(name); it != p.covariates.end()) row.push_back(io::format_double(it->second));
                else if (const auto jt = p.subgroups.find(name); jt != p.subgroups.end()) row.push_back(jt->second);
                else row.emplace_back();
            }
            t.rows.push_back(std::move(row));
        }
    }
    io::write_file_atomic(path, io::format_csv(t));
}

std::vector<mil::Bag> load_bags(std::span<const PatientRecord> patients, const fs::path& bag_dir) {
    std::vector<mil::Bag> bags;
    for (const auto& p : patients) {
        for (const auto& slide : p.slide_ids) {
            mil::Bag b;
            b.slide_id = slide;
            b.patient_id = p.patient_id;
            b.features = mil::read_bag_features(bag_dir, slide);
            b.label = p.outcome.label;
            b.time_months = p.outcome.time_months;
            b.event = p.outcome.event;
            bags.push_back(std::move(b));
        }
    }
    return bags;
}

// ---- folds -------------------------------------------------------------------

namespace {

// k-means++ seeding then Lloyd iterations; returns a cluster per row.
std::vector<int> kmeans(const Matrix& x, int clusters, Rng& rng) {
    const Eigen::Index n = x.rows();
    std::vector<Eigen::Index> centers{static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)))};
    Eigen::VectorXd d2 = (x.rowwise() - x.row(centers[0])).rowwise().squaredNorm();
    while (static_cast<int>(centers.size()) < clusters) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total <= 0.0) {
            pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
        } else {
            double u = rng.uniform() * total;
            for (pick = 0; pick < n - 1; ++pick) {
                u -= d2(pick);
                if (u < 0.0) break;
            }
        }
        centers.push_back(pick);
        d2 = d2.cwiseMin((x.rowwise() - x.row(pick)).rowwise().squaredNorm());
    }
    Matrix c(clusters, x.cols());
    for (int j = 0; j < clusters; ++j) c.row(j) = x.row(centers[static_cast<std::size_t>(j)]);

    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index best = 0;
            (c.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
            if (assign[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
                assign[static_cast<std::size_t>(i)] = static_cast<int>(best);
                changed = true;
            }
        }
        if (!changed) break;
        Matrix sum = Matrix::Zero(clusters, x.cols());
        std::vector<int> count(static_cast<std::size_t>(clusters), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sum.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
            ++count[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int j = 0; j < clusters; ++j)
            if (count[static_cast<std::size_t>(j)] > 0) c.row(j) = sum.row(j) / count[static_cast<std::size_t>(j)];
    }
    return assign;
}

}  // namespace

FoldAssignment stratified_kfold(std::span<const PatientRecord> patients, std::span<const std::string> covariate_keys,
                                int k, std::uint64_t seed, double val_fraction) {
    if (k < 2) throw ConfigError("k must be at least 2");
    const auto n = static_cast<Eigen::Index>(patients.size());
    if (n < k) throw ConfigError("need at least k = " + std::to_string(k) + " patients, have " + std::to_string(n));
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("inner validation fraction must lie in (0, 1)");
    std::set<std::string> ids;
    for (const auto& p : patients)
        if (!ids.insert(p.patient_id).second) throw ConfigError("duplicate patient id '" + p.patient_id + "'");

    Matrix x(n, static_cast<Eigen::Index>(covariate_keys.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < covariate_keys.size(); ++c) {
            const auto& cov = patients[static_cast<std::size_t>(i)].covariates;
            const auto it = cov.find(covariate_keys[c]);
            if (it == cov.end())
                throw MissingCovariateError("patient '" + patients[static_cast<std::size_t>(i)].patient_id +
                                            "' lacks covariate '" + covariate_keys[c] + "'");
            x(i, static_cast<Eigen::Index>(c)) = it->second;
        }
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double mean = x.col(c).mean();
        const double sd = std::sqrt((x.col(c).array() - mean).square().mean());
        x.col(c) = ((x.col(c).array() - mean) / (sd > 1e-12 ? sd : 1.0)).matrix();
    }

    Rng rng(seed);
    const int clusters = static_cast<int>(std::min<Eigen::Index>({8, n / 10 + 1, n}));
    const std::vector<int> cluster = x.cols() > 0 ? kmeans(x, clusters, rng) : std::vector<int>(static_cast<std::size_t>(n), 0);

    // label-major, then cluster, members shuffled; one round-robin pointer
    // over this order keeps fold sizes and per-fold positives within one
    std::vector<std::size_t> order;
    for (int label : {1, 0}) {
        for (int c = 0; c < clusters; ++c) {
            std::vector<std::size_t> members;
            for (std::size_t i = 0; i < patients.size(); ++i)
                if (cluster[i] == c && patients[i].outcome.label == label) members.push_back(i);
            rng.shuffle(members);
            order.insert(order.end(), members.begin(), members.end());
        }
    }

    FoldAssignment fa;
    fa.k = k;
    fa.seed = seed;
    for (std::size_t pos = 0; pos < order.size(); ++pos)
        fa.fold_of[patients[order[pos]].patient_id] = static_cast<int>(pos % static_cast<std::size_t>(k));

    std::map<std::string, int> label_of;
    for (const auto& p : patients) label_of[p.patient_id] = p.outcome.label;
    for (int f = 0; f < k; ++f) {
        Rng inner_rng(seed + static_cast<std::uint64_t>(f));
        InnerSplit split;
        for (int label : {1, 0}) {
            std::vector<std::string> pool;
            for (const auto& [id, fold] : fa.fold_of)
                if (fold != f && label_of[id] == label) pool.push_back(id);
            inner_rng.shuffle(pool);
            const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(pool.size()) + 0.5));
            split.val.insert(split.val.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
            split.train.insert(split.train.end(), pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
        }
        if (split.val.empty() && split.train.size() > 1) {
            split.val.push_back(split.train.back());
            split.train.pop_back();
        }
        std::sort(split.train.begin(), split.train.end());
        std::sort(split.val.begin(), split.val.end());
        fa.inner.push_back(std::move(split));
    }
    fa.check();
    return fa;
}

json to_json(const FoldAssignment& folds) {
    json inner = json::array();
    for (std::size_t f = 0; f < folds.inner.size(); ++f)
        inner.push_back({{"fold", f}, {"train", folds.inner[f].train}, {"val", folds.inner[f].val}});
    return json{{"seed", folds.seed}, {"k", folds.k}, {"assignments", folds.fold_of}, {"inner_splits", inner}};
}

FoldAssignment fold_assignment_from_json(const json& j) {
    FoldAssignment fa;
    try {
        fa.seed = j.at("seed").get<std::uint64_t>();
        fa.k = j.at("k").get<int>();
        fa.fold_of = j.at("assignments").get<std::map<std::string, int>>();
        for (const auto& s : j.at("inner_splits"))
            fa.inner.push_back({s.at("train").get<std::vector<std::string>>(), s.at("val").get<std::vector<std::string>>()});
    } catch (const json::exception& e) {
        throw FormatError(std::string("folds.json: ") + e.what());
    }
    fa.check();
    return fa;
}

void write_folds_json(const fs::path& path, const FoldAssignment& folds) {
    io::write_file_atomic(path, to_json(folds).dump(2) + "\n");
}

FoldAssignment read_folds_json(const fs::path& path) {
    try {
        return fold_assignment_from_json(json::parse(io::read_file(path)));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---- subgroups ---------------------------------------------------------------

namespace {

template <typename R>
std::vector<R> filter_by(std::span<const R> records, const std::string& key, const std::string& value) {
    bool known = false;
    std::vector<R> out;
    for (const auto& r : records) {
        const auto it = r.subgroups.find(key);
        if (it == r.subgroups.end()) continue;
        known = true;
        if (it->second == value) out.push_back(r);
    }
    if (!known && !records.empty()) throw UnknownSubgroupError("unknown subgroup key '" + key + "'");
    return out;
}

}  // namespace

std::vector<PatientRecord> subgroup_filter(std::span<const PatientRecord> records, const std::string& key,
                                           const std::string& value) {
    return filter_by(records, key, value);
}

std::vector<survival::SurvivalRecord> subgroup_filter(std::span<const survival::SurvivalRecord> records,
                                                      const std::string& key, const std::string& value) {
    return filter_by(records, key, value);
}

std::vector<survival::SurvivalRecord> survival_records(std::span<const PatientRecord> patients,
                                                       const std::map<std::string, double>& risk_by_patient) {
    std::vector<survival::SurvivalRecord> out;
    for (const auto& p : patients) {
        const auto it = risk_by_patient.find(p.patient_id);
        if (it == risk_by_patient.end()) throw MissingSampleError("no risk score for patient '" + p.patient_id + "'");
        survival::SurvivalRecord r;
        r.patient_id = p.patient_id;
        r.risk = it->second;
        r.time_months = p.outcome.time_months;
        r.event = p.outcome.event;
        r.label = p.outcome.label;
        r.subgroups = p.subgroups;
        out.push_back(std::move(r));
    }
    return out;
}

// ---- synthetic cohort --------------------------------------------------------

SynthCohort synth_cohort(int n_patients, const SynthCohortConfig& config, std::uint64_t seed) {
    if (n_patients < 10) throw ConfigError("synthetic cohorts need at least 10 patients");
    if (config.patches_per_bag < 1) throw ConfigError("patches_per_bag must be positive");
    if (config.feature_dim < 1) throw ConfigError("feature_dim must be positive");
    if (!(config.censoring_rate >= 0.0 && config.censoring_rate < 1.0)) throw ConfigError("censoring_rate must lie in [0, 1)");
    if (!(config.signal_strength >= 0.0)) throw ConfigError("signal_strength must be non-negative");
    if (!(config.signal_fraction >= 0.0 && config.signal_fraction <= 1.0)) throw ConfigError("signal_fraction must lie in [0, 1]");
    if (!(config.horizon_months > 0.0) || !(config.base_median_months > 0.0)) throw ConfigError("horizon and median must be positive");

    Rng rng(seed);
    Rng feature_rng = rng.split(1);
    const double beta = config.hazard_coef.value_or(kHazardPerSignal * config.signal_strength);
    const double base_rate = std::log(2.0) / config.base_median_months;

    // unit direction carrying the signal
    Vector mu(config.feature_dim);
    for (Eigen::Index j = 0; j < mu.size(); ++j) mu(j) = feature_rng.normal();
    mu.normalize();

    static const char* kTreatments[] = {"FL", "IFL"};
    static const char* kSexes[] = {"F", "M"};
    static const char* kLocations[] = {"left", "right", "rectum"};

    SynthCohort out;
    const int width = std::max(4, static_cast<int>(std::to_string(n_patients).size()));
    for (int i = 0; i < n_patients; ++i) {
        std::string num = std::to_string(i + 1);
        num.insert(0, static_cast<std::size_t>(width) - num.size(), '0');
        PatientRecord p;
        p.patient_id = "P" + num;
        const double z = rng.normal();
        out.latent[p.patient_id] = z;

        const double t_event = rng.exponential(base_rate * std::exp(beta * z));
        const bool censored = rng.bernoulli(config.censoring_rate);
        const double t_censor = rng.uniform() * t_event;
        p.outcome.time_months = censored ? t_censor : t_event;
        p.outcome.event = censored ? 0 : 1;
        p.outcome.label = mil::horizon_label(p.outcome.time_months, p.outcome.event, config.horizon_months);

        p.covariates["age"] = rng.normal(65.0, 10.0);
        p.covariates["bmi"] = rng.normal(27.0, 5.0);
        p.covariates["income"] = rng.normal(60.0, 20.0);
        p.subgroups["treatment"] = kTreatments[rng.index(2)];
        p.subgroups["sex"] = kSexes[rng.index(2)];
        p.subgroups["tumor_location"] = kLocations[rng.index(3)];

        const int slides = rng.bernoulli(config.multi_slide_rate) ? 2 : 1;
        for (int s = 0; s < slides; ++s) {
            mil::Bag bag;
            bag.slide_id = "S" + num + (slides > 1 ? std::string(1, static_cast<char>('a' + s)) : std::string());
            bag.patient_id = p.patient_id;
            const int jitter = std::max(1, config.patches_per_bag / 4);
            const int n_patch = std::max(1, config.patches_per_bag + static_cast<int>(rng.index(static_cast<std::size_t>(2 * jitter + 1))) - jitter);
            bag.features = feature_rng.normal_matrix(n_patch, config.feature_dim);
            const int n_signal = static_cast<int>(std::lround(config.signal_fraction * n_patch));
            const Eigen::RowVectorXd shift = (config.signal_strength * z) * mu.transpose();
            for (int r = 0; r < n_signal; ++r) bag.features.row(r) += shift;
            // signal patches sit at random positions in the bag
            std::vector<Eigen::Index> perm(static_cast<std::size_t>(n_patch));
            std::iota(perm.begin(), perm.end(), Eigen::Index{0});
            rng.shuffle(perm);
            Matrix shuffled(n_patch, config.feature_dim);
            for (int r = 0; r < n_patch; ++r) shuffled.row(r) = bag.features.row(perm[static_cast<std::size_t>(r)]);
            bag.features = std::move(shuffled);
            bag.label = p.outcome.label;
            bag.time_months = p.outcome.time_months;
            bag.event = p.outcome.event;
            p.slide_ids.push_back(bag.slide_id);
            out.bags.push_back(std::move(bag));
        }
        out.patients.push_back(std::move(p));
    }
    return out;
}

void write_cohort(const fs::path& dir, const SynthCohort& cohort) {
    fs::create_directories(dir / "bags");
    write_cohort_csv(dir / "cohort.csv", cohort.patients);
    for (const auto& bag : cohort.bags) mil::write_bag_features(dir / "bags", bag);
}

}  // namespace rd::cohort
