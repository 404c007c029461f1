#include <doctest.h>

#include "reldistill/cli.hpp"
#include "reldistill/cohort.hpp"
#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"
#include "test_support.hpp"

#include <cstdlib>
#include <regex>
#include <set>

using namespace rd;
using namespace rd::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "reldistill");
    args.push_back("-q");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

// Planted vector dataset plus its teachers under dir/data.
fs::path make_dataset(const test::TempDir& dir, int n = 120, int input_dim = 8) {
    SynthOptions s;
    s.kind = "dataset";
    s.out = (dir / "data").string();
    s.n = n;
    s.input_dim = input_dim;
    s.groups = 2;
    s.seed = 1;
    cmd_synth(s);
    return dir / "data";
}

DistillOptions tiny_distill(const fs::path& data, const fs::path& out) {
    DistillOptions d;
    d.dataset = (data / "dataset").string();
    d.teachers = (data / "teachers").string();
    d.out = out.string();
    d.strategy = "sup";
    d.epochs = 2;
    d.batch_size = 32;
    d.hidden = {8};
    d.embed_dim = 6;
    d.knn_k = {1, 5};
    return d;
}

struct EnvGuard {
    std::string name;
    std::optional<std::string> saved;
    explicit EnvGuard(std::string n) : name(std::move(n)) {
        if (const char* v = std::getenv(name.c_str())) saved = v;
    }
    ~EnvGuard() {
        if (saved) setenv(name.c_str(), saved->c_str(), 1);
        else unsetenv(name.c_str());
    }
};

// Small cohort with hand-set outcomes and random bags.
void write_small_cohort(const fs::path& dir, int patients) {
    std::string csv = "patient_id,slide_id,label,time_months,event,age,bmi,income,sex\n";
    Rng rng(5);
    fs::create_directories(dir / "bags");
    for (int i = 0; i < patients; ++i) {
        const std::string id = "p" + std::to_string(i), slide = "s" + std::to_string(i);
        const bool pos = i % 2 == 0;
        csv += id + "," + slide + "," + (pos ? "1,20,1" : "0,80,0") + ",60,25,50," + (i < 2 ? "F" : "M") + "\n";
        mil::write_bag_features(dir / "bags", mil::Bag{slide, id, rng.normal_matrix(3, 4), pos ? 1 : 0, 0.0, 0});
    }
    io::write_file_atomic(dir / "cohort.csv", csv);
}

}  // namespace

TEST_CASE("synth teachers writes the documented files") {
    test::TempDir dir;
    CHECK(run_cli({"synth", "teachers", "--n", "30", "--dims", "8,16", "--out", (dir / "t").string()}) == 0);
    for (const char* f : {"teacher0.emb", "teacher0.ids", "teacher1.emb", "teacher1.ids", "manifest.json", "run_manifest.json"})
        CHECK(fs::exists(dir / "t" / f));
    const json m = read_json(dir / "t" / "manifest.json");
    REQUIRE(m.size() == 2);
    CHECK(m[1]["dim"] == 16);
    CHECK(run_cli({"synth", "teachers", "--dims", "0", "--out", (dir / "bad").string()}) == 2);
}

TEST_CASE("teachers fall back to the cache directory") {
    test::TempDir dir;
    EnvGuard guard(kCacheEnv);
    setenv(kCacheEnv, (dir / "cache").string().c_str(), 1);
    SynthOptions s;
    s.kind = "teachers";
    s.n = 20;
    cmd_synth(s);
    CHECK(fs::exists(dir / "cache" / "manifest.json"));
    unsetenv(kCacheEnv);
    CHECK_THROWS_AS(cmd_synth(s), ConfigError);
}

TEST_CASE("distill without teachers for a non-distilling strategy") {
    test::TempDir dir;
    EnvGuard guard(kCacheEnv);
    unsetenv(kCacheEnv);
    const fs::path data = make_dataset(dir);
    DistillOptions d = tiny_distill(data, dir / "sup");
    d.teachers.clear();
    const json r = cmd_distill(d);
    CHECK(r["runs"][0]["strategy"] == "sup");
    for (const char* f : {"weights.bin", "config.json", "history.csv", "probe.json"}) CHECK(fs::exists(dir / "sup" / f));
    CHECK(io::read_csv(dir / "sup" / "history.csv").header ==
          std::vector<std::string>{"epoch", "total", "supcon", "distill", "lr"});

    d.strategy = "supcon-distill";
    d.out = (dir / "scd").string();
    CHECK_THROWS_AS(cmd_distill(d), ConfigError);
    d.strategy = "supcon_distill";
    CHECK_THROWS_AS(cmd_distill(d), ConfigError);
}

TEST_CASE("ablation grid trains all six strategies") {
    test::TempDir dir;
    const fs::path data = make_dataset(dir);
    DistillOptions d = tiny_distill(data, dir / "grid");
    d.ablation_grid = true;
    cmd_distill(d);
    std::set<std::string> dirs;
    for (const auto& e : fs::directory_iterator(dir / "grid"))
        if (e.is_directory()) dirs.insert(e.path().filename().string());
    CHECK(dirs == std::set<std::string>{"sup", "sup-distill", "supcon", "supcon-distill", "unsup", "unsup-distill"});
    const io::CsvTable t = io::read_csv(dir / "grid" / "ablation.csv");
    CHECK(t.rows.size() == 6);
    CHECK(t.header[5] == "knn_accuracy");
    for (const auto& row : t.rows) CHECK_FALSE(row[5].empty());
}

TEST_CASE("embed in bag mode and flat mode") {
    test::TempDir dir;
    const fs::path data = make_dataset(dir, 1000, 8);
    cmd_distill(tiny_distill(data, dir / "ckpt"));

    SynthOptions c;
    c.kind = "cohort";
    c.out = (dir / "cohort").string();
    c.patients = 12;
    c.patches = 4;
    c.feature_dim = 8;
    cmd_synth(c);

    EmbedOptions e;
    e.checkpoint = (dir / "ckpt").string();
    e.cohort = (dir / "cohort" / "cohort.csv").string();
    e.out = (dir / "emb1").string();
    cmd_embed(e);
    const auto patients = cohort::read_cohort_csv(dir / "cohort" / "cohort.csv");
    std::size_t slides = 0;
    for (const auto& p : patients) {
        for (const auto& s : p.slide_ids) {
            ++slides;
            CHECK(fs::exists(dir / "emb1" / "bags" / (s + ".emb")));
            CHECK(mil::read_bag_features(dir / "emb1" / "bags", s).cols() == 6);
        }
    }
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& f : fs::directory_iterator(dir / "emb1" / "bags"))
        if (f.path().extension() == ".emb") ++files;
    CHECK(files == slides);
    CHECK(fs::exists(dir / "emb1" / "cohort.csv"));

    e.out = (dir / "emb2").string();
    cmd_embed(e);
    for (const auto& p : patients)
        for (const auto& s : p.slide_ids)
            CHECK(io::read_file(dir / "emb1" / "bags" / (s + ".emb")) == io::read_file(dir / "emb2" / "bags" / (s + ".emb")));

    EmbedOptions flat;
    flat.checkpoint = (dir / "ckpt").string();
    flat.dataset = (data / "dataset").string();
    flat.out = (dir / "flat").string();
    cmd_embed(flat);
    cmd_embed(flat);
    CHECK(io::read_embeddings(dir / "flat" / "embeddings.emb").rows() == 1000);
    const io::CsvTable bench = io::read_csv(dir / "flat" / "bench.csv");
    REQUIRE(bench.rows.size() == 2);
    CHECK(bench.rows[0][2] == "1000");
}

TEST_CASE("mil-train writes one prediction per slide and replays from its manifest") {
    test::TempDir dir;
    SynthOptions c;
    c.kind = "cohort";
    c.out = (dir / "cohort").string();
    c.patients = 30;
    c.patches = 6;
    c.feature_dim = 8;
    cmd_synth(c);

    MilTrainOptions m;
    m.cohort = (dir / "cohort" / "cohort.csv").string();
    m.out = (dir / "m1").string();
    m.folds = 3;
    m.hidden = 8;
    m.epochs = 4;
    m.lr = 5e-3;
    m.threads = 3;
    const json r = cmd_mil_train(m);
    const auto preds = mil::read_predictions_csv(dir / "m1" / "predictions.csv");
    CHECK(preds.size() == r["slides"].get<std::size_t>());
    std::set<std::string> slides;
    for (const auto& p : preds) slides.insert(p.slide_id);
    CHECK(slides.size() == preds.size());
    for (const char* f : {"folds.json", "models/fold_0.bin", "models/model.json", "training.csv", "attention.csv", "run_manifest.json"})
        CHECK(fs::exists(dir / "m1" / f));

    CHECK(run_cli({"--config", (dir / "m1" / "run_manifest.json").string(), "--out", (dir / "m2").string(), "--threads", "1"}) == 0);
    CHECK(io::read_file(dir / "m1" / "predictions.csv") == io::read_file(dir / "m2" / "predictions.csv"));
    CHECK(io::read_file(dir / "m1" / "folds.json") == io::read_file(dir / "m2" / "folds.json"));
}

TEST_CASE("mil-train rejects more folds than patients") {
    test::TempDir dir;
    write_small_cohort(dir.path(), 4);
    MilTrainOptions m;
    m.cohort = (dir / "cohort.csv").string();
    m.out = (dir / "m").string();
    m.folds = 5;
    CHECK_THROWS_AS(cmd_mil_train(m), ConfigError);
    m.folds = 1;
    CHECK_THROWS_AS(cmd_mil_train(m), ConfigError);
    CHECK(run_cli({"mil-train", "--cohort", m.cohort, "--out", m.out, "--folds", "5"}) == 2);
}

TEST_CASE("evaluate reports fold summaries, hazard ratios and subgroups") {
    test::TempDir dir;
    cohort::SynthCohortConfig cc;
    cc.patches_per_bag = 2;
    cc.feature_dim = 2;
    const auto data = cohort::synth_cohort(60, cc, 4);
    cohort::write_cohort(dir / "c", data);
    const auto folds = cohort::stratified_kfold(data.patients, cohort::kDefaultCovariates, 3, 4);
    // risk = label gives perfect discrimination in every fold
    std::string csv = "patient_id,risk,fold\n";
    for (const auto& p : data.patients)
        csv += p.patient_id + "," + std::to_string(0.2 + 0.6 * p.outcome.label + 0.001 * data.latent.at(p.patient_id)) +
               "," + std::to_string(folds.fold_of.at(p.patient_id)) + "\n";
    io::write_file_atomic(dir / "risk.csv", csv);

    EvaluateOptions e;
    e.predictions = (dir / "risk.csv").string();
    e.cohort = (dir / "c" / "cohort.csv").string();
    e.out = (dir / "ev").string();
    e.stratify_by = {"sex"};
    cmd_evaluate(e);
    const json m = read_json(dir / "ev" / "metrics.json");
    CHECK(m["summary"]["auc"]["text"] == "1.00 ± 0.00");
    CHECK(m["summary"]["auc"]["n_folds"] == 3);
    CHECK(m["pooled"]["auc"] == 1.0);
    CHECK(m["n_patients"] == 60);
    // label-separated risks make the partial likelihood monotone
    CHECK(m["cox"]["error"] == "NonConvergenceError");
    REQUIRE(m["stratified"]["sex"].size() == 2);
    CHECK(m["stratified"]["sex"][0]["subgroup"] == "F");
    CHECK(m["risk_groups"]["n_high"].get<int>() + m["risk_groups"]["n_low"].get<int>() == 60);

    const io::CsvTable km = io::read_csv(dir / "ev" / "km_curves.csv");
    CHECK(km.header == std::vector<std::string>{"group", "time", "survival", "at_risk", "events", "lower", "upper"});
    CHECK(km.rows[0][1] == "0");
    CHECK(km.rows[0][2] == "1");

    std::string latent_csv = "patient_id,risk\n";
    for (const auto& p : data.patients) latent_csv += p.patient_id + "," + std::to_string(data.latent.at(p.patient_id)) + "\n";
    io::write_file_atomic(dir / "latent.csv", latent_csv);
    EvaluateOptions e2 = e;
    e2.predictions = (dir / "latent.csv").string();
    e2.out = (dir / "ev2").string();
    cmd_evaluate(e2);
    const json m2 = read_json(dir / "ev2" / "metrics.json");
    const std::string hr = m2["cox"]["text"];
    CHECK(std::regex_match(hr, std::regex(R"(\d+\.\d{2} \(95% CI: \d+\.\d{2}–\d+\.\d{2}\))")));
    CHECK(m2["cox"]["hazard_ratio"].get<double>() > 1.0);
    CHECK(m2["per_fold"].empty());

    io::write_file_atomic(dir / "stray.csv", "patient_id,risk\nnobody,0.3\n" + data.patients[0].patient_id + ",0.1\n");
    e.predictions = (dir / "stray.csv").string();
    CHECK_THROWS_AS(cmd_evaluate(e), MissingSampleError);
    e.predictions = (dir / "risk.csv").string();
    e.stratify_by = {"stage"};
    CHECK_THROWS_AS(cmd_evaluate(e), UnknownSubgroupError);
}

TEST_CASE("speedup ratios") {
    std::vector<BenchRow> rows(3);
    rows[0].model = "a";
    rows[0].seconds_per_1k = 2.0;
    rows[1].model = "b";
    rows[1].seconds_per_1k = 1.0;
    rows[2].model = "ref";
    rows[2].seconds_per_1k = 4.0;
    for (auto& r : rows) r.batch_size = 32;
    compute_speedups(rows, "ref");
    CHECK(rows[0].speedup_vs_slowest == 2.0);
    CHECK(rows[1].speedup_vs_slowest == 4.0);
    CHECK(rows[2].speedup_vs_slowest == 1.0);
    CHECK(rows[0].speedup_vs_avg == 1.5 / 2.0);  // average of a and b
    CHECK(rows[2].speedup_vs_avg == 1.5 / 4.0);

    std::vector<BenchRow> single(1);
    single[0].seconds_per_1k = 0.3;
    compute_speedups(single, "");
    CHECK(single[0].speedup_vs_slowest == 1.0);
    CHECK(single[0].speedup_vs_avg == 1.0);
    CHECK_THROWS_AS(compute_speedups(rows, "nope"), ConfigError);
    rows[0].seconds_per_1k = 0.0;
    CHECK_THROWS_AS(compute_speedups(rows, ""), ConfigError);
}

TEST_CASE("bench table over two toy encoders and cached teachers") {
    test::TempDir dir;
    const fs::path data = make_dataset(dir, 60, 8);
    DistillOptions small = tiny_distill(data, dir / "small");
    small.epochs = 1;
    cmd_distill(small);
    DistillOptions big = tiny_distill(data, dir / "big");
    big.epochs = 1;
    big.hidden = {256, 256};
    cmd_distill(big);

    BenchOptions b;
    b.checkpoints = {(dir / "small").string(), (dir / "big").string()};
    b.names = {"small", "big"};
    b.teachers = (data / "teachers").string();
    b.out = (dir / "bench").string();
    b.n_patches = 200;
    b.batch_sizes = {16, 64};
    b.repeats = 2;
    const json r = cmd_bench(b);
    REQUIRE(r["rows"].size() == 8);
    for (int bs : {16, 64}) {
        double slowest = 0.0;
        for (const auto& row : r["rows"])
            if (row["batch_size"] == bs) slowest = std::max(slowest, row["seconds_per_1k"].get<double>());
        for (const auto& row : r["rows"])
            if (row["batch_size"] == bs)
                CHECK(row["speedup_vs_slowest"].get<double>() == slowest / row["seconds_per_1k"].get<double>());
    }
    const io::CsvTable t = io::read_csv(dir / "bench" / "bench_table.csv");
    CHECK(t.header.front() == "Model");
    CHECK(t.header[2] == "Parameters (M)");
    CHECK(t.rows[0][1] == "MLP 8-8-6");
    CHECK(fs::exists(dir / "bench" / "bench_table.txt"));
}

TEST_CASE("probe from embedding files") {
    test::TempDir dir;
    Rng rng(6);
    Matrix x = rng.normal_matrix(40, 3, 0.2);
    std::string labels = "sample_id,label\n";
    std::vector<std::string> ids;
    for (int i = 0; i < 40; ++i) {
        x(i, i % 2) += 2.0;
        ids.push_back("x" + std::to_string(i));
        labels += ids.back() + "," + (i % 2 ? "b" : "a") + "\n";
    }
    io::write_embeddings(dir / "e.emb", EmbeddingMatrix(x, ids));
    io::write_file_atomic(dir / "l.csv", labels);
    ProbeOptions p;
    p.train_emb = p.val_emb = (dir / "e.emb").string();
    p.train_labels = p.val_labels = (dir / "l.csv").string();
    p.out = (dir / "probe").string();
    p.k = {1, 3, 100};
    cmd_probe(p);
    const json j = read_json(dir / "probe" / "probe.json");
    CHECK(j["knn"]["accuracy"] == 1.0);
    CHECK(j["linear_probe"]["accuracy"] == 1.0);
}

TEST_CASE("exit codes") {
    test::TempDir dir;
    CHECK(run_cli({}) == 2);
    CHECK(run_cli({"--help"}) == 0);
    CHECK(run_cli({"--version"}) == 0);
    CHECK(run_cli({"synth", "--no-such-flag"}) == 2);
    CHECK(run_cli({"evaluate", "--predictions", (dir / "none.csv").string(), "--cohort", (dir / "none.csv").string(),
                   "--out", (dir / "o").string()}) == 2);
    io::write_file_atomic(dir / "cfg.json", "{ not json");
    CHECK(run_cli({"--config", (dir / "cfg.json").string(), "synth", "teachers", "--out", (dir / "t").string()}) == 2);
}

TEST_CASE("run configs fill the selected command") {
    test::TempDir dir;
    io::write_file_atomic(dir / "cfg.json", json{{"seed", 11}, {"synth", {{"n", 25}, {"dims", {12}}}}}.dump());
    CHECK(run_cli({"--config", (dir / "cfg.json").string(), "synth", "teachers", "--out", (dir / "t").string()}) == 0);
    const json m = read_json(dir / "t" / "run_manifest.json");
    CHECK(m["options"]["n"] == 25);
    CHECK(m["options"]["seed"] == 11);
    CHECK(io::read_embeddings(dir / "t" / "teacher0.emb").dim() == 12);
}
