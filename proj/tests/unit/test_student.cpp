#include <doctest.h>

#include "reldistill/errors.hpp"
#include "reldistill/io.hpp"
#include "reldistill/student.hpp"
#include "test_support.hpp"

using namespace rd;
using namespace rd::student;
using contrastive::Strategy;

namespace {

struct Planted {
    LabeledDataset data;
    teachers::TeacherEnsemble ensemble;
};

// Class-mixture latents seen through a random linear map plus noise.
Planted planted(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const int classes = 3, latent = 4, dim = 6;
    const Matrix centers = rng.normal_matrix(classes, latent, 2.0);
    Matrix z(static_cast<Eigen::Index>(n), latent);
    Planted p;
    p.data.class_names = {"c0", "c1", "c2"};
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % classes);
        z.row(static_cast<Eigen::Index>(i)) = centers.row(c) + rng.normal_matrix(1, latent, 0.5);
        p.data.ids.push_back("x" + std::to_string(i));
        p.data.labels.push_back(c);
        p.data.groups.push_back("g" + std::to_string(i / 2));
    }
    p.data.inputs = z * rng.normal_matrix(latent, dim, 0.5) + rng.normal_matrix(static_cast<Eigen::Index>(n), dim, 0.2);
    p.data.input = VectorInput{dim};
    const std::vector<int> dims = {4, 12};
    p.ensemble = teachers::synth_teacher_ensemble(EmbeddingMatrix(z, p.data.ids), dims, {});
    return p;
}

EncoderConfig mlp() {
    EncoderConfig c;
    c.architecture = MlpArch{{16}};
    c.embed_dim = 8;
    c.input = VectorInput{6};
    return c;
}

Stage1Config quick(Strategy s) {
    Stage1Config c;
    c.strategy = s;
    c.epochs = 12;
    c.batch_size = 24;
    c.learning_rate = 1e-2;
    c.seed = 5;
    c.val_fraction = 0.2;
    return c;
}

}  // namespace

TEST_CASE("stage I configs validate and round trip") {
    Stage1Config c = quick(Strategy::sup_distill);
    c.lambda = 0.25;
    c.augmentation.max_rotation_deg = 45.0;
    const Stage1Config back = stage1_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(back.strategy == Strategy::sup_distill);

    c.lambda = 1.5;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = quick(Strategy::sup);
    c.tau = 0.0;
    CHECK_THROWS_AS(validate(c), InvalidTemperatureError);
    c = quick(Strategy::sup);
    c.batch_size = 1;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = quick(Strategy::sup);
    c.augmentation.max_rotation_deg = 120.0;
    CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("training lowers the loss for every strategy") {
    const Planted p = planted(60, 60);
    for (Strategy s : contrastive::kAllStrategies) {
        CAPTURE(contrastive::to_string(s));
        const TrainResult r = train_stage1(p.data, &p.ensemble, mlp(), quick(s));
        CHECK(r.final_train_loss < r.initial_train_loss);
        CHECK(r.last.history.size() == 12);
        CHECK(r.best.epoch >= 1);
        CHECK(r.best.head.has_value() == contrastive::uses_classifier_head(s));
        CHECK_FALSE(r.split.val.empty());
    }
}

TEST_CASE("training is reproducible from the seed") {
    const Planted p = planted(40, 61);
    const TrainResult a = train_stage1(p.data, &p.ensemble, mlp(), quick(Strategy::supcon_distill));
    const TrainResult b = train_stage1(p.data, &p.ensemble, mlp(), quick(Strategy::supcon_distill));
    CHECK(nn::encode_parameters(a.last.encoder.params()) == nn::encode_parameters(b.last.encoder.params()));
}

TEST_CASE("distillation strategies need teachers that cover the data") {
    const Planted p = planted(30, 62);
    CHECK_THROWS_AS(train_stage1(p.data, nullptr, mlp(), quick(Strategy::supcon_distill)), ConfigError);
    CHECK_NOTHROW(train_stage1(p.data, nullptr, mlp(), quick(Strategy::supcon)));

    LabeledDataset renamed = p.data;
    renamed.ids[3] = "stranger";
    CHECK_THROWS_AS(train_stage1(renamed, &p.ensemble, mlp(), quick(Strategy::unsup_distill)), MissingSampleError);

    EncoderConfig wide = mlp();
    wide.input = VectorInput{7};
    CHECK_THROWS_AS(train_stage1(p.data, nullptr, wide, quick(Strategy::sup)), ShapeError);
}

TEST_CASE("checkpoints round trip and embed identically") {
    test::TempDir dir;
    const Planted p = planted(30, 63);
    const TrainResult r = train_stage1(p.data, nullptr, mlp(), quick(Strategy::sup));
    save_checkpoint(dir.path(), r.best);
    for (const char* f : {"weights.bin", "config.json", "history.csv", "validation.csv"})
        CHECK(std::filesystem::exists(dir / f));
    const Checkpoint back = load_checkpoint(dir.path());
    CHECK(back.class_names == r.best.class_names);
    CHECK(back.epoch == r.best.epoch);
    CHECK(back.head.has_value());
    CHECK(back.history.size() == r.best.history.size());
    const EmbeddingMatrix e1 = embed(r.best, p.data.inputs, p.data.ids);
    const EmbeddingMatrix e2 = embed(back, p.data.inputs, p.data.ids);
    CHECK(e1.values() == e2.values());
    CHECK(e1.ids() == p.data.ids);

    io::write_file_atomic(dir / "config.json", "{");
    CHECK_THROWS_AS(load_checkpoint(dir.path()), FormatError);
}

TEST_CASE("embedding is repeatable and chunking only adds roundoff") {
    const Encoder enc = build_encoder(mlp(), 9);
    Rng rng(64);
    const Matrix x = rng.normal_matrix(50, 6);
    std::vector<std::string> ids;
    for (int i = 0; i < 50; ++i) ids.push_back(std::to_string(i));
    CHECK(embed(enc, x, ids, 7).values() == embed(enc, x, ids, 7).values());
    // different block shapes take different GEMM kernels, so only roundoff-close
    CHECK((embed(enc, x, ids, 7).values() - embed(enc, x, ids, 256).values()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(embed(enc, rng.normal_matrix(2, 5), {"a", "b"}), ShapeError);
}
