#include <doctest.h>

#include "reldistill/errors.hpp"
#include "reldistill/relational.hpp"
#include "reldistill/teachers.hpp"
#include "test_support.hpp"

using namespace rd;
using relational::Reduction;

namespace {

Matrix orthonormal_columns(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(rows, cols));
    return qr.householderQ() * Matrix::Identity(rows, cols);
}

}  // namespace

TEST_CASE("l2_normalize gives unit rows and keeps direction") {
    Rng rng(3);
    const Matrix x = rng.normal_matrix(6, 4, 3.0);
    const Matrix n = relational::l2_normalize(x);
    for (Eigen::Index i = 0; i < n.rows(); ++i) {
        CHECK(std::abs(n.row(i).norm() - 1.0) < 1e-7);
        CHECK(n.row(i).dot(x.row(i)) == doctest::Approx(x.row(i).norm()).epsilon(1e-12));
    }
    Matrix z = x;
    z.row(2).setZero();
    CHECK_THROWS_AS(relational::l2_normalize(z), ZeroVectorError);
}

TEST_CASE("relational distributions are row-stochastic with a zero diagonal") {
    Rng rng(4);
    const Matrix s = relational::cosine_similarity_matrix(rng.normal_matrix(5, 3));
    const Matrix p = relational::relational_distribution(s, 0.1);
    for (Eigen::Index i = 0; i < 5; ++i) {
        CHECK(p(i, i) == 0.0);
        CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-12);
    }
    CHECK_THROWS_AS(relational::relational_distribution(s, 0.0), InvalidTemperatureError);
    CHECK_THROWS_AS(relational::relational_distribution(s, -1.0), InvalidTemperatureError);
    CHECK_THROWS_AS(relational::relational_distribution(Matrix::Ones(1, 1), 0.1), BatchTooSmallError);
}

TEST_CASE("identical student and teacher structure gives zero loss") {
    Rng rng(5);
    const Matrix s = rng.normal_matrix(6, 8);
    const std::vector<Matrix> t = {s * 2.0};
    CHECK(std::abs(relational::distillation_loss(s, t, 0.1).total) < 1e-12);
}

TEST_CASE("distillation loss matches the element-wise oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 30; ++trial) {
        const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(5));
        const int k = 1 + static_cast<int>(rng.index(3));
        std::vector<std::string> ids;
        for (Eigen::Index i = 0; i < n; ++i) ids.push_back("s" + std::to_string(i));
        const EmbeddingMatrix student(rng.normal_matrix(n, 5), ids);
        std::vector<EmbeddingMatrix> teachers;
        const int dims[] = {4, 8, 16, 32};
        for (int j = 0; j < k; ++j) teachers.emplace_back(rng.normal_matrix(n, dims[rng.index(4)]), ids);
        for (Reduction red : {Reduction::mean_anchors, Reduction::sum_anchors}) {
            const double a = relational::distillation_loss(student, teachers, 0.1, red).total;
            const double b = relational::oracle_distillation_loss(student, teachers, 0.1, red);
            CHECK(std::abs(a - b) < 1e-9);
        }
    }
}

TEST_CASE("sum reduction is N times the mean reduction") {
    Rng rng(7);
    const Matrix s = rng.normal_matrix(5, 4);
    const std::vector<Matrix> t = {rng.normal_matrix(5, 9)};
    const double mean = relational::distillation_loss(s, t, 0.2, Reduction::mean_anchors).total;
    const double sum = relational::distillation_loss(s, t, 0.2, Reduction::sum_anchors).total;
    CHECK(sum == doctest::Approx(5.0 * mean).epsilon(1e-12));
}

TEST_CASE("teacher width does not matter") {
    Rng rng(8);
    const Matrix s = rng.normal_matrix(6, 5);
    const Matrix t = rng.normal_matrix(6, 8);
    const double base = relational::distillation_loss(s, std::vector<Matrix>{t}, 0.1).total;

    SUBCASE("zero-column padding") {
        Matrix padded = Matrix::Zero(6, 20);
        padded.leftCols(8) = t;
        CHECK(std::abs(relational::distillation_loss(s, std::vector<Matrix>{padded}, 0.1).total - base) < 1e-12);
    }
    SUBCASE("orthonormal-column map into a wider space") {
        const Matrix q = orthonormal_columns(32, 8, rng);
        const Matrix mapped = t * q.transpose();
        CHECK(std::abs(relational::distillation_loss(s, std::vector<Matrix>{mapped}, 0.1).total - base) < 1e-9);
    }
}

TEST_CASE("noise-free synthetic teachers of different widths agree") {
    Rng rng(9);
    std::vector<std::string> ids;
    for (int i = 0; i < 12; ++i) ids.push_back("x" + std::to_string(i));
    const EmbeddingMatrix latent(rng.normal_matrix(12, 6), ids);
    const std::vector<int> dims = {8, 32};
    const auto ens = teachers::synth_teacher_ensemble(latent, dims, {});
    const Matrix p8 = relational::relational_distribution(
        relational::cosine_similarity_matrix(ens.embeddings(0).values()), 0.1);
    const Matrix p32 = relational::relational_distribution(
        relational::cosine_similarity_matrix(ens.embeddings(1).values()), 0.1);
    CHECK((p8 - p32).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("distillation gradient matches finite differences") {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix s = rng.normal_matrix(5, 4);
        const std::vector<Matrix> t = {rng.normal_matrix(5, 7), rng.normal_matrix(5, 3)};
        Matrix grad;
        relational::distillation_loss(s, t, 0.1, Reduction::mean_anchors, &grad);
        const double err = test::max_gradient_error(s, grad, [&] { return relational::distillation_loss(s, t, 0.1).total; });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("row-count mismatches are rejected") {
    const std::vector<Matrix> t = {Matrix::Ones(4, 3)};
    CHECK_THROWS_AS(relational::distillation_loss(Matrix::Ones(5, 3), t, 0.1), ShapeMismatchError);
    CHECK_THROWS_AS(relational::distillation_loss(Matrix::Ones(5, 3), std::vector<Matrix>{}, 0.1), ConfigError);
    const EmbeddingMatrix a(Matrix::Identity(2, 2), {"a", "b"});
    const std::vector<EmbeddingMatrix> b = {EmbeddingMatrix(Matrix::Identity(2, 2), {"b", "a"})};
    CHECK_THROWS_AS(relational::distillation_loss(a, b, 0.1), ShapeMismatchError);
}
