#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace rd {

// Rows are samples, columns are embedding coordinates.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// A block of embeddings together with the identifiers of the samples that
// produced them. Row i belongs to ids()[i].
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;

    // Validates: ids.size() == rows, ids unique, every entry finite.
    EmbeddingMatrix(Matrix values, std::vector<std::string> ids);

    // Convenience for fixtures: ids are "0", "1", ...
    static EmbeddingMatrix with_index_ids(Matrix values);

    const Matrix& values() const noexcept { return values_; }
    const std::vector<std::string>& ids() const noexcept { return ids_; }

    Eigen::Index rows() const noexcept { return values_.rows(); }
    Eigen::Index dim() const noexcept { return values_.cols(); }
    bool empty() const noexcept { return values_.rows() == 0; }

private:
    Matrix values_;
    std::vector<std::string> ids_;
};

// Throws NonFiniteError naming `what` when any entry is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);

}  // namespace rd
