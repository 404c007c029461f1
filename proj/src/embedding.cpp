#include "reldistill/embedding.hpp"

#include "reldistill/errors.hpp"

#include <unordered_set>

namespace rd {

void require_finite(const Matrix& m, const std::string& what) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (!std::isfinite(m(r, c))) {
                throw NonFiniteError(what + ": non-finite value at row " + std::to_string(r) +
                                     ", column " + std::to_string(c));
            }
        }
    }
}

EmbeddingMatrix::EmbeddingMatrix(Matrix values, std::vector<std::string> ids)
    : values_(std::move(values)), ids_(std::move(ids)) {
    if (static_cast<Eigen::Index>(ids_.size()) != values_.rows()) {
        throw ShapeMismatchError("embedding matrix has " + std::to_string(values_.rows()) +
                                 " rows but " + std::to_string(ids_.size()) + " sample ids");
    }
    std::unordered_set<std::string> seen;
    seen.reserve(ids_.size());
    for (const auto& id : ids_) {
        if (!seen.insert(id).second) {
            throw ShapeMismatchError("duplicate sample id '" + id + "'");
        }
    }
    require_finite(values_, "embedding matrix");
}

EmbeddingMatrix EmbeddingMatrix::with_index_ids(Matrix values) {
    std::vector<std::string> ids;
    ids.reserve(static_cast<std::size_t>(values.rows()));
    for (Eigen::Index i = 0; i < values.rows(); ++i) ids.push_back(std::to_string(i));
    return EmbeddingMatrix(std::move(values), std::move(ids));
}

}  // namespace rd
