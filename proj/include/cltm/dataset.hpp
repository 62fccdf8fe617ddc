#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cltm/common.hpp"

namespace cltm {

/// n feature vectors with n binary label vectors over L named labels.
struct LabeledDataset {
    Matrix features;                    // n x d
    LabelMatrix labels;                 // n x L, entries in {0,1}
    std::vector<std::string> label_names;
    std::optional<std::vector<int>> scenes;  // held-out scene label per sample

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }
    Eigen::Index label_count() const { return labels.cols(); }

    void validate() const {
        if (features.rows() != labels.rows()) {
            throw InvalidInput("dataset: " + std::to_string(features.rows()) + " feature rows but " +
                               std::to_string(labels.rows()) + " label rows");
        }
        if (static_cast<Eigen::Index>(label_names.size()) != labels.cols()) {
            throw InvalidInput("dataset: label_names has " + std::to_string(label_names.size()) +
                               " entries for " + std::to_string(labels.cols()) + " label columns");
        }
        for (Eigen::Index i = 0; i < features.rows(); ++i) {
            for (Eigen::Index j = 0; j < features.cols(); ++j) {
                if (!std::isfinite(features(i, j))) {
                    throw InvalidInput("dataset: non-finite feature at (" + std::to_string(i) + ", " +
                                       std::to_string(j) + ")");
                }
            }
        }
        for (Eigen::Index i = 0; i < labels.rows(); ++i) {
            for (Eigen::Index j = 0; j < labels.cols(); ++j) {
                if (labels(i, j) != 0 && labels(i, j) != 1) {
                    throw InvalidInput("dataset: non-binary label at (" + std::to_string(i) + ", " +
                                       std::to_string(j) + ")");
                }
            }
        }
        if (scenes && static_cast<Eigen::Index>(scenes->size()) != features.rows()) {
            throw InvalidInput("dataset: scene vector length does not match sample count");
        }
    }

    LabeledDataset subset(const std::vector<int>& rows) const {
        LabeledDataset out;
        out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
        out.labels.resize(static_cast<Eigen::Index>(rows.size()), labels.cols());
        out.label_names = label_names;
        if (scenes) out.scenes.emplace();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto src = rows[r];
            if (src < 0 || src >= features.rows()) {
                throw InvalidInput("dataset: subset index " + std::to_string(src) + " out of range");
            }
            out.features.row(static_cast<Eigen::Index>(r)) = features.row(src);
            out.labels.row(static_cast<Eigen::Index>(r)) = labels.row(src);
            if (scenes) out.scenes->push_back((*scenes)[static_cast<std::size_t>(src)]);
        }
        return out;
    }
};

}  // namespace cltm
