#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace rd::cohort {

// Inner split of one fold's training patients.
struct InnerSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
};

// Patient-disjoint k-fold assignment. Patient ids are the keys; every slide
// of a patient follows the patient.
struct FoldAssignment {
    int k = 5;
    std::uint64_t seed = 0;
    std::map<std::string, int> fold_of;
    std::vector<InnerSplit> inner;  // one per fold

    std::vector<std::string> test_patients(int fold) const;
    // ConfigError unless every patient is in exactly one fold, fold sizes
    // differ by at most one, and inner splits partition the training set.
    void check() const;
};

}  // namespace rd::cohort
