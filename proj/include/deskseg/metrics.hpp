#pragma once

#include <cstdint>
#include <vector>

namespace deskseg {

// 2|A∩B| / (|A|+|B|) over binary masks of equal length; both empty -> 1.0.
double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

// Rank-based (Mann-Whitney) ROC AUC with average ranks for ties. Both classes
// must be present.
double roc_auc(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels);

}  // namespace deskseg
