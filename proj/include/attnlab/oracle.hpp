#pragma once

#include <span>
#include <vector>

#include "attnlab/modality.hpp"

namespace attnlab {

// Token-by-token reference allocation for redistribution. For each recipient
// token i the added mass is fraction * alpha_source * w_i / sum_j w_j, with
// every sum accumulated by an explicit loop. Zero-mass recipients or sources
// return the row unchanged. Kept independent of the closed-form rewrites so
// the two can check each other.
std::vector<double> brute_force_redistribute(std::span<const double> row,
                                             const ModalityLayout& layout, Modality source,
                                             std::span<const Modality> recipients,
                                             double fraction);

}  // namespace attnlab
