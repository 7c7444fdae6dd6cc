#pragma once

#include <string>
#include <vector>

#include "mvswin/gradcheck.hpp"
#include "mvswin/model.hpp"

namespace mvswin {

struct ComponentCheck {
  std::string component;  // "mda", "omni_block_pair", "patch_merge", "model"
  GradCheckReport report;
};

/// Finite-difference checks of the first dual stage's SW-MDA, its Omni block
/// pair, the first patch merge and bce(forward_pair) for the full model, all
/// in double precision. Inputs are seeded Gaussians.
std::vector<ComponentCheck> gradcheck_components(const ModelConfig& cfg,
                                                 std::size_t probes = 200,
                                                 std::uint64_t seed = 0);

}  // namespace mvswin
