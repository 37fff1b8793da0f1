#pragma once

#include <vector>

#include "sparseformer/config.hpp"
#include "sparseformer/gradcheck.hpp"

namespace spf {

// Finite-difference suites behind the gradcheck CLI subcommand, float64.
// Primitive rows are held to 1e-5, the full micro model to 1e-4.
std::vector<GradCheckRow> primitive_gradchecks();

// Fixed micro configuration used by the full-model checks (9 tokens, 4
// points, widths 16/32, two stages each, 8 feature channels, 4 classes).
ModelConfig micro_model_config();

// Full micro model (classification loss against every parameter, including
// the initial token RoIs).
GradCheckRow micro_model_gradcheck();

// With a constant feature map, every RoI-coordinate gradient must be exactly
// zero; the row reports the largest |gradient| with tolerance 0.
GradCheckRow constant_feature_roi_gradcheck();

}  // namespace spf
