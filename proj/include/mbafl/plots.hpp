#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mbafl/metrics.hpp"

namespace mbafl {

/// 8-bit RGB/gray PNG of a [C,H,W] image in [0,1], upscaled by an integer
/// factor with nearest-neighbour sampling.
void write_png(const torch::Tensor& image, const std::filesystem::path& path, int upscale = 1);

/// Per-attacker ASR curves plus their mean over rounds, with the attack
/// window shaded when window_end > window_start.
std::string asr_curve_svg(const std::vector<RoundRecord>& records, std::int64_t window_start,
                          std::int64_t window_end);

/// Scatter of the 2D projection, coloured by class for clean rows and drawn
/// as crosses for triggered rows.
std::string distribution_svg(const EmbeddingTable& table, const Projection& projection);

}  // namespace mbafl
