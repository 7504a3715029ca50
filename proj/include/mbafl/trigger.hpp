#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace mbafl {

enum class TriggerKind { blend, patch };

TriggerKind parse_trigger_kind(std::string_view name);
std::string to_string(TriggerKind kind);

/// Channel-first image shape (C, H, W).
using ImageShape = std::array<std::int64_t, 3>;

struct PatchRegion {
  std::int64_t row = 0;
  std::int64_t col = 0;
  std::int64_t height = 5;
  std::int64_t width = 5;

  bool operator==(const PatchRegion&) const = default;
};

/// A trigger pattern together with the rule that stamps it onto images.
///
/// Blend triggers mix the whole image with the pattern; patch triggers
/// overwrite a rectangular block. The pattern always has image shape and
/// values in [0, 1]; for patch triggers only the region is meaningful.
struct Trigger {
  TriggerKind kind = TriggerKind::blend;
  torch::Tensor pattern;  // float32 [C, H, W]
  double blend_coefficient = 0.2;
  PatchRegion region;

  ImageShape shape() const;

  /// 1 inside the patch region, 0 elsewhere; shape [1, H, W]. Blend
  /// triggers return an all-ones mask.
  torch::Tensor mask() const;
};

Trigger init_trigger(TriggerKind kind, ImageShape shape, std::uint64_t seed,
                     double blend_coefficient = 0.2, PatchRegion region = {});

/// Stamps the trigger on a single image [C,H,W] or a batch [B,C,H,W].
torch::Tensor apply_trigger(const torch::Tensor& images, const Trigger& trigger);

/// Same operator, but with an explicit pattern tensor so callers can take
/// gradients with respect to it.
torch::Tensor apply_trigger(const torch::Tensor& images, const Trigger& trigger,
                            const torch::Tensor& pattern);

/// Projects the pattern back into the pixel box [0, 1].
Trigger clamp_trigger(Trigger trigger);

void validate_trigger(const Trigger& trigger);

/// FNV-1a over the pattern bytes and parameters, as 16 hex digits.
std::string trigger_checksum(const Trigger& trigger);

void save_trigger(const Trigger& trigger, const std::filesystem::path& path);
Trigger load_trigger(const std::filesystem::path& path);

}  // namespace mbafl
