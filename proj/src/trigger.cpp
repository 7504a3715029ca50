#include "mbafl/trigger.hpp"

#include <json.hpp>

#include "binary_io.hpp"
#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace mbafl {

namespace {

constexpr char kTriggerMagic[8] = {'M', 'B', 'T', 'R', 'I', 'G', '0', '1'};

void check_shape(const torch::Tensor& images, const Trigger& trigger) {
  const auto shape = trigger.shape();
  const auto dims = images.dim();
  if (dims != 3 && dims != 4) throw ShapeError("apply_trigger expects [C,H,W] or [B,C,H,W] images");
  const auto off = dims - 3;
  for (int i = 0; i < 3; ++i) {
    if (images.size(off + i) != shape[static_cast<std::size_t>(i)]) {
      throw ShapeError("image shape does not match trigger shape");
    }
  }
}

}  // namespace

TriggerKind parse_trigger_kind(std::string_view name) {
  if (name == "blend") return TriggerKind::blend;
  if (name == "patch") return TriggerKind::patch;
  throw ConfigError("unknown trigger kind '" + std::string(name) + "'");
}

std::string to_string(TriggerKind kind) {
  return kind == TriggerKind::blend ? "blend" : "patch";
}

ImageShape Trigger::shape() const {
  if (!pattern.defined() || pattern.dim() != 3) return {0, 0, 0};
  return {pattern.size(0), pattern.size(1), pattern.size(2)};
}

torch::Tensor Trigger::mask() const {
  const auto s = shape();
  if (kind == TriggerKind::blend) return torch::ones({1, s[1], s[2]});
  auto m = torch::zeros({1, s[1], s[2]});
  m.index_put_({torch::indexing::Slice(),
                torch::indexing::Slice(region.row, region.row + region.height),
                torch::indexing::Slice(region.col, region.col + region.width)},
               1.0);
  return m;
}

void validate_trigger(const Trigger& trigger) {
  const auto s = trigger.shape();
  if (s[0] <= 0 || s[1] <= 0 || s[2] <= 0) throw ConfigError("trigger pattern must be [C,H,W]");
  if (trigger.kind == TriggerKind::blend) {
    if (!(trigger.blend_coefficient >= 0.0 && trigger.blend_coefficient <= 1.0)) {
      throw ConfigError("blend coefficient must lie in [0,1]");
    }
  } else {
    const auto& r = trigger.region;
    if (r.row < 0 || r.col < 0 || r.height <= 0 || r.width <= 0 || r.row + r.height > s[1] ||
        r.col + r.width > s[2]) {
      throw ConfigError("patch region exceeds image bounds");
    }
  }
}

Trigger init_trigger(TriggerKind kind, ImageShape shape, std::uint64_t seed,
                     double blend_coefficient, PatchRegion region) {
  Trigger t;
  t.kind = kind;
  t.blend_coefficient = blend_coefficient;
  t.region = region;
  // std::uniform_real_distribution keeps the pattern independent of torch's
  // global generator.
  auto rng = make_rng(seed, Stream::trigger);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  t.pattern = torch::empty({shape[0], shape[1], shape[2]});
  auto* p = t.pattern.data_ptr<float>();
  for (std::int64_t i = 0; i < t.pattern.numel(); ++i) p[i] = unit(rng);
  validate_trigger(t);
  if (kind == TriggerKind::patch) t.pattern = t.pattern * t.mask();
  return t;
}

torch::Tensor apply_trigger(const torch::Tensor& images, const Trigger& trigger) {
  return apply_trigger(images, trigger, trigger.pattern);
}

torch::Tensor apply_trigger(const torch::Tensor& images, const Trigger& trigger,
                            const torch::Tensor& pattern) {
  check_shape(images, trigger);
  if (trigger.kind == TriggerKind::blend) {
    const double beta = trigger.blend_coefficient;
    return torch::clamp(images * (1.0 - beta) + pattern * beta, 0.0, 1.0);
  }
  const auto m = trigger.mask();
  return images * (1.0 - m) + pattern * m;
}

Trigger clamp_trigger(Trigger trigger) {
  trigger.pattern = torch::clamp(trigger.pattern, 0.0, 1.0);
  return trigger;
}

std::string trigger_checksum(const Trigger& trigger) {
  const auto p = trigger.pattern.contiguous();
  auto h = detail::fnv1a(p.data_ptr<float>(), static_cast<std::size_t>(p.numel()) * sizeof(float));
  const int kind = trigger.kind == TriggerKind::blend ? 0 : 1;
  h = detail::fnv1a(&kind, sizeof kind, h);
  h = detail::fnv1a(&trigger.blend_coefficient, sizeof(double), h);
  h = detail::fnv1a(&trigger.region, sizeof(PatchRegion), h);
  return detail::hex64(h);
}

void save_trigger(const Trigger& trigger, const std::filesystem::path& path) {
  const auto s = trigger.shape();
  nlohmann::json header = {
      {"kind", to_string(trigger.kind)},
      {"shape", {s[0], s[1], s[2]}},
      {"blend_coefficient", trigger.blend_coefficient},
      {"region", {trigger.region.row, trigger.region.col, trigger.region.height, trigger.region.width}},
  };
  detail::Writer w(path);
  w.bytes(kTriggerMagic, sizeof kTriggerMagic);
  w.pod<std::uint32_t>(1);
  w.string(header.dump());
  const auto p = trigger.pattern.contiguous();
  w.bytes(p.data_ptr<float>(), static_cast<std::size_t>(p.numel()) * sizeof(float));
}

Trigger load_trigger(const std::filesystem::path& path) {
  detail::Reader r(detail::read_file(path), path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kTriggerMagic, sizeof magic) != 0) {
    throw IoError(path.string() + " is not a trigger file");
  }
  if (const auto version = r.pod<std::uint32_t>(); version != 1) {
    throw IoError(path.string() + ": unsupported trigger version " + std::to_string(version));
  }
  const auto header = nlohmann::json::parse(r.string());
  Trigger t;
  t.kind = parse_trigger_kind(header.at("kind").get<std::string>());
  t.blend_coefficient = header.at("blend_coefficient").get<double>();
  const auto region = header.at("region").get<std::vector<std::int64_t>>();
  t.region = {region.at(0), region.at(1), region.at(2), region.at(3)};
  const auto shape = header.at("shape").get<std::vector<std::int64_t>>();
  t.pattern = torch::empty({shape.at(0), shape.at(1), shape.at(2)});
  r.bytes(t.pattern.data_ptr<float>(), static_cast<std::size_t>(t.pattern.numel()) * sizeof(float));
  validate_trigger(t);
  return t;
}

}  // namespace mbafl
