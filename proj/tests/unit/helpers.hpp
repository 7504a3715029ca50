#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "mbafl/data.hpp"
#include "mbafl/model.hpp"

namespace testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mbafl-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline mbafl::Dataset make_dataset(const std::vector<std::int64_t>& labels, mbafl::ImageShape shape,
                                   std::int64_t num_classes, std::uint64_t seed = 7) {
  mbafl::Dataset d;
  d.name = "test";
  d.num_classes = num_classes;
  const auto n = static_cast<std::int64_t>(labels.size());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  d.images = torch::empty({n, shape[0], shape[1], shape[2]});
  auto* p = d.images.data_ptr<float>();
  for (std::int64_t i = 0; i < d.images.numel(); ++i) p[i] = unit(rng);
  d.labels = torch::tensor(labels, torch::kInt64);
  return d;
}

inline mbafl::ArchSpec small_spec(std::int64_t classes = 10, mbafl::ImageShape shape = {3, 16, 16}) {
  mbafl::ArchSpec s;
  s.arch = mbafl::Arch::small_cnn;
  s.num_classes = classes;
  s.input_shape = shape;
  s.normalization = mbafl::dataset_normalization("synthetic", shape[0]);
  return s;
}

}  // namespace testing
