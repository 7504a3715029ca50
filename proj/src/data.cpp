#include "mbafl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "mbafl/errors.hpp"
#include "mbafl/rng.hpp"

namespace fs = std::filesystem;

namespace mbafl {

namespace {

// Raw uint8 images [N,C,H,W] plus labels; converted to float only after the
// subset is chosen so a full CIFAR train split never sits in memory as floats.
struct RawSplit {
  torch::Tensor images;
  std::vector<std::int64_t> labels;
};

Dataset finish(std::string name, std::int64_t num_classes, const RawSplit& raw,
               std::int64_t subset) {
  Dataset all;
  all.name = name;
  all.num_classes = num_classes;
  all.labels = torch::tensor(raw.labels, torch::kInt64);
  all.images = raw.images;  // still uint8 here
  std::vector<std::int64_t> keep;
  if (subset > 0 && subset < all.size()) {
    keep = balanced_prefix(all, subset);
  } else {
    keep.resize(static_cast<std::size_t>(all.size()));
    std::iota(keep.begin(), keep.end(), 0);
  }
  const auto idx = torch::tensor(keep, torch::kInt64);
  Dataset out;
  out.name = std::move(name);
  out.num_classes = num_classes;
  out.images = raw.images.index_select(0, idx).to(torch::kFloat32).div_(255.0);
  out.labels = all.labels.index_select(0, idx);
  out.validate();
  return out;
}

RawSplit read_cifar_records(const std::vector<fs::path>& files, std::size_t label_bytes,
                            std::size_t label_offset) {
  const std::size_t record = label_bytes + 3072;
  std::vector<std::vector<char>> buffers;
  std::size_t total = 0;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw IngestionError("missing dataset file " + f.string());
    buffers.push_back(detail::read_file(f));
    if (buffers.back().size() % record != 0) {
      throw IngestionError("corrupt record stream in " + f.string());
    }
    total += buffers.back().size() / record;
  }
  RawSplit raw;
  raw.images = torch::empty({static_cast<std::int64_t>(total), 3, 32, 32}, torch::kUInt8);
  raw.labels.reserve(total);
  auto* dst = raw.images.data_ptr<std::uint8_t>();
  for (const auto& buf : buffers) {
    for (std::size_t off = 0; off < buf.size(); off += record) {
      raw.labels.push_back(static_cast<unsigned char>(buf[off + label_offset]));
      std::memcpy(dst, buf.data() + off + label_bytes, 3072);
      dst += 3072;
    }
  }
  return raw;
}

std::uint32_t read_be32(const std::vector<char>& buf, std::size_t at) {
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + at);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

RawSplit read_idx_pair(const fs::path& images_path, const fs::path& labels_path) {
  for (const auto& p : {images_path, labels_path}) {
    if (!fs::exists(p)) throw IngestionError("missing dataset file " + p.string());
  }
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);
  if (images.size() < 16 || read_be32(images, 0) != 0x803) {
    throw IngestionError("bad idx image header in " + images_path.string());
  }
  if (labels.size() < 8 || read_be32(labels, 0) != 0x801) {
    throw IngestionError("bad idx label header in " + labels_path.string());
  }
  const std::int64_t n = read_be32(images, 4);
  const std::int64_t rows = read_be32(images, 8);
  const std::int64_t cols = read_be32(images, 12);
  if (read_be32(labels, 4) != n ||
      images.size() != 16 + static_cast<std::size_t>(n * rows * cols) ||
      labels.size() != 8 + static_cast<std::size_t>(n)) {
    throw IngestionError("idx size mismatch between " + images_path.string() + " and " +
                         labels_path.string());
  }
  RawSplit raw;
  raw.images = torch::empty({n, 1, rows, cols}, torch::kUInt8);
  std::memcpy(raw.images.data_ptr<std::uint8_t>(), images.data() + 16,
              static_cast<std::size_t>(n * rows * cols));
  raw.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    raw.labels[static_cast<std::size_t>(i)] = static_cast<unsigned char>(labels[8 + static_cast<std::size_t>(i)]);
  }
  return raw;
}

// Binary PPM (P6) reader, enough for the GTSRB archive.
torch::Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("missing image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IngestionError(path.string() + " is not a binary ppm");
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    in >> v;
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  in.get();
  if (w <= 0 || h <= 0 || maxval != 255) throw IngestionError("unsupported ppm " + path.string());
  std::vector<unsigned char> px(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!in) throw IngestionError("truncated ppm " + path.string());
  return torch::from_blob(px.data(), {h, w, 3}, torch::kUInt8).permute({2, 0, 1}).clone();
}

std::vector<std::vector<std::string>> read_gtsrb_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("missing dataset file " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ';')) fields.push_back(f);
    if (fields.size() < 8) throw IngestionError("malformed row in " + path.string());
    rows.push_back(std::move(fields));
  }
  return rows;
}

void append_gtsrb(RawSplit& raw, std::vector<torch::Tensor>& images, const fs::path& dir,
                  const std::vector<std::vector<std::string>>& rows) {
  for (const auto& r : rows) {
    auto img = read_ppm(dir / r[0]);
    const auto x1 = std::stoll(r[3]), y1 = std::stoll(r[4]), x2 = std::stoll(r[5]), y2 = std::stoll(r[6]);
    img = img.index({torch::indexing::Slice(), torch::indexing::Slice(y1, y2 + 1),
                     torch::indexing::Slice(x1, x2 + 1)});
    auto f = img.to(torch::kFloat32).unsqueeze(0);
    f = torch::nn::functional::interpolate(
        f, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<std::int64_t>{32, 32})
               .mode(torch::kBilinear)
               .align_corners(false));
    images.push_back(f.squeeze(0).round().clamp(0, 255).to(torch::kUInt8));
    raw.labels.push_back(std::stoll(r[7]));
  }
}

DatasetSplit load_gtsrb(const fs::path& root, const LoadOptions& options) {
  const auto base = root / "GTSRB";
  RawSplit train, test;
  std::vector<torch::Tensor> train_images, test_images;
  for (int c = 0; c < 43; ++c) {
    char name[8];
    std::snprintf(name, sizeof name, "%05d", c);
    const auto dir = base / "Final_Training" / "Images" / name;
    append_gtsrb(train, train_images, dir, read_gtsrb_csv(dir / ("GT-" + std::string(name) + ".csv")));
  }
  const auto test_dir = base / "Final_Test" / "Images";
  append_gtsrb(test, test_images, test_dir, read_gtsrb_csv(test_dir / "GT-final_test.csv"));
  train.images = torch::stack(train_images);
  test.images = torch::stack(test_images);
  return {finish("gtsrb", 43, train, options.train_subset),
          finish("gtsrb", 43, test, options.test_subset)};
}

RawSplit synthetic_raw(std::int64_t samples, std::int64_t num_classes, ImageShape shape,
                       std::uint64_t seed, double noise, std::uint64_t sample_seed) {
  // templates depend on seed only, so train and test splits share classes
  auto template_rng = make_rng(seed, Stream::subset, {0x5e7});
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::normal_distribution<float> gauss(0.0f, static_cast<float>(noise));
  const auto pixels = shape[0] * shape[1] * shape[2];
  std::vector<float> templates(static_cast<std::size_t>(num_classes * pixels));
  for (auto& v : templates) v = unit(template_rng);
  auto rng = make_rng(sample_seed, Stream::subset, {0x5e8});
  RawSplit raw;
  raw.images = torch::empty({samples, shape[0], shape[1], shape[2]}, torch::kUInt8);
  auto* dst = raw.images.data_ptr<std::uint8_t>();
  for (std::int64_t i = 0; i < samples; ++i) {
    const auto label = i % num_classes;
    raw.labels.push_back(label);
    for (std::int64_t p = 0; p < pixels; ++p) {
      const float v = templates[static_cast<std::size_t>(label * pixels + p)] + gauss(rng);
      dst[i * pixels + p] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  }
  return raw;
}

}  // namespace

ImageShape Dataset::image_shape() const {
  if (!images.defined() || images.dim() != 4) return {0, 0, 0};
  return {images.size(1), images.size(2), images.size(3)};
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset out;
  out.name = name;
  out.num_classes = num_classes;
  const auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
  out.images = images.index_select(0, idx);
  out.labels = labels.index_select(0, idx);
  return out;
}

std::vector<std::int64_t> Dataset::label_vector() const {
  const auto l = labels.contiguous();
  return {l.data_ptr<std::int64_t>(), l.data_ptr<std::int64_t>() + l.numel()};
}

std::vector<std::int64_t> Dataset::class_histogram() const {
  std::vector<std::int64_t> h(static_cast<std::size_t>(num_classes), 0);
  for (auto l : label_vector()) ++h[static_cast<std::size_t>(l)];
  return h;
}

void Dataset::validate() const {
  if (!images.defined() || images.dim() != 4 || images.size(0) != size()) {
    throw IngestionError("dataset '" + name + "' has malformed image tensor");
  }
  for (auto l : label_vector()) {
    if (l < 0 || l >= num_classes) {
      throw IngestionError("dataset '" + name + "' has label " + std::to_string(l) +
                           " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  if (size() > 0 && (images.min().item<float>() < 0.0f || images.max().item<float>() > 1.0f)) {
    throw IngestionError("dataset '" + name + "' has pixels outside [0,1]");
  }
}

bool is_known_dataset(std::string_view name) {
  return name == "cifar10" || name == "cifar100" || name == "gtsrb" || name == "fashion-mnist" ||
         name == "synthetic";
}

DatasetSplit load_dataset(std::string_view name, const fs::path& root, const LoadOptions& options) {
  if (name == "cifar10") {
    const auto dir = root / "cifar-10-batches-bin";
    std::vector<fs::path> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    return {finish("cifar10", 10, read_cifar_records(train_files, 1, 0), options.train_subset),
            finish("cifar10", 10, read_cifar_records({dir / "test_batch.bin"}, 1, 0), options.test_subset)};
  }
  if (name == "cifar100") {
    const auto dir = root / "cifar-100-binary";
    // records carry (coarse, fine) label bytes; the fine label is used
    return {finish("cifar100", 100, read_cifar_records({dir / "train.bin"}, 2, 1), options.train_subset),
            finish("cifar100", 100, read_cifar_records({dir / "test.bin"}, 2, 1), options.test_subset)};
  }
  if (name == "fashion-mnist") {
    const auto dir = root / "fashion-mnist";
    return {finish("fashion-mnist", 10,
                   read_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
                   options.train_subset),
            finish("fashion-mnist", 10,
                   read_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"),
                   options.test_subset)};
  }
  if (name == "gtsrb") return load_gtsrb(root, options);
  if (name == "synthetic") {
    const ImageShape shape{3, 16, 16};
    return {finish("synthetic", 10, synthetic_raw(2000, 10, shape, 11, 0.15, 1), options.train_subset),
            finish("synthetic", 10, synthetic_raw(500, 10, shape, 11, 0.15, 2), options.test_subset)};
  }
  throw ConfigError("unknown dataset id '" + std::string(name) + "'");
}

Normalization dataset_normalization(std::string_view name, std::int64_t channels) {
  if (name == "cifar10") return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
  if (name == "cifar100") return {{0.5071, 0.4865, 0.4409}, {0.2673, 0.2564, 0.2762}};
  if (name == "gtsrb") return {{0.3403, 0.3121, 0.3214}, {0.2724, 0.2608, 0.2669}};
  if (name == "fashion-mnist") return {{0.2860}, {0.3530}};
  return {std::vector<double>(static_cast<std::size_t>(channels), 0.5),
          std::vector<double>(static_cast<std::size_t>(channels), 0.25)};
}

Dataset make_synthetic_dataset(std::int64_t samples, std::int64_t num_classes, ImageShape shape,
                               std::uint64_t seed, double noise) {
  return finish("synthetic", num_classes, synthetic_raw(samples, num_classes, shape, seed, noise, seed), 0);
}

std::vector<std::int64_t> balanced_prefix(const Dataset& dataset, std::int64_t count) {
  const auto labels = dataset.label_vector();
  const auto k = dataset.num_classes;
  std::vector<std::int64_t> quota(static_cast<std::size_t>(k), count / k);
  for (std::int64_t c = 0; c < count % k; ++c) ++quota[static_cast<std::size_t>(c)];
  std::vector<std::int64_t> keep;
  keep.reserve(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& q = quota[static_cast<std::size_t>(labels[i])];
    if (q > 0) {
      --q;
      keep.push_back(static_cast<std::int64_t>(i));
    }
  }
  return keep;
}

Partition dirichlet_partition(const Dataset& dataset, std::int64_t n_clients, double alpha,
                              std::uint64_t seed) {
  if (n_clients < 1) throw ConfigError("dirichlet_partition: n_clients must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be positive");
  if (n_clients > dataset.size()) {
    throw ConfigError("dirichlet_partition: " + std::to_string(n_clients) + " clients for " +
                      std::to_string(dataset.size()) + " samples");
  }
  Partition part;
  part.alpha = alpha;
  part.seed = seed;
  part.client_indices.assign(static_cast<std::size_t>(n_clients), {});

  const auto labels = dataset.label_vector();
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(dataset.num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
  }

  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    auto rng = make_rng(seed, Stream::partition, {c});
    std::shuffle(members.begin(), members.end(), rng);
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(static_cast<std::size_t>(n_clients));
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    if (!(sum > 0.0)) {
      // every draw underflowed (tiny alpha); put the class on one client
      std::fill(p.begin(), p.end(), 0.0);
      p[std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng)] = 1.0;
      sum = 1.0;
    }
    const auto n = static_cast<double>(members.size());
    double cum = 0.0;
    std::size_t begin = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      cum += p[j] / sum;
      const auto end = j + 1 == p.size()
                           ? members.size()
                           : std::min(members.size(), static_cast<std::size_t>(std::floor(cum * n)));
      for (std::size_t i = begin; i < std::max(begin, end); ++i) part.client_indices[j].push_back(members[i]);
      begin = std::max(begin, end);
    }
  }

  // repair: move one sample from the largest client into each empty one
  for (auto& target : part.client_indices) {
    if (!target.empty()) continue;
    auto largest = std::max_element(part.client_indices.begin(), part.client_indices.end(),
                                     [](const auto& a, const auto& b) { return a.size() < b.size(); });
    std::sort(largest->begin(), largest->end());
    target.push_back(largest->back());
    largest->pop_back();
  }
  for (auto& s : part.client_indices) std::sort(s.begin(), s.end());
  return part;
}

void validate_partition(const Partition& partition, std::int64_t dataset_size) {
  std::vector<char> seen(static_cast<std::size_t>(dataset_size), 0);
  std::int64_t covered = 0;
  for (std::size_t j = 0; j < partition.client_indices.size(); ++j) {
    const auto& s = partition.client_indices[j];
    if (s.empty()) throw ConfigError("partition: client " + std::to_string(j) + " is empty");
    for (auto i : s) {
      if (i < 0 || i >= dataset_size) throw ConfigError("partition: index out of range");
      if (seen[static_cast<std::size_t>(i)]++) {
        throw ConfigError("partition: index " + std::to_string(i) + " assigned twice");
      }
      ++covered;
    }
  }
  if (covered != dataset_size) throw ConfigError("partition does not cover the dataset");
}

PoisonedDataset poison_dataset(const Dataset& client_data, const Trigger& trigger,
                               std::int64_t target_class, double poison_fraction,
                               std::uint64_t seed) {
  if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) {
    throw ConfigError("poison fraction must lie in [0,1]");
  }
  PoisonedDataset out;
  out.data = client_data;
  const auto count = static_cast<std::int64_t>(std::floor(poison_fraction * static_cast<double>(client_data.size())));
  if (poison_fraction > 0.0 && count < 1) {
    throw AttackerSetupError("poison fraction selects no sample from " +
                             std::to_string(client_data.size()) + " local samples");
  }
  if (count == 0) return out;

  const auto labels = client_data.label_vector();
  std::vector<std::int64_t> candidates;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != target_class) candidates.push_back(static_cast<std::int64_t>(i));
  }
  auto rng = make_rng(seed, Stream::poison);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(count)));
  std::sort(candidates.begin(), candidates.end());
  out.poisoned_positions = candidates;
  if (candidates.empty()) return out;

  out.data.images = client_data.images.clone();
  out.data.labels = client_data.labels.clone();
  const auto idx = torch::tensor(candidates, torch::kInt64);
  out.data.images.index_copy_(0, idx, apply_trigger(client_data.images.index_select(0, idx), trigger));
  out.data.labels.index_fill_(0, idx, target_class);
  return out;
}

std::int64_t DetectorDataset::positives() const {
  std::int64_t n = 0;
  for (auto l : source_label) n += (l == target_class);
  return n;
}

DetectorDataset build_detector_dataset(const Dataset& client_data, const Trigger& trigger,
                                       std::int64_t target_class, std::uint64_t seed) {
  const auto labels = client_data.label_vector();
  std::vector<std::int64_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] == target_class ? pos : neg).push_back(static_cast<std::int64_t>(i));
  }
  if (pos.empty()) {
    throw AttackerSetupError("detector dataset: no local sample of target class " +
                             std::to_string(target_class));
  }
  if (neg.empty()) throw AttackerSetupError("detector dataset: no non-target local sample");

  auto rng = make_rng(seed, Stream::detector, {0xd5});
  const auto n = std::min(pos.size(), neg.size());
  if (neg.size() > n) {
    std::shuffle(neg.begin(), neg.end(), rng);
    neg.resize(n);
    std::sort(neg.begin(), neg.end());
  }
  if (pos.size() > n) {
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(n);
    std::sort(pos.begin(), pos.end());
  }

  DetectorDataset d;
  d.target_class = target_class;
  const auto pos_idx = torch::tensor(pos, torch::kInt64);
  const auto neg_idx = torch::tensor(neg, torch::kInt64);
  d.images = torch::cat({client_data.images.index_select(0, pos_idx),
                         apply_trigger(client_data.images.index_select(0, neg_idx), trigger)});
  d.labels = torch::cat({torch::ones({static_cast<std::int64_t>(n)}), torch::zeros({static_cast<std::int64_t>(n)})});
  for (auto i : pos) {
    d.source_position.push_back(i);
    d.source_label.push_back(labels[static_cast<std::size_t>(i)]);
  }
  for (auto i : neg) {
    d.source_position.push_back(i);
    d.source_label.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return d;
}

}  // namespace mbafl
