#include <doctest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "helpers.hpp"
#include "mbafl/data.hpp"
#include "mbafl/errors.hpp"

using namespace mbafl;

namespace {

std::vector<std::int64_t> cyclic_labels(std::int64_t n, std::int64_t k) {
  std::vector<std::int64_t> l(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) l[static_cast<std::size_t>(i)] = i % k;
  return l;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

}  // namespace

TEST_CASE("Dirichlet partition is a disjoint cover with no empty client (200 random configs)") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = std::uniform_int_distribution<std::int64_t>(2, 12)(rng);
    const auto n = std::uniform_int_distribution<std::int64_t>(40, 400)(rng);
    const auto clients = std::uniform_int_distribution<std::int64_t>(1, 30)(rng);
    const double alpha = std::pow(10.0, std::uniform_real_distribution<double>(-2.0, 2.0)(rng));
    std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = std::uniform_int_distribution<std::int64_t>(0, k - 1)(rng);
    const auto data = testing::make_dataset(labels, {1, 2, 2}, k);
    const auto part = dirichlet_partition(data, clients, alpha, rng());

    REQUIRE(part.num_clients() == clients);
    std::vector<int> count(static_cast<std::size_t>(n), 0);
    for (const auto& s : part.client_indices) {
      CHECK_FALSE(s.empty());
      for (auto i : s) {
        REQUIRE(i >= 0);
        REQUIRE(i < n);
        ++count[static_cast<std::size_t>(i)];
      }
    }
    CHECK(std::all_of(count.begin(), count.end(), [](int c) { return c == 1; }));
    CHECK_NOTHROW(validate_partition(part, n));
  }
}

TEST_CASE("Dirichlet partition is deterministic and alpha controls skew") {
  const auto data = testing::make_dataset(cyclic_labels(2000, 10), {1, 2, 2}, 10);
  const auto a = dirichlet_partition(data, 10, 1.0, 99);
  const auto b = dirichlet_partition(data, 10, 1.0, 99);
  CHECK(a.client_indices == b.client_indices);

  // Each class is split over clients by its own Dirichlet draw: for huge
  // alpha no client holds much more than 1/n of a class, for tiny alpha one
  // client holds nearly all of it.
  auto concentration = [&](double alpha) {
    const auto p = dirichlet_partition(data, 10, alpha, 5);
    const auto labels = data.label_vector();
    std::vector<std::vector<int>> per_class(10, std::vector<int>(10, 0));
    for (std::size_t c = 0; c < p.client_indices.size(); ++c) {
      for (auto i : p.client_indices[c]) ++per_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])][c];
    }
    double total = 0.0;
    for (const auto& counts : per_class) total += *std::max_element(counts.begin(), counts.end()) / 200.0;
    return total / 10.0;
  };
  CHECK(concentration(1000.0) < 0.2);
  CHECK(concentration(0.001) > 0.9);
}

TEST_CASE("partition preconditions") {
  const auto data = testing::make_dataset(cyclic_labels(10, 2), {1, 2, 2}, 2);
  CHECK_THROWS_AS(dirichlet_partition(data, 11, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(dirichlet_partition(data, 2, 0.0, 1), ConfigError);
  Partition bad;
  bad.client_indices = {{0, 1}, {1, 2}};
  CHECK_THROWS_AS(validate_partition(bad, 3), ConfigError);
  bad.client_indices = {{0, 1}, {}};
  CHECK_THROWS_AS(validate_partition(bad, 2), ConfigError);
}

TEST_CASE("poisoning relabels floor(p n) non-target samples") {
  const auto data = testing::make_dataset(cyclic_labels(100, 5), {3, 4, 4}, 5);
  const auto trig = init_trigger(TriggerKind::blend, {3, 4, 4}, 3, 0.2);
  const auto p = poison_dataset(data, trig, 2, 0.125, 17);
  CHECK(p.poisoned_positions.size() == 12);
  const auto orig = data.label_vector();
  const auto now = p.data.label_vector();
  std::set<std::int64_t> poisoned(p.poisoned_positions.begin(), p.poisoned_positions.end());
  for (std::int64_t i = 0; i < 100; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (poisoned.count(i)) {
      CHECK(orig[u] != 2);
      CHECK(now[u] == 2);
      CHECK(torch::allclose(p.data.images[i], apply_trigger(data.images[i], trig)));
    } else {
      CHECK(now[u] == orig[u]);
      CHECK(torch::equal(p.data.images[i], data.images[i]));
    }
  }
  // the input is left alone
  CHECK(data.label_vector() == orig);

  CHECK(poison_dataset(data, trig, 2, 0.0, 17).poisoned_positions.empty());
  const auto tiny = testing::make_dataset({0, 1, 2}, {3, 4, 4}, 5);
  CHECK_THROWS_AS(poison_dataset(tiny, trig, 2, 0.1, 1), AttackerSetupError);
  CHECK_THROWS_AS(poison_dataset(data, trig, 2, 1.5, 1), ConfigError);
}

TEST_CASE("detector dataset is balanced: clean target vs triggered others") {
  // 6 target samples, 20 others
  std::vector<std::int64_t> labels;
  for (int i = 0; i < 26; ++i) labels.push_back(i < 6 ? 3 : i % 3);
  const auto data = testing::make_dataset(labels, {3, 4, 4}, 4);
  const auto trig = init_trigger(TriggerKind::blend, {3, 4, 4}, 3, 0.2);
  const auto d = build_detector_dataset(data, trig, 3, 5);
  CHECK(d.positives() == 6);
  CHECK(d.negatives() == 6);
  for (std::int64_t r = 0; r < d.size(); ++r) {
    const auto src = d.source_position[static_cast<std::size_t>(r)];
    if (d.labels[r].item<float>() == 1.0f) {
      CHECK(d.source_label[static_cast<std::size_t>(r)] == 3);
      CHECK(torch::equal(d.images[r], data.images[src]));
    } else {
      CHECK(d.source_label[static_cast<std::size_t>(r)] != 3);
      CHECK(torch::allclose(d.images[r], apply_trigger(data.images[src], trig)));
    }
  }
  const auto no_target = testing::make_dataset({0, 1, 2}, {3, 4, 4}, 4);
  CHECK_THROWS_AS(build_detector_dataset(no_target, trig, 3, 5), AttackerSetupError);
  const auto only_target = testing::make_dataset({3, 3}, {3, 4, 4}, 4);
  CHECK_THROWS_AS(build_detector_dataset(only_target, trig, 3, 5), AttackerSetupError);
}

TEST_CASE("balanced prefix keeps file order and per-class quotas") {
  const auto data = testing::make_dataset({0, 0, 0, 1, 0, 1, 1, 2, 2, 2}, {1, 1, 1}, 3);
  CHECK(balanced_prefix(data, 6) == std::vector<std::int64_t>{0, 1, 3, 5, 7, 8});
  CHECK(balanced_prefix(data, 4) == std::vector<std::int64_t>{0, 1, 3, 7});
}

TEST_CASE("CIFAR-10 binary records are decoded") {
  const auto root = testing::temp_dir("cifar");
  const auto dir = root / "cifar-10-batches-bin";
  std::filesystem::create_directories(dir);
  auto batch = [](unsigned char first_label, int records) {
    std::vector<unsigned char> b;
    for (int r = 0; r < records; ++r) {
      b.push_back(static_cast<unsigned char>((first_label + r) % 10));
      for (int i = 0; i < 3072; ++i) b.push_back(static_cast<unsigned char>((i + r) % 256));
    }
    return b;
  };
  for (int i = 1; i <= 5; ++i) write_bytes(dir / ("data_batch_" + std::to_string(i) + ".bin"), batch(static_cast<unsigned char>(i), 4));
  write_bytes(dir / "test_batch.bin", batch(0, 3));
  const auto split = load_dataset("cifar10", root);
  CHECK(split.train.size() == 20);
  CHECK(split.test.size() == 3);
  CHECK(split.train.image_shape() == ImageShape{3, 32, 32});
  CHECK(split.test.label_vector() == std::vector<std::int64_t>{0, 1, 2});
  // record 1 of the test batch: pixel i holds (i + 1) % 256, channel-major
  CHECK(split.test.images[1][0][0][0].item<float>() == doctest::Approx(1.0 / 255.0));
  CHECK(split.test.images[1][1][0][0].item<float>() == doctest::Approx(((1024 + 1) % 256) / 255.0));

  write_bytes(dir / "test_batch.bin", std::vector<unsigned char>(100, 0));
  CHECK_THROWS_AS(load_dataset("cifar10", root), IngestionError);
  std::filesystem::remove(dir / "data_batch_3.bin");
  CHECK_THROWS_AS(load_dataset("cifar10", root), IngestionError);
}

TEST_CASE("IDX files are decoded and labels validated") {
  const auto root = testing::temp_dir("idx");
  const auto dir = root / "fashion-mnist";
  std::filesystem::create_directories(dir);
  auto images = [](std::uint32_t n) {
    std::vector<unsigned char> b;
    put_be32(b, 0x803);
    put_be32(b, n);
    put_be32(b, 2);
    put_be32(b, 3);
    for (std::uint32_t i = 0; i < n * 6; ++i) b.push_back(static_cast<unsigned char>(i * 10));
    return b;
  };
  auto labels = [](std::vector<unsigned char> l) {
    std::vector<unsigned char> b;
    put_be32(b, 0x801);
    put_be32(b, static_cast<std::uint32_t>(l.size()));
    b.insert(b.end(), l.begin(), l.end());
    return b;
  };
  write_bytes(dir / "train-images-idx3-ubyte", images(2));
  write_bytes(dir / "train-labels-idx1-ubyte", labels({4, 9}));
  write_bytes(dir / "t10k-images-idx3-ubyte", images(1));
  write_bytes(dir / "t10k-labels-idx1-ubyte", labels({7}));
  const auto split = load_dataset("fashion-mnist", root);
  CHECK(split.train.image_shape() == ImageShape{1, 2, 3});
  CHECK(split.train.label_vector() == std::vector<std::int64_t>{4, 9});
  CHECK(split.train.images[1][0][1][2].item<float>() == doctest::Approx(110.0 / 255.0));

  write_bytes(dir / "t10k-labels-idx1-ubyte", labels({12}));
  CHECK_THROWS_AS(load_dataset("fashion-mnist", root), IngestionError);
  write_bytes(dir / "t10k-labels-idx1-ubyte", labels({1, 2}));
  CHECK_THROWS_AS(load_dataset("fashion-mnist", root), IngestionError);
}

TEST_CASE("synthetic data is deterministic and shares class templates across splits") {
  const auto a = load_dataset("synthetic", ".");
  const auto b = load_dataset("synthetic", ".");
  CHECK(torch::equal(a.train.images, b.train.images));
  CHECK(a.train.size() == 2000);
  CHECK(a.test.size() == 500);
  // class means of the two splits agree far better than means of different classes
  const auto ltr = a.train.labels, lte = a.test.labels;
  const auto m0 = a.train.images.index({ltr == 0}).mean(0);
  const auto t0 = a.test.images.index({lte == 0}).mean(0);
  const auto t1 = a.test.images.index({lte == 1}).mean(0);
  CHECK((m0 - t0).abs().mean().item<double>() < 0.5 * (m0 - t1).abs().mean().item<double>());
  CHECK_THROWS_AS(load_dataset("imagenet", "."), ConfigError);
}
