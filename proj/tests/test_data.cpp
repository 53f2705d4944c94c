#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "testing.hpp"

#include <filesystem>
#include <random>

#include "stainshift/data.hpp"
#include "stainshift/image_io.hpp"
#include "stainshift/phantom.hpp"
#include "stainshift/stain.hpp"

using namespace stainshift;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("stainshift_data_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_patch(const fs::path& p, double value, int size = 8) {
  imageio::write_rgb8(p.string(), torch::full({3, size, size}, value));
}

void write_mask(const fs::path& p, int size = 8) {
  imageio::write_gray8(p.string(), torch::ones({size, size}));
}

fs::path make_corpus(const fs::path& root) {
  phantom::PhantomConfig cfg;
  cfg.patch_size = 64;
  cfg.nuclei_min = 3;
  cfg.nuclei_max = 6;
  cfg.labeled_patches = 4;
  phantom::CorpusCounts counts;
  counts.train_a = 12;
  counts.train_b = 9;
  counts.train_c = 7;
  phantom::export_corpus(cfg, root.string(), counts,
                         stain::StainMatrix::default_hed());
  return root;
}

}  // namespace

TEST_CASE("directory loading enumerates patches with sidecar masks") {
  TempDir tmp("dir");
  write_patch(tmp.path / "p0.png", 0.2);
  write_patch(tmp.path / "p1.png", 0.4);
  write_patch(tmp.path / "p2.png", 0.6);
  write_mask(tmp.path / "p1_me.png");
  write_mask(tmp.path / "p1_md.png");

  auto ds = data::load_dataset(tmp.path.string(), "A");
  REQUIRE(ds.size() == 3);
  CHECK(ds.record(0).image_path == (tmp.path / "p0.png").string());
  CHECK(ds.record(1).mask_e_path.has_value());
  CHECK(*ds.record(1).mask_e_path == (tmp.path / "p1_me.png").string());
  CHECK(ds.has_labels(1));
  CHECK(!ds.has_labels(0));
  CHECK(ds.labeled_indices() == std::vector<std::int64_t>{1});
  CHECK(ds.mask_e(1).sizes() == torch::IntArrayRef({1, 8, 8}));
  CHECK(ds.mask_e(1).min().item<float>() == 1.0f);
}

TEST_CASE("a lone eosin sidecar is carried but does not mark the record labeled") {
  TempDir tmp("lone_mask");
  write_patch(tmp.path / "p0.png", 0.2);
  write_mask(tmp.path / "p0_me.png");
  auto ds = data::load_dataset(tmp.path.string(), "A");
  CHECK(ds.record(0).mask_e_path.has_value());
  CHECK(!ds.record(0).mask_d_path.has_value());
  CHECK(!ds.has_labels(0));
}

TEST_CASE("loaded pixels are exactly file value over 255") {
  TempDir tmp("exact");
  write_patch(tmp.path / "p0.png", 0.5);
  auto ds = data::load_dataset(tmp.path.string(), "A");
  auto img = ds.image(0);
  CHECK(img.dtype() == torch::kFloat32);
  // 0.5 quantizes to byte 128.
  CHECK(img[0][0][0].item<float>() == 128.0f / 255.0f);
  auto bytes = imageio::read_rgb8_bytes((tmp.path / "p0.png").string());
  CHECK(torch::equal(img, bytes.to(torch::kFloat32) / 255.0f));
}

TEST_CASE("empty directories and mismatched sizes are rejected") {
  TempDir tmp("bad");
  CHECK_THROWS(data::load_dataset(tmp.path.string(), "A"));
  write_patch(tmp.path / "p0.png", 0.5, 8);
  write_patch(tmp.path / "p1.png", 0.5, 16);
  CHECK_THROWS_AS(data::load_dataset(tmp.path.string(), "A"), std::runtime_error);
  CHECK_THROWS(data::load_dataset((tmp.path / "nope").string(), "A"));
}

TEST_CASE("manifest loading splits the corpus by domain") {
  TempDir tmp("corpus");
  make_corpus(tmp.path);
  auto a = data::load_dataset(tmp.path.string(), "A");
  auto b = data::load_dataset((tmp.path / "manifest.jsonl").string(), "B");
  auto c = data::load_dataset(tmp.path.string(), "C");
  CHECK(a.size() == 12);
  CHECK(b.size() == 9);
  CHECK(c.size() == 7);
  CHECK(a.labeled_indices().size() == 4);
  CHECK(b.labeled_indices().empty());
  CHECK(a.height() == 64);
  for (std::int64_t i = 1; i < a.size(); ++i) {
    CHECK(a.record(i - 1).image_path < a.record(i).image_path);
  }
}

TEST_CASE("single-item datasets round-trip through sample_batch") {
  TempDir tmp("single");
  for (const char* d : {"a", "b", "c"}) fs::create_directories(tmp.path / d);
  write_patch(tmp.path / "a" / "p.png", 0.25);
  write_patch(tmp.path / "b" / "p.png", 0.5);
  write_patch(tmp.path / "c" / "p.png", 0.75);
  auto a = data::load_dataset((tmp.path / "a").string(), "A");
  auto b = data::load_dataset((tmp.path / "b").string(), "B");
  auto c = data::load_dataset((tmp.path / "c").string(), "C");

  std::mt19937_64 rng(1);
  auto batch = data::sample_batch(a, b, c, 1, rng);
  CHECK(batch.x_a.sizes() == torch::IntArrayRef({1, 3, 8, 8}));
  CHECK(torch::equal(batch.x_a[0], a.image(0)));
  CHECK(torch::equal(batch.x_b[0], b.image(0)));
  CHECK(torch::equal(batch.x_c[0], c.image(0)));
  CHECK(!batch.labels_present.any().item<bool>());
  CHECK(batch.mask_e.abs().max().item<float>() == 0.0f);

  CHECK_THROWS_AS(data::sample_batch(a, b, c, 0, rng), std::invalid_argument);
}

TEST_CASE("batch sampling is deterministic in the rng state") {
  TempDir tmp("det");
  make_corpus(tmp.path);
  auto a = data::load_dataset(tmp.path.string(), "A");
  auto b = data::load_dataset(tmp.path.string(), "B");
  auto c = data::load_dataset(tmp.path.string(), "C");

  data::SampleOptions opt;
  opt.labeled_fraction = 0.25;
  auto run = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<data::UnpairedBatch> batches;
    for (int i = 0; i < 5; ++i) batches.push_back(data::sample_batch(a, b, c, 3, rng, opt));
    return batches;
  };
  auto r1 = run(7);
  auto r2 = run(7);
  for (int i = 0; i < 5; ++i) {
    CHECK(torch::equal(r1[i].x_a, r2[i].x_a));
    CHECK(torch::equal(r1[i].x_b, r2[i].x_b));
    CHECK(torch::equal(r1[i].x_c, r2[i].x_c));
    CHECK(torch::equal(r1[i].mask_e, r2[i].mask_e));
    CHECK(torch::equal(r1[i].labels_present, r2[i].labels_present));
  }
  auto r3 = run(8);
  bool all_equal = true;
  for (int i = 0; i < 5; ++i) all_equal &= torch::equal(r1[i].x_a, r3[i].x_a);
  CHECK(!all_equal);
}

TEST_CASE("labeled records hit the configured oversampling frequency") {
  TempDir tmp("freq");
  make_corpus(tmp.path);
  auto a = data::load_dataset(tmp.path.string(), "A");
  REQUIRE(a.labeled_indices().size() == 4);
  std::mt19937_64 rng(123);
  int labeled = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    if (a.has_labels(data::draw_index_a(a, rng, 0.25))) ++labeled;
  }
  const double frequency = static_cast<double>(labeled) / draws;
  CHECK(frequency >= 0.23);
  CHECK(frequency <= 0.27);
}

TEST_CASE("masks ride along with their labeled items") {
  TempDir tmp("masks");
  make_corpus(tmp.path);
  auto a = data::load_dataset(tmp.path.string(), "A");
  auto b = data::load_dataset(tmp.path.string(), "B");
  auto c = data::load_dataset(tmp.path.string(), "C");
  data::SampleOptions opt;
  opt.labeled_fraction = 1.0;  // force labeled draws
  std::mt19937_64 rng(3);
  auto batch = data::sample_batch(a, b, c, 4, rng, opt);
  CHECK(batch.labels_present.all().item<bool>());
  CHECK(batch.mask_e.sizes() == torch::IntArrayRef({4, 1, 64, 64}));
  CHECK(batch.mask_e.max().item<float>() == 1.0f);
}
