#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "testing.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stainshift/image_io.hpp"
#include "stainshift/phantom.hpp"
#include "stainshift/stain.hpp"

using namespace stainshift;
namespace fs = std::filesystem;

namespace {

phantom::PhantomConfig small_config() {
  phantom::PhantomConfig cfg;
  cfg.patch_size = 64;
  cfg.nuclei_min = 4;
  cfg.nuclei_max = 8;
  cfg.seed = 42;
  return cfg;
}

// Test-side ellipse membership with a multiplicative margin on the axes.
bool inside_ellipse(const phantom::Nucleus& n, double px, double py, double grow) {
  const double dx = px - n.cx;
  const double dy = py - n.cy;
  const double c = std::cos(n.rotation);
  const double s = std::sin(n.rotation);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double ax = n.ax * (1.0 + grow / std::min(n.ax, n.ay));
  const double ay = n.ay * (1.0 + grow / std::min(n.ax, n.ay));
  return (u / ax) * (u / ax) + (v / ay) * (v / ay) <= 1.0;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("stainshift_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("scene generation is deterministic and honors the count range") {
  auto cfg = small_config();
  auto a = phantom::generate_scene(cfg, 7);
  auto b = phantom::generate_scene(cfg, 7);
  REQUIRE(a.nuclei.size() == b.nuclei.size());
  for (size_t i = 0; i < a.nuclei.size(); ++i) {
    CHECK(a.nuclei[i].cx == b.nuclei[i].cx);
    CHECK(a.nuclei[i].cy == b.nuclei[i].cy);
    CHECK(a.nuclei[i].rotation == b.nuclei[i].rotation);
    CHECK(a.nuclei[i].marker_positive == b.nuclei[i].marker_positive);
    CHECK(a.nuclei[i].intensity == b.nuclei[i].intensity);
  }
  CHECK(a.background_haze == b.background_haze);

  auto other = phantom::generate_scene(cfg, 8);
  bool differs = other.nuclei.size() != a.nuclei.size() ||
                 other.background_haze != a.background_haze;
  if (!differs && !a.nuclei.empty()) {
    differs = other.nuclei[0].cx != a.nuclei[0].cx;
  }
  CHECK(differs);
}

TEST_CASE("empty nucleus range yields an empty scene") {
  auto cfg = small_config();
  cfg.nuclei_min = 0;
  cfg.nuclei_max = 0;
  auto scene = phantom::generate_scene(cfg, 0);
  CHECK(scene.nuclei.empty());
  CHECK(scene.membranes.empty());
}

TEST_CASE("empirical nucleus count stays within the configured range") {
  auto cfg = small_config();
  cfg.nuclei_min = 8;
  cfg.nuclei_max = 12;
  double total = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto scene = phantom::generate_scene(cfg, i);
    REQUIRE(scene.nuclei.size() >= 8);
    REQUIRE(scene.nuclei.size() <= 12);
    total += static_cast<double>(scene.nuclei.size());
    for (const auto& n : scene.nuclei) {
      CHECK(n.ax >= 2.0);
      CHECK(n.cx - n.ax >= 0.0);
      CHECK(n.cx + n.ax <= cfg.patch_size);
      CHECK(n.cy - n.ay >= 0.0);
      CHECK(n.cy + n.ay <= cfg.patch_size);
    }
  }
  const double mean = total / 1000.0;
  CHECK(mean >= 8.0);
  CHECK(mean <= 12.0);
}

TEST_CASE("overpacked scenes raise an explicit error") {
  auto cfg = small_config();
  cfg.patch_size = 32;
  cfg.nuclei_min = 400;
  cfg.nuclei_max = 400;
  CHECK_THROWS_AS(phantom::generate_scene(cfg, 0), std::runtime_error);
}

TEST_CASE("zero marker fraction makes duplex and monoplex renderings identical") {
  auto cfg = small_config();
  cfg.marker_positive_fraction = 0.0;
  auto scene = phantom::generate_scene(cfg, 3);
  auto duplex = phantom::render_stains(scene, phantom::DomainStyle::kDuplex);
  auto mono = phantom::render_stains(scene, phantom::DomainStyle::kMonoplex);
  CHECK(torch::equal(duplex, mono));
}

TEST_CASE("monoplex renderings carry no eosin component") {
  auto cfg = small_config();
  cfg.marker_positive_fraction = 1.0;
  for (int i = 0; i < 5; ++i) {
    auto scene = phantom::generate_scene(cfg, i);
    auto mono = phantom::render_stains(scene, phantom::DomainStyle::kMonoplex);
    CHECK(mono[stain::kChannelE].abs().max().item<double>() == 0.0);
  }
}

TEST_CASE("duplex eosin support matches the positive nucleus footprint") {
  auto cfg = small_config();
  cfg.nuclei_min = 1;
  cfg.nuclei_max = 1;
  cfg.marker_positive_fraction = 1.0;
  auto scene = phantom::generate_scene(cfg, 11);
  REQUIRE(scene.nuclei.size() == 1);
  REQUIRE(scene.nuclei[0].marker_positive);

  auto duplex = phantom::render_stains(scene, phantom::DomainStyle::kDuplex);
  auto e = duplex[stain::kChannelE];
  const auto& n = scene.nuclei[0];
  int support_pixels = 0;
  for (int y = 0; y < cfg.patch_size; ++y) {
    for (int x = 0; x < cfg.patch_size; ++x) {
      const double value = e[y][x].item<double>();
      const double px = x + 0.5, py = y + 0.5;
      if (inside_ellipse(n, px, py, 0.0)) {
        CHECK(value > 0.0);  // interior pixels must carry marker signal
      }
      if (!inside_ellipse(n, px, py, 0.6)) {
        CHECK(value == 0.0);  // pixels beyond the soft rim must not
      }
      if (value > 0.0) ++support_pixels;
    }
  }
  CHECK(support_pixels > 10);
}

TEST_CASE("brightfield rendering of an empty stain image is white") {
  auto m = stain::StainMatrix::default_hed();
  auto rgb = phantom::render_rgb(torch::zeros({3, 8, 8}, torch::kFloat64), m,
                                 phantom::RenderStyle::kBrightfield, 0.0);
  CHECK((rgb - 1.0).abs().max().item<double>() < 1e-6);
}

TEST_CASE("unit counterstain renders to the expected transmission") {
  auto m = stain::StainMatrix::default_hed();
  auto stains = torch::zeros({3, 4, 4}, torch::kFloat64);
  stains[stain::kChannelH] = 1.0;
  auto rgb = phantom::render_rgb(stains, m, phantom::RenderStyle::kBrightfield, 0.0);
  auto row_h = m.tensor(torch::kFloat64)[0];
  for (int c = 0; c < 3; ++c) {
    const double expected = std::pow(10.0, -row_h[c].item<double>());
    CHECK(rgb[c][2][2].item<double>() == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("noise-free rendering round-trips through deconvolution") {
  auto cfg = small_config();
  auto m = stain::StainMatrix::default_hed();
  auto scene = phantom::generate_scene(cfg, 5);
  auto stains = phantom::render_stains(scene, phantom::DomainStyle::kDuplex);
  auto rgb = phantom::render_rgb(stains, m, phantom::RenderStyle::kBrightfield, 0.0);
  auto recovered = stain::od_to_concentrations(
      stain::rgb_to_od(rgb.to(torch::kFloat64)), m);
  CHECK((recovered - stains).abs().max().item<double>() < 1e-4);
}

TEST_CASE("rendering with noise is deterministic in the noise seed") {
  auto cfg = small_config();
  auto m = stain::StainMatrix::default_hed();
  auto scene = phantom::generate_scene(cfg, 5);
  auto stains = phantom::render_stains(scene, phantom::DomainStyle::kDuplex);
  auto a = phantom::render_rgb(stains, m, phantom::RenderStyle::kBrightfield, 0.02, 9);
  auto b = phantom::render_rgb(stains, m, phantom::RenderStyle::kBrightfield, 0.02, 9);
  auto c = phantom::render_rgb(stains, m, phantom::RenderStyle::kBrightfield, 0.02, 10);
  CHECK(torch::equal(a, b));
  CHECK(!torch::equal(a, c));
}

TEST_CASE("fluorescence rendering keeps a dark background") {
  auto cfg = small_config();
  auto m = stain::StainMatrix::default_hed();
  auto scene = phantom::generate_scene(cfg, 6);
  auto ifs = phantom::render_stains(scene, phantom::DomainStyle::kIf);
  auto rgb = phantom::render_rgb(ifs, m, phantom::RenderStyle::kFluorescence, 0.0);
  // Background pixels carry only the faint counterstain haze.
  auto bg = phantom::background_mask(scene);
  auto bg_values = rgb.masked_select(bg.unsqueeze(0));
  CHECK(bg_values.max().item<double>() < 0.1);
}

TEST_CASE("png round trip stays within one quantization step") {
  TempDir tmp("png_roundtrip");
  auto cfg = small_config();
  auto m = stain::StainMatrix::default_hed();
  auto scene = phantom::generate_scene(cfg, 2);
  auto rgb = phantom::render_rgb(phantom::render_stains(scene, phantom::DomainStyle::kDuplex),
                                 m, phantom::RenderStyle::kBrightfield, 0.01, 4);
  auto path = (tmp.path / "patch.png").string();
  imageio::write_rgb8(path, rgb);
  auto back = imageio::read_rgb8(path);
  CHECK((back - rgb).abs().max().item<double>() <= 1.0 / 255.0);
}

TEST_CASE("eval-only export lists exactly the paired items") {
  TempDir tmp("eval_only");
  auto cfg = small_config();
  auto m = stain::StainMatrix::default_hed();
  phantom::CorpusCounts counts;
  counts.eval = 5;
  auto manifest = phantom::export_corpus(cfg, tmp.path.string(), counts, m);

  int eval_images = 0;
  for (const auto& r : manifest.records) {
    CHECK(r.split == "eval");
    if (r.role == "image") ++eval_images;
    CHECK(fs::exists(tmp.path / r.path));
  }
  CHECK(eval_images == 5);
  CHECK(manifest.records.size() == 20);  // image + gt + two masks per scene
}

TEST_CASE("empty export is rejected") {
  TempDir tmp("empty_export");
  auto cfg = small_config();
  auto m = stain::StainMatrix::default_hed();
  CHECK_THROWS_AS(phantom::export_corpus(cfg, tmp.path.string(), {}, m),
                  std::invalid_argument);
}

TEST_CASE("saturated eosin labels lie inside positive nuclei") {
  auto cfg = small_config();
  cfg.marker_positive_fraction = 0.7;
  for (int i = 0; i < 4; ++i) {
    auto scene = phantom::generate_scene(cfg, 100 + i);
    auto duplex = phantom::render_stains(scene, phantom::DomainStyle::kDuplex);
    auto me = phantom::saturation_mask(duplex, stain::kChannelE,
                                       cfg.saturation_fraction);
    auto acc = me.accessor<bool, 2>();
    for (int y = 0; y < cfg.patch_size; ++y) {
      for (int x = 0; x < cfg.patch_size; ++x) {
        if (!acc[y][x]) continue;
        bool covered = false;
        for (const auto& n : scene.nuclei) {
          if (n.marker_positive && inside_ellipse(n, x + 0.5, y + 0.5, 0.6)) {
            covered = true;
            break;
          }
        }
        CHECK(covered);
      }
    }
  }
}

TEST_CASE("export is reproducible and splits stay disjoint") {
  TempDir tmp1("export_a");
  TempDir tmp2("export_b");
  auto cfg = small_config();
  cfg.labeled_patches = 3;
  auto m = stain::StainMatrix::default_hed();
  phantom::CorpusCounts counts;
  counts.train_a = 6;
  counts.train_b = 4;
  counts.train_c = 3;
  counts.sb_train = 2;
  counts.eval = 2;

  auto m1 = phantom::export_corpus(cfg, tmp1.path.string(), counts, m);
  auto m2 = phantom::export_corpus(cfg, tmp2.path.string(), counts, m);
  CHECK(read_file(tmp1.path / "manifest.jsonl") == read_file(tmp2.path / "manifest.jsonl"));
  CHECK(read_file(tmp1.path / "corpus_meta.json") == read_file(tmp2.path / "corpus_meta.json"));

  // Byte-identical image payloads as well.
  CHECK(read_file(tmp1.path / "a" / "train_000000.png") ==
        read_file(tmp2.path / "a" / "train_000000.png"));

  std::map<std::string, std::set<std::int64_t>> scenes_by_key;
  for (const auto& r : m1.records) {
    scenes_by_key[r.split == "train" ? r.domain : r.split].insert(r.scene);
  }
  auto disjoint = [](const std::set<std::int64_t>& a, const std::set<std::int64_t>& b) {
    for (auto v : a)
      if (b.count(v)) return false;
    return true;
  };
  const auto& a = scenes_by_key["A"];
  const auto& b = scenes_by_key["B"];
  const auto& c = scenes_by_key["C"];
  const auto& ev = scenes_by_key["eval"];
  CHECK(disjoint(a, b));
  CHECK(disjoint(a, c));
  CHECK(disjoint(b, c));
  CHECK(disjoint(a, ev));
  CHECK(disjoint(b, ev));
  CHECK(disjoint(c, ev));

  // Labeled masks only on the configured leading subset of A.
  int labeled = 0;
  for (const auto& r : m1.records)
    if (r.role == "mask_e") ++labeled;
  CHECK(labeled == 3);
}

TEST_CASE("phantom config and counts round trip through json") {
  phantom::PhantomConfig cfg;
  cfg.patch_size = 96;
  cfg.nuclei_min = 3;
  cfg.nuclei_max = 9;
  cfg.marker_positive_fraction = 0.6;
  cfg.noise_level = 0.02;
  cfg.seed = 42;
  cfg.labeled_patches = 17;
  auto j = cfg.to_json();
  auto back = phantom::PhantomConfig::from_json(j);
  CHECK(back.to_json() == j);

  nlohmann::json bad = j;
  bad["patch_size"] = 8;
  CHECK_THROWS_AS(phantom::PhantomConfig::from_json(bad), std::invalid_argument);

  phantom::CorpusCounts counts;
  counts.train_a = 5;
  counts.sb_train = 2;
  counts.eval = 1;
  auto cj = counts.to_json();
  auto cback = phantom::CorpusCounts::from_json(cj);
  CHECK(cback.to_json() == cj);
  CHECK(phantom::CorpusCounts::from_json(nlohmann::json::object()).train_a == 0);
}
