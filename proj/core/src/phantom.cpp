#include "stainshift/phantom.hpp"

#include "stainshift/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "stainshift/image_io.hpp"

namespace fs = std::filesystem;

namespace stainshift::phantom {

namespace {

using rng::mix_seed;

// Signed approximate pixel distance to an ellipse boundary, negative inside.
double ellipse_distance(double px, double py, double cx, double cy, double ax,
                        double ay, double rotation) {
  const double dx = px - cx;
  const double dy = py - cy;
  const double c = std::cos(rotation);
  const double s = std::sin(rotation);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double e = std::sqrt((u / ax) * (u / ax) + (v / ay) * (v / ay));
  return (e - 1.0) * std::min(ax, ay);
}

// 1 px cosine ramp: 1 at d <= -0.5, 0 at d >= 0.5.
double soft_step(double d) {
  if (d <= -0.5) return 1.0;
  if (d >= 0.5) return 0.0;
  return 0.5 * (1.0 - std::sin(M_PI * d));
}

double nucleus_coverage(const Nucleus& n, double px, double py) {
  return soft_step(ellipse_distance(px, py, n.cx, n.cy, n.ax, n.ay, n.rotation));
}

double membrane_coverage(const Membrane& mb, double px, double py) {
  const double d = ellipse_distance(px, py, mb.cx, mb.cy, mb.ax, mb.ay, mb.rotation);
  return soft_step(std::abs(d) - mb.half_width);
}

// Loops only over the dilated bounding box of the ellipse.
template <typename Fn>
void for_each_pixel_near(int height, int width, double cx, double cy,
                         double radius, Fn&& fn) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 2.0)));
  const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + radius + 2.0)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 2.0)));
  const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + radius + 2.0)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) fn(x, y, x + 0.5, y + 0.5);
}

std::string scene_file(const char* prefix, std::int64_t index, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06lld%s", prefix,
                static_cast<long long>(index), suffix);
  return buf;
}

}  // namespace

void PhantomConfig::validate() const {
  if (patch_size < 32 || patch_size > 256) {
    throw std::invalid_argument("phantom: patch_size must be in [32, 256]");
  }
  if (nuclei_min < 0 || nuclei_max < nuclei_min) {
    throw std::invalid_argument("phantom: invalid nuclei count range");
  }
  if (marker_positive_fraction < 0.0 || marker_positive_fraction > 1.0 ||
      membrane_fraction < 0.0 || membrane_fraction > 1.0) {
    throw std::invalid_argument("phantom: fractions must be in [0, 1]");
  }
  if (noise_level < 0.0) {
    throw std::invalid_argument("phantom: noise_level must be >= 0");
  }
  if (labeled_patches < 0) {
    throw std::invalid_argument("phantom: labeled_patches must be >= 0");
  }
  if (saturation_fraction <= 0.0 || saturation_fraction >= 1.0) {
    throw std::invalid_argument("phantom: saturation_fraction must be in (0, 1)");
  }
}

PhantomConfig PhantomConfig::from_json(const nlohmann::json& j) {
  PhantomConfig c;
  c.patch_size = j.value("patch_size", c.patch_size);
  c.nuclei_min = j.value("nuclei_min", c.nuclei_min);
  c.nuclei_max = j.value("nuclei_max", c.nuclei_max);
  c.marker_positive_fraction =
      j.value("marker_positive_fraction", c.marker_positive_fraction);
  c.membrane_fraction = j.value("membrane_fraction", c.membrane_fraction);
  c.noise_level = j.value("noise_level", c.noise_level);
  c.seed = j.value("seed", c.seed);
  c.labeled_patches = j.value("labeled_patches", c.labeled_patches);
  c.saturation_fraction = j.value("saturation_fraction", c.saturation_fraction);
  c.validate();
  return c;
}

nlohmann::ordered_json PhantomConfig::to_json() const {
  return {{"patch_size", patch_size},
          {"nuclei_min", nuclei_min},
          {"nuclei_max", nuclei_max},
          {"marker_positive_fraction", marker_positive_fraction},
          {"membrane_fraction", membrane_fraction},
          {"noise_level", noise_level},
          {"seed", seed},
          {"labeled_patches", labeled_patches},
          {"saturation_fraction", saturation_fraction}};
}

CorpusCounts CorpusCounts::from_json(const nlohmann::json& j) {
  CorpusCounts c;
  c.train_a = j.value("train_a", c.train_a);
  c.train_b = j.value("train_b", c.train_b);
  c.train_c = j.value("train_c", c.train_c);
  c.sb_train = j.value("sb_train", c.sb_train);
  c.eval = j.value("eval", c.eval);
  return c;
}

nlohmann::ordered_json CorpusCounts::to_json() const {
  return {{"train_a", train_a},
          {"train_b", train_b},
          {"train_c", train_c},
          {"sb_train", sb_train},
          {"eval", eval}};
}

Scene generate_scene(const PhantomConfig& config, std::int64_t index) {
  config.validate();
  std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(index)));

  std::uniform_real_distribution<double> axis_dist(3.0, 6.5);
  std::uniform_real_distribution<double> rot_dist(0.0, M_PI);
  std::uniform_real_distribution<double> h_dist(0.45, 0.65);
  std::uniform_real_distribution<double> e_dist(0.40, 0.60);
  std::uniform_real_distribution<double> d_dist(0.50, 0.90);
  std::uniform_real_distribution<double> haze_dist(0.01, 0.04);
  std::bernoulli_distribution positive_dist(config.marker_positive_fraction);
  std::bernoulli_distribution membrane_dist(config.membrane_fraction);

  Scene scene;
  scene.height = config.patch_size;
  scene.width = config.patch_size;
  scene.background_haze = haze_dist(rng);

  std::uniform_int_distribution<int> count_dist(config.nuclei_min, config.nuclei_max);
  const int count = count_dist(rng);

  for (int i = 0; i < count; ++i) {
    Nucleus n;
    n.ax = axis_dist(rng);
    n.ay = axis_dist(rng);
    n.rotation = rot_dist(rng);

    const double reach = std::max(n.ax, n.ay);
    const double margin = reach + 1.5;
    if (2.0 * margin >= config.patch_size) {
      throw std::runtime_error("phantom: infeasible packing, patch too small");
    }
    std::uniform_real_distribution<double> pos_dist(margin, config.patch_size - margin);

    bool placed = false;
    for (int attempt = 0; attempt < 120 && !placed; ++attempt) {
      n.cx = pos_dist(rng);
      n.cy = pos_dist(rng);
      placed = true;
      for (const auto& other : scene.nuclei) {
        const double min_dist =
            0.85 * (reach + std::max(other.ax, other.ay));
        const double dx = n.cx - other.cx;
        const double dy = n.cy - other.cy;
        if (dx * dx + dy * dy < min_dist * min_dist) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) {
      throw std::runtime_error("phantom: infeasible packing, too many nuclei");
    }

    n.marker_positive = positive_dist(rng);
    n.intensity = h_dist(rng);
    n.marker_intensity = n.marker_positive ? e_dist(rng) : 0.0;
    scene.nuclei.push_back(n);

    if (membrane_dist(rng)) {
      Membrane mb;
      mb.cx = n.cx;
      mb.cy = n.cy;
      mb.ax = n.ax * 1.35;
      mb.ay = n.ay * 1.35;
      mb.rotation = n.rotation;
      mb.half_width = 1.0;
      mb.intensity = d_dist(rng);
      scene.membranes.push_back(mb);
    }
  }
  return scene;
}

torch::Tensor render_stains(const Scene& scene, DomainStyle style) {
  auto stains = torch::zeros({3, scene.height, scene.width}, torch::kFloat64);
  auto acc = stains.accessor<double, 3>();

  for (int y = 0; y < scene.height; ++y)
    for (int x = 0; x < scene.width; ++x)
      acc[stain::kChannelH][y][x] = scene.background_haze;

  for (const auto& n : scene.nuclei) {
    for_each_pixel_near(scene.height, scene.width, n.cx, n.cy,
                        std::max(n.ax, n.ay), [&](int x, int y, double px, double py) {
      const double cov = nucleus_coverage(n, px, py);
      if (cov <= 0.0) return;
      acc[stain::kChannelH][y][x] += cov * n.intensity;
      if (n.marker_positive) {
        acc[stain::kChannelE][y][x] += cov * n.marker_intensity;
      }
    });
  }
  for (const auto& mb : scene.membranes) {
    for_each_pixel_near(scene.height, scene.width, mb.cx, mb.cy,
                        std::max(mb.ax, mb.ay) + mb.half_width,
                        [&](int x, int y, double px, double py) {
      const double cov = membrane_coverage(mb, px, py);
      if (cov <= 0.0) return;
      acc[stain::kChannelD][y][x] += cov * mb.intensity;
    });
  }

  switch (style) {
    case DomainStyle::kDuplex:
    case DomainStyle::kIf:
      // IF shares the duplex concentrations; the styles diverge in render_rgb.
      return stains;
    case DomainStyle::kMonoplex:
      return stain::restain(stains, stain::RestainCoefficients::defaults());
  }
  throw std::logic_error("render_stains: unknown domain style");
}

torch::Tensor render_rgb(const torch::Tensor& stains, const stain::StainMatrix& m,
                         RenderStyle style, double noise, std::uint64_t noise_seed) {
  if (noise < 0.0) throw std::invalid_argument("render_rgb: noise must be >= 0");

  torch::Tensor rgb;
  switch (style) {
    case RenderStyle::kBrightfield:
      rgb = stain::od_to_rgb(stain::concentrations_to_od(stains.to(torch::kFloat64), m));
      break;
    case RenderStyle::kFluorescence:
      rgb = stains.to(torch::kFloat64).clamp(0.0, 1.0);
      break;
    default:
      throw std::logic_error("render_rgb: unknown render style");
  }

  if (noise > 0.0) {
    std::mt19937_64 rng(mix_seed(noise_seed, 0x5EED));
    std::normal_distribution<double> gauss(0.0, noise);
    auto acc = rgb.accessor<double, 3>();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < rgb.size(1); ++y)
        for (int x = 0; x < rgb.size(2); ++x) acc[c][y][x] += gauss(rng);
    rgb = rgb.clamp(0.0, 1.0);
  }
  return rgb.to(torch::kFloat32);
}

torch::Tensor nucleus_mask(const Scene& scene) {
  auto mask = torch::zeros({scene.height, scene.width}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  for (const auto& n : scene.nuclei) {
    for_each_pixel_near(scene.height, scene.width, n.cx, n.cy,
                        std::max(n.ax, n.ay), [&](int x, int y, double px, double py) {
      if (nucleus_coverage(n, px, py) >= 0.5) acc[y][x] = true;
    });
  }
  return mask;
}

torch::Tensor background_mask(const Scene& scene) {
  auto mask = torch::ones({scene.height, scene.width}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  for (const auto& n : scene.nuclei) {
    for_each_pixel_near(scene.height, scene.width, n.cx, n.cy,
                        std::max(n.ax, n.ay), [&](int x, int y, double px, double py) {
      if (nucleus_coverage(n, px, py) > 0.0) acc[y][x] = false;
    });
  }
  return mask;
}

torch::Tensor saturation_mask(const torch::Tensor& duplex_stains, int channel,
                              double saturation_fraction) {
  TORCH_CHECK(duplex_stains.dim() == 3 && duplex_stains.size(0) == 3,
              "saturation_mask: expected (3, H, W)");
  auto ch = duplex_stains[channel];
  const double mx = ch.max().item<double>();
  if (mx <= 1e-9) return torch::zeros_like(ch, torch::kBool);
  return ch > saturation_fraction * mx;
}

std::string CorpusManifest::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["path"] = r.path;
    j["domain"] = r.domain;
    j["split"] = r.split;
    j["scene"] = r.scene;
    j["role"] = r.role;
    out += j.dump();
    out += '\n';
  }
  return out;
}

CorpusManifest CorpusManifest::from_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path);
  CorpusManifest manifest;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    ManifestRecord r;
    r.path = j.at("path").get<std::string>();
    r.domain = j.at("domain").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.scene = j.at("scene").get<std::int64_t>();
    r.role = j.at("role").get<std::string>();
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

CorpusManifest export_corpus(const PhantomConfig& config, const std::string& out_dir,
                             const CorpusCounts& counts, const stain::StainMatrix& m) {
  config.validate();
  for (int c : {counts.train_a, counts.train_b, counts.train_c, counts.sb_train,
                counts.eval}) {
    if (c < 0) throw std::invalid_argument("export_corpus: negative count");
  }
  const std::int64_t total = counts.train_a + counts.train_b + counts.train_c +
                             counts.sb_train + counts.eval;
  if (total == 0) throw std::invalid_argument("export_corpus: empty corpus");

  struct Range {
    std::int64_t begin, end;
  };
  const Range range_a{0, counts.train_a};
  const Range range_b{range_a.end, range_a.end + counts.train_b};
  const Range range_c{range_b.end, range_b.end + counts.train_c};
  const Range range_sb{range_c.end, range_c.end + counts.sb_train};
  const Range range_eval{range_sb.end, range_sb.end + counts.eval};
  const Range all[] = {range_a, range_b, range_c, range_sb, range_eval};
  for (size_t i = 0; i + 1 < std::size(all); ++i) {
    if (all[i].end > all[i + 1].begin) {
      throw std::logic_error("export_corpus: overlapping scene index ranges");
    }
  }

  fs::create_directories(out_dir);
  for (const char* sub : {"a", "b", "c", "sb", "eval"}) {
    fs::create_directories(fs::path(out_dir) / sub);
  }

  CorpusManifest manifest;
  auto add = [&](std::string path, const char* domain, const char* split,
                 std::int64_t scene, const char* role) {
    manifest.records.push_back({std::move(path), domain, split, scene, role});
  };
  auto write_rgb = [&](const std::string& rel, const torch::Tensor& rgb) {
    imageio::write_rgb8((fs::path(out_dir) / rel).string(), rgb);
  };
  auto write_mask = [&](const std::string& rel, const torch::Tensor& mask) {
    imageio::write_gray8((fs::path(out_dir) / rel).string(),
                         mask.to(torch::kFloat32));
  };

  // Domain A: duplex brightfield; the leading labeled_patches scenes carry
  // saturated-stain label masks.
  for (std::int64_t i = range_a.begin; i < range_a.end; ++i) {
    auto scene = generate_scene(config, i);
    auto duplex = render_stains(scene, DomainStyle::kDuplex);
    auto rgb = render_rgb(duplex, m, RenderStyle::kBrightfield, config.noise_level,
                          mix_seed(config.seed, 1000003ull + i));
    auto rel = "a/" + scene_file("train", i, ".png");
    write_rgb(rel, rgb);
    add(rel, "A", "train", i, "image");
    if (i - range_a.begin < config.labeled_patches) {
      auto me = saturation_mask(duplex, stain::kChannelE, config.saturation_fraction);
      auto md = saturation_mask(duplex, stain::kChannelD, config.saturation_fraction);
      auto rel_me = "a/" + scene_file("train", i, "_me.png");
      auto rel_md = "a/" + scene_file("train", i, "_md.png");
      write_mask(rel_me, me);
      write_mask(rel_md, md);
      add(rel_me, "A", "train", i, "mask_e");
      add(rel_md, "A", "train", i, "mask_d");
    }
  }

  for (std::int64_t i = range_b.begin; i < range_b.end; ++i) {
    auto scene = generate_scene(config, i);
    auto mono = render_stains(scene, DomainStyle::kMonoplex);
    auto rgb = render_rgb(mono, m, RenderStyle::kBrightfield, config.noise_level,
                          mix_seed(config.seed, 2000003ull + i));
    auto rel = "b/" + scene_file("train", i, ".png");
    write_rgb(rel, rgb);
    add(rel, "B", "train", i, "image");
  }

  for (std::int64_t i = range_c.begin; i < range_c.end; ++i) {
    auto scene = generate_scene(config, i);
    auto ifs = render_stains(scene, DomainStyle::kIf);
    auto rgb = render_rgb(ifs, m, RenderStyle::kFluorescence, config.noise_level,
                          mix_seed(config.seed, 3000003ull + i));
    auto rel = "c/" + scene_file("train", i, ".png");
    write_rgb(rel, rgb);
    add(rel, "C", "train", i, "image");
  }

  // Surrogate-segmentation training split: monoplex patches + nucleus masks.
  for (std::int64_t i = range_sb.begin; i < range_sb.end; ++i) {
    auto scene = generate_scene(config, i);
    auto mono = render_stains(scene, DomainStyle::kMonoplex);
    auto rgb = render_rgb(mono, m, RenderStyle::kBrightfield, config.noise_level,
                          mix_seed(config.seed, 4000003ull + i));
    auto rel = "sb/" + scene_file("mono", i, ".png");
    auto rel_nuc = "sb/" + scene_file("mono", i, "_nuc.png");
    write_rgb(rel, rgb);
    write_mask(rel_nuc, nucleus_mask(scene));
    add(rel, "B", "sb", i, "image");
    add(rel_nuc, "B", "sb", i, "mask_nuclei");
  }

  // Held-back paired evaluation split, rendered noise-free.
  for (std::int64_t i = range_eval.begin; i < range_eval.end; ++i) {
    auto scene = generate_scene(config, i);
    auto duplex = render_stains(scene, DomainStyle::kDuplex);
    auto mono = render_stains(scene, DomainStyle::kMonoplex);
    auto rel_dup = "eval/" + scene_file("duplex", i, ".png");
    auto rel_mono = "eval/" + scene_file("mono", i, ".png");
    auto rel_nuc = "eval/" + scene_file("nuc", i, ".png");
    auto rel_bg = "eval/" + scene_file("bg", i, ".png");
    write_rgb(rel_dup, render_rgb(duplex, m, RenderStyle::kBrightfield, 0.0));
    write_rgb(rel_mono, render_rgb(mono, m, RenderStyle::kBrightfield, 0.0));
    write_mask(rel_nuc, nucleus_mask(scene));
    write_mask(rel_bg, background_mask(scene));
    add(rel_dup, "A", "eval", i, "image");
    add(rel_mono, "B", "eval", i, "monoplex_gt");
    add(rel_nuc, "A", "eval", i, "mask_nuclei");
    add(rel_bg, "A", "eval", i, "mask_background");
  }

  std::ofstream out(fs::path(out_dir) / "manifest.jsonl", std::ios::binary);
  if (!out) throw std::runtime_error("export_corpus: cannot write manifest");
  out << manifest.to_jsonl();
  out.close();

  nlohmann::ordered_json meta;
  meta["patch_size"] = config.patch_size;
  meta["seed"] = config.seed;
  meta["noise_level"] = config.noise_level;
  meta["labeled_patches"] = config.labeled_patches;
  meta["saturation_fraction"] = config.saturation_fraction;
  meta["counts"] = {{"train_a", counts.train_a}, {"train_b", counts.train_b},
                    {"train_c", counts.train_c}, {"sb_train", counts.sb_train},
                    {"eval", counts.eval}};
  meta["stain_matrix"] = m.rows();
  meta["restain_alpha"] = stain::RestainCoefficients::defaults().alpha;
  std::ofstream meta_out(fs::path(out_dir) / "corpus_meta.json", std::ios::binary);
  meta_out << meta.dump(2) << '\n';

  return manifest;
}

}  // namespace stainshift::phantom
