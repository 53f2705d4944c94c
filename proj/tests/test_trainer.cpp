#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "testing.hpp"

#include <filesystem>
#include <fstream>

#include "stainshift/data.hpp"
#include "stainshift/image_io.hpp"
#include "stainshift/phantom.hpp"
#include "stainshift/stain.hpp"
#include "stainshift/trainer.hpp"

using namespace stainshift;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("stainshift_trainer_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Small corpus + narrow networks keep these loops fast.
void make_corpus(const fs::path& root) {
  phantom::PhantomConfig cfg;
  cfg.patch_size = 48;
  cfg.nuclei_min = 2;
  cfg.nuclei_max = 4;
  cfg.labeled_patches = 3;
  phantom::CorpusCounts counts;
  counts.train_a = 6;
  counts.train_b = 5;
  counts.train_c = 4;
  phantom::export_corpus(cfg, root.string(), counts,
                         stain::StainMatrix::default_hed());
}

trainer::TrainConfig tiny_config(const fs::path& out) {
  trainer::TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 1;
  cfg.generator_spec.base_width = 8;
  cfg.generator_spec.levels = 1;
  cfg.generator_spec.blocks = 1;
  cfg.discriminator_spec.base_width = 8;
  cfg.discriminator_spec.blocks = 1;
  cfg.checkpoint_interval = 100;
  cfg.seed = 5;
  cfg.single_thread = true;
  cfg.out_dir = out.string();
  return cfg;
}

std::vector<nlohmann::json> read_log(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::vector<nlohmann::json> records;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) records.push_back(nlohmann::json::parse(line));
  }
  return records;
}

bool modules_equal(torch::nn::Module& a, torch::nn::Module& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (!torch::equal(pa[i], pb[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("compute_f_ab composes the transforms around the restain") {
  SUBCASE("inverse linear pair with identity alpha is the identity") {
    stain::ImageTransform halve = [](const torch::Tensor& x) { return x * 0.5; };
    stain::ImageTransform twice = [](const torch::Tensor& x) { return x * 2.0; };
    auto x = torch::rand({2, 3, 8, 8});
    auto y = trainer::compute_f_ab(x, halve, twice,
                                   stain::RestainCoefficients::identity());
    CHECK((y - x).abs().max().item<double>() < 1e-6);
    CHECK(!y.requires_grad());
  }
  SUBCASE("zero alpha collapses to G_CA of zero") {
    stain::ImageTransform halve = [](const torch::Tensor& x) { return x * 0.5; };
    stain::ImageTransform affine = [](const torch::Tensor& x) { return x + 0.25; };
    stain::RestainCoefficients zero;
    for (auto& row : zero.alpha)
      for (auto& v : row) v = 0.0;
    auto x = torch::rand({1, 3, 8, 8});
    auto y = trainer::compute_f_ab(x, halve, affine, zero);
    CHECK(torch::equal(y, affine(torch::zeros_like(x))));
  }
  SUBCASE("analytic stand-ins reproduce the ground-truth monoplex") {
    auto m = stain::StainMatrix::default_hed();
    phantom::PhantomConfig cfg;
    cfg.patch_size = 64;
    cfg.nuclei_min = 5;
    cfg.nuclei_max = 9;
    double worst = 0.0;
    for (int i = 0; i < 4; ++i) {
      auto scene = phantom::generate_scene(cfg, 40 + i);
      auto duplex_rgb =
          phantom::render_rgb(phantom::render_stains(scene, phantom::DomainStyle::kDuplex),
                              m, phantom::RenderStyle::kBrightfield, 0.0);
      auto gt_mono =
          phantom::render_rgb(phantom::render_stains(scene, phantom::DomainStyle::kMonoplex),
                              m, phantom::RenderStyle::kBrightfield, 0.0);
      auto f_ab = trainer::compute_f_ab(
          duplex_rgb.unsqueeze(0).to(torch::kFloat64),
          stain::pseudo_if_transform(m), stain::brightfield_reconstruction_transform(m),
          stain::RestainCoefficients::defaults());
      worst = std::max(worst, (f_ab.squeeze(0) - gt_mono.to(torch::kFloat64))
                                  .abs().mean().item<double>());
    }
    CHECK(worst < 2.0 / 255.0);
  }
}

TEST_CASE("train config json round trip and validation") {
  trainer::TrainConfig cfg;
  cfg.optimizer = "sgd";
  cfg.weights.lambda_guidance = 3.5;
  cfg.separation_variant = losses::SeparationVariant::kAsWritten;
  auto j = cfg.to_json();
  auto back = trainer::TrainConfig::from_json(j);
  CHECK(back.to_json() == j);

  trainer::TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = {};
  bad.optimizer = "rmsprop";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = {};
  bad.steps = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("stage 1 training mechanics") {
  TempDir corpus("s1_corpus");
  make_corpus(corpus.path);
  auto a = data::load_dataset(corpus.path.string(), "A");
  auto b = data::load_dataset(corpus.path.string(), "B");
  auto c = data::load_dataset(corpus.path.string(), "C");

  SUBCASE("zero steps checkpoints the initialization") {
    TempDir out("s1_zero");
    auto cfg = tiny_config(out.path);
    cfg.steps = 0;
    auto st = trainer::train_stage1(cfg, a, b, c);
    CHECK(st.step == 0);
    auto fresh = trainer::init_stage1(cfg);
    CHECK(modules_equal(*st.g_ac, *fresh.g_ac));
    CHECK(modules_equal(*st.d_c, *fresh.d_c));
    CHECK(fs::exists(out.path / "stage1" / "step_0" / "meta.json"));
  }

  SUBCASE("zero learning rates leave parameters untouched") {
    TempDir out("s1_lr0");
    auto cfg = tiny_config(out.path);
    cfg.steps = 6;
    cfg.lr_generator = 0.0;
    cfg.lr_discriminator = 0.0;
    auto st = trainer::train_stage1(cfg, a, b, c);
    auto fresh = trainer::init_stage1(cfg);
    CHECK(modules_equal(*st.g_ac, *fresh.g_ac));
    CHECK(modules_equal(*st.g_ca, *fresh.g_ca));
    CHECK(modules_equal(*st.d_a, *fresh.d_a));
    CHECK(st.step == 6);
  }

  SUBCASE("logs carry every configured term once per step") {
    TempDir out("s1_log");
    auto cfg = tiny_config(out.path);
    auto st = trainer::train_stage1(cfg, a, b, c);
    auto records = read_log(out.path / "stage1" / "train_log.jsonl");
    REQUIRE(records.size() == 4);
    for (size_t i = 0; i < records.size(); ++i) {
      CHECK(records[i]["step"].get<int>() == static_cast<int>(i + 1));
      auto terms = records[i]["generator"]["terms"];
      for (const char* name :
           {"adversarial", "cycle", "stain_guidance", "eosin_absence"}) {
        CHECK(terms.contains(name));
      }
      CHECK(std::isfinite(records[i]["generator"]["total"].get<double>()));
    }
  }

  SUBCASE("equal seeds give identical loss streams") {
    TempDir out1("s1_det1");
    TempDir out2("s1_det2");
    auto cfg1 = tiny_config(out1.path);
    auto cfg2 = tiny_config(out2.path);
    trainer::train_stage1(cfg1, a, b, c);
    trainer::train_stage1(cfg2, a, b, c);
    std::ifstream f1(out1.path / "stage1" / "train_log.jsonl");
    std::ifstream f2(out2.path / "stage1" / "train_log.jsonl");
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    CHECK(!s1.empty());
  }

  SUBCASE("divergence aborts with an explicit error") {
    TempDir out("s1_diverge");
    auto cfg = tiny_config(out.path);
    cfg.optimizer = "sgd";
    cfg.lr_generator = 1e18;
    cfg.lr_discriminator = 1e18;
    cfg.steps = 50;
    CHECK_THROWS(trainer::train_stage1(cfg, a, b, c));
  }
}

TEST_CASE("checkpoint round trips and resume") {
  TempDir corpus("ckpt_corpus");
  make_corpus(corpus.path);
  auto a = data::load_dataset(corpus.path.string(), "A");
  auto b = data::load_dataset(corpus.path.string(), "B");
  auto c = data::load_dataset(corpus.path.string(), "C");

  SUBCASE("save then load restores forward behavior bitwise") {
    TempDir out("ckpt_rt");
    auto cfg = tiny_config(out.path);
    auto st = trainer::train_stage1(cfg, a, b, c);
    auto ckpt = (out.path / "stage1" / "step_4").string();
    auto loaded = trainer::load_stage1_checkpoint(ckpt);
    auto probe = a.image(0).unsqueeze(0);
    torch::NoGradGuard ng;
    CHECK(torch::equal(st.g_ac->forward(probe), loaded.g_ac->forward(probe)));
    CHECK(torch::equal(st.g_ca->forward(probe), loaded.g_ca->forward(probe)));
    CHECK(loaded.step == 4);
  }

  SUBCASE("version and stage mismatches are rejected") {
    TempDir out("ckpt_ver");
    auto cfg = tiny_config(out.path);
    cfg.steps = 1;
    trainer::train_stage1(cfg, a, b, c);
    auto dir = out.path / "stage1" / "step_1";
    CHECK_THROWS_AS(trainer::load_stage2_checkpoint(dir.string()),
                    std::runtime_error);
    auto meta_path = dir / "meta.json";
    auto meta = nlohmann::json::parse(std::ifstream(meta_path));
    meta["version"] = 999;
    std::ofstream(meta_path) << meta.dump();
    CHECK_THROWS_AS(trainer::load_stage1_checkpoint(dir.string()),
                    std::runtime_error);
  }

  SUBCASE("resuming replays the uninterrupted trajectory") {
    TempDir out_full("resume_full");
    TempDir out_head("resume_head");
    TempDir out_tail("resume_tail");

    auto cfg_full = tiny_config(out_full.path);
    cfg_full.steps = 6;
    trainer::train_stage1(cfg_full, a, b, c);

    auto cfg_head = tiny_config(out_head.path);
    cfg_head.steps = 3;
    trainer::train_stage1(cfg_head, a, b, c);
    auto cfg_tail = tiny_config(out_tail.path);
    cfg_tail.steps = 6;
    trainer::train_stage1(cfg_tail, a, b, c,
                          (out_head.path / "stage1" / "step_3").string());

    auto full = read_log(out_full.path / "stage1" / "train_log.jsonl");
    auto tail = read_log(out_tail.path / "stage1" / "train_log.jsonl");
    REQUIRE(full.size() == 6);
    REQUIRE(tail.size() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(full[3 + i] == tail[i]);
    }
  }
}

TEST_CASE("stage 2 training mechanics") {
  TempDir corpus("s2_corpus");
  make_corpus(corpus.path);
  auto a = data::load_dataset(corpus.path.string(), "A");
  auto b = data::load_dataset(corpus.path.string(), "B");
  auto c = data::load_dataset(corpus.path.string(), "C");

  TempDir s1_out("s2_stage1");
  auto s1_cfg = tiny_config(s1_out.path);
  s1_cfg.steps = 2;
  trainer::train_stage1(s1_cfg, a, b, c);
  const auto s1_ckpt = (s1_out.path / "stage1" / "step_2").string();

  SUBCASE("zero steps leaves g_ab at its initialization") {
    TempDir out("s2_zero");
    auto cfg = tiny_config(out.path);
    cfg.stage = 2;
    cfg.steps = 0;
    auto st = trainer::train_stage2(cfg, a, b, s1_ckpt);
    auto fresh = trainer::init_stage2(cfg, s1_ckpt);
    CHECK(modules_equal(*st.g_ab, *fresh.g_ab));
  }

  SUBCASE("stage 1 parameters stay frozen through stage 2") {
    TempDir out("s2_freeze");
    auto cfg = tiny_config(out.path);
    cfg.stage = 2;
    cfg.steps = 5;
    auto before = trainer::load_stage1_checkpoint(s1_ckpt);
    const double sum_ac = trainer::parameter_checksum(*before.g_ac);
    const double sum_ca = trainer::parameter_checksum(*before.g_ca);
    auto st = trainer::train_stage2(cfg, a, b, s1_ckpt);
    CHECK(trainer::parameter_checksum(*st.g_ac) == sum_ac);
    CHECK(trainer::parameter_checksum(*st.g_ca) == sum_ca);
    for (const auto& p : st.g_ac->parameters()) CHECK(!p.requires_grad());
    // And g_ab actually moved.
    auto fresh = trainer::init_stage2(cfg, s1_ckpt);
    CHECK(!modules_equal(*st.g_ab, *fresh.g_ab));
  }

  SUBCASE("stage 2 checkpoints reload bitwise") {
    TempDir out("s2_ckpt");
    auto cfg = tiny_config(out.path);
    cfg.stage = 2;
    cfg.steps = 3;
    auto st = trainer::train_stage2(cfg, a, b, s1_ckpt);
    auto loaded = trainer::load_stage2_checkpoint(
        (out.path / "stage2" / "step_3").string());
    auto probe = a.image(1).unsqueeze(0);
    torch::NoGradGuard ng;
    CHECK(torch::equal(st.g_ab->forward(probe), loaded.g_ab->forward(probe)));
    CHECK(torch::equal(st.g_ac->forward(probe), loaded.g_ac->forward(probe)));
  }

  SUBCASE("pure guidance descent is monotone on a fixed batch") {
    // Single-item datasets make every batch identical (full-batch regime).
    TempDir one("s2_onebatch");
    for (const char* d : {"a", "b"}) fs::create_directories(one.path / d);
    imageio::write_rgb8((one.path / "a" / "p.png").string(), a.image(0));
    imageio::write_rgb8((one.path / "b" / "p.png").string(), b.image(0));
    auto a_single = data::load_dataset((one.path / "a").string(), "A");
    auto b_single = data::load_dataset((one.path / "b").string(), "B");

    TempDir out("s2_mono");
    auto cfg = tiny_config(out.path);
    cfg.stage = 2;
    cfg.steps = 100;
    cfg.optimizer = "sgd";
    cfg.lr_generator = 1e-3;
    cfg.lr_discriminator = 0.0;
    cfg.weights.lambda_adv = 0.0;
    cfg.weights.lambda_guidance = 1.0;
    auto st = trainer::train_stage2(cfg, a_single, b_single, s1_ckpt);
    auto records = read_log(out.path / "stage2" / "train_log.jsonl");
    REQUIRE(records.size() == 100);
    double prev = records[0]["generator"]["terms"]["guidance"]["value"].get<double>();
    for (size_t i = 1; i < records.size(); ++i) {
      const double cur =
          records[i]["generator"]["terms"]["guidance"]["value"].get<double>();
      CHECK(cur <= prev + 1e-8);
      prev = cur;
    }
    CHECK(records.back()["generator"]["terms"]["guidance"]["value"].get<double>() <
          records.front()["generator"]["terms"]["guidance"]["value"].get<double>());
  }
}
