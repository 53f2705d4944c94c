#include "stainshift/trainer.hpp"

#include <ATen/Parallel.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "stainshift/rng.hpp"

namespace stainshift::trainer {

namespace fs = std::filesystem;

namespace {

std::string variant_name(losses::SeparationVariant v) {
  return v == losses::SeparationVariant::kPurityComplement ? "purity_complement"
                                                           : "as_written";
}

losses::SeparationVariant variant_from_name(const std::string& name) {
  if (name == "purity_complement") {
    return losses::SeparationVariant::kPurityComplement;
  }
  if (name == "as_written") return losses::SeparationVariant::kAsWritten;
  throw std::invalid_argument("TrainConfig: unknown separation variant " + name);
}

std::shared_ptr<torch::optim::Optimizer> make_optimizer(
    const std::string& kind, std::vector<torch::Tensor> params, double lr) {
  if (kind == "adam") {
    return std::make_shared<torch::optim::Adam>(
        std::move(params), torch::optim::AdamOptions(lr).betas({0.5, 0.999}));
  }
  if (kind == "sgd") {
    return std::make_shared<torch::optim::SGD>(std::move(params),
                                               torch::optim::SGDOptions(lr));
  }
  throw std::invalid_argument("TrainConfig: unknown optimizer " + kind);
}

std::vector<torch::Tensor> concat_params(
    std::initializer_list<std::shared_ptr<torch::nn::Module>> modules) {
  std::vector<torch::Tensor> params;
  for (const auto& m : modules) {
    for (auto& p : m->parameters()) params.push_back(p);
  }
  return params;
}

void write_meta(const fs::path& dir, const char* stage_tag,
                const TrainConfig& config, std::int64_t step,
                const std::mt19937_64& sampler) {
  nlohmann::ordered_json meta;
  meta["version"] = kCheckpointVersion;
  meta["stage"] = stage_tag;
  meta["step"] = step;
  meta["config"] = config.to_json();
  meta["sampler"] = rng::serialize(sampler);
  std::ofstream out(dir / "meta.json", std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write meta.json");
  out << meta.dump(2) << "\n";
}

nlohmann::json read_meta(const fs::path& dir, const char* stage_tag) {
  std::ifstream in(dir / "meta.json");
  if (!in) {
    throw std::runtime_error("load_checkpoint: missing meta.json in " +
                             dir.string());
  }
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: corrupt meta.json: ") +
                             e.what());
  }
  if (!meta.contains("version") ||
      meta["version"].get<int>() != kCheckpointVersion) {
    throw std::runtime_error("load_checkpoint: checkpoint version mismatch");
  }
  if (meta.value("stage", "") != stage_tag) {
    throw std::runtime_error("load_checkpoint: checkpoint stage mismatch");
  }
  return meta;
}

fs::path checkpoint_dir(const TrainConfig& config, const char* stage_tag,
                        std::int64_t step) {
  return fs::path(config.out_dir) / stage_tag / ("step_" + std::to_string(step));
}

torch::Tensor stack_images(const data::PatchDataset& ds, std::int64_t batch_size,
                           std::mt19937_64& rng) {
  std::vector<torch::Tensor> xs;
  xs.reserve(batch_size);
  for (std::int64_t i = 0; i < batch_size; ++i) {
    xs.push_back(ds.image(data::draw_index(ds, rng)));
  }
  return torch::stack(xs);
}

void require_finite_total(const torch::Tensor& total) {
  if (!total.isfinite().item<bool>()) {
    throw std::runtime_error("trainer: generator loss diverged (NaN/Inf)");
  }
}

class StepLog {
 public:
  StepLog(const TrainConfig& config, const char* stage_tag) {
    const auto dir = fs::path(config.out_dir) / stage_tag;
    fs::create_directories(dir);
    out_.open(dir / "train_log.jsonl", std::ios::app | std::ios::binary);
    if (!out_) throw std::runtime_error("trainer: cannot open train_log.jsonl");
  }

  void record(int stage, std::int64_t step, double d_loss,
              const losses::LossReport& report) {
    nlohmann::ordered_json rec;
    rec["stage"] = stage;
    rec["step"] = step;
    rec["discriminator"] = d_loss;
    rec["generator"] = report.to_json();
    out_ << rec.dump() << "\n";
  }

 private:
  std::ofstream out_;
};

}  // namespace

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) {
    throw std::invalid_argument("TrainConfig: stage must be 1 or 2");
  }
  if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
  if (batch_size < 1) {
    throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  }
  if (!(lr_generator >= 0.0) || !(lr_discriminator >= 0.0) ||
      !std::isfinite(lr_generator) || !std::isfinite(lr_discriminator)) {
    throw std::invalid_argument("TrainConfig: learning rates must be finite and >= 0");
  }
  if (labeled_fraction < 0.0 || labeled_fraction > 1.0) {
    throw std::invalid_argument("TrainConfig: labeled_fraction out of [0,1]");
  }
  if (checkpoint_interval < 1) {
    throw std::invalid_argument("TrainConfig: checkpoint_interval must be >= 1");
  }
  if (optimizer != "adam" && optimizer != "sgd") {
    throw std::invalid_argument("TrainConfig: unknown optimizer " + optimizer);
  }
  weights.validate();
  alpha.validate();
  generator_spec.validate();
  discriminator_spec.validate();
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.stage = j.value("stage", c.stage);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_generator = j.value("lr_generator", c.lr_generator);
  c.lr_discriminator = j.value("lr_discriminator", c.lr_discriminator);
  c.optimizer = j.value("optimizer", c.optimizer);
  if (j.contains("weights")) c.weights = losses::LossWeights::from_json(j["weights"]);
  if (j.contains("separation_variant")) {
    c.separation_variant = variant_from_name(j["separation_variant"]);
  }
  if (j.contains("alpha")) c.alpha = stain::RestainCoefficients::from_json(j["alpha"].dump());
  if (j.contains("stain_matrix")) {
    c.stain_matrix = stain::StainMatrix::from_json(j["stain_matrix"].dump());
  }
  if (j.contains("generator")) {
    c.generator_spec = networks::GeneratorSpec::from_json(j["generator"]);
  }
  if (j.contains("discriminator")) {
    c.discriminator_spec = networks::DiscriminatorSpec::from_json(j["discriminator"]);
  }
  c.labeled_fraction = j.value("labeled_fraction", c.labeled_fraction);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.single_thread = j.value("single_thread", c.single_thread);
  c.validate();
  return c;
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["lr_generator"] = lr_generator;
  j["lr_discriminator"] = lr_discriminator;
  j["optimizer"] = optimizer;
  j["weights"] = weights.to_json();
  j["separation_variant"] = variant_name(separation_variant);
  j["alpha"] = nlohmann::json::parse(alpha.to_json());
  j["stain_matrix"] = nlohmann::json::parse(stain_matrix.to_json());
  j["generator"] = generator_spec.to_json();
  j["discriminator"] = discriminator_spec.to_json();
  j["labeled_fraction"] = labeled_fraction;
  j["seed"] = seed;
  j["checkpoint_interval"] = checkpoint_interval;
  j["out_dir"] = out_dir;
  j["single_thread"] = single_thread;
  return j;
}

torch::Tensor compute_f_ab(const torch::Tensor& x_a,
                           const stain::ImageTransform& g_ac,
                           const stain::ImageTransform& g_ca,
                           const stain::RestainCoefficients& alpha) {
  torch::NoGradGuard no_grad;
  auto synthetic_if = g_ac(x_a);
  auto restained = stain::restain(synthetic_if, alpha);
  auto out = g_ca(restained).detach();
  if (out.sizes() != x_a.sizes()) {
    throw std::invalid_argument("compute_f_ab: output shape mismatch");
  }
  return out;
}

double parameter_checksum(const torch::nn::Module& module) {
  double sum = 0.0;
  for (const auto& p : module.parameters()) {
    sum += p.detach().to(torch::kFloat64).abs().sum().item<double>();
  }
  return sum;
}

Stage1State init_stage1(const TrainConfig& config) {
  config.validate();
  Stage1State st;
  st.config = config;
  st.g_ac = networks::build_generator(config.generator_spec,
                                      rng::mix_seed(config.seed, 10));
  st.g_ca = networks::build_generator(config.generator_spec,
                                      rng::mix_seed(config.seed, 11));
  st.d_a = networks::build_discriminator(config.discriminator_spec,
                                         rng::mix_seed(config.seed, 12));
  st.d_c = networks::build_discriminator(config.discriminator_spec,
                                         rng::mix_seed(config.seed, 13));
  st.opt_g = make_optimizer(config.optimizer,
                            concat_params({st.g_ac.ptr(), st.g_ca.ptr()}),
                            config.lr_generator);
  st.opt_d = make_optimizer(config.optimizer,
                            concat_params({st.d_a.ptr(), st.d_c.ptr()}),
                            config.lr_discriminator);
  st.sampler = std::mt19937_64(rng::mix_seed(config.seed, 14));
  return st;
}

std::string save_checkpoint(const Stage1State& state) {
  const auto dir = checkpoint_dir(state.config, "stage1", state.step);
  fs::create_directories(dir);
  torch::save(state.g_ac, (dir / "g_ac.pt").string());
  torch::save(state.g_ca, (dir / "g_ca.pt").string());
  torch::save(state.d_a, (dir / "d_a.pt").string());
  torch::save(state.d_c, (dir / "d_c.pt").string());
  torch::save(*state.opt_g, (dir / "opt_g.pt").string());
  torch::save(*state.opt_d, (dir / "opt_d.pt").string());
  write_meta(dir, "stage1", state.config, state.step, state.sampler);
  return dir.string();
}

Stage1State load_stage1_checkpoint(const std::string& dir) {
  const auto meta = read_meta(dir, "stage1");
  auto st = init_stage1(TrainConfig::from_json(meta["config"]));
  st.step = meta["step"].get<std::int64_t>();
  torch::load(st.g_ac, (fs::path(dir) / "g_ac.pt").string());
  torch::load(st.g_ca, (fs::path(dir) / "g_ca.pt").string());
  torch::load(st.d_a, (fs::path(dir) / "d_a.pt").string());
  torch::load(st.d_c, (fs::path(dir) / "d_c.pt").string());
  torch::load(*st.opt_g, (fs::path(dir) / "opt_g.pt").string());
  torch::load(*st.opt_d, (fs::path(dir) / "opt_d.pt").string());
  st.sampler = rng::deserialize(meta["sampler"].get<std::string>());
  return st;
}

static void freeze(networks::ResnetGenerator& g) {
  for (auto& p : g->parameters()) p.set_requires_grad(false);
  g->eval();
}

Stage2State init_stage2(const TrainConfig& config, const std::string& stage1_ckpt) {
  config.validate();
  auto stage1 = load_stage1_checkpoint(stage1_ckpt);
  Stage2State st;
  st.config = config;
  st.g_ac = stage1.g_ac;
  st.g_ca = stage1.g_ca;
  freeze(st.g_ac);
  freeze(st.g_ca);
  st.g_ab = networks::build_generator(config.generator_spec,
                                      rng::mix_seed(config.seed, 20));
  st.d_b = networks::build_discriminator(config.discriminator_spec,
                                         rng::mix_seed(config.seed, 21));
  st.opt_g = make_optimizer(config.optimizer, st.g_ab->parameters(),
                            config.lr_generator);
  st.opt_d = make_optimizer(config.optimizer, st.d_b->parameters(),
                            config.lr_discriminator);
  st.sampler = std::mt19937_64(rng::mix_seed(config.seed, 22));
  return st;
}

std::string save_checkpoint(const Stage2State& state) {
  const auto dir = checkpoint_dir(state.config, "stage2", state.step);
  fs::create_directories(dir);
  torch::save(state.g_ab, (dir / "g_ab.pt").string());
  torch::save(state.d_b, (dir / "d_b.pt").string());
  torch::save(state.g_ac, (dir / "g_ac.pt").string());
  torch::save(state.g_ca, (dir / "g_ca.pt").string());
  torch::save(*state.opt_g, (dir / "opt_g.pt").string());
  torch::save(*state.opt_d, (dir / "opt_d.pt").string());
  write_meta(dir, "stage2", state.config, state.step, state.sampler);
  return dir.string();
}

Stage2State load_stage2_checkpoint(const std::string& dir) {
  const auto meta = read_meta(dir, "stage2");
  const auto config = TrainConfig::from_json(meta["config"]);
  Stage2State st;
  st.config = config;
  st.step = meta["step"].get<std::int64_t>();
  st.g_ab = networks::ResnetGenerator(config.generator_spec);
  st.d_b = networks::PatchDiscriminator(config.discriminator_spec);
  st.g_ac = networks::ResnetGenerator(config.generator_spec);
  st.g_ca = networks::ResnetGenerator(config.generator_spec);
  torch::load(st.g_ab, (fs::path(dir) / "g_ab.pt").string());
  torch::load(st.d_b, (fs::path(dir) / "d_b.pt").string());
  torch::load(st.g_ac, (fs::path(dir) / "g_ac.pt").string());
  torch::load(st.g_ca, (fs::path(dir) / "g_ca.pt").string());
  freeze(st.g_ac);
  freeze(st.g_ca);
  st.opt_g = make_optimizer(config.optimizer, st.g_ab->parameters(),
                            config.lr_generator);
  st.opt_d = make_optimizer(config.optimizer, st.d_b->parameters(),
                            config.lr_discriminator);
  torch::load(*st.opt_g, (fs::path(dir) / "opt_g.pt").string());
  torch::load(*st.opt_d, (fs::path(dir) / "opt_d.pt").string());
  st.sampler = rng::deserialize(meta["sampler"].get<std::string>());
  return st;
}

Stage1State train_stage1(const TrainConfig& config, const data::PatchDataset& a,
                         const data::PatchDataset& b, const data::PatchDataset& c,
                         const std::string& resume_ckpt) {
  config.validate();
  if (config.single_thread) at::set_num_threads(1);
  Stage1State st = resume_ckpt.empty() ? init_stage1(config)
                                       : load_stage1_checkpoint(resume_ckpt);
  st.config = config;

  StepLog log(config, "stage1");
  const bool use_supervision =
      config.weights.lambda_sup_e > 0.0 || config.weights.lambda_sup_d > 0.0;
  data::SampleOptions sample_options;
  sample_options.labeled_fraction =
      use_supervision ? config.labeled_fraction : 0.0;
  const auto pseudo_if = stain::pseudo_if_transform(config.stain_matrix);

  for (std::int64_t step = st.step + 1; step <= config.steps; ++step) {
    auto batch =
        data::sample_batch(a, b, c, config.batch_size, st.sampler, sample_options);

    torch::Tensor fake_c_detached, fake_a_detached;
    {
      torch::NoGradGuard no_grad;
      fake_c_detached = st.g_ac->forward(batch.x_a);
      fake_a_detached = st.g_ca->forward(batch.x_c);
    }
    st.opt_d->zero_grad();
    auto d_loss = losses::lsgan_discriminator_loss(st.d_a->forward(batch.x_a),
                                                   st.d_a->forward(fake_a_detached)) +
                  losses::lsgan_discriminator_loss(st.d_c->forward(batch.x_c),
                                                   st.d_c->forward(fake_c_detached));
    d_loss.backward();
    st.opt_d->step();

    st.opt_g->zero_grad();
    auto fake_c = st.g_ac->forward(batch.x_a);
    auto rec_a = st.g_ca->forward(fake_c);
    auto fake_a = st.g_ca->forward(batch.x_c);
    auto rec_c = st.g_ac->forward(fake_a);

    std::map<std::string, torch::Tensor> terms;
    terms["adversarial"] = losses::lsgan_generator_loss(st.d_c->forward(fake_c)) +
                           losses::lsgan_generator_loss(st.d_a->forward(fake_a));
    terms["cycle"] = losses::cycle_loss(batch.x_a, rec_a) +
                     losses::cycle_loss(batch.x_c, rec_c);
    torch::Tensor pseudo_target;
    {
      torch::NoGradGuard no_grad;
      pseudo_target = pseudo_if(batch.x_a);
    }
    terms["stain_guidance"] = losses::stain_guidance_loss(fake_c, pseudo_target);
    terms["eosin_absence"] = losses::eosin_absence_loss(st.g_ac->forward(batch.x_b));
    if (use_supervision) {
      if (config.weights.lambda_sup_e > 0.0 &&
          batch.mask_e.sum().item<double>() > 0.0) {
        terms["sup_e"] = losses::supervised_separation_loss(
            fake_c, batch.mask_e, stain::kChannelE, config.separation_variant);
      }
      if (config.weights.lambda_sup_d > 0.0 &&
          batch.mask_d.sum().item<double>() > 0.0) {
        terms["sup_d"] = losses::supervised_separation_loss(
            fake_c, batch.mask_d, stain::kChannelD, config.separation_variant);
      }
    }

    auto [total, report] = losses::total_generator_loss(terms, config.weights, 1);
    require_finite_total(total);
    total.backward();
    st.opt_g->step();
    st.step = step;
    log.record(1, step, d_loss.item<double>(), report);

    if (step % config.checkpoint_interval == 0 && step != config.steps) {
      save_checkpoint(st);
    }
  }
  save_checkpoint(st);
  return st;
}

Stage2State train_stage2(const TrainConfig& config, const data::PatchDataset& a,
                         const data::PatchDataset& b,
                         const std::string& stage1_ckpt,
                         const std::string& resume_ckpt) {
  config.validate();
  if (config.single_thread) at::set_num_threads(1);
  Stage2State st = resume_ckpt.empty() ? init_stage2(config, stage1_ckpt)
                                       : load_stage2_checkpoint(resume_ckpt);
  st.config = config;

  StepLog log(config, "stage2");
  const stain::ImageTransform g_ac_fn = [&](const torch::Tensor& x) {
    return st.g_ac->forward(x);
  };
  const stain::ImageTransform g_ca_fn = [&](const torch::Tensor& x) {
    return st.g_ca->forward(x);
  };

  for (std::int64_t step = st.step + 1; step <= config.steps; ++step) {
    auto x_a = stack_images(a, config.batch_size, st.sampler);
    auto x_b = stack_images(b, config.batch_size, st.sampler);
    auto target = compute_f_ab(x_a, g_ac_fn, g_ca_fn, config.alpha);

    torch::Tensor fake_b_detached;
    {
      torch::NoGradGuard no_grad;
      fake_b_detached = st.g_ab->forward(x_a);
    }
    st.opt_d->zero_grad();
    auto d_loss = losses::lsgan_discriminator_loss(
        st.d_b->forward(x_b), st.d_b->forward(fake_b_detached));
    d_loss.backward();
    st.opt_d->step();

    st.opt_g->zero_grad();
    auto fake_b = st.g_ab->forward(x_a);
    std::map<std::string, torch::Tensor> terms;
    terms["adversarial"] = losses::lsgan_generator_loss(st.d_b->forward(fake_b));
    terms["guidance"] = losses::guidance_loss(fake_b, target);
    auto [total, report] = losses::total_generator_loss(terms, config.weights, 2);
    require_finite_total(total);
    total.backward();
    st.opt_g->step();
    st.step = step;
    log.record(2, step, d_loss.item<double>(), report);

    if (step % config.checkpoint_interval == 0 && step != config.steps) {
      save_checkpoint(st);
    }
  }
  save_checkpoint(st);
  return st;
}

}  // namespace stainshift::trainer
