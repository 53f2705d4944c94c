#include "stainshift/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "stainshift/image_io.hpp"
#include "stainshift/networks.hpp"
#include "stainshift/phantom.hpp"
#include "stainshift/rng.hpp"

namespace stainshift::evalkit {

namespace fs = std::filesystem;

namespace {

// Keeps a perfectly separated panel (1-AUC = 0) inside harmonic_mean's domain.
constexpr double kPanelFloor = 1e-12;

torch::Tensor to_mask(const torch::Tensor& gray) {
  return gray.gt(0.5).to(torch::kFloat32).unsqueeze(0);
}

void append_scores(std::vector<double>& out, const torch::Tensor& values) {
  auto flat = values.to(torch::kFloat32).contiguous();
  const float* data = flat.data_ptr<float>();
  out.reserve(out.size() + static_cast<std::size_t>(flat.numel()));
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    out.push_back(static_cast<double>(data[i]));
  }
}

void require_finite_scores(const std::vector<double>& scores,
                           const char* what) {
  for (double v : scores) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(what) + ": non-finite score");
    }
  }
}

}  // namespace

PosteriorModelImpl::PosteriorModelImpl(std::int64_t width) : width_(width) {
  if (width < 1) {
    throw std::invalid_argument("posterior model: width must be >= 1");
  }
  body_ = torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(3, width, 3).padding(1)),
      torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(width, width, 3).padding(1)),
      torch::nn::ReLU(),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 1, 1)),
      torch::nn::Sigmoid());
  register_module("body", body_);
}

torch::Tensor PosteriorModelImpl::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != 3) {
    throw std::invalid_argument("posterior model: expected (N,3,H,W) input");
  }
  return body_->forward(x);
}

void SurrogateConfig::validate() const {
  if (width < 1) {
    throw std::invalid_argument("SurrogateConfig: width must be >= 1");
  }
  if (steps < 0) {
    throw std::invalid_argument("SurrogateConfig: steps must be >= 0");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("SurrogateConfig: batch_size must be >= 1");
  }
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("SurrogateConfig: lr must be >= 0");
  }
}

SurrogateConfig SurrogateConfig::from_json(const nlohmann::json& j) {
  SurrogateConfig c;
  c.width = j.value("width", c.width);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::ordered_json SurrogateConfig::to_json() const {
  return {{"width", width},
          {"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"seed", seed}};
}

std::vector<SbExample> load_sb_split(const std::string& manifest_path) {
  auto manifest = phantom::CorpusManifest::from_jsonl_file(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  std::map<std::int64_t, std::string> images, masks;
  for (const auto& r : manifest.records) {
    if (r.split != "sb") continue;
    if (r.role == "image") {
      images[r.scene] = (root / r.path).string();
    } else if (r.role == "mask_nuclei") {
      masks[r.scene] = (root / r.path).string();
    }
  }
  if (images.empty()) {
    throw std::runtime_error("load_sb_split: manifest has no sb images");
  }
  if (images.size() != masks.size()) {
    throw std::runtime_error("load_sb_split: image/mask records do not pair up");
  }

  std::vector<SbExample> out;
  out.reserve(images.size());
  for (const auto& [scene, path] : images) {
    auto it = masks.find(scene);
    if (it == masks.end()) {
      throw std::runtime_error("load_sb_split: scene missing its nucleus mask");
    }
    SbExample ex;
    ex.image = imageio::read_rgb8(path);
    ex.mask_nuclei = to_mask(imageio::read_gray8(it->second));
    if (ex.mask_nuclei.size(1) != ex.image.size(1) ||
        ex.mask_nuclei.size(2) != ex.image.size(2)) {
      throw std::runtime_error("load_sb_split: mask/patch misalignment");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

PosteriorModel train_surrogate_sb(const std::vector<SbExample>& examples,
                                  const SurrogateConfig& config) {
  config.validate();
  if (examples.empty()) {
    throw std::invalid_argument("train_surrogate_sb: empty dataset");
  }
  const auto height = examples.front().image.size(1);
  const auto width = examples.front().image.size(2);
  for (const auto& ex : examples) {
    if (ex.image.dim() != 3 || ex.image.size(0) != 3 ||
        ex.mask_nuclei.dim() != 3 || ex.mask_nuclei.size(0) != 1 ||
        ex.image.size(1) != height || ex.image.size(2) != width ||
        ex.mask_nuclei.size(1) != height || ex.mask_nuclei.size(2) != width) {
      throw std::invalid_argument("train_surrogate_sb: mask/patch misalignment");
    }
  }

  PosteriorModel model(config.width);
  networks::init_parameters(*model, rng::mix_seed(config.seed, 30));
  torch::optim::Adam opt(model->parameters(),
                         torch::optim::AdamOptions(config.lr));
  std::mt19937_64 sampler(rng::mix_seed(config.seed, 31));
  std::uniform_int_distribution<std::int64_t> pick(
      0, static_cast<std::int64_t>(examples.size()) - 1);

  for (std::int64_t step = 0; step < config.steps; ++step) {
    std::vector<torch::Tensor> imgs, targets;
    imgs.reserve(config.batch_size);
    targets.reserve(config.batch_size);
    for (std::int64_t b = 0; b < config.batch_size; ++b) {
      const auto i = pick(sampler);
      imgs.push_back(examples[i].image);
      targets.push_back(examples[i].mask_nuclei);
    }
    opt.zero_grad();
    auto posterior = model->forward(torch::stack(imgs));
    auto loss = torch::binary_cross_entropy(posterior, torch::stack(targets));
    loss.backward();
    opt.step();
  }
  return model;
}

torch::Tensor posterior_map(const PosteriorModel& model,
                            const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw std::invalid_argument("posterior_map: expected (3,H,W) image");
  }
  PosteriorModel m = model;
  torch::NoGradGuard no_grad;
  return m->forward(image.to(torch::kFloat32).unsqueeze(0)).squeeze(0);
}

void save_posterior_model(const PosteriorModel& model,
                          const SurrogateConfig& config,
                          const std::string& dir) {
  fs::create_directories(dir);
  torch::save(model, (fs::path(dir) / "sb.pt").string());
  nlohmann::ordered_json meta;
  meta["version"] = kPosteriorModelVersion;
  meta["config"] = config.to_json();
  std::ofstream out(fs::path(dir) / "meta.json", std::ios::binary);
  if (!out) {
    throw std::runtime_error("save_posterior_model: cannot write meta.json");
  }
  out << meta.dump(2) << "\n";
}

PosteriorModel load_posterior_model(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "meta.json");
  if (!in) {
    throw std::runtime_error("load_posterior_model: missing meta.json in " +
                             dir);
  }
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(
        std::string("load_posterior_model: corrupt meta.json: ") + e.what());
  }
  if (!meta.contains("version") ||
      meta["version"].get<int>() != kPosteriorModelVersion) {
    throw std::runtime_error("load_posterior_model: version mismatch");
  }
  auto config = SurrogateConfig::from_json(meta.at("config"));
  PosteriorModel model(config.width);
  torch::load(model, (fs::path(dir) / "sb.pt").string());
  return model;
}

double auc_from_scores(const std::vector<double>& pos,
                       const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) {
    throw std::invalid_argument("auc_from_scores: empty score list");
  }
  require_finite_scores(pos, "auc_from_scores");
  require_finite_scores(neg, "auc_from_scores");

  auto p = pos;
  auto n = neg;
  std::sort(p.begin(), p.end());
  std::sort(n.begin(), n.end());

  // Walk the sorted positives; `lo` negatives are strictly below the current
  // positive and [lo, hi) are exactly equal. Counts are exact integers, so
  // the result matches the brute-force all-pairs statistic bit for bit.
  std::uint64_t wins = 0, ties = 0;
  std::size_t lo = 0, hi = 0;
  for (double v : p) {
    while (lo < n.size() && n[lo] < v) ++lo;
    if (hi < lo) hi = lo;
    while (hi < n.size() && n[hi] <= v) ++hi;
    wins += lo;
    ties += hi - lo;
  }
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
         (static_cast<double>(p.size()) * static_cast<double>(n.size()));
}

nlohmann::ordered_json CumulativeCurve::to_json() const {
  return {{"edges", edges}, {"cumulative", cumulative}};
}

CumulativeCurve CumulativeCurve::from_json(const nlohmann::json& j) {
  CumulativeCurve c;
  c.edges = j.at("edges").get<std::vector<double>>();
  c.cumulative = j.at("cumulative").get<std::vector<double>>();
  if (c.edges.size() != c.cumulative.size()) {
    throw std::invalid_argument("CumulativeCurve: edge/value length mismatch");
  }
  return c;
}

CumulativeCurve cumulative_histogram(const std::vector<double>& scores,
                                     int n_bins) {
  if (scores.empty()) {
    throw std::invalid_argument("cumulative_histogram: empty scores");
  }
  if (n_bins < 2) {
    throw std::invalid_argument("cumulative_histogram: n_bins must be >= 2");
  }
  for (double v : scores) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument(
          "cumulative_histogram: scores must lie in [0,1]");
    }
  }
  auto sorted = scores;
  std::sort(sorted.begin(), sorted.end());

  CumulativeCurve curve;
  curve.edges.reserve(n_bins);
  curve.cumulative.reserve(n_bins);
  const double total = static_cast<double>(sorted.size());
  for (int i = 1; i <= n_bins; ++i) {
    const double edge = static_cast<double>(i) / n_bins;
    const auto count =
        std::upper_bound(sorted.begin(), sorted.end(), edge) - sorted.begin();
    curve.edges.push_back(edge);
    curve.cumulative.push_back(static_cast<double>(count) / total);
  }
  return curve;
}

double harmonic_mean(double a, double b) {
  if (!std::isfinite(a) || !std::isfinite(b) || a <= 0.0 || b <= 0.0) {
    throw std::invalid_argument("harmonic_mean: arguments must be positive");
  }
  return 2.0 * a * b / (a + b);
}

std::vector<EvalItem> load_eval_split(const std::string& manifest_path) {
  auto manifest = phantom::CorpusManifest::from_jsonl_file(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  std::map<std::int64_t, std::map<std::string, std::string>> by_scene;
  for (const auto& r : manifest.records) {
    if (r.split != "eval") continue;
    by_scene[r.scene][r.role] = (root / r.path).string();
  }
  if (by_scene.empty()) {
    throw std::runtime_error("load_eval_split: manifest has no eval records");
  }

  std::vector<EvalItem> out;
  out.reserve(by_scene.size());
  for (const auto& [scene, roles] : by_scene) {
    for (const char* role :
         {"image", "monoplex_gt", "mask_nuclei", "mask_background"}) {
      if (!roles.count(role)) {
        throw std::runtime_error(std::string("load_eval_split: scene missing ") +
                                 role);
      }
    }
    EvalItem item;
    item.duplex = imageio::read_rgb8(roles.at("image"));
    item.monoplex_gt = imageio::read_rgb8(roles.at("monoplex_gt"));
    item.mask_nuclei = to_mask(imageio::read_gray8(roles.at("mask_nuclei")));
    item.mask_background =
        to_mask(imageio::read_gray8(roles.at("mask_background")));
    for (const auto& t :
         {item.monoplex_gt, item.mask_nuclei, item.mask_background}) {
      if (t.size(-2) != item.duplex.size(1) ||
          t.size(-1) != item.duplex.size(2)) {
        throw std::runtime_error("load_eval_split: mask/patch misalignment");
      }
    }
    out.push_back(std::move(item));
  }
  return out;
}

nlohmann::ordered_json MethodMetrics::to_json() const {
  return {{"nucleus_one_minus_auc", nucleus_one_minus_auc},
          {"background_one_minus_auc", background_one_minus_auc},
          {"harmonic_mean", harmonic_mean},
          {"nucleus_curve", nucleus_curve.to_json()},
          {"background_curve", background_curve.to_json()}};
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json by_method;
  for (const auto& [name, metrics] : methods) {
    by_method[name] = metrics.to_json();
  }
  return {{"histogram_bins", histogram_bins}, {"methods", by_method}};
}

MetricsReport evaluate_methods(const std::vector<EvalItem>& items,
                               const std::map<std::string, MethodFn>& methods,
                               const PosteriorModel& sb,
                               const EvaluateOptions& options) {
  if (items.empty()) {
    throw std::invalid_argument("evaluate_methods: empty eval split");
  }
  if (!methods.count("identity")) {
    throw std::invalid_argument(
        "evaluate_methods: methods must include the `identity` baseline");
  }
  for (const auto& item : items) {
    if (item.duplex.dim() != 3 || item.duplex.size(0) != 3 ||
        item.mask_nuclei.sizes() !=
            torch::IntArrayRef({1, item.duplex.size(1), item.duplex.size(2)}) ||
        item.mask_background.sizes() != item.mask_nuclei.sizes()) {
      throw std::invalid_argument("evaluate_methods: mask/patch misalignment");
    }
  }

  torch::NoGradGuard no_grad;
  MetricsReport report;
  report.histogram_bins = options.histogram_bins;
  for (const auto& [name, fn] : methods) {
    std::vector<double> nucleus_scores, background_scores;
    for (const auto& item : items) {
      auto translated = fn(item);
      if (!translated.defined() ||
          translated.sizes() != item.duplex.sizes()) {
        throw std::runtime_error("evaluate_methods: method `" + name +
                                 "` returned a mismatched patch");
      }
      auto posterior = posterior_map(sb, translated);
      append_scores(nucleus_scores,
                    posterior.masked_select(item.mask_nuclei.gt(0.5)));
      append_scores(background_scores,
                    posterior.masked_select(item.mask_background.gt(0.5)));
    }
    if (nucleus_scores.empty() || background_scores.empty()) {
      throw std::runtime_error(
          "evaluate_methods: a mask class selects no pixels");
    }

    std::vector<double> nucleus_complement, background_complement;
    nucleus_complement.reserve(nucleus_scores.size());
    background_complement.reserve(background_scores.size());
    for (double v : nucleus_scores) nucleus_complement.push_back(1.0 - v);
    for (double v : background_scores) background_complement.push_back(1.0 - v);

    MethodMetrics m;
    m.nucleus_one_minus_auc =
        1.0 - auc_from_scores(nucleus_scores, background_scores);
    m.background_one_minus_auc =
        1.0 - auc_from_scores(background_complement, nucleus_complement);
    m.harmonic_mean =
        harmonic_mean(std::max(m.nucleus_one_minus_auc, kPanelFloor),
                      std::max(m.background_one_minus_auc, kPanelFloor));
    m.nucleus_curve =
        cumulative_histogram(nucleus_scores, options.histogram_bins);
    m.background_curve =
        cumulative_histogram(background_complement, options.histogram_bins);
    report.methods.emplace(name, std::move(m));
  }
  return report;
}

}  // namespace stainshift::evalkit
