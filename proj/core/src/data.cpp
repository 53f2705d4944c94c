#include "stainshift/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "stainshift/image_io.hpp"
#include "stainshift/phantom.hpp"

namespace stainshift::data {

namespace fs = std::filesystem;

PatchDataset::PatchDataset(std::string root, std::string domain,
                           std::vector<PatchRecord> records)
    : root_(std::move(root)), domain_(std::move(domain)),
      records_(std::move(records)) {
  if (records_.empty()) {
    throw std::invalid_argument("PatchDataset: empty dataset for domain " + domain_);
  }
  std::sort(records_.begin(), records_.end(),
            [](const PatchRecord& a, const PatchRecord& b) {
              return a.image_path < b.image_path;
            });

  images_.reserve(records_.size());
  masks_e_.resize(records_.size());
  masks_d_.resize(records_.size());
  for (size_t i = 0; i < records_.size(); ++i) {
    const auto& rec = records_[i];
    if (!fs::exists(rec.image_path)) {
      throw std::runtime_error("PatchDataset: missing image " + rec.image_path);
    }
    auto img = imageio::read_rgb8_bytes(rec.image_path);
    if (images_.empty()) {
      height_ = img.size(1);
      width_ = img.size(2);
    } else if (img.size(1) != height_ || img.size(2) != width_) {
      throw std::runtime_error("PatchDataset: patch size mismatch at " +
                               rec.image_path);
    }
    images_.push_back(img);

    auto load_mask = [&](const std::optional<std::string>& mp) -> torch::Tensor {
      if (!mp) return {};
      if (!fs::exists(*mp)) {
        throw std::runtime_error("PatchDataset: missing mask " + *mp);
      }
      auto m = imageio::read_gray8(*mp);
      if (m.size(0) != height_ || m.size(1) != width_) {
        throw std::runtime_error("PatchDataset: mask size mismatch at " + *mp);
      }
      return m.gt(0.5).to(torch::kFloat32).unsqueeze(0);
    };
    masks_e_[i] = load_mask(rec.mask_e_path);
    masks_d_[i] = load_mask(rec.mask_d_path);
    if (masks_e_[i].defined() && masks_d_[i].defined()) {
      labeled_.push_back(static_cast<std::int64_t>(i));
    } else {
      unlabeled_.push_back(static_cast<std::int64_t>(i));
    }
  }
}

const PatchRecord& PatchDataset::record(std::int64_t index) const {
  return records_.at(static_cast<size_t>(index));
}

torch::Tensor PatchDataset::image(std::int64_t index) const {
  return images_.at(static_cast<size_t>(index)).to(torch::kFloat32) / 255.0f;
}

bool PatchDataset::has_labels(std::int64_t index) const {
  return masks_e_.at(static_cast<size_t>(index)).defined() &&
         masks_d_.at(static_cast<size_t>(index)).defined();
}

torch::Tensor PatchDataset::mask_e(std::int64_t index) const {
  const auto& m = masks_e_.at(static_cast<size_t>(index));
  if (!m.defined()) {
    throw std::logic_error("PatchDataset: record has no eosin mask");
  }
  return m;
}

torch::Tensor PatchDataset::mask_d(std::int64_t index) const {
  const auto& m = masks_d_.at(static_cast<size_t>(index));
  if (!m.defined()) {
    throw std::logic_error("PatchDataset: record has no DAB mask");
  }
  return m;
}

namespace {

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<PatchRecord> records_from_directory(const fs::path& dir) {
  std::vector<PatchRecord> records;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto path = entry.path().string();
    if (!has_suffix(path, ".png")) continue;
    if (has_suffix(path, "_me.png") || has_suffix(path, "_md.png")) continue;
    PatchRecord rec;
    rec.image_path = path;
    const auto stem = path.substr(0, path.size() - 4);
    if (fs::exists(stem + "_me.png")) rec.mask_e_path = stem + "_me.png";
    if (fs::exists(stem + "_md.png")) rec.mask_d_path = stem + "_md.png";
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<PatchRecord> records_from_manifest(const fs::path& manifest_path,
                                               const std::string& domain) {
  auto manifest = phantom::CorpusManifest::from_jsonl_file(manifest_path.string());
  const auto root = manifest_path.parent_path();

  std::map<std::string, PatchRecord> by_key;  // "scene" keyed within the domain
  std::map<std::string, std::pair<std::string, std::string>> masks;
  for (const auto& r : manifest.records) {
    if (r.domain != domain || r.split != "train") continue;
    const auto key = std::to_string(r.scene);
    if (r.role == "image") {
      by_key[key].image_path = (root / r.path).string();
    } else if (r.role == "mask_e") {
      masks[key].first = (root / r.path).string();
    } else if (r.role == "mask_d") {
      masks[key].second = (root / r.path).string();
    }
  }

  std::vector<PatchRecord> records;
  records.reserve(by_key.size());
  for (auto& [key, rec] : by_key) {
    if (rec.image_path.empty()) {
      throw std::runtime_error("load_dataset: manifest scene without image");
    }
    auto it = masks.find(key);
    if (it != masks.end()) {
      rec.mask_e_path = it->second.first;
      rec.mask_d_path = it->second.second;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace

PatchDataset load_dataset(const std::string& manifest_or_dir,
                          const std::string& domain) {
  const fs::path path(manifest_or_dir);
  if (!fs::exists(path)) {
    throw std::runtime_error("load_dataset: path does not exist: " +
                             manifest_or_dir);
  }
  std::vector<PatchRecord> records;
  std::string root;
  if (fs::is_directory(path)) {
    // A directory containing manifest.jsonl is treated as a corpus root.
    if (fs::exists(path / "manifest.jsonl")) {
      records = records_from_manifest(path / "manifest.jsonl", domain);
    } else {
      records = records_from_directory(path);
    }
    root = path.string();
  } else {
    records = records_from_manifest(path, domain);
    root = path.parent_path().string();
  }
  return PatchDataset(root, domain, std::move(records));
}

std::int64_t draw_index(const PatchDataset& dataset, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int64_t> dist(0, dataset.size() - 1);
  return dist(rng);
}

std::int64_t draw_index_a(const PatchDataset& dataset, std::mt19937_64& rng,
                          double labeled_fraction) {
  if (labeled_fraction < 0.0 || labeled_fraction > 1.0) {
    throw std::invalid_argument("draw_index_a: labeled_fraction out of [0,1]");
  }
  const auto& labeled = dataset.labeled_indices();
  const auto& unlabeled = dataset.unlabeled_indices();
  if (labeled_fraction == 0.0 || labeled.empty() || unlabeled.empty()) {
    return draw_index(dataset, rng);
  }
  std::bernoulli_distribution pick_labeled(labeled_fraction);
  const auto& pool = pick_labeled(rng) ? labeled : unlabeled;
  std::uniform_int_distribution<size_t> dist(0, pool.size() - 1);
  return pool[dist(rng)];
}

namespace {

torch::Tensor maybe_flip(torch::Tensor t, bool h, bool v) {
  if (h) t = t.flip(-1);
  if (v) t = t.flip(-2);
  return t;
}

}  // namespace

UnpairedBatch sample_batch(const PatchDataset& a, const PatchDataset& b,
                           const PatchDataset& c, std::int64_t batch_size,
                           std::mt19937_64& rng, const SampleOptions& options) {
  if (batch_size < 1) {
    throw std::invalid_argument("sample_batch: batch_size must be >= 1");
  }
  std::bernoulli_distribution coin(0.5);

  std::vector<torch::Tensor> xs_a, xs_b, xs_c, mes, mds;
  auto labels_present = torch::zeros({batch_size}, torch::kBool);
  const auto empty_mask = torch::zeros({1, a.height(), a.width()}, torch::kFloat32);
  for (std::int64_t i = 0; i < batch_size; ++i) {
    const bool h = options.hflip && coin(rng);
    const bool v = options.vflip && coin(rng);
    const auto ia = draw_index_a(a, rng, options.labeled_fraction);
    xs_a.push_back(maybe_flip(a.image(ia), h, v));
    if (a.has_labels(ia)) {
      labels_present[i] = true;
      mes.push_back(maybe_flip(a.mask_e(ia), h, v));
      mds.push_back(maybe_flip(a.mask_d(ia), h, v));
    } else {
      mes.push_back(empty_mask);
      mds.push_back(empty_mask);
    }
    xs_b.push_back(maybe_flip(b.image(draw_index(b, rng)), h, v));
    xs_c.push_back(maybe_flip(c.image(draw_index(c, rng)), h, v));
  }

  UnpairedBatch batch;
  batch.x_a = torch::stack(xs_a);
  batch.x_b = torch::stack(xs_b);
  batch.x_c = torch::stack(xs_c);
  batch.labels_present = labels_present;
  batch.mask_e = torch::stack(mes);
  batch.mask_d = torch::stack(mds);
  return batch;
}

}  // namespace stainshift::data
