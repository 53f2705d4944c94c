#include "stainshift/stain.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace stainshift::stain {

namespace {

void check_channel_axis(const torch::Tensor& t, const char* what) {
  if (t.dim() < 3 || t.size(-3) != 3) {
    throw std::invalid_argument(std::string(what) +
                                ": expected shape (..., 3, H, W), got " +
                                c10::str(t.sizes()));
  }
}

// Multiplies the channel axis (dim -3) by a 3x3 matrix: out_c = sum_k m[c][k] in_k.
torch::Tensor mix_channels(const torch::Tensor& img, const torch::Tensor& m) {
  auto mk = m.to(img.dtype());
  // (..., 3, H, W) x (3,3): contract input channel k against mk[c][k].
  return torch::einsum("ck,...khw->...chw", {mk, img});
}

std::array<std::array<double, 3>, 3> parse_rows(const nlohmann::json& j) {
  const nlohmann::json* arr = &j;
  if (j.is_object()) {
    if (!j.contains("rows")) {
      throw std::invalid_argument("stain matrix json: missing \"rows\"");
    }
    arr = &j.at("rows");
  }
  if (!arr->is_array() || arr->size() != 3) {
    throw std::invalid_argument("stain matrix json: expected 3 rows");
  }
  std::array<std::array<double, 3>, 3> rows{};
  for (int r = 0; r < 3; ++r) {
    const auto& row = (*arr)[r];
    if (!row.is_array() || row.size() != 3) {
      throw std::invalid_argument("stain matrix json: each row needs 3 entries");
    }
    for (int c = 0; c < 3; ++c) rows[r][c] = row[c].get<double>();
  }
  return rows;
}

}  // namespace

StainMatrix::StainMatrix(const std::array<std::array<double, 3>, 3>& rows) {
  for (const auto& row : rows) {
    double norm2 = 0.0;
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("stain matrix: non-finite entry");
      }
      norm2 += v * v;
    }
    if (norm2 < 1e-12) {
      throw std::invalid_argument("stain matrix: zero row");
    }
  }
  rows_ = rows;
  for (auto& row : rows_) {
    double norm = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
    // Skip the division for rows that are already unit length so that
    // serialize/parse round trips are bitwise stable.
    if (std::abs(norm - 1.0) > 1e-12) {
      for (double& v : row) v /= norm;
    }
  }

  auto m = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[r][c] = rows_[r][c];

  auto svals = torch::linalg_svdvals(m);
  double smax = svals[0].item<double>();
  double smin = svals[2].item<double>();
  condition_ = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (!(condition_ < 1e6)) {
    throw std::invalid_argument("stain matrix: singular or ill-conditioned");
  }

  auto inv = torch::linalg_inv(m);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) inverse_[r][c] = inv[r][c].item<double>();
}

StainMatrix StainMatrix::default_hed() {
  // Ruifrok-Johnston style absorption colors for hematoxylin, eosin-like
  // purple and DAB; rows get unit-normalized by the constructor.
  return StainMatrix({{{0.65, 0.70, 0.29},
                       {0.07, 0.99, 0.11},
                       {0.27, 0.57, 0.78}}});
}

StainMatrix StainMatrix::from_json(const std::string& json_text) {
  return StainMatrix(parse_rows(nlohmann::json::parse(json_text)));
}

StainMatrix StainMatrix::from_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("stain matrix: cannot open " + path);
  std::array<std::array<double, 3>, 3> rows{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (!(in >> rows[r][c]))
        throw std::runtime_error("stain matrix: malformed text file " + path);
  return StainMatrix(rows);
}

torch::Tensor StainMatrix::tensor(torch::Dtype dtype) const {
  auto m = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[r][c] = rows_[r][c];
  return m.to(dtype);
}

torch::Tensor StainMatrix::inverse_tensor(torch::Dtype dtype) const {
  auto m = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[r][c] = inverse_[r][c];
  return m.to(dtype);
}

std::string StainMatrix::to_json() const {
  nlohmann::ordered_json j;
  j["rows"] = rows_;
  return j.dump();
}

RestainCoefficients RestainCoefficients::defaults() {
  RestainCoefficients k;
  k.alpha[kChannelH][kChannelH] = 1.0;
  k.alpha[kChannelH][kChannelE] = 0.5;
  k.alpha[kChannelD][kChannelD] = 1.0;
  return k;
}

RestainCoefficients RestainCoefficients::identity() {
  RestainCoefficients k;
  for (int i = 0; i < 3; ++i) k.alpha[i][i] = 1.0;
  return k;
}

RestainCoefficients RestainCoefficients::from_json(const std::string& json_text) {
  auto j = nlohmann::json::parse(json_text);
  RestainCoefficients k;
  if (j.is_array()) {
    k.alpha = parse_rows(j);
  } else if (j.is_object()) {
    // Named entries, e.g. {"hh": 1.0, "eh": 0.5, "dd": 1.0}; key order is
    // <input><output> per the kappa definition, unlisted entries are 0.
    static const std::string axis = "hed";
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      if (key.size() != 2) throw std::invalid_argument("alpha key: " + key);
      auto in = axis.find(key[0]);
      auto out = axis.find(key[1]);
      if (in == std::string::npos || out == std::string::npos) {
        throw std::invalid_argument("alpha key: " + key);
      }
      k.alpha[out][in] = it.value().get<double>();
    }
  } else {
    throw std::invalid_argument("alpha json: expected array or object");
  }
  k.validate();
  return k;
}

torch::Tensor RestainCoefficients::tensor(torch::Dtype dtype) const {
  auto m = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[r][c] = alpha[r][c];
  return m.to(dtype);
}

std::string RestainCoefficients::to_json() const {
  nlohmann::ordered_json j = alpha;
  return j.dump();
}

void RestainCoefficients::validate() const {
  for (const auto& row : alpha)
    for (double v : row)
      if (!std::isfinite(v))
        throw std::invalid_argument("restain coefficients: non-finite entry");
}

torch::Tensor rgb_to_od(const torch::Tensor& rgb, double epsilon) {
  check_channel_axis(rgb, "rgb_to_od");
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) {
    throw std::invalid_argument("rgb_to_od: epsilon must be in (0, 1e-2]");
  }
  if (!torch::isfinite(rgb).all().item<bool>()) {
    throw std::invalid_argument("rgb_to_od: non-finite pixel values");
  }
  if (rgb.min().item<double>() < 0.0 || rgb.max().item<double>() > 1.0) {
    throw std::invalid_argument("rgb_to_od: pixel values outside [0, 1]");
  }
  auto od = -torch::log10((rgb + epsilon) / (1.0 + epsilon));
  return od.clamp_min(0.0);
}

torch::Tensor od_to_rgb(const torch::Tensor& od) {
  check_channel_axis(od, "od_to_rgb");
  return torch::pow(10.0, -od).clamp(0.0, 1.0);
}

torch::Tensor od_to_concentrations(const torch::Tensor& od, const StainMatrix& m) {
  check_channel_axis(od, "od_to_concentrations");
  // od_row = conc_row * M  =>  conc_row = od_row * M^-1; with the channel
  // axis contracted, conc_c = sum_k od_k * Minv[k][c] = (Minv^T)[c][k] od_k.
  auto minv_t = m.inverse_tensor(torch::kFloat64).transpose(0, 1);
  return mix_channels(od, minv_t).clamp_min(0.0);
}

torch::Tensor concentrations_to_od(const torch::Tensor& concentrations,
                                   const StainMatrix& m) {
  check_channel_axis(concentrations, "concentrations_to_od");
  // od_row = conc_row * M  =>  od_c = (M^T)[c][k] conc_k.
  auto mt = m.tensor(torch::kFloat64).transpose(0, 1);
  return mix_channels(concentrations, mt);
}

torch::Tensor restain(const torch::Tensor& concentrations,
                      const RestainCoefficients& alpha) {
  check_channel_axis(concentrations, "restain");
  alpha.validate();
  return mix_channels(concentrations, alpha.tensor(torch::kFloat64))
      .clamp_min(0.0);
}

ImageTransform pseudo_if_transform(const StainMatrix& m, double epsilon) {
  return [m, epsilon](const torch::Tensor& rgb) {
    return od_to_concentrations(rgb_to_od(rgb, epsilon), m).clamp(0.0, 1.0);
  };
}

ImageTransform brightfield_reconstruction_transform(const StainMatrix& m) {
  return [m](const torch::Tensor& concentrations) {
    return od_to_rgb(concentrations_to_od(concentrations, m));
  };
}

}  // namespace stainshift::stain
