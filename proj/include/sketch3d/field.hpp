#pragma once

// Multiresolution hash-grid radiance field.
//
// Density depends on position only: a trunk MLP maps the hash encoding to a
// raw density plus geometry features; a color head maps those features plus
// a spherical-harmonics encoding of the view direction to RGB.
//
// All learnable values live in one flat vector described by ParamLayout so
// that gradients, optimizer state and checkpoints share a single indexing.

#include "sketch3d/common.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace sketch3d {

struct HashGridConfig {
  int num_levels = 8;
  int features_per_level = 2;
  int table_size_log2 = 15;
  int base_resolution = 16;
  double growth_factor = 1.5;
  int mlp_hidden_width = 64;
  int mlp_hidden_layers = 2;
  int direction_encoding_degree = 3;
  int geo_feature_dim = 15;

  void validate() const {
    require(num_levels >= 1, "HashGridConfig: num_levels must be >= 1");
    require(features_per_level >= 1, "HashGridConfig: features_per_level must be >= 1");
    require(table_size_log2 >= 10 && table_size_log2 <= 24,
            "HashGridConfig: table_size_log2 must lie in [10, 24]");
    require(base_resolution >= 2, "HashGridConfig: base_resolution must be >= 2");
    require(growth_factor > 1.0, "HashGridConfig: growth_factor must be > 1");
    require(mlp_hidden_width >= 1, "HashGridConfig: mlp_hidden_width must be >= 1");
    require(mlp_hidden_layers >= 1, "HashGridConfig: mlp_hidden_layers must be >= 1");
    require(direction_encoding_degree >= 0 && direction_encoding_degree <= 3,
            "HashGridConfig: direction_encoding_degree must lie in [0, 3]");
    require(geo_feature_dim >= 0, "HashGridConfig: geo_feature_dim must be >= 0");
  }

  int level_resolution(int level) const {
    return static_cast<int>(std::floor(base_resolution * std::pow(growth_factor, level)));
  }
  std::size_t table_size() const { return std::size_t{1} << table_size_log2; }
  int encoding_dim() const { return num_levels * features_per_level; }
  int sh_dim() const { return (direction_encoding_degree + 1) * (direction_encoding_degree + 1); }

  bool operator==(const HashGridConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

struct DenseLayout {
  int out = 0;
  int in = 0;
  std::size_t weight = 0;  // row-major out x in
  std::size_t bias = 0;
};

struct ParamLayout {
  std::vector<std::size_t> hash_level;  // offset of each level's table (table_size x F)
  std::vector<DenseLayout> trunk;       // hidden layers followed by the output layer
  DenseLayout color_hidden;
  DenseLayout color_out;
  std::vector<TensorInfo> tensors;
  std::size_t total = 0;

  /// Hash tables occupy [0, dense_offset()); dense layers follow.
  std::size_t dense_offset() const { return trunk.empty() ? total : trunk.front().weight; }

  static ParamLayout build(const HashGridConfig& cfg) {
    cfg.validate();
    ParamLayout L;
    auto add = [&L](std::string name, std::vector<int> shape) {
      std::size_t n = 1;
      for (int s : shape) n *= static_cast<std::size_t>(s);
      L.tensors.push_back({std::move(name), std::move(shape), L.total, n});
      L.total += n;
      return L.tensors.back().offset;
    };
    const int T = static_cast<int>(cfg.table_size());
    for (int l = 0; l < cfg.num_levels; ++l)
      L.hash_level.push_back(add("hash_level_" + std::to_string(l), {T, cfg.features_per_level}));
    auto dense = [&add](const std::string& name, int out, int in) {
      DenseLayout d;
      d.out = out;
      d.in = in;
      d.weight = add(name + "_weight", {out, in});
      d.bias = add(name + "_bias", {out});
      return d;
    };
    int in = cfg.encoding_dim();
    for (int h = 0; h < cfg.mlp_hidden_layers; ++h) {
      L.trunk.push_back(dense("trunk_" + std::to_string(h), cfg.mlp_hidden_width, in));
      in = cfg.mlp_hidden_width;
    }
    L.trunk.push_back(dense("trunk_out", 1 + cfg.geo_feature_dim, in));
    L.color_hidden = dense("color_0", cfg.mlp_hidden_width, cfg.geo_feature_dim + cfg.sh_dim());
    L.color_out = dense("color_out", 3, cfg.mlp_hidden_width);
    return L;
  }
};

/// Learnable parameters of the field. Gradients use the same type.
template <typename Scalar>
struct FieldParams {
  HashGridConfig config;
  ParamLayout layout;
  std::vector<Scalar> values;

  FieldParams() = default;
  explicit FieldParams(const HashGridConfig& cfg)
      : config(cfg), layout(ParamLayout::build(cfg)), values(layout.total, Scalar(0)) {}

  FieldParams zeros_like() const {
    FieldParams p;
    p.config = config;
    p.layout = layout;
    p.values.assign(values.size(), Scalar(0));
    return p;
  }

  std::span<Scalar> hash_table(int level) {
    return {values.data() + layout.hash_level[level],
            config.table_size() * config.features_per_level};
  }
  std::span<const Scalar> hash_table(int level) const {
    return {values.data() + layout.hash_level[level],
            config.table_size() * config.features_per_level};
  }

  bool all_finite() const {
    for (Scalar v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename Other>
  FieldParams<Other> cast() const {
    FieldParams<Other> p;
    p.config = config;
    p.layout = layout;
    p.values.assign(values.begin(), values.end());
    return p;
  }
};

/// Hash tables uniform in [-1e-4, 1e-4]; dense weights uniform in
/// +-sqrt(6 / fan_in); biases zero.
template <typename Scalar = float>
FieldParams<Scalar> init_params(const HashGridConfig& config, std::uint64_t seed) {
  config.validate();
  FieldParams<Scalar> p(config);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> table_dist(-1e-4, 1e-4);
  for (int l = 0; l < config.num_levels; ++l)
    for (auto& v : p.hash_table(l)) v = static_cast<Scalar>(table_dist(rng));
  auto init_dense = [&](const DenseLayout& d) {
    const double bound = std::sqrt(6.0 / d.in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < static_cast<std::size_t>(d.out) * d.in; ++i)
      p.values[d.weight + i] = static_cast<Scalar>(dist(rng));
  };
  for (const auto& d : p.layout.trunk) init_dense(d);
  init_dense(p.layout.color_hidden);
  init_dense(p.layout.color_out);
  return p;
}

namespace detail {

inline constexpr std::uint32_t kHashPrimes[3] = {1u, 2654435761u, 805459861u};

inline std::uint32_t spatial_hash(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                                  std::uint32_t mask) {
  return ((x * kHashPrimes[0]) ^ (y * kHashPrimes[1]) ^ (z * kHashPrimes[2])) & mask;
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(20) ? x : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace detail

/// Real spherical harmonics of a unit direction, degrees 0..degree.
template <typename Scalar>
void sh_encode(int degree, Scalar x, Scalar y, Scalar z, Scalar* out) {
  out[0] = Scalar(0.28209479177387814);
  if (degree < 1) return;
  out[1] = Scalar(-0.48860251190291987) * y;
  out[2] = Scalar(0.48860251190291987) * z;
  out[3] = Scalar(-0.48860251190291987) * x;
  if (degree < 2) return;
  const Scalar xx = x * x, yy = y * y, zz = z * z;
  out[4] = Scalar(1.0925484305920792) * x * y;
  out[5] = Scalar(-1.0925484305920792) * y * z;
  out[6] = Scalar(0.94617469575755997) * zz - Scalar(0.31539156525251999);
  out[7] = Scalar(-1.0925484305920792) * x * z;
  out[8] = Scalar(0.54627421529603959) * (xx - yy);
  if (degree < 3) return;
  out[9] = Scalar(0.59004358992664352) * y * (-3 * xx + yy);
  out[10] = Scalar(2.8906114426405538) * x * y * z;
  out[11] = Scalar(0.45704579946446572) * y * (1 - 5 * zz);
  out[12] = Scalar(0.3731763325901154) * z * (5 * zz - 3);
  out[13] = Scalar(0.45704579946446572) * x * (1 - 5 * zz);
  out[14] = Scalar(1.4453057213202769) * z * (xx - yy);
  out[15] = Scalar(0.59004358992664352) * x * (-xx + 3 * yy);
}

/// Activations of one batch of field evaluations, kept for the backward pass.
///
/// Tangent blocks hold derivatives with respect to the three position axes,
/// stacked horizontally: columns [k*B, (k+1)*B) belong to axis k.
template <typename Scalar>
struct FieldWorkspace {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  int batch = 0;
  bool tangents = false;

  std::vector<std::uint32_t> corner_index;  // B x L x 8
  std::vector<Scalar> corner_weight;        // B x L x 8
  std::vector<Scalar> corner_dweight;       // B x L x 8 x 3

  Mat enc;
  Mat enc_tan;
  std::vector<Mat> hidden;
  std::vector<Mat> hidden_tan;
  Mat trunk_out;
  Row raw_density_tan;  // 1 x 3B
  Mat color_in;
  Mat color_hidden;
  Mat color_raw;

  Row sigma;
  Mat color;       // 3 x B
  Mat grad_sigma;  // 3 x B, d sigma / d x
};

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
Eigen::Map<const RowMat<Scalar>> weight(const FieldParams<Scalar>& p, const DenseLayout& d) {
  return {p.values.data() + d.weight, d.out, d.in};
}

template <typename Scalar>
Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bias(const FieldParams<Scalar>& p,
                                                                const DenseLayout& d) {
  return {p.values.data() + d.bias, d.out};
}

template <typename Scalar>
Eigen::Map<RowMat<Scalar>> weight_grad(Scalar* g, const DenseLayout& d) {
  return {g + d.weight, d.out, d.in};
}

template <typename Scalar>
Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bias_grad(Scalar* g, const DenseLayout& d) {
  return {g + d.bias, d.out};
}

/// Zeroes entries of `grad` where the matching activation is not positive.
/// `grad` may hold several column blocks shaped like `act` (tangent blocks).
template <typename Scalar>
void mask_inactive(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& act,
                   Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& grad) {
  const Eigen::Index n = act.size();
  const Scalar* a = act.data();
  Scalar* g = grad.data();
  for (Eigen::Index off = 0; off < grad.size(); off += n)
    for (Eigen::Index i = 0; i < n; ++i) g[off + i] = a[i] > Scalar(0) ? g[off + i] : Scalar(0);
}

inline std::vector<int> level_resolutions(const HashGridConfig& cfg) {
  std::vector<int> r(cfg.num_levels);
  for (int l = 0; l < cfg.num_levels; ++l) r[l] = cfg.level_resolution(l);
  return r;
}

/// Corner indices, trilinear weights and (when `dw` is non-null) weight
/// derivatives for one sample. `resolution` holds one entry per level.
template <typename Scalar>
void encode_corners(const HashGridConfig& cfg, const int* resolution, const Scalar pos[3],
                    std::uint32_t* idx, Scalar* w, Scalar* dw) {
  const std::uint32_t mask = static_cast<std::uint32_t>(cfg.table_size() - 1);
  for (int l = 0; l < cfg.num_levels; ++l) {
    const int res = resolution[l];
    std::uint32_t cell[3];
    Scalar frac[3];
    Scalar dfrac[3];
    for (int a = 0; a < 3; ++a) {
      Scalar u = (pos[a] + Scalar(1)) * Scalar(0.5);
      Scalar du = Scalar(0.5) * res;
      if (u <= Scalar(0)) {
        u = Scalar(0);
        du = Scalar(0);
      } else if (u >= Scalar(1)) {
        u = Scalar(1);
        du = Scalar(0);
      }
      const Scalar s = u * Scalar(res);
      int c = static_cast<int>(std::floor(s));
      if (c > res - 1) c = res - 1;
      if (c < 0) c = 0;
      cell[a] = static_cast<std::uint32_t>(c);
      frac[a] = s - Scalar(c);
      dfrac[a] = du;
    }
    // Corner c uses offset bit (c >> a) & 1 on axis a; the hash is a xor of
    // per-axis terms, so each axis contributes two precomputed values.
    std::uint32_t h[3][2];
    Scalar wt[3][2], dwt[3][2];
    for (int a = 0; a < 3; ++a) {
      h[a][0] = cell[a] * kHashPrimes[a];
      h[a][1] = (cell[a] + 1u) * kHashPrimes[a];
      wt[a][0] = Scalar(1) - frac[a];
      wt[a][1] = frac[a];
      dwt[a][0] = -dfrac[a];
      dwt[a][1] = dfrac[a];
    }
    std::uint32_t* li = idx + l * 8;
    Scalar* lw = w + l * 8;
    for (int corner = 0; corner < 8; ++corner) {
      const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
      li[corner] = (h[0][bx] ^ h[1][by] ^ h[2][bz]) & mask;
      lw[corner] = wt[0][bx] * wt[1][by] * wt[2][bz];
    }
    if (!dw) continue;
    Scalar* ld = dw + l * 24;
    for (int corner = 0; corner < 8; ++corner) {
      const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
      ld[corner * 3 + 0] = dwt[0][bx] * wt[1][by] * wt[2][bz];
      ld[corner * 3 + 1] = wt[0][bx] * dwt[1][by] * wt[2][bz];
      ld[corner * 3 + 2] = wt[0][bx] * wt[1][by] * dwt[2][bz];
    }
  }
}

}  // namespace detail

/// Evaluates a batch of samples. `positions` and `directions` are 3 x B.
/// With `tangents`, also produces d sigma / d x in `ws.grad_sigma`.
template <typename Scalar>
void field_forward(const FieldParams<Scalar>& params,
                   const Eigen::Ref<const Eigen::Matrix<Scalar, 3, Eigen::Dynamic>>& positions,
                   const Eigen::Ref<const Eigen::Matrix<Scalar, 3, Eigen::Dynamic>>& directions,
                   bool tangents, FieldWorkspace<Scalar>& ws) {
  using Mat = typename FieldWorkspace<Scalar>::Mat;
  const auto& cfg = params.config;
  const auto& L = params.layout;
  const int B = static_cast<int>(positions.cols());
  const int E = cfg.encoding_dim();
  const int F = cfg.features_per_level;
  const int C8 = cfg.num_levels * 8;
  ws.batch = B;
  ws.tangents = tangents;

  ws.corner_index.resize(static_cast<std::size_t>(B) * C8);
  ws.corner_weight.resize(static_cast<std::size_t>(B) * C8);
  if (tangents) ws.corner_dweight.resize(static_cast<std::size_t>(B) * C8 * 3);
  ws.enc.resize(E, B);
  const std::vector<int> res = detail::level_resolutions(cfg);
  if (tangents) ws.enc_tan.resize(E, 3 * B);

  const Scalar* pos_data = positions.data();
  const Eigen::Index pos_stride = positions.outerStride();
  for (int b = 0; b < B; ++b) {
    const Scalar pos[3] = {pos_data[b * pos_stride], pos_data[b * pos_stride + 1], pos_data[b * pos_stride + 2]};
    detail::encode_corners(cfg, res.data(), pos, ws.corner_index.data() + static_cast<std::size_t>(b) * C8,
                           ws.corner_weight.data() + static_cast<std::size_t>(b) * C8,
                           tangents ? ws.corner_dweight.data() + static_cast<std::size_t>(b) * C8 * 3 : nullptr);
  }
  // Level-major so one level's table stays cached across the batch.
  const std::size_t tan_block = static_cast<std::size_t>(B) * E;
  for (int l = 0; l < cfg.num_levels; ++l) {
    const Scalar* table = params.values.data() + L.hash_level[l];
    for (int b = 0; b < B; ++b) {
      const std::uint32_t* idx = ws.corner_index.data() + static_cast<std::size_t>(b) * C8 + l * 8;
      const Scalar* w = ws.corner_weight.data() + static_cast<std::size_t>(b) * C8 + l * 8;
      const Scalar* dw = tangents ? ws.corner_dweight.data() + (static_cast<std::size_t>(b) * C8 + l * 8) * 3 : nullptr;
      Scalar* e = ws.enc.data() + static_cast<std::size_t>(b) * E + l * F;
      Scalar* et = tangents ? ws.enc_tan.data() + static_cast<std::size_t>(b) * E + l * F : nullptr;
      for (int f = 0; f < F; ++f) {
        // Local accumulators: writes through `e` could alias the table.
        Scalar v = 0, vx = 0, vy = 0, vz = 0;
        for (int c = 0; c < 8; ++c) {
          const Scalar feat = table[static_cast<std::size_t>(idx[c]) * F + f];
          v += w[c] * feat;
          if (et) {
            vx += dw[c * 3 + 0] * feat;
            vy += dw[c * 3 + 1] * feat;
            vz += dw[c * 3 + 2] * feat;
          }
        }
        e[f] = v;
        if (et) {
          et[f] = vx;
          et[tan_block + f] = vy;
          et[2 * tan_block + f] = vz;
        }
      }
    }
  }

  const int H = cfg.mlp_hidden_layers;
  ws.hidden.resize(H);
  if (tangents) ws.hidden_tan.resize(H);
  const Mat* in = &ws.enc;
  const Mat* in_tan = &ws.enc_tan;
  for (int h = 0; h < H; ++h) {
    const auto& d = L.trunk[h];
    const auto W = detail::weight(params, d);
    ws.hidden[h].noalias() = W * (*in);
    ws.hidden[h].colwise() += detail::bias(params, d);
    ws.hidden[h] = ws.hidden[h].cwiseMax(Scalar(0));
    if (tangents) {
      ws.hidden_tan[h].noalias() = W * (*in_tan);
      detail::mask_inactive(ws.hidden[h], ws.hidden_tan[h]);
      in_tan = &ws.hidden_tan[h];
    }
    in = &ws.hidden[h];
  }
  const auto& dout = L.trunk[H];
  ws.trunk_out.noalias() = detail::weight(params, dout) * (*in);
  ws.trunk_out.colwise() += detail::bias(params, dout);

  ws.sigma.resize(B);
  for (int b = 0; b < B; ++b) ws.sigma(b) = detail::softplus(ws.trunk_out(0, b));

  if (tangents) {
    ws.raw_density_tan.noalias() = detail::weight(params, dout).row(0) * (*in_tan);
    ws.grad_sigma.resize(3, B);
    for (int b = 0; b < B; ++b) {
      const Scalar s = detail::sigmoid(ws.trunk_out(0, b));
      for (int k = 0; k < 3; ++k) ws.grad_sigma(k, b) = s * ws.raw_density_tan(k * B + b);
    }
  }

  const int G = cfg.geo_feature_dim;
  const int S = cfg.sh_dim();
  ws.color_in.resize(G + S, B);
  ws.color_in.topRows(G) = ws.trunk_out.bottomRows(G);
  for (int b = 0; b < B; ++b)
    sh_encode<Scalar>(cfg.direction_encoding_degree, directions(0, b), directions(1, b),
                      directions(2, b), ws.color_in.col(b).data() + G);
  ws.color_hidden.noalias() = detail::weight(params, L.color_hidden) * ws.color_in;
  ws.color_hidden.colwise() += detail::bias(params, L.color_hidden);
  ws.color_hidden = ws.color_hidden.cwiseMax(Scalar(0));
  ws.color_raw.noalias() = detail::weight(params, L.color_out) * ws.color_hidden;
  ws.color_raw.colwise() += detail::bias(params, L.color_out);
  ws.color = ws.color_raw.unaryExpr([](Scalar v) { return detail::sigmoid(v); });
}

/// Accumulates parameter gradients of  sum_b dsigma_b * sigma_b + dcolor_b . color_b
/// (+ dgrad_b . grad_sigma_b when `dgrad` is given) into `grad`.
/// The workspace must come from field_forward on the same params;
/// `dgrad` requires that the forward ran with tangents.
template <typename Scalar>
void field_backward(const FieldParams<Scalar>& params, const FieldWorkspace<Scalar>& ws,
                    const Eigen::Ref<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>& dsigma,
                    const Eigen::Ref<const Eigen::Matrix<Scalar, 3, Eigen::Dynamic>>& dcolor,
                    const Eigen::Matrix<Scalar, 3, Eigen::Dynamic>* dgrad, Scalar* grad) {
  using Mat = typename FieldWorkspace<Scalar>::Mat;
  using Row = typename FieldWorkspace<Scalar>::Row;
  const auto& cfg = params.config;
  const auto& L = params.layout;
  const int B = ws.batch;
  const int G = cfg.geo_feature_dim;
  const int H = cfg.mlp_hidden_layers;
  // Row sums go through an owned vector: summed straight into `grad`, Eigen's
  // summation order would depend on the alignment of the destination.
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const bool with_tan = dgrad != nullptr;
  if (with_tan) require(ws.tangents, "field_backward: tangent gradient needs a tangent forward");

  // Color head.
  Mat dcr = dcolor.cwiseProduct(ws.color.cwiseProduct((Scalar(1) - ws.color.array()).matrix()));
  detail::weight_grad(grad, L.color_out).noalias() += dcr * ws.color_hidden.transpose();
  detail::bias_grad(grad, L.color_out) += Vec(dcr.rowwise().sum());
  Mat dch = detail::weight(params, L.color_out).transpose() * dcr;
  detail::mask_inactive(ws.color_hidden, dch);
  detail::weight_grad(grad, L.color_hidden).noalias() += dch * ws.color_in.transpose();
  detail::bias_grad(grad, L.color_hidden) += Vec(dch.rowwise().sum());
  Mat dci = detail::weight(params, L.color_hidden).transpose() * dch;

  Mat dout(1 + G, B);
  dout.bottomRows(G) = dci.topRows(G);
  Row sraw(B);
  for (int b = 0; b < B; ++b) {
    sraw(b) = detail::sigmoid(ws.trunk_out(0, b));
    dout(0, b) = dsigma(b) * sraw(b);
  }

  // Tangent chain: grad_sigma_k = sigmoid(raw) * raw_tan_k.
  Mat dtan;
  Mat denc_tan;
  if (with_tan) {
    Row drt(3 * B);
    for (int b = 0; b < B; ++b) {
      const Scalar s = sraw(b);
      Scalar acc = 0;
      for (int k = 0; k < 3; ++k) {
        const Scalar g = (*dgrad)(k, b);
        acc += g * ws.raw_density_tan(k * B + b);
        drt(k * B + b) = g * s;
      }
      dout(0, b) += acc * s * (Scalar(1) - s);
    }
    const auto& d = L.trunk[H];
    detail::weight_grad(grad, d).row(0).noalias() += drt * ws.hidden_tan[H - 1].transpose();
    dtan.noalias() = detail::weight(params, d).row(0).transpose() * drt;
    for (int h = H - 1; h >= 0; --h) {
      detail::mask_inactive(ws.hidden[h], dtan);
      const Mat& prev = h > 0 ? ws.hidden_tan[h - 1] : ws.enc_tan;
      detail::weight_grad(grad, L.trunk[h]).noalias() += dtan * prev.transpose();
      Mat next = detail::weight(params, L.trunk[h]).transpose() * dtan;
      dtan.swap(next);
    }
    denc_tan.swap(dtan);
  }

  // Trunk.
  Mat dact;
  {
    const auto& d = L.trunk[H];
    detail::weight_grad(grad, d).noalias() += dout * ws.hidden[H - 1].transpose();
    detail::bias_grad(grad, d) += Vec(dout.rowwise().sum());
    dact.noalias() = detail::weight(params, d).transpose() * dout;
  }
  for (int h = H - 1; h >= 0; --h) {
    detail::mask_inactive(ws.hidden[h], dact);
    const Mat& prev = h > 0 ? ws.hidden[h - 1] : ws.enc;
    detail::weight_grad(grad, L.trunk[h]).noalias() += dact * prev.transpose();
    detail::bias_grad(grad, L.trunk[h]) += Vec(dact.rowwise().sum());
    Mat next = detail::weight(params, L.trunk[h]).transpose() * dact;
    dact.swap(next);
  }
  const Mat& denc = dact;

  // Hash tables.
  const int F = cfg.features_per_level;
  const int C8 = cfg.num_levels * 8;
  const std::size_t tan_block = static_cast<std::size_t>(B) * cfg.encoding_dim();
  // Level-major: each table entry still receives its contributions in
  // sample order, and one level's gradient table stays cached.
  const int E = cfg.encoding_dim();
  for (int l = 0; l < cfg.num_levels; ++l) {
    Scalar* table = grad + L.hash_level[l];
    for (int b = 0; b < B; ++b) {
      const std::uint32_t* idx = ws.corner_index.data() + static_cast<std::size_t>(b) * C8 + l * 8;
      const Scalar* w = ws.corner_weight.data() + static_cast<std::size_t>(b) * C8 + l * 8;
      const Scalar* dw = with_tan ? ws.corner_dweight.data() + (static_cast<std::size_t>(b) * C8 + l * 8) * 3 : nullptr;
      const Scalar* de = denc.data() + static_cast<std::size_t>(b) * E + l * F;
      const Scalar* det = with_tan ? denc_tan.data() + static_cast<std::size_t>(b) * E + l * F : nullptr;
      for (int c = 0; c < 8; ++c) {
        Scalar* feat = table + static_cast<std::size_t>(idx[c]) * F;
        for (int f = 0; f < F; ++f) {
          Scalar g = w[c] * de[f];
          if (det)
            g += dw[c * 3 + 0] * det[f] + dw[c * 3 + 1] * det[tan_block + f] + dw[c * 3 + 2] * det[2 * tan_block + f];
          feat[f] += g;
        }
      }
    }
  }
}

/// Concatenated per-level trilinear hash features at x; x is clamped to [-1, 1]^3.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> hash_encode(const Vec3& x, const FieldParams<Scalar>& params) {
  const auto& cfg = params.config;
  const int C8 = cfg.num_levels * 8;
  std::vector<std::uint32_t> idx(C8);
  std::vector<Scalar> w(C8), dw(C8 * 3);
  const Scalar pos[3] = {Scalar(x.x()), Scalar(x.y()), Scalar(x.z())};
  const std::vector<int> res = detail::level_resolutions(cfg);
  detail::encode_corners(cfg, res.data(), pos, idx.data(), w.data(), dw.data());
  const int F = cfg.features_per_level;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> enc = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(cfg.encoding_dim());
  for (int l = 0; l < cfg.num_levels; ++l) {
    const auto table = params.hash_table(l);
    for (int c = 0; c < 8; ++c) {
      const int k = l * 8 + c;
      for (int f = 0; f < F; ++f) enc(l * F + f) += w[k] * table[static_cast<std::size_t>(idx[k]) * F + f];
    }
  }
  return enc;
}

struct FieldSample {
  Vec3 position = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double density = 0.0;
  Vec3 color = Vec3::Zero();
};

template <typename Scalar>
FieldSample eval_field(const Vec3& x, const Vec3& d, const FieldParams<Scalar>& params) {
  require(std::abs(d.norm() - 1.0) <= 1e-6, "eval_field: direction must be unit length");
  require(params.all_finite(), "eval_field: parameters contain non-finite values");
  Eigen::Matrix<Scalar, 3, 1> p = x.cast<Scalar>();
  Eigen::Matrix<Scalar, 3, 1> dir = d.cast<Scalar>();
  FieldWorkspace<Scalar> ws;
  field_forward<Scalar>(params, p, dir, false, ws);
  FieldSample s;
  s.position = x;
  s.direction = d;
  s.density = static_cast<double>(ws.sigma(0));
  s.color = ws.color.col(0).template cast<double>();
  return s;
}

/// Analytic d sigma / d x.
template <typename Scalar>
Vec3 density_gradient(const Vec3& x, const FieldParams<Scalar>& params) {
  Eigen::Matrix<Scalar, 3, 1> p = x.cast<Scalar>();
  Eigen::Matrix<Scalar, 3, 1> dir(0, 0, 1);
  FieldWorkspace<Scalar> ws;
  field_forward<Scalar>(params, p, dir, true, ws);
  return ws.grad_sigma.col(0).template cast<double>();
}

struct NormalResult {
  Vec3 normal = Vec3::UnitZ();
  bool degenerate = false;
};

inline constexpr double kDegenerateGradient = 1e-8;

/// Outward normal -grad(sigma)/|grad(sigma)|. When |grad(sigma)| < 1e-8 the
/// result is flagged degenerate and carries the +z up-vector.
template <typename Scalar>
NormalResult field_normal(const Vec3& x, const FieldParams<Scalar>& params) {
  const Vec3 g = density_gradient(x, params);
  const double n = g.norm();
  if (!(n >= kDegenerateGradient)) return {Vec3::UnitZ(), true};
  return {-g / n, false};
}

}  // namespace sketch3d
