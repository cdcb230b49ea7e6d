#pragma once

// Clothes-identity disentangling network: a shared convolutional stem feeding
// an image branch and a clothes branch of three conv blocks each, with the
// spatial separate module (S2M) applied after the second and third blocks,
// global average pooling and a BN neck per branch. Conv blocks are
// conv -> group norm -> ReLU; group norm is per sample, so nothing but the
// neck couples samples in a batch.
//
// Feature maps are stored channel-major over the whole batch
// (channels x batch*height*width) so every convolution is one GEMM.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccil/common.hpp"
#include "ccil/datagen.hpp"

namespace ccil::model {

template <typename S>
struct FeatureMaps {
  Mat<S> values;  // C x (B*H*W)
  int batch = 0;
  int height = 0;
  int width = 0;

  int channels() const { return static_cast<int>(values.rows()); }
  Eigen::Index plane() const { return static_cast<Eigen::Index>(height) * width; }
};

/// Attention surface for a batch, 1 x (B*H*W), values in [0, 1].
template <typename S>
using AttentionMap = Mat<S>;

struct ModelConfig {
  int height = 64;
  int width = 32;
  int stem_channels = 32;
  std::array<int, 3> branch_channels{64, 128, 128};
  int stem_stride = 2;
  std::array<int, 3> branch_strides{2, 2, 1};
  int norm_groups = 8;  // 0 = no normalisation inside the conv blocks
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  int feature_dim() const { return branch_channels[2]; }

  void validate() const {
    if (height < 4 || width < 4) throw ConfigError("model input size must be at least 4x4");
    if (stem_channels < 1) throw ConfigError("stem_channels must be >= 1");
    for (int c : branch_channels)
      if (c < 1) throw ConfigError("branch channel widths must be >= 1");
    if (stem_stride < 1) throw ConfigError("strides must be >= 1");
    for (int s : branch_strides)
      if (s < 1) throw ConfigError("strides must be >= 1");
    if (norm_groups < 0) throw ConfigError("norm_groups must be >= 0");
    if (norm_groups > 0) {
      bool ok = stem_channels % norm_groups == 0;
      for (int c : branch_channels) ok = ok && c % norm_groups == 0;
      if (!ok) throw ConfigError("norm_groups must divide every channel width");
    }
    if (!(bn_eps > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0)) {
      throw ConfigError("bad BN neck constants");
    }
  }
};

enum class Mode { train, eval };

struct ForwardOptions {
  Mode mode = Mode::eval;
  bool s2m = true;
};

template <typename S>
struct ConvParams {
  Mat<S> weight;  // out x (in*k*k)
  Mat<S> bias;    // out x 1
  Mat<S> gamma;   // out x 1, group-norm scale (unused when groups == 0)
  Mat<S> beta;    // out x 1
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int groups = 0;
};

template <typename S>
struct AttentionParams {
  Mat<S> w_img;  // 1 x C
  Mat<S> b_img;  // 1 x 1
  Mat<S> w_clt;
  Mat<S> b_clt;
};

template <typename S>
struct NeckParams {
  Mat<S> gamma;  // 1 x D
  Mat<S> beta;
  Mat<S> running_mean;
  Mat<S> running_var;
};

template <typename S>
struct ModelParams {
  ConvParams<S> stem;
  std::array<ConvParams<S>, 3> img;
  std::array<ConvParams<S>, 3> clt;
  std::array<AttentionParams<S>, 2> att;
  NeckParams<S> neck_img;
  NeckParams<S> neck_clt;

  template <class F>
  void visit_learnable(F&& f) {
    visit_learnable_impl(*this, f);
  }
  template <class F>
  void visit_learnable(F&& f) const {
    visit_learnable_impl(*this, f);
  }
  template <class F>
  void visit_buffers(F&& f) {
    visit_buffers_impl(*this, f);
  }
  template <class F>
  void visit_buffers(F&& f) const {
    visit_buffers_impl(*this, f);
  }

  /// Same shapes, all arrays zero. Used as a gradient accumulator.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.visit_learnable([](const std::string&, Mat<S>& m) { m.setZero(); });
    z.visit_buffers([](const std::string&, Mat<S>& m) { m.setZero(); });
    return z;
  }

 private:
  template <class Self, class F>
  static void visit_learnable_impl(Self& self, F& f) {
    f("stem.weight", self.stem.weight);
    f("stem.bias", self.stem.bias);
    f("stem.gamma", self.stem.gamma);
    f("stem.beta", self.stem.beta);
    for (std::size_t b = 0; b < 3; ++b) {
      for (auto [branch, conv] : {std::pair{"img", &self.img[b]}, std::pair{"clt", &self.clt[b]}}) {
        const std::string n = std::string(branch) + ".block" + std::to_string(b + 1);
        f(n + ".weight", conv->weight);
        f(n + ".bias", conv->bias);
        f(n + ".gamma", conv->gamma);
        f(n + ".beta", conv->beta);
      }
    }
    for (std::size_t a = 0; a < 2; ++a) {
      const std::string n = "s2m" + std::to_string(a + 1);
      f(n + ".img.weight", self.att[a].w_img);
      f(n + ".img.bias", self.att[a].b_img);
      f(n + ".clt.weight", self.att[a].w_clt);
      f(n + ".clt.bias", self.att[a].b_clt);
    }
    f("neck_img.gamma", self.neck_img.gamma);
    f("neck_img.beta", self.neck_img.beta);
    f("neck_clt.gamma", self.neck_clt.gamma);
    f("neck_clt.beta", self.neck_clt.beta);
  }
  template <class Self, class F>
  static void visit_buffers_impl(Self& self, F& f) {
    f("neck_img.running_mean", self.neck_img.running_mean);
    f("neck_img.running_var", self.neck_img.running_var);
    f("neck_clt.running_mean", self.neck_clt.running_mean);
    f("neck_clt.running_var", self.neck_clt.running_var);
  }
};

namespace detail {

template <typename S>
ConvParams<S> make_conv(int in, int out, int stride, int groups, std::mt19937_64& rng) {
  ConvParams<S> c;
  c.in = in;
  c.out = out;
  c.stride = stride;
  c.groups = groups;
  const int fan_in = in * c.kernel * c.kernel;
  std::normal_distribution<double> he(0.0, std::sqrt(2.0 / fan_in));
  c.weight.resize(out, fan_in);
  for (Eigen::Index i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = static_cast<S>(he(rng));
  c.bias = Mat<S>::Zero(out, 1);
  c.gamma = Mat<S>::Ones(out, 1);
  c.beta = Mat<S>::Zero(out, 1);
  return c;
}

template <typename S>
NeckParams<S> make_neck(int dim) {
  return {Mat<S>::Ones(1, dim), Mat<S>::Zero(1, dim), Mat<S>::Zero(1, dim), Mat<S>::Ones(1, dim)};
}

}  // namespace detail

/// He-initialised parameters. Both branches start from the same draw (as two
/// copies of one pretrained stage would); the attention projections of the
/// two S2M applications are drawn independently.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0x30de1));
  ModelParams<S> p;
  p.stem = detail::make_conv<S>(3, cfg.stem_channels, cfg.stem_stride, cfg.norm_groups, rng);
  int in = cfg.stem_channels;
  for (std::size_t b = 0; b < 3; ++b) {
    p.img[b] = detail::make_conv<S>(in, cfg.branch_channels[b], cfg.branch_strides[b], cfg.norm_groups, rng);
    p.clt[b] = p.img[b];
    in = cfg.branch_channels[b];
  }
  for (std::size_t a = 0; a < 2; ++a) {
    const int c = cfg.branch_channels[a + 1];
    std::normal_distribution<double> small(0.0, 0.1 / std::sqrt(static_cast<double>(c)));
    auto draw = [&](Mat<S>& m) {
      m.resize(1, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(small(rng));
    };
    draw(p.att[a].w_img);
    draw(p.att[a].w_clt);
    p.att[a].b_img = Mat<S>::Zero(1, 1);
    p.att[a].b_clt = Mat<S>::Zero(1, 1);
  }
  p.neck_img = detail::make_neck<S>(cfg.feature_dim());
  p.neck_clt = detail::make_neck<S>(cfg.feature_dim());
  return p;
}

// ---------------------------------------------------------------------------
// Convolution via im2col

inline int conv_out(int size, int kernel, int stride, int pad) { return (size + 2 * pad - kernel) / stride + 1; }

template <typename S>
Mat<S> im2col(const FeatureMaps<S>& x, int k, int stride, int pad, int oh, int ow) {
  const int C = x.channels();
  const Eigen::Index out_plane = static_cast<Eigen::Index>(oh) * ow;
  Mat<S> cols = Mat<S>::Zero(static_cast<Eigen::Index>(C) * k * k, out_plane * x.batch);
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* dst = cols.row((c * k + ky) * k + kx).data();
        for (int n = 0; n < x.batch; ++n) {
          const S* src = x.values.row(c).data() + n * x.plane();
          S* d = dst + n * out_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= x.height) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < x.width) d[oy * ow + ox] = src[iy * x.width + ix];
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
FeatureMaps<S> col2im(const Mat<S>& cols, int C, int batch, int height, int width, int k, int stride, int pad,
                      int oh, int ow) {
  FeatureMaps<S> x{Mat<S>::Zero(C, static_cast<Eigen::Index>(batch) * height * width), batch, height, width};
  const Eigen::Index out_plane = static_cast<Eigen::Index>(oh) * ow;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* src = cols.row((c * k + ky) * k + kx).data();
        for (int n = 0; n < batch; ++n) {
          S* dst = x.values.row(c).data() + n * x.plane();
          const S* s = src + n * out_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= height) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < width) dst[iy * width + ix] += s[oy * ow + ox];
            }
          }
        }
      }
    }
  }
  return x;
}

template <typename S>
struct ConvCache {
  Mat<S> cols;
  Mat<S> xhat;         // normalised conv output (groups > 0)
  Mat<S> inv_std;      // batch x groups
  FeatureMaps<S> out;  // post-ReLU
};

inline constexpr double kGroupNormEps = 1e-5;

/// Per-sample group norm over (channels of the group) x (spatial plane),
/// applied in place; returns xhat and fills inv_std (batch x groups).
template <typename S>
Mat<S> group_norm(Mat<S>& z, int groups, int batch, Eigen::Index plane, const Mat<S>& gamma, const Mat<S>& beta,
                  Mat<S>& inv_std) {
  const Eigen::Index cg = z.rows() / groups;
  const S count = static_cast<S>(cg * plane);
  Mat<S> xhat(z.rows(), z.cols());
  inv_std.resize(batch, groups);
  for (int n = 0; n < batch; ++n) {
    for (int g = 0; g < groups; ++g) {
      auto blk = z.block(g * cg, n * plane, cg, plane);
      const S mean = blk.sum() / count;
      const S var = (blk.array() - mean).square().sum() / count;
      const S is = S(1) / std::sqrt(var + static_cast<S>(kGroupNormEps));
      inv_std(n, g) = is;
      auto xh = xhat.block(g * cg, n * plane, cg, plane);
      xh = ((blk.array() - mean) * is).matrix();
      blk = ((xh.array().colwise() * gamma.col(0).segment(g * cg, cg).array()).colwise() +
             beta.col(0).segment(g * cg, cg).array())
                .matrix();
    }
  }
  return xhat;
}

/// conv -> bias -> group norm (if configured) -> ReLU
template <typename S>
FeatureMaps<S> conv_relu(const ConvParams<S>& p, const FeatureMaps<S>& x, ConvCache<S>* cache) {
  require_shape(x.channels() == p.in, "conv input has " + std::to_string(x.channels()) + " channels, expected " +
                                          std::to_string(p.in));
  const int oh = conv_out(x.height, p.kernel, p.stride, p.pad);
  const int ow = conv_out(x.width, p.kernel, p.stride, p.pad);
  Mat<S> cols = im2col(x, p.kernel, p.stride, p.pad, oh, ow);
  FeatureMaps<S> y{Mat<S>(p.out, cols.cols()), x.batch, oh, ow};
  y.values.noalias() = p.weight * cols;
  y.values.colwise() += p.bias.col(0);
  Mat<S> xhat, inv_std;
  if (p.groups > 0) xhat = group_norm(y.values, p.groups, x.batch, y.plane(), p.gamma, p.beta, inv_std);
  y.values = y.values.cwiseMax(S(0));
  if (cache) {
    cache->cols = std::move(cols);
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->out = y;
  }
  return y;
}

/// Accumulates weight/bias gradients; returns the input gradient when
/// `need_input_grad`.
template <typename S>
FeatureMaps<S> conv_relu_backward(const ConvParams<S>& p, const ConvCache<S>& cache, const Mat<S>& d_out,
                                  ConvParams<S>& grad, int in_height, int in_width, bool need_input_grad) {
  Mat<S> dz = (cache.out.values.array() > S(0)).select(d_out, S(0));
  if (p.groups > 0) {
    const Eigen::Index plane = cache.out.plane();
    const Eigen::Index cg = dz.rows() / p.groups;
    const S count = static_cast<S>(cg * plane);
    grad.gamma.col(0) += (dz.array() * cache.xhat.array()).rowwise().sum().matrix();
    grad.beta.col(0) += dz.rowwise().sum();
    for (int n = 0; n < cache.out.batch; ++n) {
      for (int g = 0; g < p.groups; ++g) {
        auto d = dz.block(g * cg, n * plane, cg, plane);
        const auto xh = cache.xhat.block(g * cg, n * plane, cg, plane);
        Mat<S> dxh = (d.array().colwise() * p.gamma.col(0).segment(g * cg, cg).array()).matrix();
        const S s1 = dxh.sum();
        const S s2 = (dxh.array() * xh.array()).sum();
        d = ((dxh.array() * count - s1 - xh.array() * s2) * (cache.inv_std(n, g) / count)).matrix();
      }
    }
  }
  grad.weight.noalias() += dz * cache.cols.transpose();
  grad.bias.col(0) += dz.rowwise().sum();
  if (!need_input_grad) return {};
  Mat<S> dcols = p.weight.transpose() * dz;
  return col2im(dcols, p.in, cache.out.batch, in_height, in_width, p.kernel, p.stride, p.pad, cache.out.height,
                cache.out.width);
}

// ---------------------------------------------------------------------------
// Spatial separate module

/// Sigmoid of a 1x1 projection of the maps: one value per spatial position.
template <typename S>
AttentionMap<S> attention_map(const FeatureMaps<S>& m, const Mat<S>& w, const Mat<S>& b) {
  require_shape(w.cols() == m.channels(), "attention projection width does not match channel count");
  Mat<S> z = w * m.values;
  z.array() += b(0, 0);
  return (S(1) / (S(1) + (-z.array()).exp())).matrix();
}

/// m'_img = A_img (1 - A_clt) m_img,  m'_clt = A_clt (1 - A_img) m_clt,
/// attention broadcast over channels.
template <typename S>
std::pair<FeatureMaps<S>, FeatureMaps<S>> separate(const FeatureMaps<S>& m_img, const FeatureMaps<S>& m_clt,
                                                   const AttentionMap<S>& a_img, const AttentionMap<S>& a_clt) {
  require_shape(m_img.values.rows() == m_clt.values.rows() && m_img.values.cols() == m_clt.values.cols(),
                "S2M inputs must have the same shape");
  require_shape(a_img.cols() == m_img.values.cols() && a_clt.cols() == m_img.values.cols() && a_img.rows() == 1 &&
                    a_clt.rows() == 1,
                "attention map does not match feature map size");
  RowVec<S> keep_img = (a_img.array() * (S(1) - a_clt.array())).matrix();
  RowVec<S> keep_clt = (a_clt.array() * (S(1) - a_img.array())).matrix();
  FeatureMaps<S> out_img = m_img;
  FeatureMaps<S> out_clt = m_clt;
  out_img.values.array().rowwise() *= keep_img.array();
  out_clt.values.array().rowwise() *= keep_clt.array();
  return {std::move(out_img), std::move(out_clt)};
}

template <typename S>
struct S2mResult {
  FeatureMaps<S> m_img;
  FeatureMaps<S> m_clt;
  AttentionMap<S> a_img;
  AttentionMap<S> a_clt;
};

template <typename S>
S2mResult<S> s2m(const FeatureMaps<S>& m_img, const FeatureMaps<S>& m_clt, const AttentionParams<S>& p) {
  require_shape(m_img.values.rows() == m_clt.values.rows() && m_img.values.cols() == m_clt.values.cols(),
                "S2M inputs must have the same shape");
  S2mResult<S> r;
  r.a_img = attention_map(m_img, p.w_img, p.b_img);
  r.a_clt = attention_map(m_clt, p.w_clt, p.b_clt);
  std::tie(r.m_img, r.m_clt) = separate(m_img, m_clt, r.a_img, r.a_clt);
  return r;
}

template <typename S>
struct S2mCache {
  FeatureMaps<S> m_img;
  FeatureMaps<S> m_clt;
  AttentionMap<S> a_img;
  AttentionMap<S> a_clt;
};

template <typename S>
std::pair<Mat<S>, Mat<S>> s2m_backward(const AttentionParams<S>& p, const S2mCache<S>& c, const Mat<S>& d_img,
                                       const Mat<S>& d_clt, AttentionParams<S>& grad) {
  const auto a_i = c.a_img.array();
  const auto a_c = c.a_clt.array();
  RowVec<S> s_img = (d_img.array() * c.m_img.values.array()).colwise().sum().matrix();
  RowVec<S> s_clt = (d_clt.array() * c.m_clt.values.array()).colwise().sum().matrix();
  RowVec<S> dz_img = ((s_img.array() * (S(1) - a_c) - s_clt.array() * a_c) * a_i * (S(1) - a_i)).matrix();
  RowVec<S> dz_clt = ((s_clt.array() * (S(1) - a_i) - s_img.array() * a_i) * a_c * (S(1) - a_c)).matrix();
  grad.w_img.noalias() += dz_img * c.m_img.values.transpose();
  grad.w_clt.noalias() += dz_clt * c.m_clt.values.transpose();
  grad.b_img(0, 0) += dz_img.sum();
  grad.b_clt(0, 0) += dz_clt.sum();

  Mat<S> dm_img = d_img;
  Mat<S> dm_clt = d_clt;
  const RowVec<S> keep_img = (a_i * (S(1) - a_c)).matrix();
  const RowVec<S> keep_clt = (a_c * (S(1) - a_i)).matrix();
  dm_img.array().rowwise() *= keep_img.array();
  dm_clt.array().rowwise() *= keep_clt.array();
  dm_img.noalias() += p.w_img.transpose() * dz_img;
  dm_clt.noalias() += p.w_clt.transpose() * dz_clt;
  return {std::move(dm_img), std::move(dm_clt)};
}

// ---------------------------------------------------------------------------
// Pooling and BN neck

/// Spatial average: B x C.
template <typename S>
Mat<S> average_pool(const FeatureMaps<S>& m) {
  Mat<S> f(m.batch, m.channels());
  const auto plane = m.plane();
  for (int c = 0; c < m.channels(); ++c)
    for (int n = 0; n < m.batch; ++n)
      f(n, c) = m.values.row(c).segment(n * plane, plane).sum() / static_cast<S>(plane);
  return f;
}

template <typename S>
struct NeckCache {
  Mat<S> xhat;
  RowVec<S> mean;
  RowVec<S> var;  // biased batch variance (train) or running variance (eval)
  Mode mode = Mode::eval;
};

template <typename S>
Mat<S> batch_norm(const Mat<S>& f, const NeckParams<S>& p, Mode mode, S eps, NeckCache<S>* cache) {
  require_shape(f.cols() == p.gamma.cols(), "neck width does not match feature width");
  RowVec<S> mean, var;
  if (mode == Mode::train) {
    mean = f.colwise().mean();
    var = (f.rowwise() - mean).array().square().colwise().mean().matrix();
  } else {
    mean = p.running_mean.row(0);
    var = p.running_var.row(0);
  }
  RowVec<S> inv_std = (var.array() + eps).rsqrt().matrix();
  Mat<S> xhat = ((f.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  Mat<S> y = (xhat.array().rowwise() * p.gamma.row(0).array()).matrix();
  y.rowwise() += p.beta.row(0);
  if (cache) *cache = {std::move(xhat), std::move(mean), std::move(var), mode};
  return y;
}

template <typename S>
Mat<S> batch_norm_backward(const NeckParams<S>& p, const NeckCache<S>& c, const Mat<S>& dy, S eps,
                           NeckParams<S>& grad) {
  grad.gamma.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  grad.beta.row(0) += dy.colwise().sum();
  RowVec<S> inv_std = (c.var.array() + eps).rsqrt().matrix();
  Mat<S> dxhat = (dy.array().rowwise() * p.gamma.row(0).array()).matrix();
  if (c.mode == Mode::eval) return (dxhat.array().rowwise() * inv_std.array()).matrix();
  const S B = static_cast<S>(dy.rows());
  RowVec<S> sum_dx = dxhat.colwise().sum();
  RowVec<S> sum_dx_xhat = (dxhat.array() * c.xhat.array()).colwise().sum().matrix();
  Mat<S> dx = (dxhat.array() * B).matrix();
  dx.rowwise() -= sum_dx;
  dx.array() -= c.xhat.array().rowwise() * sum_dx_xhat.array();
  dx.array().rowwise() *= (inv_std.array() / B);
  return dx;
}

/// Pooled (pre-neck) and normalised (post-neck) vectors for one branch.
template <typename S>
std::pair<Mat<S>, Mat<S>> pool_and_neck(const FeatureMaps<S>& maps, const NeckParams<S>& neck, Mode mode, S eps,
                                        NeckCache<S>* cache = nullptr) {
  Mat<S> f = average_pool(maps);
  Mat<S> g = batch_norm(f, neck, mode, eps, cache);
  return {std::move(f), std::move(g)};
}

// ---------------------------------------------------------------------------
// Full forward / backward

/// Pre-neck vectors are the retrieval features; post-neck vectors feed the
/// classifiers and the intervention module.
template <typename S>
struct FeaturePairs {
  Mat<S> f_img;  // B x D, pre-neck
  Mat<S> f_clt;
  Mat<S> g_img;  // B x D, post-neck
  Mat<S> g_clt;
};

template <typename S>
struct ForwardCache {
  int in_height = 0;
  int in_width = 0;
  ForwardOptions options;
  ConvCache<S> stem;
  std::array<ConvCache<S>, 3> img;
  std::array<ConvCache<S>, 3> clt;
  std::array<S2mCache<S>, 2> s2m;
  NeckCache<S> neck_img;
  NeckCache<S> neck_clt;
  std::array<AttentionMap<S>, 2> a_img;  // kept for export even without a cache request
};

template <typename S>
FeatureMaps<S> make_batch(std::span<const data::FloatImage> images) {
  if (images.empty()) throw ShapeError("empty image batch");
  const int H = images[0].height;
  const int W = images[0].width;
  FeatureMaps<S> x{Mat<S>(3, static_cast<Eigen::Index>(images.size()) * H * W), static_cast<int>(images.size()), H,
                   W};
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& im = images[n];
    require_shape(im.channels == 3 && im.height == H && im.width == W, "images in a batch must share one size");
    for (int c = 0; c < 3; ++c)
      for (Eigen::Index p = 0; p < x.plane(); ++p)
        x.values(c, static_cast<Eigen::Index>(n) * x.plane() + p) =
            static_cast<S>(im.data[static_cast<std::size_t>(c * x.plane() + p)]);
  }
  return x;
}

template <typename S>
FeatureMaps<S> shared_stem(const ModelParams<S>& p, const ModelConfig& cfg, const FeatureMaps<S>& images,
                           ConvCache<S>* cache = nullptr) {
  require_shape(images.channels() == 3 && images.height == cfg.height && images.width == cfg.width,
                "input batch must be 3x" + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  return conv_relu(p.stem, images, cache);
}

/// Both branches from the shared maps, with S2M after blocks 2 and 3.
template <typename S>
std::pair<FeatureMaps<S>, FeatureMaps<S>> branch_forward(const ModelParams<S>& p, const FeatureMaps<S>& shared,
                                                         bool use_s2m, ForwardCache<S>* cache = nullptr) {
  FeatureMaps<S> mi = conv_relu(p.img[0], shared, cache ? &cache->img[0] : nullptr);
  FeatureMaps<S> mc = conv_relu(p.clt[0], shared, cache ? &cache->clt[0] : nullptr);
  for (std::size_t b = 1; b < 3; ++b) {
    mi = conv_relu(p.img[b], mi, cache ? &cache->img[b] : nullptr);
    mc = conv_relu(p.clt[b], mc, cache ? &cache->clt[b] : nullptr);
    if (!use_s2m) continue;
    auto r = s2m(mi, mc, p.att[b - 1]);
    if (cache) cache->s2m[b - 1] = {std::move(mi), std::move(mc), r.a_img, r.a_clt};
    if (cache) cache->a_img[b - 1] = r.a_img;
    mi = std::move(r.m_img);
    mc = std::move(r.m_clt);
  }
  return {std::move(mi), std::move(mc)};
}

template <typename S>
FeaturePairs<S> forward(const ModelParams<S>& p, const ModelConfig& cfg, const FeatureMaps<S>& images,
                        const ForwardOptions& opt, ForwardCache<S>* cache = nullptr) {
  if (cache) {
    cache->in_height = images.height;
    cache->in_width = images.width;
    cache->options = opt;
  }
  FeatureMaps<S> shared = shared_stem(p, cfg, images, cache ? &cache->stem : nullptr);
  auto [mi, mc] = branch_forward(p, shared, opt.s2m, cache);
  FeaturePairs<S> out;
  const S eps = static_cast<S>(cfg.bn_eps);
  std::tie(out.f_img, out.g_img) = pool_and_neck(mi, p.neck_img, opt.mode, eps, cache ? &cache->neck_img : nullptr);
  std::tie(out.f_clt, out.g_clt) = pool_and_neck(mc, p.neck_clt, opt.mode, eps, cache ? &cache->neck_clt : nullptr);
  return out;
}

/// Loss gradients with respect to the four feature outputs. Empty matrices
/// mean zero.
template <typename S>
struct FeatureGrads {
  Mat<S> f_img;
  Mat<S> f_clt;
  Mat<S> g_img;
  Mat<S> g_clt;
};

namespace detail {

template <typename S>
Mat<S> pool_backward(const Mat<S>& df, const FeatureMaps<S>& shape) {
  Mat<S> d(shape.channels(), shape.values.cols());
  const auto plane = shape.plane();
  const S scale = S(1) / static_cast<S>(plane);
  for (int c = 0; c < shape.channels(); ++c)
    for (int n = 0; n < shape.batch; ++n) d.row(c).segment(n * plane, plane).setConstant(df(n, c) * scale);
  return d;
}

template <typename S>
Mat<S> branch_feature_grad(const Mat<S>& d_pre, const Mat<S>& d_post, const NeckParams<S>& neck,
                           const NeckCache<S>& cache, S eps, NeckParams<S>& grad, Eigen::Index B, Eigen::Index D) {
  Mat<S> df = d_pre.size() ? d_pre : Mat<S>::Zero(B, D);
  if (d_post.size()) df += batch_norm_backward(neck, cache, d_post, eps, grad);
  return df;
}

}  // namespace detail

/// Accumulates parameter gradients into `grad` (same layout as `p`).
template <typename S>
void backward(const ModelParams<S>& p, const ModelConfig& cfg, const ForwardCache<S>& c, const FeatureGrads<S>& d,
              ModelParams<S>& grad) {
  const S eps = static_cast<S>(cfg.bn_eps);
  const auto& last_img = c.img[2].out;
  const Eigen::Index B = last_img.batch;
  const Eigen::Index D = last_img.channels();
  Mat<S> df_img = detail::branch_feature_grad(d.f_img, d.g_img, p.neck_img, c.neck_img, eps, grad.neck_img, B, D);
  Mat<S> df_clt = detail::branch_feature_grad(d.f_clt, d.g_clt, p.neck_clt, c.neck_clt, eps, grad.neck_clt, B, D);

  Mat<S> dm_img = detail::pool_backward(df_img, last_img);
  Mat<S> dm_clt = detail::pool_backward(df_clt, c.clt[2].out);

  for (int b = 2; b >= 1; --b) {
    const auto bi = static_cast<std::size_t>(b);
    if (c.options.s2m) {
      std::tie(dm_img, dm_clt) = s2m_backward(p.att[bi - 1], c.s2m[bi - 1], dm_img, dm_clt, grad.att[bi - 1]);
    }
    const auto& in_shape = c.img[bi - 1].out;
    dm_img = conv_relu_backward(p.img[bi], c.img[bi], dm_img, grad.img[bi], in_shape.height, in_shape.width, true).values;
    dm_clt = conv_relu_backward(p.clt[bi], c.clt[bi], dm_clt, grad.clt[bi], in_shape.height, in_shape.width, true).values;
  }
  const auto& stem_out = c.stem.out;
  Mat<S> d_shared =
      conv_relu_backward(p.img[0], c.img[0], dm_img, grad.img[0], stem_out.height, stem_out.width, true).values;
  d_shared +=
      conv_relu_backward(p.clt[0], c.clt[0], dm_clt, grad.clt[0], stem_out.height, stem_out.width, true).values;
  conv_relu_backward(p.stem, c.stem, d_shared, grad.stem, c.in_height, c.in_width, false);
}

/// Exponential moving update of the neck running statistics from a
/// training-mode forward pass (unbiased variance when B > 1).
template <typename S>
void update_running_stats(ModelParams<S>& p, const ForwardCache<S>& c, double momentum) {
  auto update = [momentum](NeckParams<S>& n, const NeckCache<S>& nc, Eigen::Index B) {
    const S m = static_cast<S>(momentum);
    const S unbias = B > 1 ? static_cast<S>(B) / static_cast<S>(B - 1) : S(1);
    n.running_mean.row(0) = (S(1) - m) * n.running_mean.row(0) + m * nc.mean;
    n.running_var.row(0) = (S(1) - m) * n.running_var.row(0) + m * unbias * nc.var;
  };
  update(p.neck_img, c.neck_img, c.neck_img.xhat.rows());
  update(p.neck_clt, c.neck_clt, c.neck_clt.xhat.rows());
}

}  // namespace ccil::model
