#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "htr/tensor.hpp"
#include "htr/util.hpp"

namespace htr {

// Layer taxonomy, also used as the kind tag in checkpoint files.
enum class LayerKind : std::uint8_t {
  Conv = 0,
  DWSepConv = 1,
  GatedConv = 2,
  MaxPool = 3,
  GRU = 4,
  BGRU = 5,
  Dense = 6,
  BatchNorm = 7,
  Dropout = 8,
  Activation = 9,
};

// Counting policy for instrumented forward passes. NullCounter compiles to
// nothing; MultCounter tallies every scalar multiplication the kernel
// performs (bias additions excluded).
struct NullCounter {
  void add(std::uint64_t) const noexcept {}
};

struct MultCounter {
  std::uint64_t mults = 0;
  void add(std::uint64_t n) noexcept { mults += n; }
};

// Spatial contract of one convolution: input Pf(h) x Pf(w) x M, kernel
// Pk(h) x Pk(w), stride, output channels N. Padding is "same", so the
// output extent is ceil(input / stride).
struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0;
  std::size_t in_ch = 0, out_ch = 0;
  std::size_t kh = 3, kw = 3;
  std::size_t sh = 1, sw = 1;

  std::size_t out_h() const { return (in_h + sh - 1) / sh; }
  std::size_t out_w() const { return (in_w + sw - 1) / sw; }
  std::size_t kernel_area() const { return kh * kw; }

  std::size_t pad_h() const {
    const std::size_t span = (out_h() - 1) * sh + kh;
    return span > in_h ? span - in_h : 0;
  }
  std::size_t pad_w() const {
    const std::size_t span = (out_w() - 1) * sw + kw;
    return span > in_w ? span - in_w : 0;
  }

  void validate() const {
    if (in_h < 1 || in_w < 1 || in_ch < 1 || out_ch < 1)
      throw ValidationError("conv geometry: empty dimension");
    if (kh < 1 || kw < 1 || sh < 1 || sw < 1)
      throw ValidationError("conv geometry: kernel and stride must be >= 1");
  }
};

namespace detail {

inline void check_input(const Tensor& x, const ConvGeometry& g, const char* who) {
  if (x.rank() != 3 || x.dim(0) != g.in_h || x.dim(1) != g.in_w || x.dim(2) != g.in_ch)
    throw ValidationError(std::string(who) + ": input shape " + x.shape_str() +
                          " does not match geometry");
}

// Zero-padded copy for "same" convolution. Materializing the border keeps
// the inner loops branch-free, and makes the instrumented multiplication
// count exactly kernel_area per tap.
inline Tensor zero_pad(const Tensor& x, const ConvGeometry& g) {
  const std::size_t pt = g.pad_h() / 2, pl = g.pad_w() / 2;
  Tensor padded({g.in_h + g.pad_h(), g.in_w + g.pad_w(), g.in_ch});
  for (std::size_t y = 0; y < g.in_h; ++y)
    for (std::size_t x2 = 0; x2 < g.in_w; ++x2)
      for (std::size_t c = 0; c < g.in_ch; ++c)
        padded.at(y + pt, x2 + pl, c) = x.at(y, x2, c);
  return padded;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard convolution

struct ConvLayer {
  ConvGeometry geom;
  Tensor weight;  // (kh, kw, M, N)
  Tensor bias;    // (N)

  void validate() const {
    geom.validate();
    if (weight.rank() != 4 || weight.dim(0) != geom.kh || weight.dim(1) != geom.kw ||
        weight.dim(2) != geom.in_ch || weight.dim(3) != geom.out_ch)
      throw ValidationError("conv weight shape mismatch: " + weight.shape_str());
    if (bias.rank() != 1 || bias.dim(0) != geom.out_ch)
      throw ValidationError("conv bias shape mismatch");
  }
};

template <typename Counter>
Tensor conv2d_forward(const ConvLayer& l, const Tensor& x, Counter& counter) {
  l.validate();
  detail::check_input(x, l.geom, "conv2d");
  const ConvGeometry& g = l.geom;
  const Tensor padded = detail::zero_pad(x, g);
  Tensor out({g.out_h(), g.out_w(), g.out_ch});
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t n = 0; n < g.out_ch; ++n) {
        double acc = l.bias[n];
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx)
            for (std::size_t m = 0; m < g.in_ch; ++m) {
              acc += padded.at(oy * g.sh + ky, ox * g.sw + kx, m) *
                     l.weight.at(ky, kx, m, n);
              counter.add(1);
            }
        out.at(oy, ox, n) = acc;
      }
  return out;
}

inline Tensor conv2d_forward(const ConvLayer& l, const Tensor& x) {
  NullCounter c;
  return conv2d_forward(l, x, c);
}

struct ConvGrads {
  Tensor input, weight, bias;
};

inline ConvGrads conv2d_backward(const ConvLayer& l, const Tensor& x,
                                 const Tensor& grad_out) {
  l.validate();
  detail::check_input(x, l.geom, "conv2d_backward");
  const ConvGeometry& g = l.geom;
  if (grad_out.rank() != 3 || grad_out.dim(0) != g.out_h() ||
      grad_out.dim(1) != g.out_w() || grad_out.dim(2) != g.out_ch)
    throw ValidationError("conv2d_backward: grad shape mismatch");

  const Tensor padded = detail::zero_pad(x, g);
  Tensor gpad(padded.shape());
  ConvGrads grads{Tensor(x.shape()), Tensor(l.weight.shape()), Tensor(l.bias.shape())};
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t n = 0; n < g.out_ch; ++n) {
        const double go = grad_out.at(oy, ox, n);
        grads.bias[n] += go;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx)
            for (std::size_t m = 0; m < g.in_ch; ++m) {
              const std::size_t py = oy * g.sh + ky, px = ox * g.sw + kx;
              grads.weight.at(ky, kx, m, n) += padded.at(py, px, m) * go;
              gpad.at(py, px, m) += l.weight.at(ky, kx, m, n) * go;
            }
      }
  const std::size_t pt = g.pad_h() / 2, pl = g.pad_w() / 2;
  for (std::size_t y = 0; y < g.in_h; ++y)
    for (std::size_t x2 = 0; x2 < g.in_w; ++x2)
      for (std::size_t m = 0; m < g.in_ch; ++m)
        grads.input.at(y, x2, m) = gpad.at(y + pt, x2 + pl, m);
  return grads;
}

// ---------------------------------------------------------------------------
// Depthwise-separable convolution: per-channel spatial filter, then a 1x1
// mixing step. Equivalent to the composition of a depthwise pass and a
// pointwise standard conv, with far fewer multiplications.

struct DWSepConvLayer {
  ConvGeometry geom;
  Tensor depth_weight;  // (kh, kw, M)
  Tensor depth_bias;    // (M)
  Tensor point_weight;  // (M, N)
  Tensor point_bias;    // (N)

  void validate() const {
    geom.validate();
    if (depth_weight.rank() != 3 || depth_weight.dim(0) != geom.kh ||
        depth_weight.dim(1) != geom.kw || depth_weight.dim(2) != geom.in_ch)
      throw ValidationError("dwsep depth weight shape mismatch");
    if (depth_bias.rank() != 1 || depth_bias.dim(0) != geom.in_ch)
      throw ValidationError("dwsep depth bias shape mismatch");
    if (point_weight.rank() != 2 || point_weight.dim(0) != geom.in_ch ||
        point_weight.dim(1) != geom.out_ch)
      throw ValidationError("dwsep point weight shape mismatch");
    if (point_bias.rank() != 1 || point_bias.dim(0) != geom.out_ch)
      throw ValidationError("dwsep point bias shape mismatch");
  }

  // The intermediate per-channel maps; exposed for the backward pass.
  template <typename Counter>
  Tensor depthwise(const Tensor& x, Counter& counter) const {
    const ConvGeometry& g = geom;
    const Tensor padded = detail::zero_pad(x, g);
    Tensor mid({g.out_h(), g.out_w(), g.in_ch});
    for (std::size_t oy = 0; oy < g.out_h(); ++oy)
      for (std::size_t ox = 0; ox < g.out_w(); ++ox)
        for (std::size_t m = 0; m < g.in_ch; ++m) {
          double acc = depth_bias[m];
          for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              acc += padded.at(oy * g.sh + ky, ox * g.sw + kx, m) *
                     depth_weight.at(ky, kx, m);
              counter.add(1);
            }
          mid.at(oy, ox, m) = acc;
        }
    return mid;
  }
};

template <typename Counter>
Tensor dwsep_conv2d_forward(const DWSepConvLayer& l, const Tensor& x, Counter& counter) {
  l.validate();
  detail::check_input(x, l.geom, "dwsep_conv2d");
  const ConvGeometry& g = l.geom;
  const Tensor mid = l.depthwise(x, counter);
  Tensor out({g.out_h(), g.out_w(), g.out_ch});
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t n = 0; n < g.out_ch; ++n) {
        double acc = l.point_bias[n];
        for (std::size_t m = 0; m < g.in_ch; ++m) {
          acc += mid.at(oy, ox, m) * l.point_weight.at(m, n);
          counter.add(1);
        }
        out.at(oy, ox, n) = acc;
      }
  return out;
}

inline Tensor dwsep_conv2d_forward(const DWSepConvLayer& l, const Tensor& x) {
  NullCounter c;
  return dwsep_conv2d_forward(l, x, c);
}

struct DWSepGrads {
  Tensor input, depth_weight, depth_bias, point_weight, point_bias;
};

inline DWSepGrads dwsep_conv2d_backward(const DWSepConvLayer& l, const Tensor& x,
                                        const Tensor& grad_out) {
  l.validate();
  detail::check_input(x, l.geom, "dwsep_backward");
  const ConvGeometry& g = l.geom;
  if (grad_out.rank() != 3 || grad_out.dim(0) != g.out_h() ||
      grad_out.dim(1) != g.out_w() || grad_out.dim(2) != g.out_ch)
    throw ValidationError("dwsep_backward: grad shape mismatch");

  NullCounter nc;
  const Tensor mid = l.depthwise(x, nc);
  DWSepGrads grads{Tensor(x.shape()), Tensor(l.depth_weight.shape()),
                   Tensor(l.depth_bias.shape()), Tensor(l.point_weight.shape()),
                   Tensor(l.point_bias.shape())};

  // pointwise stage
  Tensor gmid(mid.shape());
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t n = 0; n < g.out_ch; ++n) {
        const double go = grad_out.at(oy, ox, n);
        grads.point_bias[n] += go;
        for (std::size_t m = 0; m < g.in_ch; ++m) {
          grads.point_weight.at(m, n) += mid.at(oy, ox, m) * go;
          gmid.at(oy, ox, m) += l.point_weight.at(m, n) * go;
        }
      }

  // depthwise stage
  const Tensor padded = detail::zero_pad(x, g);
  Tensor gpad(padded.shape());
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t m = 0; m < g.in_ch; ++m) {
        const double gm = gmid.at(oy, ox, m);
        grads.depth_bias[m] += gm;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const std::size_t py = oy * g.sh + ky, px = ox * g.sw + kx;
            grads.depth_weight.at(ky, kx, m) += padded.at(py, px, m) * gm;
            gpad.at(py, px, m) += l.depth_weight.at(ky, kx, m) * gm;
          }
      }
  const std::size_t pt = g.pad_h() / 2, pl = g.pad_w() / 2;
  for (std::size_t y = 0; y < g.in_h; ++y)
    for (std::size_t x2 = 0; x2 < g.in_w; ++x2)
      for (std::size_t m = 0; m < g.in_ch; ++m)
        grads.input.at(y, x2, m) = gpad.at(y + pt, x2 + pl, m);
  return grads;
}

// ---------------------------------------------------------------------------
// Gated convolution: feature map modulated by a learned logistic gate,
// y = conv_f(x) * sigmoid(conv_g(x)). Twice the parameters of one conv.

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct GatedConvLayer {
  ConvLayer feature;
  ConvLayer gate;

  void validate() const {
    feature.validate();
    gate.validate();
    if (feature.geom.out_h() != gate.geom.out_h() ||
        feature.geom.out_w() != gate.geom.out_w() ||
        feature.geom.out_ch != gate.geom.out_ch ||
        feature.geom.in_h != gate.geom.in_h || feature.geom.in_w != gate.geom.in_w ||
        feature.geom.in_ch != gate.geom.in_ch)
      throw ValidationError("gated conv: feature and gate geometries disagree");
  }
};

template <typename Counter>
Tensor gated_conv2d_forward(const GatedConvLayer& l, const Tensor& x, Counter& counter) {
  l.validate();
  const Tensor f = conv2d_forward(l.feature, x, counter);
  const Tensor g = conv2d_forward(l.gate, x, counter);
  Tensor out(f.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.raw()[i] = f.raw()[i] * sigmoid(g.raw()[i]);
  return out;
}

inline Tensor gated_conv2d_forward(const GatedConvLayer& l, const Tensor& x) {
  NullCounter c;
  return gated_conv2d_forward(l, x, c);
}

struct GatedConvGrads {
  Tensor input;
  ConvGrads feature, gate;
};

inline GatedConvGrads gated_conv2d_backward(const GatedConvLayer& l, const Tensor& x,
                                            const Tensor& grad_out) {
  l.validate();
  const Tensor f = conv2d_forward(l.feature, x);
  const Tensor g = conv2d_forward(l.gate, x);
  Tensor gf(f.shape()), gg(g.shape());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double s = sigmoid(g.raw()[i]);
    gf.raw()[i] = grad_out.raw()[i] * s;
    gg.raw()[i] = grad_out.raw()[i] * f.raw()[i] * s * (1.0 - s);
  }
  GatedConvGrads grads;
  grads.feature = conv2d_backward(l.feature, x, gf);
  grads.gate = conv2d_backward(l.gate, x, gg);
  grads.input = Tensor(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    grads.input.raw()[i] = grads.feature.input.raw()[i] + grads.gate.input.raw()[i];
  return grads;
}

// ---------------------------------------------------------------------------
// Max pooling, non-overlapping windows (stride = extent), valid padding.

struct MaxPoolLayer {
  std::size_t ph = 2, pw = 2;

  void validate() const {
    if (ph < 1 || pw < 1) throw ValidationError("pool extent must be >= 1");
  }
};

inline Tensor maxpool_forward(const MaxPoolLayer& l, const Tensor& x) {
  l.validate();
  if (x.rank() != 3) throw ValidationError("maxpool: rank-3 input required");
  const std::size_t oh = x.dim(0) / l.ph, ow = x.dim(1) / l.pw, ch = x.dim(2);
  if (oh < 1 || ow < 1) throw ValidationError("maxpool: input smaller than pool window");
  Tensor out({oh, ow, ch});
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t c = 0; c < ch; ++c) {
        double best = x.at(oy * l.ph, ox * l.pw, c);
        for (std::size_t dy = 0; dy < l.ph; ++dy)
          for (std::size_t dx = 0; dx < l.pw; ++dx)
            best = std::max(best, x.at(oy * l.ph + dy, ox * l.pw + dx, c));
        out.at(oy, ox, c) = best;
      }
  return out;
}

// Gradient routes to the first maximum in row-major window order, so ties
// break deterministically.
inline Tensor maxpool_backward(const MaxPoolLayer& l, const Tensor& x,
                               const Tensor& grad_out) {
  l.validate();
  const std::size_t oh = x.dim(0) / l.ph, ow = x.dim(1) / l.pw, ch = x.dim(2);
  if (grad_out.rank() != 3 || grad_out.dim(0) != oh || grad_out.dim(1) != ow ||
      grad_out.dim(2) != ch)
    throw ValidationError("maxpool_backward: grad shape mismatch");
  Tensor gin(x.shape());
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t c = 0; c < ch; ++c) {
        std::size_t by = oy * l.ph, bx = ox * l.pw;
        double best = x.at(by, bx, c);
        for (std::size_t dy = 0; dy < l.ph; ++dy)
          for (std::size_t dx = 0; dx < l.pw; ++dx)
            if (x.at(oy * l.ph + dy, ox * l.pw + dx, c) > best) {
              best = x.at(oy * l.ph + dy, ox * l.pw + dx, c);
              by = oy * l.ph + dy;
              bx = ox * l.pw + dx;
            }
        gin.at(by, bx, c) += grad_out.at(oy, ox, c);
      }
  return gin;
}

// ---------------------------------------------------------------------------
// Batch normalization, inference form: fixed running statistics, trainable
// scale and shift only (2 x channels parameters).

struct BatchNormLayer {
  std::size_t channels = 0;
  Tensor scale, shift;  // trainable
  Tensor mean, var;     // fixed statistics
  double eps = 1e-5;

  static BatchNormLayer make(std::size_t ch) {
    BatchNormLayer l;
    l.channels = ch;
    l.scale = Tensor({ch});
    l.scale.fill(1.0);
    l.shift = Tensor({ch});
    l.mean = Tensor({ch});
    l.var = Tensor({ch});
    l.var.fill(1.0);
    return l;
  }

  void validate() const {
    if (channels < 1 || scale.size() != channels || shift.size() != channels ||
        mean.size() != channels || var.size() != channels)
      throw ValidationError("batchnorm: parameter shape mismatch");
  }
};

inline Tensor batchnorm_forward(const BatchNormLayer& l, const Tensor& x) {
  l.validate();
  if (x.rank() < 1 || x.dim(x.rank() - 1) != l.channels)
    throw ValidationError("batchnorm: channel axis mismatch");
  Tensor out(x.shape());
  const std::size_t ch = l.channels;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = i % ch;
    const double inv_sd = 1.0 / std::sqrt(l.var[c] + l.eps);
    out.raw()[i] = l.scale[c] * (x.raw()[i] - l.mean[c]) * inv_sd + l.shift[c];
  }
  return out;
}

struct BatchNormGrads {
  Tensor input, scale, shift;
};

inline BatchNormGrads batchnorm_backward(const BatchNormLayer& l, const Tensor& x,
                                         const Tensor& grad_out) {
  l.validate();
  BatchNormGrads grads{Tensor(x.shape()), Tensor({l.channels}), Tensor({l.channels})};
  const std::size_t ch = l.channels;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = i % ch;
    const double inv_sd = 1.0 / std::sqrt(l.var[c] + l.eps);
    const double xhat = (x.raw()[i] - l.mean[c]) * inv_sd;
    const double go = grad_out.raw()[i];
    grads.input.raw()[i] = go * l.scale[c] * inv_sd;
    grads.scale[c] += go * xhat;
    grads.shift[c] += go;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// PReLU with one trainable slope per channel (last axis), initialized to 0.

struct PReLULayer {
  std::size_t channels = 0;
  Tensor alpha;

  static PReLULayer make(std::size_t ch) {
    PReLULayer l;
    l.channels = ch;
    l.alpha = Tensor({ch});
    return l;
  }

  void validate() const {
    if (channels < 1 || alpha.size() != channels)
      throw ValidationError("prelu: alpha shape mismatch");
  }
};

inline Tensor prelu_forward(const PReLULayer& l, const Tensor& x) {
  l.validate();
  if (x.dim(x.rank() - 1) != l.channels)
    throw ValidationError("prelu: channel axis mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.raw()[i];
    out.raw()[i] = v > 0 ? v : l.alpha[i % l.channels] * v;
  }
  return out;
}

struct PReLUGrads {
  Tensor input, alpha;
};

inline PReLUGrads prelu_backward(const PReLULayer& l, const Tensor& x,
                                 const Tensor& grad_out) {
  l.validate();
  PReLUGrads grads{Tensor(x.shape()), Tensor({l.channels})};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.raw()[i];
    const std::size_t c = i % l.channels;
    const double go = grad_out.raw()[i];
    if (v > 0) {
      grads.input.raw()[i] = go;
    } else {
      grads.input.raw()[i] = go * l.alpha[c];
      grads.alpha[c] += go * v;
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Inverted dropout. The mask carries the 1/(1-rate) rescale, so inference
// needs no correction and backward is a plain elementwise product.

struct DropoutResult {
  Tensor output, mask;
};

inline DropoutResult dropout_forward(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must be in [0,1)");
  DropoutResult r{Tensor(x.shape()), Tensor(x.shape())};
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = rng.unit() < rate ? 0.0 : keep_scale;
    r.mask.raw()[i] = m;
    r.output.raw()[i] = x.raw()[i] * m;
  }
  return r;
}

inline Tensor dropout_backward(const Tensor& mask, const Tensor& grad_out) {
  if (!mask.same_shape(grad_out)) throw ValidationError("dropout_backward shape mismatch");
  Tensor gin(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i)
    gin.raw()[i] = mask.raw()[i] * grad_out.raw()[i];
  return gin;
}

// ---------------------------------------------------------------------------
// Dense layer on a (T, D) sequence, plus row-stabilized softmax.

struct DenseLayer {
  std::size_t in_dim = 0, out_dim = 0;
  Tensor weight;  // (D, K)
  Tensor bias;    // (K)

  void validate() const {
    if (in_dim < 1 || out_dim < 1) throw ValidationError("dense: empty dimension");
    if (weight.rank() != 2 || weight.dim(0) != in_dim || weight.dim(1) != out_dim)
      throw ValidationError("dense weight shape mismatch");
    if (bias.rank() != 1 || bias.dim(0) != out_dim)
      throw ValidationError("dense bias shape mismatch");
  }
};

inline Tensor dense_forward(const DenseLayer& l, const Tensor& x) {
  l.validate();
  if (x.rank() != 2 || x.dim(1) != l.in_dim)
    throw ValidationError("dense: input shape " + x.shape_str() + " wants (T," +
                          std::to_string(l.in_dim) + ")");
  const std::size_t T = x.dim(0);
  Tensor out({T, l.out_dim});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < l.out_dim; ++k) {
      double acc = l.bias[k];
      for (std::size_t d = 0; d < l.in_dim; ++d)
        acc += x.at(t, d) * l.weight.at(d, k);
      out.at(t, k) = acc;
    }
  return out;
}

struct DenseGrads {
  Tensor input, weight, bias;
};

inline DenseGrads dense_backward(const DenseLayer& l, const Tensor& x,
                                 const Tensor& grad_out) {
  l.validate();
  const std::size_t T = x.dim(0);
  if (grad_out.rank() != 2 || grad_out.dim(0) != T || grad_out.dim(1) != l.out_dim)
    throw ValidationError("dense_backward: grad shape mismatch");
  DenseGrads grads{Tensor(x.shape()), Tensor(l.weight.shape()), Tensor(l.bias.shape())};
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < l.out_dim; ++k) {
      const double go = grad_out.at(t, k);
      grads.bias[k] += go;
      for (std::size_t d = 0; d < l.in_dim; ++d) {
        grads.weight.at(d, k) += x.at(t, d) * go;
        grads.input.at(t, d) += l.weight.at(d, k) * go;
      }
    }
  return grads;
}

inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ValidationError("softmax_rows: rank-2 input required");
  const std::size_t T = logits.dim(0), K = logits.dim(1);
  Tensor out({T, K});
  for (std::size_t t = 0; t < T; ++t) {
    double mx = logits.at(t, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(t, k));
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(logits.at(t, k) - mx);
      out.at(t, k) = e;
      sum += e;
    }
    for (std::size_t k = 0; k < K; ++k) out.at(t, k) /= sum;
  }
  return out;
}

inline Tensor dense_softmax(const DenseLayer& l, const Tensor& x) {
  return softmax_rows(dense_forward(l, x));
}

// ---------------------------------------------------------------------------
// Weight initialization

inline Tensor glorot_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in,
                             std::size_t fan_out, Rng& rng) {
  Tensor t(shape);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.size(); ++i) t.raw()[i] = rng.range(-limit, limit);
  return t;
}

// Orthogonal matrix via modified Gram-Schmidt on a Gaussian draw. For wide
// shapes the transpose is orthogonalized so rows come out orthonormal.
inline Tensor orthogonal_init(std::size_t rows, std::size_t cols, Rng& rng) {
  const bool wide = cols > rows;
  const std::size_t r = wide ? cols : rows, c = wide ? rows : cols;
  std::vector<std::vector<double>> q(c, std::vector<double>(r));
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < r; ++i) q[j][i] = rng.gaussian();
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < r; ++i) dot += q[j][i] * q[k][i];
      for (std::size_t i = 0; i < r; ++i) q[j][i] -= dot * q[k][i];
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < r; ++i) norm += q[j][i] * q[j][i];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw RuntimeFailure("orthogonal_init: degenerate draw");
    for (std::size_t i = 0; i < r; ++i) q[j][i] /= norm;
  }
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t.at(i, j) = wide ? q[i][j] : q[j][i];
  return t;
}

}  // namespace htr
