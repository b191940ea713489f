#pragma once

#include <cmath>
#include <vector>

#include "htr/layers.hpp"
#include "htr/tensor.hpp"
#include "htr/util.hpp"

namespace htr {

// Gated recurrent unit over a (T, D) sequence:
//   z_t = sigma(W_z x_t + U_z h_{t-1} + b_z)
//   r_t = sigma(W_r x_t + U_r h_{t-1} + b_r)
//   hc_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
//   h_t = (1 - z_t) * h_{t-1} + z_t * hc_t,   h_0 = 0
// With reverse set, the sequence is walked back to front and the output rows
// are written back in input order.
struct GRULayer {
  std::size_t in_dim = 0, units = 0;
  bool reverse = false;
  Tensor wz, wr, wh;  // (D, U)
  Tensor uz, ur, uh;  // (U, U)
  Tensor bz, br, bh;  // (U)

  static GRULayer make(std::size_t in_dim, std::size_t units, bool reverse) {
    GRULayer l;
    l.in_dim = in_dim;
    l.units = units;
    l.reverse = reverse;
    for (Tensor* t : {&l.wz, &l.wr, &l.wh}) *t = Tensor({in_dim, units});
    for (Tensor* t : {&l.uz, &l.ur, &l.uh}) *t = Tensor({units, units});
    for (Tensor* t : {&l.bz, &l.br, &l.bh}) *t = Tensor({units});
    return l;
  }

  void init(Rng& rng) {
    wz = glorot_uniform({in_dim, units}, in_dim, units, rng);
    wr = glorot_uniform({in_dim, units}, in_dim, units, rng);
    wh = glorot_uniform({in_dim, units}, in_dim, units, rng);
    uz = orthogonal_init(units, units, rng);
    ur = orthogonal_init(units, units, rng);
    uh = orthogonal_init(units, units, rng);
  }

  void validate() const {
    if (in_dim < 1 || units < 1) throw ValidationError("gru: empty dimension");
    const auto want2 = [&](const Tensor& t, std::size_t a, std::size_t b) {
      return t.rank() == 2 && t.dim(0) == a && t.dim(1) == b;
    };
    if (!want2(wz, in_dim, units) || !want2(wr, in_dim, units) || !want2(wh, in_dim, units))
      throw ValidationError("gru: input weight shape mismatch");
    if (!want2(uz, units, units) || !want2(ur, units, units) || !want2(uh, units, units))
      throw ValidationError("gru: recurrent weight shape mismatch");
    if (bz.size() != units || br.size() != units || bh.size() != units)
      throw ValidationError("gru: bias shape mismatch");
  }
};

// Per-timestep activations in iteration order, kept for BPTT.
struct GRUCache {
  Tensor z, r, hc, h;  // each (T, U)
};

namespace detail {

// y += M^T v  (M: (A,B), v: (A), y: (B))
inline void add_mat_t_vec(const Tensor& m, const std::vector<double>& v,
                          std::vector<double>& y) {
  for (std::size_t a = 0; a < m.dim(0); ++a)
    for (std::size_t b = 0; b < m.dim(1); ++b) y[b] += m.at(a, b) * v[a];
}

// y += M v  (M: (A,B), v: (B), y: (A))
inline void add_mat_vec(const Tensor& m, const std::vector<double>& v,
                        std::vector<double>& y) {
  for (std::size_t a = 0; a < m.dim(0); ++a)
    for (std::size_t b = 0; b < m.dim(1); ++b) y[a] += m.at(a, b) * v[b];
}

}  // namespace detail

inline Tensor gru_forward(const GRULayer& l, const Tensor& x, GRUCache* cache = nullptr) {
  l.validate();
  if (x.rank() != 2 || x.dim(1) != l.in_dim)
    throw ValidationError("gru: input shape " + x.shape_str() + " wants (T," +
                          std::to_string(l.in_dim) + ")");
  const std::size_t T = x.dim(0), U = l.units, D = l.in_dim;
  Tensor out({T, U});
  if (cache) {
    cache->z = Tensor({T, U});
    cache->r = Tensor({T, U});
    cache->hc = Tensor({T, U});
    cache->h = Tensor({T, U});
  }
  if (T == 0) return out;

  std::vector<double> h(U, 0.0), az(U), ar(U), ah(U), rh(U);
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = l.reverse ? T - 1 - step : step;
    for (std::size_t u = 0; u < U; ++u) {
      az[u] = l.bz[u];
      ar[u] = l.br[u];
      ah[u] = l.bh[u];
    }
    for (std::size_t d = 0; d < D; ++d) {
      const double xv = x.at(t, d);
      if (xv == 0.0) continue;
      for (std::size_t u = 0; u < U; ++u) {
        az[u] += xv * l.wz.at(d, u);
        ar[u] += xv * l.wr.at(d, u);
        ah[u] += xv * l.wh.at(d, u);
      }
    }
    detail::add_mat_t_vec(l.uz, h, az);
    detail::add_mat_t_vec(l.ur, h, ar);
    for (std::size_t u = 0; u < U; ++u) {
      az[u] = sigmoid(az[u]);
      ar[u] = sigmoid(ar[u]);
      rh[u] = ar[u] * h[u];
    }
    detail::add_mat_t_vec(l.uh, rh, ah);
    for (std::size_t u = 0; u < U; ++u) {
      const double hc = std::tanh(ah[u]);
      const double hn = (1.0 - az[u]) * h[u] + az[u] * hc;
      if (cache) {
        cache->z.at(step, u) = az[u];
        cache->r.at(step, u) = ar[u];
        cache->hc.at(step, u) = hc;
        cache->h.at(step, u) = hn;
      }
      out.at(t, u) = hn;
      h[u] = hn;
    }
  }
  return out;
}

struct GRUGrads {
  Tensor input;                // (T, D), input order
  Tensor wz, wr, wh;           // (D, U)
  Tensor uz, ur, uh;           // (U, U)
  Tensor bz, br, bh;           // (U)
};

// Backpropagation through time. grad_out rows are in input order, like the
// forward output; a reverse-direction layer remaps them internally.
inline GRUGrads gru_backward(const GRULayer& l, const Tensor& x, const GRUCache& cache,
                             const Tensor& grad_out) {
  l.validate();
  const std::size_t T = x.dim(0), U = l.units, D = l.in_dim;
  if (grad_out.rank() != 2 || grad_out.dim(0) != T || grad_out.dim(1) != U)
    throw ValidationError("gru_backward: grad shape mismatch");
  GRUGrads g{Tensor({T, D}),  Tensor({D, U}), Tensor({D, U}), Tensor({D, U}),
             Tensor({U, U}),  Tensor({U, U}), Tensor({U, U}), Tensor({U}),
             Tensor({U}),     Tensor({U})};
  if (T == 0) return g;

  std::vector<double> dh(U, 0.0);  // gradient flowing into h_step
  std::vector<double> daz(U), dar(U), dah(U), drh(U), hprev(U), dhprev(U);
  for (std::size_t step = T; step-- > 0;) {
    const std::size_t t = l.reverse ? T - 1 - step : step;
    for (std::size_t u = 0; u < U; ++u) dh[u] += grad_out.at(t, u);

    for (std::size_t u = 0; u < U; ++u)
      hprev[u] = step == 0 ? 0.0 : cache.h.at(step - 1, u);

    for (std::size_t u = 0; u < U; ++u) {
      const double z = cache.z.at(step, u), hc = cache.hc.at(step, u);
      const double dz = dh[u] * (hc - hprev[u]);
      const double dhc = dh[u] * z;
      dhprev[u] = dh[u] * (1.0 - z);
      dah[u] = dhc * (1.0 - hc * hc);
      daz[u] = dz * z * (1.0 - z);
      dar[u] = 0.0;  // filled after drh is known
      drh[u] = 0.0;
    }
    // through U_h (r*h_prev) term
    detail::add_mat_vec(l.uh, dah, drh);
    for (std::size_t u = 0; u < U; ++u) {
      const double r = cache.r.at(step, u);
      dar[u] = drh[u] * hprev[u] * r * (1.0 - r);
      dhprev[u] += drh[u] * r;
    }
    // recurrent weight grads and carries through U_z, U_r
    for (std::size_t a = 0; a < U; ++a)
      for (std::size_t b = 0; b < U; ++b) {
        g.uz.at(a, b) += hprev[a] * daz[b];
        g.ur.at(a, b) += hprev[a] * dar[b];
        g.uh.at(a, b) += cache.r.at(step, a) * hprev[a] * dah[b];
      }
    detail::add_mat_vec(l.uz, daz, dhprev);
    detail::add_mat_vec(l.ur, dar, dhprev);
    // input weight grads and input gradient
    for (std::size_t d = 0; d < D; ++d) {
      const double xv = x.at(t, d);
      double dx = 0.0;
      for (std::size_t u = 0; u < U; ++u) {
        g.wz.at(d, u) += xv * daz[u];
        g.wr.at(d, u) += xv * dar[u];
        g.wh.at(d, u) += xv * dah[u];
        dx += l.wz.at(d, u) * daz[u] + l.wr.at(d, u) * dar[u] + l.wh.at(d, u) * dah[u];
      }
      g.input.at(t, d) = dx;
    }
    for (std::size_t u = 0; u < U; ++u) {
      g.bz[u] += daz[u];
      g.br[u] += dar[u];
      g.bh[u] += dah[u];
      dh[u] = dhprev[u];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Bidirectional wrapper: forward and backward passes concatenated along the
// feature axis, output (T, 2U).

struct BGRULayer {
  GRULayer fwd, bwd;

  static BGRULayer make(std::size_t in_dim, std::size_t units) {
    return BGRULayer{GRULayer::make(in_dim, units, false),
                     GRULayer::make(in_dim, units, true)};
  }

  void init(Rng& rng) {
    fwd.init(rng);
    bwd.init(rng);
  }

  void validate() const {
    fwd.validate();
    bwd.validate();
    if (fwd.units != bwd.units || fwd.in_dim != bwd.in_dim)
      throw ValidationError("bgru: direction dimensions disagree");
    if (fwd.reverse || !bwd.reverse)
      throw ValidationError("bgru: direction flags misconfigured");
  }
};

struct BGRUCache {
  GRUCache fwd, bwd;
};

inline Tensor bgru_forward(const BGRULayer& l, const Tensor& x, BGRUCache* cache = nullptr) {
  l.validate();
  const Tensor hf = gru_forward(l.fwd, x, cache ? &cache->fwd : nullptr);
  const Tensor hb = gru_forward(l.bwd, x, cache ? &cache->bwd : nullptr);
  const std::size_t T = x.dim(0), U = l.fwd.units;
  Tensor out({T, 2 * U});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u) {
      out.at(t, u) = hf.at(t, u);
      out.at(t, U + u) = hb.at(t, u);
    }
  return out;
}

struct BGRUGrads {
  Tensor input;
  GRUGrads fwd, bwd;
};

inline BGRUGrads bgru_backward(const BGRULayer& l, const Tensor& x, const BGRUCache& cache,
                               const Tensor& grad_out) {
  l.validate();
  const std::size_t T = x.dim(0), U = l.fwd.units;
  if (grad_out.rank() != 2 || grad_out.dim(0) != T || grad_out.dim(1) != 2 * U)
    throw ValidationError("bgru_backward: grad shape mismatch");
  Tensor gf({T, U}), gb({T, U});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u) {
      gf.at(t, u) = grad_out.at(t, u);
      gb.at(t, u) = grad_out.at(t, U + u);
    }
  BGRUGrads g;
  g.fwd = gru_backward(l.fwd, x, cache.fwd, gf);
  g.bwd = gru_backward(l.bwd, x, cache.bwd, gb);
  g.input = Tensor({T, l.fwd.in_dim});
  for (std::size_t i = 0; i < g.input.size(); ++i)
    g.input.raw()[i] = g.fwd.input.raw()[i] + g.bwd.input.raw()[i];
  return g;
}

}  // namespace htr
