#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "moemamba/errors.hpp"
#include "moemamba/mamba.hpp"

namespace moemamba {

template <typename T>
void linear_recurrence_sequential(const T* a, const T* b, T* h, std::size_t length, std::size_t width) {
  if (length == 0) return;
  std::copy_n(b, width, h);
  for (std::size_t t = 1; t < length; ++t) {
    const T* at = a + t * width;
    const T* bt = b + t * width;
    const T* prev = h + (t - 1) * width;
    T* cur = h + t * width;
    for (std::size_t i = 0; i < width; ++i) cur[i] = at[i] * prev[i] + bt[i];
  }
}

template <typename T>
void linear_recurrence_parallel(const T* a, const T* b, T* h, std::size_t length, std::size_t width) {
  if (length == 0) return;
  std::size_t padded = 1;
  while (padded < length) padded <<= 1;

  std::vector<T> ea(padded * width, T(1));
  std::vector<T> eb(padded * width, T(0));
  std::copy_n(a, length * width, ea.begin());
  std::copy_n(b, length * width, eb.begin());

  // Up-sweep: node i becomes combine(node i - stride, node i).
  for (std::size_t stride = 1; stride < padded; stride <<= 1) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      T* ai = ea.data() + i * width;
      T* bi = eb.data() + i * width;
      const T* al = ea.data() + (i - stride) * width;
      const T* bl = eb.data() + (i - stride) * width;
      for (std::size_t k = 0; k < width; ++k) {
        bi[k] = ai[k] * bl[k] + bi[k];
        ai[k] = al[k] * ai[k];
      }
    }
  }

  // Down-sweep to exclusive prefixes, starting from the identity at the root.
  std::fill_n(ea.begin() + (padded - 1) * width, width, T(1));
  std::fill_n(eb.begin() + (padded - 1) * width, width, T(0));
  for (std::size_t stride = padded >> 1; stride >= 1; stride >>= 1) {
    for (std::size_t i = 2 * stride - 1; i < padded; i += 2 * stride) {
      T* ai = ea.data() + i * width;
      T* bi = eb.data() + i * width;
      T* al = ea.data() + (i - stride) * width;
      T* bl = eb.data() + (i - stride) * width;
      for (std::size_t k = 0; k < width; ++k) {
        const T left_a = al[k];
        const T left_b = bl[k];
        al[k] = ai[k];
        bl[k] = bi[k];
        // prefix(parent) first, then the left subtree.
        bi[k] = left_a * bi[k] + left_b;
        ai[k] = ai[k] * left_a;
      }
    }
    if (stride == 1) break;
  }

  // Inclusive state: apply element t to the exclusive prefix's state.
  for (std::size_t t = 0; t < length; ++t) {
    const T* at = a + t * width;
    const T* bt = b + t * width;
    const T* excl = eb.data() + t * width;
    T* cur = h + t * width;
    for (std::size_t k = 0; k < width; ++k) cur[k] = at[k] * excl[k] + bt[k];
  }
}

namespace {

struct ScanDims {
  std::size_t batch, length, inner, state;
};

template <typename T>
ScanDims check_scan_shapes(const Tensor<T>& a_bar, const Tensor<T>& bu_bar, const Tensor<T>& c, const Tensor<T>& d,
                           const Tensor<T>& u) {
  if (a_bar.dim() != 4 || bu_bar.shape() != a_bar.shape()) {
    throw ShapeError("selective_scan: Abar " + shape_str(a_bar.shape()) + " and BbarU " +
                     shape_str(bu_bar.shape()) + " must both be [B, L, Ed, ds]");
  }
  const ScanDims dims{a_bar.size(0), a_bar.size(1), a_bar.size(2), a_bar.size(3)};
  if (c.shape() != Shape{dims.batch, dims.length, dims.state}) {
    throw ShapeError("selective_scan: C " + shape_str(c.shape()) + " does not match Abar " + shape_str(a_bar.shape()));
  }
  if (d.shape() != Shape{dims.inner}) {
    throw ShapeError("selective_scan: D " + shape_str(d.shape()) + " does not match Abar " + shape_str(a_bar.shape()));
  }
  if (u.shape() != Shape{dims.batch, dims.length, dims.inner}) {
    throw ShapeError("selective_scan: u " + shape_str(u.shape()) + " does not match Abar " + shape_str(a_bar.shape()));
  }
  return dims;
}

template <typename T>
Tensor<T> selective_scan(const char* name, bool parallel, const Tensor<T>& a_bar, const Tensor<T>& bu_bar,
                         const Tensor<T>& c, const Tensor<T>& d, const Tensor<T>& u) {
  const ScanDims dims = check_scan_shapes(a_bar, bu_bar, c, d, u);
  const std::size_t width = dims.inner * dims.state;
  const std::size_t per_batch = dims.length * width;

  std::vector<T> h(a_bar.numel());
  for (std::size_t b = 0; b < dims.batch; ++b) {
    const T* ab = a_bar.data().data() + b * per_batch;
    const T* bb = bu_bar.data().data() + b * per_batch;
    if (parallel) {
      linear_recurrence_parallel(ab, bb, h.data() + b * per_batch, dims.length, width);
    } else {
      linear_recurrence_sequential(ab, bb, h.data() + b * per_batch, dims.length, width);
    }
  }

  const auto cv = c.data();
  const auto dv = d.data();
  const auto uv = u.data();
  std::vector<T> y(dims.batch * dims.length * dims.inner);
  for (std::size_t bt = 0; bt < dims.batch * dims.length; ++bt) {
    const T* crow = cv.data() + bt * dims.state;
    for (std::size_t e = 0; e < dims.inner; ++e) {
      const T* hrow = h.data() + (bt * dims.inner + e) * dims.state;
      T acc = T(0);
      for (std::size_t s = 0; s < dims.state; ++s) acc += crow[s] * hrow[s];
      y[bt * dims.inner + e] = acc + dv[e] * uv[bt * dims.inner + e];
    }
  }

  return make_op_result<T>(
      name, Shape{dims.batch, dims.length, dims.inner}, std::move(y), {a_bar, bu_bar, c, d, u},
      [a_bar, bu_bar, c, d, u, dims, parallel, h = std::move(h)](std::span<const T> gy, std::span<const T>) {
        const std::size_t width = dims.inner * dims.state;
        const std::size_t per_batch = dims.length * width;
        const auto av = a_bar.data();
        const auto cv = c.data();
        const auto dv = d.data();
        const auto uv = u.data();

        // Gradient w.r.t. the states, gh_t = C_t * dy_t + Abar_{t+1} * gh_{t+1}.
        std::vector<T> gh(h.size());
        std::vector<T> rev_a, rev_b, rev_h;
        if (parallel) {
          rev_a.resize(per_batch);
          rev_b.resize(per_batch);
          rev_h.resize(per_batch);
        }
        for (std::size_t b = 0; b < dims.batch; ++b) {
          const T* ab = av.data() + b * per_batch;
          T* ghb = gh.data() + b * per_batch;
          auto inject = [&](std::size_t t, T* dst) {
            const T* crow = cv.data() + (b * dims.length + t) * dims.state;
            const T* grow = gy.data() + (b * dims.length + t) * dims.inner;
            for (std::size_t e = 0; e < dims.inner; ++e) {
              for (std::size_t s = 0; s < dims.state; ++s) dst[e * dims.state + s] = crow[s] * grow[e];
            }
          };
          if (!parallel) {
            for (std::size_t t = dims.length; t-- > 0;) {
              T* cur = ghb + t * width;
              inject(t, cur);
              if (t + 1 < dims.length) {
                const T* next = ghb + (t + 1) * width;
                const T* anext = ab + (t + 1) * width;
                for (std::size_t k = 0; k < width; ++k) cur[k] += anext[k] * next[k];
              }
            }
          } else {
            // Reverse time so the adjoint recurrence runs forward through the same scan.
            for (std::size_t tau = 0; tau < dims.length; ++tau) {
              const std::size_t t = dims.length - 1 - tau;
              inject(t, rev_b.data() + tau * width);
              if (tau == 0) {
                std::fill_n(rev_a.data(), width, T(0));
              } else {
                std::copy_n(ab + (t + 1) * width, width, rev_a.data() + tau * width);
              }
            }
            linear_recurrence_parallel(rev_a.data(), rev_b.data(), rev_h.data(), dims.length, width);
            for (std::size_t tau = 0; tau < dims.length; ++tau) {
              std::copy_n(rev_h.data() + tau * width, width, ghb + (dims.length - 1 - tau) * width);
            }
          }
        }

        if (wants_grad(a_bar)) {
          auto ga = a_bar.grad_buffer();
          for (std::size_t b = 0; b < dims.batch; ++b) {
            for (std::size_t t = 1; t < dims.length; ++t) {
              const std::size_t off = b * per_batch + t * width;
              const T* prev = h.data() + off - width;
              for (std::size_t k = 0; k < width; ++k) ga[off + k] += gh[off + k] * prev[k];
            }
          }
        }
        if (wants_grad(bu_bar)) {
          auto gb = bu_bar.grad_buffer();
          for (std::size_t i = 0; i < gh.size(); ++i) gb[i] += gh[i];
        }
        if (wants_grad(c)) {
          auto gc = c.grad_buffer();
          for (std::size_t bt = 0; bt < dims.batch * dims.length; ++bt) {
            T* gcrow = gc.data() + bt * dims.state;
            for (std::size_t e = 0; e < dims.inner; ++e) {
              const T g = gy[bt * dims.inner + e];
              const T* hrow = h.data() + (bt * dims.inner + e) * dims.state;
              for (std::size_t s = 0; s < dims.state; ++s) gcrow[s] += g * hrow[s];
            }
          }
        }
        if (wants_grad(d)) {
          auto gd = d.grad_buffer();
          for (std::size_t bt = 0; bt < dims.batch * dims.length; ++bt) {
            for (std::size_t e = 0; e < dims.inner; ++e) gd[e] += gy[bt * dims.inner + e] * uv[bt * dims.inner + e];
          }
        }
        if (wants_grad(u)) {
          auto gu = u.grad_buffer();
          for (std::size_t bt = 0; bt < dims.batch * dims.length; ++bt) {
            for (std::size_t e = 0; e < dims.inner; ++e) gu[bt * dims.inner + e] += gy[bt * dims.inner + e] * dv[e];
          }
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> selective_scan_sequential(const Tensor<T>& a_bar, const Tensor<T>& bu_bar, const Tensor<T>& c,
                                    const Tensor<T>& d, const Tensor<T>& u) {
  return selective_scan("selective_scan_sequential", false, a_bar, bu_bar, c, d, u);
}

template <typename T>
Tensor<T> selective_scan_parallel(const Tensor<T>& a_bar, const Tensor<T>& bu_bar, const Tensor<T>& c,
                                  const Tensor<T>& d, const Tensor<T>& u) {
  return selective_scan("selective_scan_parallel", true, a_bar, bu_bar, c, d, u);
}

template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                          const Tensor<T>& u) {
  if (delta.dim() != 3 || u.shape() != delta.shape()) {
    throw ShapeError("discretize: delta " + shape_str(delta.shape()) + " and u " + shape_str(u.shape()) +
                     " must both be [B, L, Ed]");
  }
  const std::size_t batch = delta.size(0);
  const std::size_t length = delta.size(1);
  const std::size_t inner = delta.size(2);
  if (a.dim() != 2 || a.size(0) != inner) {
    throw ShapeError("discretize: A " + shape_str(a.shape()) + " does not match delta " + shape_str(delta.shape()));
  }
  const std::size_t state = a.size(1);
  if (b.shape() != Shape{batch, length, state} || c.shape() != b.shape()) {
    throw ShapeError("discretize: B " + shape_str(b.shape()) + " / C " + shape_str(c.shape()) +
                     " must be [B, L, ds] with ds = " + std::to_string(state));
  }
  const std::size_t rows = batch * length;
  const Shape out_shape{batch, length, inner, state};

  const auto dv = delta.data();
  const auto av = a.data();
  const auto bv = b.data();
  const auto uv = u.data();

  std::vector<T> a_bar(rows * inner * state);
  std::vector<T> bu_bar(rows * inner * state);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* brow = bv.data() + r * state;
    for (std::size_t e = 0; e < inner; ++e) {
      const T dt = dv[r * inner + e];
      const T du = dt * uv[r * inner + e];
      const T* arow = av.data() + e * state;
      T* abar = a_bar.data() + (r * inner + e) * state;
      T* bubar = bu_bar.data() + (r * inner + e) * state;
      for (std::size_t s = 0; s < state; ++s) {
        abar[s] = std::exp(dt * arow[s]);
        bubar[s] = du * brow[s];
      }
    }
  }

  Tensor<T> a_out = make_op_result<T>(
      "discretize_a", out_shape, std::move(a_bar), {delta, a},
      [delta, a, rows, inner, state](std::span<const T> g, std::span<const T> out) {
        const auto dv = delta.data();
        const auto av = a.data();
        T* gd = wants_grad(delta) ? delta.grad_buffer().data() : nullptr;
        T* ga = wants_grad(a) ? a.grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t e = 0; e < inner; ++e) {
            const std::size_t base = (r * inner + e) * state;
            const T dt = dv[r * inner + e];
            const T* arow = av.data() + e * state;
            T acc = T(0);
            for (std::size_t s = 0; s < state; ++s) {
              const T go = g[base + s] * out[base + s];
              acc += go * arow[s];
              if (ga) ga[e * state + s] += go * dt;
            }
            if (gd) gd[r * inner + e] += acc;
          }
        }
      });

  Tensor<T> bu_out = make_op_result<T>(
      "discretize_b", out_shape, std::move(bu_bar), {delta, b, u},
      [delta, b, u, rows, inner, state](std::span<const T> g, std::span<const T>) {
        const auto dv = delta.data();
        const auto bv = b.data();
        const auto uv = u.data();
        T* gd = wants_grad(delta) ? delta.grad_buffer().data() : nullptr;
        T* gb = wants_grad(b) ? b.grad_buffer().data() : nullptr;
        T* gu = wants_grad(u) ? u.grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* brow = bv.data() + r * state;
          for (std::size_t e = 0; e < inner; ++e) {
            const std::size_t base = (r * inner + e) * state;
            const T dt = dv[r * inner + e];
            const T uu = uv[r * inner + e];
            T gb_dot = T(0);
            for (std::size_t s = 0; s < state; ++s) {
              gb_dot += g[base + s] * brow[s];
              if (gb) gb[r * state + s] += g[base + s] * dt * uu;
            }
            if (gd) gd[r * inner + e] += gb_dot * uu;
            if (gu) gu[r * inner + e] += gb_dot * dt;
          }
        }
      });

  return {std::move(a_out), std::move(bu_out), c};
}

template <typename T>
Tensor<T> selective_scan_fused(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c,
                               const Tensor<T>& d, const Tensor<T>& u) {
  if (delta.dim() != 3 || u.shape() != delta.shape()) {
    throw ShapeError("selective_scan_fused: delta " + shape_str(delta.shape()) + " and u " + shape_str(u.shape()) +
                     " must both be [B, L, Ed]");
  }
  const ScanDims dims{delta.size(0), delta.size(1), delta.size(2), a.dim() == 2 ? a.size(1) : 0};
  if (a.dim() != 2 || a.size(0) != dims.inner || dims.state == 0) {
    throw ShapeError("selective_scan_fused: A " + shape_str(a.shape()) + " does not match delta " +
                     shape_str(delta.shape()));
  }
  if (b.shape() != Shape{dims.batch, dims.length, dims.state} || c.shape() != b.shape()) {
    throw ShapeError("selective_scan_fused: B " + shape_str(b.shape()) + " / C " + shape_str(c.shape()) +
                     " must be [B, L, ds]");
  }
  if (d.shape() != Shape{dims.inner}) {
    throw ShapeError("selective_scan_fused: D " + shape_str(d.shape()) + " does not match Ed " +
                     std::to_string(dims.inner));
  }

  const std::size_t width = dims.inner * dims.state;
  const auto dtv = delta.data();
  const auto av = a.data();
  const auto bv = b.data();
  const auto cv = c.data();
  const auto dv = d.data();
  const auto uv = u.data();

  std::vector<T> h(dims.batch * dims.length * width);
  std::vector<T> abar_saved(h.size());
  std::vector<T> y(dims.batch * dims.length * dims.inner);
  for (std::size_t b_i = 0; b_i < dims.batch; ++b_i) {
    for (std::size_t t = 0; t < dims.length; ++t) {
      const std::size_t row = b_i * dims.length + t;
      const T* brow = bv.data() + row * dims.state;
      const T* crow = cv.data() + row * dims.state;
      T* hcur = h.data() + row * width;
      const T* hprev = t > 0 ? hcur - width : nullptr;
      for (std::size_t e = 0; e < dims.inner; ++e) {
        const T dt = dtv[row * dims.inner + e];
        const T du = dt * uv[row * dims.inner + e];
        const T* arow = av.data() + e * dims.state;
        T* he = hcur + e * dims.state;
        T* abar_e = abar_saved.data() + row * width + e * dims.state;
        for (std::size_t s = 0; s < dims.state; ++s) abar_e[s] = std::exp(dt * arow[s]);
        T acc = T(0);
        for (std::size_t s = 0; s < dims.state; ++s) {
          const T abar = abar_e[s];
          const T prev = hprev ? hprev[e * dims.state + s] : T(0);
          he[s] = abar * prev + du * brow[s];
          acc += crow[s] * he[s];
        }
        y[row * dims.inner + e] = acc + dv[e] * uv[row * dims.inner + e];
      }
    }
  }

  return make_op_result<T>(
      "selective_scan_fused", Shape{dims.batch, dims.length, dims.inner}, std::move(y), {delta, a, b, c, d, u},
      [delta, a, b, c, d, u, dims, h = std::move(h), abar_saved = std::move(abar_saved)](std::span<const T> gy,
                                                                                     std::span<const T>) {
        const std::size_t width = dims.inner * dims.state;
        const auto dtv = delta.data();
        const auto av = a.data();
        const auto bv = b.data();
        const auto cv = c.data();
        const auto dv = d.data();
        const auto uv = u.data();
        std::vector<T> g_delta(delta.numel(), T(0)), g_a(a.numel(), T(0)), g_b(b.numel(), T(0)),
            g_c(c.numel(), T(0)), g_d(d.numel(), T(0)), g_u(u.numel(), T(0));
        // carry[e, s] = Abar_{t+1} * gh_{t+1}
        std::vector<T> carry(width);
        for (std::size_t b_i = 0; b_i < dims.batch; ++b_i) {
          std::fill(carry.begin(), carry.end(), T(0));
          for (std::size_t t = dims.length; t-- > 0;) {
            const std::size_t row = b_i * dims.length + t;
            const T* brow = bv.data() + row * dims.state;
            const T* crow = cv.data() + row * dims.state;
            const T* hcur = h.data() + row * width;
            const T* hprev = t > 0 ? hcur - width : nullptr;
            T* gbrow = g_b.data() + row * dims.state;
            T* gcrow = g_c.data() + row * dims.state;
            for (std::size_t e = 0; e < dims.inner; ++e) {
              const std::size_t ie = row * dims.inner + e;
              const T dy = gy[ie];
              const T dt = dtv[ie];
              const T uu = uv[ie];
              const T du = dt * uu;
              const T* arow = av.data() + e * dims.state;
              T* garow = g_a.data() + e * dims.state;
              T* ce = carry.data() + e * dims.state;
              const T* abar_e = abar_saved.data() + row * width + e * dims.state;
              T g_dt = T(0);
              T g_bu_b = T(0);  // sum_s gh * B[s]
              for (std::size_t s = 0; s < dims.state; ++s) {
                const T he = hcur[e * dims.state + s];
                gcrow[s] += dy * he;
                const T gh = crow[s] * dy + ce[s];
                const T abar = abar_e[s];
                if (hprev) {
                  const T g_abar = gh * hprev[e * dims.state + s] * abar;
                  g_dt += g_abar * arow[s];
                  garow[s] += g_abar * dt;
                }
                g_bu_b += gh * brow[s];
                gbrow[s] += gh * du;
                ce[s] = abar * gh;
              }
              g_delta[ie] += g_bu_b * uu;
              g_delta[ie] += g_dt;
              g_u[ie] += g_bu_b * dt + dy * dv[e];
              g_d[e] += dy * uu;
            }
          }
        }
        auto accumulate = [](const Tensor<T>& t, const std::vector<T>& src) {
          if (!wants_grad(t)) return;
          auto dst = t.grad_buffer();
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        accumulate(delta, g_delta);
        accumulate(a, g_a);
        accumulate(b, g_b);
        accumulate(c, g_c);
        accumulate(d, g_d);
        accumulate(u, g_u);
      });
}

#define MOEMAMBA_INSTANTIATE_SCAN(T)                                                                               \
  template void linear_recurrence_sequential(const T*, const T*, T*, std::size_t, std::size_t);                    \
  template void linear_recurrence_parallel(const T*, const T*, T*, std::size_t, std::size_t);                      \
  template Tensor<T> selective_scan_sequential(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                               const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> selective_scan_parallel(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                             const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> selective_scan_fused(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                          const Tensor<T>&, const Tensor<T>&);                                     \
  template Discretized<T> discretize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                     const Tensor<T>&);

MOEMAMBA_INSTANTIATE_SCAN(float)
MOEMAMBA_INSTANTIATE_SCAN(double)

}  // namespace moemamba
