#include "distil/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "distil/errors.hpp"

namespace distil::ops {

namespace {

using detail::dispatch;
using detail::make_output;
using ImplPtr = std::shared_ptr<TensorImpl>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(a.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  require_same_dtype(a, b, op);
}

void require_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw ConfigError("temperature must be positive and finite, got " + std::to_string(t));
  }
}

template <typename T>
const std::vector<T>& out_grad(const TensorImpl& out) {
  return std::get<std::vector<T>>(out.grad);
}

// out[m, n] += a[m, k] * b[k, n]  (accumulated in double)
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n,
             std::vector<double>& acc) {
  acc.resize(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
    }
    T* orow = out + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<T>(orow[j] + acc[j]);
  }
}

// da[m, k] += g[m, n] * b[k, n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  std::vector<double> acc(k);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* grow = g + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = grow[j];
      const T* btrow = bt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) acc[p] += gij * btrow[p];
    }
    T* darow = da + i * k;
    for (std::size_t p = 0; p < k; ++p) darow[p] = static_cast<T>(darow[p] + acc[p]);
  }
}

// db[k, n] += a[m, k]^T * g[m, n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* db, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t p = 0; p < k; ++p) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = a[i * k + p];
      const T* grow = g + i * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * grow[j];
    }
    T* drow = db + p * n;
    for (std::size_t j = 0; j < n; ++j) drow[j] = static_cast<T>(drow[j] + acc[j]);
  }
}

// Softmax of z / temperature into probs (double); returns log-sum-exp of z / T.
template <typename T>
double softmax_row(const T* z, std::size_t n, double inv_t, double* probs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, z[j] * inv_t);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    probs[j] = std::exp(z[j] * inv_t - mx);
    total += probs[j];
  }
  for (std::size_t j = 0; j < n; ++j) probs[j] /= total;
  return mx + std::log(total);
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw DimensionError(std::string(op) + ": rank-0 tensor");
  return t.shape().back();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_dtype(a, b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  ImplPtr ai = a.shared_impl(), bi = b.shared_impl();
  Tensor out = make_output({m, n}, a.dtype(), {a, b}, "matmul", [ai, bi, m, k, n](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      if (ai->requires_grad) gemm_nt(g.data(), bi->values<T>().data(), ai->grad_buffer<T>().data(), m, k, n);
      if (bi->requires_grad) gemm_tn(ai->values<T>().data(), g.data(), bi->grad_buffer<T>().data(), m, k, n);
    });
  });
  dispatch(a.dtype(), [&]<typename T>() {
    std::vector<double> acc;
    gemm_nn(ai->values<T>().data(), bi->values<T>().data(), out.data<T>().data(), m, k, n, acc);
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  require_same_dtype(x, w, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined()) {
    require_same_dtype(x, bias, "linear");
    if (bias.rank() != 1 || bias.dim(0) != n) {
      throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                           shape_str(w.shape()));
    }
  }
  ImplPtr xi = x.shared_impl(), wi = w.shared_impl();
  ImplPtr bi = bias.defined() ? bias.shared_impl() : nullptr;
  Tensor out = make_output({m, n}, x.dtype(), {x, w, bias}, "linear", [xi, wi, bi, m, k, n](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      if (xi->requires_grad) gemm_nt(g.data(), wi->values<T>().data(), xi->grad_buffer<T>().data(), m, k, n);
      if (wi->requires_grad) gemm_tn(xi->values<T>().data(), g.data(), wi->grad_buffer<T>().data(), m, k, n);
      if (bi && bi->requires_grad) {
        auto& gb = bi->grad_buffer<T>();
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += g[i * n + j];
          gb[j] = static_cast<T>(gb[j] + s);
        }
      }
    });
  });
  dispatch(x.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    if (bi) {
      const auto& bv = bi->values<T>();
      for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), o.begin() + i * n);
    }
    std::vector<double> acc;
    gemm_nn(xi->values<T>().data(), wi->values<T>().data(), o.data(), m, k, n, acc);
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  ImplPtr ai = a.shared_impl(), bi = b.shared_impl();
  Tensor out = make_output(a.shape(), a.dtype(), {a, b}, "add", [ai, bi](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      for (const auto& in : {ai, bi}) {
        if (!in->requires_grad) continue;
        auto& gi = in->template grad_buffer<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  });
  dispatch(a.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    const auto& av = ai->values<T>();
    const auto& bv = bi->values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  ImplPtr ai = a.shared_impl(), bi = b.shared_impl();
  Tensor out = make_output(a.shape(), a.dtype(), {a, b}, "mul", [ai, bi](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      const auto& av = ai->values<T>();
      const auto& bv = bi->values<T>();
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer<T>();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  });
  dispatch(a.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    const auto& av = ai->values<T>();
    const auto& bv = bi->values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  ImplPtr ai = a.shared_impl();
  Tensor out = make_output(a.shape(), a.dtype(), {a}, "scale", [ai, factor](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      auto& ga = ai->grad_buffer<T>();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = static_cast<T>(ga[i] + g[i] * factor);
    });
  });
  dispatch(a.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    const auto& av = ai->values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(av[i] * factor);
  });
  return out;
}

Tensor sum(const Tensor& a) {
  ImplPtr ai = a.shared_impl();
  Tensor out = make_output({1}, a.dtype(), {a}, "sum", [ai](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const T g = out_grad<T>(o)[0];
      auto& ga = ai->grad_buffer<T>();
      for (auto& x : ga) x += g;
    });
  });
  dispatch(a.dtype(), [&]<typename T>() {
    double s = 0.0;
    for (T x : ai->values<T>()) s += x;
    out.data<T>()[0] = static_cast<T>(s);
  });
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  ImplPtr ai = a.shared_impl();
  Tensor out = make_output(std::move(shape), a.dtype(), {a}, "reshape", [ai](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      auto& ga = ai->grad_buffer<T>();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
  dispatch(a.dtype(), [&]<typename T>() {
    const auto& av = ai->values<T>();
    std::copy(av.begin(), av.end(), out.data<T>().begin());
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  ImplPtr xi = x.shared_impl();
  Tensor out = make_output(x.shape(), x.dtype(), {x}, "gelu", [xi](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      const auto& xv = xi->values<T>();
      auto& gx = xi->grad_buffer<T>();
      const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] = static_cast<T>(gx[i] + g[i] * (cdf + v * pdf));
      }
    });
  });
  dispatch(x.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    const auto& xv = xi->values<T>();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double v = xv[i];
      o[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), h = x.dim(1);
  if (gamma.shape() != Shape{h} || beta.shape() != Shape{h}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  ImplPtr xi = x.shared_impl(), gi = gamma.shared_impl(), bi = beta.shared_impl();
  // Per-row mean and reciprocal std, filled by the forward pass.
  auto stats = std::make_shared<std::vector<double>>(2 * n);
  Tensor out = make_output(x.shape(), x.dtype(), {x, gamma, beta}, "layer_norm",
                           [xi, gi, bi, stats, n, h](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      const auto& xv = xi->values<T>();
      const auto& gv = gi->values<T>();
      std::vector<double> xhat(h), dxhat(h);
      std::vector<double> dgamma(h, 0.0), dbeta(h, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        const double mu = (*stats)[2 * r], rstd = (*stats)[2 * r + 1];
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
          xhat[j] = (xv[r * h + j] - mu) * rstd;
          const double gj = g[r * h + j];
          dxhat[j] = gj * gv[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat[j];
          dgamma[j] += gj * xhat[j];
          dbeta[j] += gj;
        }
        mean_d /= static_cast<double>(h);
        mean_dx /= static_cast<double>(h);
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer<T>();
          for (std::size_t j = 0; j < h; ++j) {
            gx[r * h + j] =
                static_cast<T>(gx[r * h + j] + rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx));
          }
        }
      }
      if (gi->requires_grad) {
        auto& gg = gi->grad_buffer<T>();
        for (std::size_t j = 0; j < h; ++j) gg[j] = static_cast<T>(gg[j] + dgamma[j]);
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer<T>();
        for (std::size_t j = 0; j < h; ++j) gb[j] = static_cast<T>(gb[j] + dbeta[j]);
      }
    });
  });
  dispatch(x.dtype(), [&]<typename T>() {
    const auto& xv = xi->values<T>();
    const auto& gv = gi->values<T>();
    const auto& bv = bi->values<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < n; ++r) {
      double mu = 0.0;
      for (std::size_t j = 0; j < h; ++j) mu += xv[r * h + j];
      mu /= static_cast<double>(h);
      double var = 0.0;
      for (std::size_t j = 0; j < h; ++j) {
        const double d = xv[r * h + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(h);
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * r] = mu;
      (*stats)[2 * r + 1] = rstd;
      for (std::size_t j = 0; j < h; ++j) {
        o[r * h + j] = static_cast<T>((xv[r * h + j] - mu) * rstd * gv[j] + bv[j]);
      }
    }
  });
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), h = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DimensionError("embedding: id " + std::to_string(id) + " out of range for table " +
                           shape_str(table.shape()));
    }
  }
  ImplPtr ti = table.shared_impl();
  auto idv = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  Tensor out = make_output({ids.size(), h}, table.dtype(), {table}, "embedding", [ti, idv, h](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      auto& gt = ti->grad_buffer<T>();
      for (std::size_t r = 0; r < idv->size(); ++r) {
        const std::size_t row = static_cast<std::size_t>((*idv)[r]);
        for (std::size_t j = 0; j < h; ++j) gt[row * h + j] += g[r * h + j];
      }
    });
  });
  dispatch(table.dtype(), [&]<typename T>() {
    const auto& tv = ti->values<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const std::size_t row = static_cast<std::size_t>(ids[r]);
      std::copy_n(tv.begin() + row * h, h, o.begin() + r * h);
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t n = x.dim(0), h = x.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  for (auto r : rows) {
    if (r >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " +
                           shape_str(x.shape()));
    }
  }
  ImplPtr xi = x.shared_impl();
  auto rv = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Tensor out = make_output({rows.size(), h}, x.dtype(), {x}, "gather_rows", [xi, rv, h](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      auto& gx = xi->grad_buffer<T>();
      for (std::size_t r = 0; r < rv->size(); ++r) {
        for (std::size_t j = 0; j < h; ++j) gx[(*rv)[r] * h + j] += g[r * h + j];
      }
    });
  });
  dispatch(x.dtype(), [&]<typename T>() {
    const auto& xv = xi->values<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(xv.begin() + rows[r] * h, h, o.begin() + r * h);
    }
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(x.numel());
  for (auto& k : *keep) k = rng.uniform() >= rate ? 1 : 0;
  ImplPtr xi = x.shared_impl();
  Tensor out = make_output(x.shape(), x.dtype(), {x}, "dropout", [xi, keep, keep_scale](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      auto& gx = xi->grad_buffer<T>();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*keep)[i]) gx[i] = static_cast<T>(gx[i] + g[i] * keep_scale);
      }
    });
  });
  dispatch(x.dtype(), [&]<typename T>() {
    const auto& xv = xi->values<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) {
      o[i] = (*keep)[i] ? static_cast<T>(xv[i] * keep_scale) : T(0);
    }
  });
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout,
                 std::span<const std::uint8_t> key_mask) {
  require_rank(q, 2, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t B = layout.batch, S = layout.seq, H = layout.heads;
  const std::size_t hidden = q.dim(1);
  if (B * S != q.dim(0) || key_mask.size() != B * S) {
    throw DimensionError("attention: layout " + std::to_string(B) + "x" + std::to_string(S) +
                         " does not match input " + shape_str(q.shape()) + " / mask of " +
                         std::to_string(key_mask.size()));
  }
  if (H == 0 || hidden % H != 0) {
    throw ConfigError("attention: hidden size " + std::to_string(hidden) +
                      " is not divisible by head count " + std::to_string(H));
  }
  const std::size_t D = hidden / H;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  ImplPtr qi = q.shared_impl(), ki = k.shared_impl(), vi = v.shared_impl();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(key_mask.begin(), key_mask.end());
  // Attention probabilities [B, H, S, S], zero at masked entries.
  auto probs = std::make_shared<std::vector<double>>(B * H * S * S, 0.0);

  Tensor out = make_output(q.shape(), q.dtype(), {q, k, v}, "attention",
                           [qi, ki, vi, mask, probs, B, S, H, D, hidden, inv_sqrt_d](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      const auto& qv = qi->values<T>();
      const auto& kv = ki->values<T>();
      const auto& vv = vi->values<T>();
      std::vector<double> dq(B * S * hidden, 0.0), dk(B * S * hidden, 0.0), dv(B * S * hidden, 0.0);
      std::vector<double> dp(S);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const double* P = probs->data() + (b * H + h) * S * S;
          for (std::size_t i = 0; i < S; ++i) {
            if (!(*mask)[b * S + i]) continue;
            const std::size_t qrow = (b * S + i) * hidden + h * D;
            double weighted = 0.0;
            for (std::size_t j = 0; j < S; ++j) {
              if (!(*mask)[b * S + j]) {
                dp[j] = 0.0;
                continue;
              }
              const std::size_t krow = (b * S + j) * hidden + h * D;
              double s = 0.0;
              for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(g[qrow + d]) * vv[krow + d];
              dp[j] = s;
              weighted += P[i * S + j] * s;
              const double pij = P[i * S + j];
              for (std::size_t d = 0; d < D; ++d) dv[krow + d] += pij * g[qrow + d];
            }
            for (std::size_t j = 0; j < S; ++j) {
              if (!(*mask)[b * S + j]) continue;
              const double ds = P[i * S + j] * (dp[j] - weighted) * inv_sqrt_d;
              const std::size_t krow = (b * S + j) * hidden + h * D;
              for (std::size_t d = 0; d < D; ++d) {
                dq[qrow + d] += ds * kv[krow + d];
                dk[krow + d] += ds * qv[qrow + d];
              }
            }
          }
        }
      }
      const std::pair<const ImplPtr*, const std::vector<double>*> targets[] = {
          {&qi, &dq}, {&ki, &dk}, {&vi, &dv}};
      for (const auto& [impl, grads] : targets) {
        if (!(*impl)->requires_grad) continue;
        auto& gbuf = (*impl)->template grad_buffer<T>();
        for (std::size_t i = 0; i < gbuf.size(); ++i) gbuf[i] = static_cast<T>(gbuf[i] + (*grads)[i]);
      }
    });
  });

  dispatch(q.dtype(), [&]<typename T>() {
    const auto& qv = qi->values<T>();
    const auto& kv = ki->values<T>();
    const auto& vv = vi->values<T>();
    auto o = out.data<T>();
    std::vector<double> acc(D);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        double* P = probs->data() + (b * H + h) * S * S;
        for (std::size_t i = 0; i < S; ++i) {
          if (!key_mask[b * S + i]) continue;
          const std::size_t qrow = (b * S + i) * hidden + h * D;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < S; ++j) {
            if (!key_mask[b * S + j]) continue;
            const std::size_t krow = (b * S + j) * hidden + h * D;
            double s = 0.0;
            for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(qv[qrow + d]) * kv[krow + d];
            s *= inv_sqrt_d;
            P[i * S + j] = s;
            mx = std::max(mx, s);
          }
          double total = 0.0;
          for (std::size_t j = 0; j < S; ++j) {
            if (!key_mask[b * S + j]) continue;
            P[i * S + j] = std::exp(P[i * S + j] - mx);
            total += P[i * S + j];
          }
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t j = 0; j < S; ++j) {
            if (!key_mask[b * S + j]) continue;
            P[i * S + j] /= total;
            const double pij = P[i * S + j];
            const std::size_t krow = (b * S + j) * hidden + h * D;
            for (std::size_t d = 0; d < D; ++d) acc[d] += pij * vv[krow + d];
          }
          for (std::size_t d = 0; d < D; ++d) o[qrow + d] = static_cast<T>(acc[d]);
        }
      }
    }
  });
  return out;
}

Tensor softmax_with_temperature(const Tensor& logits, double temperature) {
  require_temperature(temperature);
  const std::size_t vdim = last_dim(logits, "softmax");
  const std::size_t rows = logits.numel() / vdim;
  const double inv_t = 1.0 / temperature;
  ImplPtr li = logits.shared_impl();
  auto saved = std::make_shared<std::vector<double>>(logits.numel());
  Tensor out = make_output(logits.shape(), logits.dtype(), {logits}, "softmax",
                           [li, saved, rows, vdim, inv_t](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const auto& g = out_grad<T>(o);
      auto& gl = li->grad_buffer<T>();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = saved->data() + r * vdim;
        double dot = 0.0;
        for (std::size_t j = 0; j < vdim; ++j) dot += g[r * vdim + j] * p[j];
        for (std::size_t j = 0; j < vdim; ++j) {
          gl[r * vdim + j] =
              static_cast<T>(gl[r * vdim + j] + inv_t * p[j] * (g[r * vdim + j] - dot));
        }
      }
    });
  });
  dispatch(logits.dtype(), [&]<typename T>() {
    const auto& lv = li->values<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      double* p = saved->data() + r * vdim;
      softmax_row(lv.data() + r * vdim, vdim, inv_t, p);
      for (std::size_t j = 0; j < vdim; ++j) o[r * vdim + j] = static_cast<T>(p[j]);
    }
  });
  return out;
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits, double temperature) {
  require_temperature(temperature);
  require_same_shape(p_logits, q_logits, "kl_divergence");
  const std::size_t vdim = last_dim(p_logits, "kl_divergence");
  const std::size_t rows = p_logits.numel() / vdim;
  const double inv_t = 1.0 / temperature;
  ImplPtr pi = p_logits.shared_impl(), qi = q_logits.shared_impl();

  // Computes per-row log-probabilities and KL; shared by forward and backward.
  auto per_row = [vdim, inv_t]<typename T>(const T* pz, const T* qz, double* lp, double* lq) {
    const double lse_p = softmax_row(pz, vdim, inv_t, lp);
    const double lse_q = softmax_row(qz, vdim, inv_t, lq);
    double kl = 0.0;
    for (std::size_t j = 0; j < vdim; ++j) {
      lp[j] = pz[j] * inv_t - lse_p;
      lq[j] = qz[j] * inv_t - lse_q;
      kl += std::exp(lp[j]) * (lp[j] - lq[j]);
    }
    return kl;
  };

  Tensor out = make_output({1}, p_logits.dtype(), {p_logits, q_logits}, "kl_divergence",
                           [pi, qi, rows, vdim, inv_t, per_row](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const double g = out_grad<T>(o)[0] / static_cast<double>(rows);
      const auto& pv = pi->values<T>();
      const auto& qv = qi->values<T>();
      std::vector<double> lp(vdim), lq(vdim);
      for (std::size_t r = 0; r < rows; ++r) {
        const double kl = per_row(pv.data() + r * vdim, qv.data() + r * vdim, lp.data(), lq.data());
        if (pi->requires_grad) {
          auto& gp = pi->grad_buffer<T>();
          for (std::size_t j = 0; j < vdim; ++j) {
            gp[r * vdim + j] = static_cast<T>(
                gp[r * vdim + j] + g * inv_t * std::exp(lp[j]) * ((lp[j] - lq[j]) - kl));
          }
        }
        if (qi->requires_grad) {
          auto& gq = qi->grad_buffer<T>();
          for (std::size_t j = 0; j < vdim; ++j) {
            gq[r * vdim + j] = static_cast<T>(
                gq[r * vdim + j] + g * inv_t * (std::exp(lq[j]) - std::exp(lp[j])));
          }
        }
      }
    });
  });
  dispatch(p_logits.dtype(), [&]<typename T>() {
    const auto& pv = pi->values<T>();
    const auto& qv = qi->values<T>();
    std::vector<double> lp(vdim), lq(vdim);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      total += per_row(pv.data() + r * vdim, qv.data() + r * vdim, lp.data(), lq.data());
    }
    out.data<T>()[0] = static_cast<T>(total / static_cast<double>(rows));
  });
  return out;
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_logits, double temperature) {
  require_temperature(temperature);
  require_same_shape(logits, target_logits, "soft_cross_entropy");
  const std::size_t vdim = last_dim(logits, "soft_cross_entropy");
  const std::size_t rows = logits.numel() / vdim;
  const double inv_t = 1.0 / temperature;
  ImplPtr li = logits.shared_impl(), ti = target_logits.shared_impl();

  auto per_row = [vdim, inv_t]<typename T>(const T* z, const T* u, double* lp, double* q) {
    const double lse = softmax_row(z, vdim, inv_t, lp);
    softmax_row(u, vdim, inv_t, q);
    double ce = 0.0;
    for (std::size_t j = 0; j < vdim; ++j) {
      lp[j] = z[j] * inv_t - lse;
      ce -= q[j] * lp[j];
    }
    return ce;
  };

  Tensor out = make_output({1}, logits.dtype(), {logits, target_logits}, "soft_cross_entropy",
                           [li, ti, rows, vdim, inv_t, per_row](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const double g = out_grad<T>(o)[0] / static_cast<double>(rows);
      const auto& lv = li->values<T>();
      const auto& tv = ti->values<T>();
      std::vector<double> lp(vdim), q(vdim);
      for (std::size_t r = 0; r < rows; ++r) {
        const double ce = per_row(lv.data() + r * vdim, tv.data() + r * vdim, lp.data(), q.data());
        if (li->requires_grad) {
          auto& gl = li->grad_buffer<T>();
          for (std::size_t j = 0; j < vdim; ++j) {
            gl[r * vdim + j] = static_cast<T>(gl[r * vdim + j] + g * inv_t * (std::exp(lp[j]) - q[j]));
          }
        }
        if (ti->requires_grad) {
          // d/du of -sum q log p with q = softmax(u / T): -q_j (log p_j + ce) / T
          auto& gt = ti->grad_buffer<T>();
          for (std::size_t j = 0; j < vdim; ++j) {
            gt[r * vdim + j] = static_cast<T>(gt[r * vdim + j] - g * inv_t * q[j] * (lp[j] + ce));
          }
        }
      }
    });
  });
  dispatch(logits.dtype(), [&]<typename T>() {
    const auto& lv = li->values<T>();
    const auto& tv = ti->values<T>();
    std::vector<double> lp(vdim), q(vdim);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      total += per_row(lv.data() + r * vdim, tv.data() + r * vdim, lp.data(), q.data());
    }
    out.data<T>()[0] = static_cast<T>(total / static_cast<double>(rows));
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_index) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " out of range for " +
                           std::to_string(classes) + " classes");
    }
    ++count;
  }
  if (count == 0) throw NoSupervisedPositions("cross_entropy: no supervised positions");
  ImplPtr li = logits.shared_impl();
  auto tv = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  Tensor out = make_output({1}, logits.dtype(), {logits}, "cross_entropy",
                           [li, tv, rows, classes, count, ignore_index](TensorImpl& o) {
    dispatch(o.dtype, [&]<typename T>() {
      const double g = out_grad<T>(o)[0] / static_cast<double>(count);
      const auto& lv = li->values<T>();
      auto& gl = li->grad_buffer<T>();
      std::vector<double> p(classes);
      for (std::size_t r = 0; r < rows; ++r) {
        const auto t = (*tv)[r];
        if (t == ignore_index) continue;
        softmax_row(lv.data() + r * classes, classes, 1.0, p.data());
        p[static_cast<std::size_t>(t)] -= 1.0;
        for (std::size_t j = 0; j < classes; ++j) {
          gl[r * classes + j] = static_cast<T>(gl[r * classes + j] + g * p[j]);
        }
      }
    });
  });
  dispatch(logits.dtype(), [&]<typename T>() {
    const auto& lv = li->values<T>();
    std::vector<double> p(classes);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto t = targets[r];
      if (t == ignore_index) continue;
      const T* z = lv.data() + r * classes;
      const double lse = softmax_row(z, classes, 1.0, p.data());
      total += lse - static_cast<double>(z[static_cast<std::size_t>(t)]);
    }
    out.data<T>()[0] = static_cast<T>(total / static_cast<double>(count));
  });
  return out;
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask) {
  require_rank(logits, 3, "cross_entropy_masked");
  const std::size_t positions = logits.dim(0) * logits.dim(1);
  if (targets.size() != positions || mask.size() != positions) {
    throw DimensionError("cross_entropy_masked: targets/mask sizes " +
                         std::to_string(targets.size()) + "/" + std::to_string(mask.size()) +
                         " do not match logits " + shape_str(logits.shape()));
  }
  std::vector<std::int32_t> masked(positions, kIgnoreIndex);
  for (std::size_t i = 0; i < positions; ++i) {
    if (mask[i]) masked[i] = targets[i];
  }
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
    throw NoSupervisedPositions("cross_entropy_masked: no supervised positions");
  }
  return cross_entropy(reshape(logits, {positions, logits.dim(2)}), masked, kIgnoreIndex);
}

}  // namespace distil::ops
