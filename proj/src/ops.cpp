#include "unicompress/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "unicompress/gradcheck.hpp"

namespace unicompress {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      // Four fixed lanes keep the reduction order independent of m and n.
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += ai[p] * bj[p];
        s1 += ai[p + 1] * bj[p + 1];
        s2 += ai[p + 2] * bj[p + 2];
        s3 += ai[p + 3] * bj[p + 3];
      }
      for (; p < k; ++p) s0 += ai[p] * bj[p];
      c[i * n + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                     shape_str(b.dims()));
  }
}

template <class Fn>
void record(Fn&& fn) {
  Tape::active()->record(std::forward<Fn>(fn));
}

bool has_grad(const NodePtr& n) { return !n->grad.empty(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.dims()) + " x " +
                     shape_str(b.dims()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  const bool track = detail::needs_grad({&a, &b});
  Tensor r = detail::make_result({m, n}, std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), bn = b.node_ptr(), rn = r.node_ptr(), m, k, n] {
      if (!has_grad(rn)) return;
      if (an->requires_grad) gemm_nt(m, n, k, rn->grad.data(), bn->value->data(), an->ensure_grad().data());
      if (bn->requires_grad) gemm_tn(k, m, n, an->value->data(), rn->grad.data(), bn->ensure_grad().data());
    });
  }
  return r;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(a.dims()) + " x " +
                     shape_str(b.dims()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  const bool track = detail::needs_grad({&a, &b});
  Tensor r = detail::make_result({m, n}, std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), bn = b.node_ptr(), rn = r.node_ptr(), m, k, n] {
      if (!has_grad(rn)) return;
      if (an->requires_grad) gemm_nn(m, n, k, rn->grad.data(), bn->value->data(), an->ensure_grad().data());
      if (bn->requires_grad) gemm_tn(n, m, k, rn->grad.data(), an->value->data(), bn->ensure_grad().data());
    });
  }
  return r;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result({n, m}, std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), m, n] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += rn->grad[j * m + i];
    });
  }
  return r;
}

namespace {

template <class Fwd, class BwdA, class BwdB>
Tensor elementwise(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BwdA da, BwdB db) {
  require_same_shape(name, a, b);
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x[i], y[i]);
  const bool track = detail::needs_grad({&a, &b});
  Tensor r = detail::make_result(a.dims(), std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), bn = b.node_ptr(), rn = r.node_ptr(), n, da, db] {
      if (!has_grad(rn)) return;
      const auto& xv = *an->value;
      const auto& yv = *bn->value;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += rn->grad[i] * da(xv[i], yv[i]);
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += rn->grad[i] * db(xv[i], yv[i]);
      }
    });
  }
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result(a.dims(), std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), c] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * rn->grad[i];
    });
  }
  return r;
}

Tensor add_row_broadcast(const Tensor& a, const Tensor& row) {
  const std::size_t m = a.rows(), n = a.cols();
  if (row.numel() != n) {
    throw ShapeError("add_row_broadcast: row of " + shape_str(row.dims()) + " against " +
                     shape_str(a.dims()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto rv = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  const bool track = detail::needs_grad({&a, &row});
  Tensor r = detail::make_result(a.dims(), std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), bn = row.node_ptr(), rn = r.node_ptr(), m, n] {
      if (!has_grad(rn)) return;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < m * n; ++i) g[i] += rn->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += rn->grad[i * n + j];
      }
    });
  }
  return r;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > m) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of " + shape_str(a.dims()));
  }
  const auto src = a.data();
  std::vector<double> out(src.begin() + static_cast<std::ptrdiff_t>(start * n),
                          src.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result({count, n}, std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), start, n] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < rn->grad.size(); ++i) g[start * n + i] += rn->grad[i];
    });
  }
  return r;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of " + shape_str(a.dims()));
  }
  const auto src = a.data();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = src[i * n + start + j];
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result({m, count}, std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), m, n, start, count] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += rn->grad[i * count + j];
    });
  }
  return r;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw ShapeError("concat_rows: width " + std::to_string(p.cols()) + " vs " + std::to_string(n));
    }
    m += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  const bool track = Tape::active() != nullptr && any_grad;
  Tensor r = detail::make_result({m, n}, std::move(out), track);
  if (track) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    record([nodes = std::move(nodes), rn = r.node_ptr()] {
      if (!has_grad(rn)) return;
      std::size_t offset = 0;
      for (const auto& nd : nodes) {
        const std::size_t len = nd->value->size();
        if (nd->requires_grad) {
          auto& g = nd->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) g[i] += rn->grad[offset + i];
        }
        offset += len;
      }
    });
  }
  return r;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw ShapeError("concat_cols: height " + std::to_string(p.rows()) + " vs " + std::to_string(m));
    }
    n += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    const auto src = p.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + col + j] = src[i * w + j];
    col += w;
  }
  const bool track = Tape::active() != nullptr && any_grad;
  Tensor r = detail::make_result({m, n}, std::move(out), track);
  if (track) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    record([nodes = std::move(nodes), rn = r.node_ptr(), m, n] {
      if (!has_grad(rn)) return;
      std::size_t c0 = 0;
      for (const auto& nd : nodes) {
        const std::size_t w = nd->dims.back();
        if (nd->requires_grad) {
          auto& g = nd->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += rn->grad[i * n + c0 + j];
        }
        c0 += w;
      }
    });
  }
  return r;
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  if (times == 0) throw ShapeError("repeat_rows: zero repeats");
  std::vector<Tensor> parts(times, a);
  return concat_rows(parts);
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  const std::size_t rows = table.rows(), n = table.cols();
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<double> out;
  out.reserve(indices.size() * n);
  const auto src = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " at position " +
                       std::to_string(i) + " outside table of " + std::to_string(rows) + " rows");
    }
    const auto off = static_cast<std::ptrdiff_t>(indices[i] * n);
    out.insert(out.end(), src.begin() + off, src.begin() + off + static_cast<std::ptrdiff_t>(n));
  }
  const bool track = detail::needs_grad({&table});
  Tensor r = detail::make_result({indices.size(), n}, std::move(out), track);
  if (track) {
    record([tn = table.node_ptr(), rn = r.node_ptr(), idx = std::vector<std::size_t>(indices.begin(), indices.end()), n] {
      if (!has_grad(rn)) return;
      auto& g = tn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += rn->grad[i * n + j];
    });
  }
  return r;
}

Tensor mean_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += src[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (auto& v : out) v *= inv;
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result({1, n}, std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), m, n, inv] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += inv * rn->grad[j];
    });
  }
  return r;
}

Tensor softmax_rows(const Tensor& a, bool causal) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n, 0.0);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t width = causal ? std::min(n, i + 1) : n;
    const double* x = src.data() + i * n;
    double* y = out.data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, x[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < width; ++j) y[j] *= inv;
  }
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result(a.dims(), std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), m, n] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      const auto& y = *rn->value;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * rn->grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (rn->grad[i * n + j] - dot);
      }
    });
  }
  return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.dims()) + " / bias " + shape_str(bias.dims()) +
                     " against " + shape_str(x.dims()));
  }
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  const auto src = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = src.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mu) * is;
      xhat[i * n + j] = h;
      out[i * n + j] = gv[j] * h + bv[j];
    }
  }
  const bool track = detail::needs_grad({&x, &gain, &bias});
  Tensor r = detail::make_result(x.dims(), std::move(out), track);
  if (track) {
    record([xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), rn = r.node_ptr(),
            xhat = std::move(xhat), inv_std = std::move(inv_std), m, n] {
      if (!has_grad(rn)) return;
      const auto& dy = rn->grad;
      const auto& gv = *gn->value;
      if (gn->requires_grad) {
        auto& g = gn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j] * xhat[i * n + j];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
      }
      if (xn->requires_grad) {
        auto& g = xn->ensure_grad();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = dy[i * n + j] * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * n + j];
          }
          mean_dh *= inv_n;
          mean_dh_h *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = dy[i * n + j] * gv[j];
            g[i * n + j] += inv_std[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return r;
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto src = a.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double x = src[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result(a.dims(), std::move(out), track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr()] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      const auto& xv = *an->value;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double x = xv[i];
        const double t = std::tanh(kC * (x + kA * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
        g[i] += rn->grad[i] * d;
      }
    });
  }
  return r;
}

Tensor detach(const Tensor& a) {
  auto& replay = detail::DetachReplay::current();
  if (replay.mode() == detail::DetachReplay::Mode::kOff) return Tensor(a.dims(), a.to_vector(), false);
  return Tensor(a.dims(), replay.intercept(a.to_vector()), false);
}

Tensor sum(const Tensor& a) {
  const auto src = a.data();
  const double total = std::accumulate(src.begin(), src.end(), 0.0);
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result({1}, {total}, track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr()] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (auto& v : g) v += rn->grad[0];
    });
  }
  return r;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  const auto x = a.data();
  const auto y = b.data();
  const std::size_t n = x.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (x[i] - y[i]) * (x[i] - y[i]);
  const double inv = 1.0 / static_cast<double>(n);
  const bool track = detail::needs_grad({&a, &b});
  Tensor r = detail::make_result({1}, {total * inv}, track);
  if (track) {
    record([an = a.node_ptr(), bn = b.node_ptr(), rn = r.node_ptr(), n, inv] {
      if (!has_grad(rn)) return;
      const double s = 2.0 * inv * rn->grad[0];
      const auto& xv = *an->value;
      const auto& yv = *bn->value;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += s * (xv[i] - yv[i]);
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] -= s * (xv[i] - yv[i]);
      }
    });
  }
  return r;
}

Tensor mean_row_sq_dist(const Tensor& a, const Tensor& b) {
  // Same elementwise form as mse, scaled by the row width.
  return scale(mse(a, b), static_cast<double>(a.cols()));
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> rows,
                          std::span<const std::size_t> targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (rows.size() != targets.size() || rows.empty()) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(rows.size()) + " rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const auto src = logits.data();
  std::vector<double> probs(rows.size() * n);
  double total = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= m || targets[k] >= n) throw ShapeError("cross_entropy_rows: row/target out of range");
    const double* x = src.data() + rows[k] * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[k * n + j] = std::exp(x[j] - mx);
      z += probs[k * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[k * n + j] /= z;
    total += (mx + std::log(z)) - x[targets[k]];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  const bool track = detail::needs_grad({&logits});
  Tensor r = detail::make_result({1}, {total * inv}, track);
  if (track) {
    record([ln = logits.node_ptr(), rn = r.node_ptr(), probs = std::move(probs),
            rows = std::vector<std::size_t>(rows.begin(), rows.end()),
            targets = std::vector<std::size_t>(targets.begin(), targets.end()), n, inv] {
      if (!has_grad(rn)) return;
      auto& g = ln->ensure_grad();
      const double s = inv * rn->grad[0];
      for (std::size_t k = 0; k < rows.size(); ++k) {
        double* gr = g.data() + rows[k] * n;
        for (std::size_t j = 0; j < n; ++j) gr[j] += s * probs[k * n + j];
        gr[targets[k]] -= s;
      }
    });
  }
  return r;
}

Tensor dot_const(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.numel()) throw ShapeError("dot_const: weight count differs from tensor size");
  const auto x = a.data();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i] * weights[i];
  const bool track = detail::needs_grad({&a});
  Tensor r = detail::make_result({1}, {total}, track);
  if (track) {
    record([an = a.node_ptr(), rn = r.node_ptr(), w = std::vector<double>(weights.begin(), weights.end())] {
      if (!has_grad(rn)) return;
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += rn->grad[0] * w[i];
    });
  }
  return r;
}

}  // namespace unicompress
