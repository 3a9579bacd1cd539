#include "denosent/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "denosent/errors.hpp"

namespace denosent::ops {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
TensorNode<T>& parent(TensorNode<T>& n, std::size_t i) {
  return *n.parents[i];
}

template <typename T>
bool wants_grad(TensorNode<T>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidShape(what);
}

template <typename T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.dims().back();
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dims() == b.dims(), "add: shape mismatch " + shape_string(a.dims()) + " vs " +
                                    shape_string(b.dims()));
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::make_result<T>("add", a.dims(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(n, p)) continue;
      auto& g = parent(n, p).grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dims() == b.dims(), "sub: shape mismatch " + shape_string(a.dims()) + " vs " +
                                    shape_string(b.dims()));
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::make_result<T>("sub", a.dims(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    if (wants_grad(n, 0)) {
      auto& g = parent(n, 0).grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n, 1)) {
      auto& g = parent(n, 1).grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dims() == b.dims(), "mul: shape mismatch " + shape_string(a.dims()) + " vs " +
                                    shape_string(b.dims()));
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::make_result<T>("mul", a.dims(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(n, p)) continue;
      const auto& other = parent(n, 1 - p).values;
      auto& g = parent(n, p).grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * other[i];
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require(bias.rank() == 1 && bias.dim(0) == last_dim(x),
          "add_bias: bias " + shape_string(bias.dims()) + " vs input " + shape_string(x.dims()));
  const std::size_t d = bias.dim(0);
  std::vector<T> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
  return detail::make_result<T>("add_bias", x.dims(), std::move(out), {x, bias},
                                [d](TensorNode<T>& n) {
                                  if (wants_grad(n, 0)) {
                                    auto& g = parent(n, 0).grad_slot();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                                  }
                                  if (wants_grad(n, 1)) {
                                    auto& g = parent(n, 1).grad_slot();
                                    for (std::size_t i = 0; i < n.grad.size(); ++i)
                                      g[i % d] += n.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= f;
  return detail::make_result<T>("scale", a.dims(), std::move(out), {a}, [f](TensorNode<T>& n) {
    auto& g = parent(n, 0).grad_slot();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * n.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  return detail::make_result<T>("sum", Shape{1}, {total}, {a}, [](TensorNode<T>& n) {
    auto& g = parent(n, 0).grad_slot();
    for (auto& v : g) v += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape dims) {
  require(shape_size(dims) == a.size(),
          "reshape: " + shape_string(a.dims()) + " -> " + shape_string(dims));
  std::vector<T> out(a.values().begin(), a.values().end());
  return detail::make_result<T>("reshape", std::move(dims), std::move(out), {a},
                                [](TensorNode<T>& n) {
                                  auto& g = parent(n, 0).grad_slot();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                                });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  require(w.rank() == 2 && x.rank() >= 1 && last_dim(x) == w.dim(0),
          "matmul: " + shape_string(x.dims()) + " @ " + shape_string(w.dims()));
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t rows = x.size() / k;
  Shape dims = x.dims();
  dims.back() = n;
  std::vector<T> out(rows * n);
  MatrixMap<T>(out.data(), rows, n).noalias() =
      ConstMatrixMap<T>(x.values().data(), rows, k) * ConstMatrixMap<T>(w.values().data(), k, n);
  return detail::make_result<T>(
      "matmul", std::move(dims), std::move(out), {x, w}, [rows, k, n](TensorNode<T>& node) {
        ConstMatrixMap<T> dy(node.grad.data(), rows, n);
        if (wants_grad(node, 0)) {
          auto& g = parent(node, 0).grad_slot();
          MatrixMap<T>(g.data(), rows, k).noalias() +=
              dy * ConstMatrixMap<T>(parent(node, 1).values.data(), k, n).transpose();
        }
        if (wants_grad(node, 1)) {
          auto& g = parent(node, 1).grad_slot();
          MatrixMap<T>(g.data(), k, n).noalias() +=
              ConstMatrixMap<T>(parent(node, 0).values.data(), rows, k).transpose() * dy;
        }
      });
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "batched_matmul: " + shape_string(a.dims()) + " @ " + shape_string(b.dims()));
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k,
          "batched_matmul: inner extents differ " + shape_string(a.dims()) + " @ " +
              shape_string(b.dims()));
  std::vector<T> out(groups * m * n);
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMatrixMap<T> am(a.values().data() + g * m * k, m, k);
    MatrixMap<T> cm(out.data() + g * m * n, m, n);
    if (transpose_b) {
      cm.noalias() = am * ConstMatrixMap<T>(b.values().data() + g * n * k, n, k).transpose();
    } else {
      cm.noalias() = am * ConstMatrixMap<T>(b.values().data() + g * k * n, k, n);
    }
  }
  return detail::make_result<T>(
      "batched_matmul", Shape{groups, m, n}, std::move(out), {a, b},
      [groups, m, k, n, transpose_b](TensorNode<T>& node) {
        const bool want_a = wants_grad(node, 0);
        const bool want_b = wants_grad(node, 1);
        T* ga = want_a ? parent(node, 0).grad_slot().data() : nullptr;
        T* gb = want_b ? parent(node, 1).grad_slot().data() : nullptr;
        const T* av = parent(node, 0).values.data();
        const T* bv = parent(node, 1).values.data();
        for (std::size_t g = 0; g < groups; ++g) {
          ConstMatrixMap<T> dc(node.grad.data() + g * m * n, m, n);
          ConstMatrixMap<T> am(av + g * m * k, m, k);
          if (transpose_b) {
            ConstMatrixMap<T> bm(bv + g * n * k, n, k);
            if (want_a) MatrixMap<T>(ga + g * m * k, m, k).noalias() += dc * bm;
            if (want_b) MatrixMap<T>(gb + g * n * k, n, k).noalias() += dc.transpose() * am;
          } else {
            ConstMatrixMap<T> bm(bv + g * k * n, k, n);
            if (want_a) MatrixMap<T>(ga + g * m * k, m, k).noalias() += dc * bm.transpose();
            if (want_b) MatrixMap<T>(gb + g * k * n, k, n).noalias() += am.transpose() * dc;
          }
        }
      });
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == b.rank() && a.rank() >= 1 &&
              std::equal(a.dims().begin() + 1, a.dims().end(), b.dims().begin() + 1),
          "concat: " + shape_string(a.dims()) + " with " + shape_string(b.dims()));
  Shape dims = a.dims();
  dims[0] += b.dim(0);
  std::vector<T> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t split = a.size();
  return detail::make_result<T>("concat", std::move(dims), std::move(out), {a, b},
                                [split](TensorNode<T>& n) {
                                  if (wants_grad(n, 0)) {
                                    auto& g = parent(n, 0).grad_slot();
                                    for (std::size_t i = 0; i < split; ++i) g[i] += n.grad[i];
                                  }
                                  if (wants_grad(n, 1)) {
                                    auto& g = parent(n, 1).grad_slot();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += n.grad[split + i];
                                  }
                                });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids) {
  require(table.rank() == 2, "embedding: table must be [V, d], got " + shape_string(table.dims()));
  if (ids.empty()) throw InvalidShape("embedding: no ids");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InvalidToken("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                         std::to_string(vocab));
    }
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return detail::make_result<T>(
      "embedding", Shape{ids.size(), d}, std::move(out), {table},
      [saved = std::move(saved), d](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        for (std::size_t i = 0; i < saved.size(); ++i) {
          T* row = g.data() + saved[i] * d;
          const T* src = n.grad.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
        }
      });
}

template <typename T>
Tensor<T> add_positional(const Tensor<T>& x, const Tensor<T>& table) {
  require(x.rank() == 3 && table.rank() == 2 && table.dim(1) == x.dim(2) &&
              table.dim(0) >= x.dim(1),
          "add_positional: input " + shape_string(x.dims()) + " table " +
              shape_string(table.dims()));
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  std::vector<T> out(x.values().begin(), x.values().end());
  auto tv = table.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < len * d; ++i) out[b * len * d + i] += tv[i];
  return detail::make_result<T>("add_positional", x.dims(), std::move(out), {x, table},
                                [batch, len, d](TensorNode<T>& n) {
                                  if (wants_grad(n, 0)) {
                                    auto& g = parent(n, 0).grad_slot();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                                  }
                                  if (wants_grad(n, 1)) {
                                    auto& g = parent(n, 1).grad_slot();
                                    for (std::size_t b = 0; b < batch; ++b)
                                      for (std::size_t i = 0; i < len * d; ++i)
                                        g[i] += n.grad[b * len * d + i];
                                  }
                                });
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3 && heads >= 1 && x.dim(2) % heads == 0,
          "split_heads: " + shape_string(x.dims()) + " into " + std::to_string(heads) + " heads");
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2), dh = d / heads;
  if (heads == 1) return x;
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(xv.data() + (b * len + l) * d + h * dh, dh,
                    out.data() + ((b * heads + h) * len + l) * dh);
  return detail::make_result<T>(
      "split_heads", Shape{batch * heads, len, dh}, std::move(out), {x},
      [batch, len, d, dh, heads](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < len; ++l) {
              T* dst = g.data() + (b * len + l) * d + h * dh;
              const T* src = n.grad.data() + ((b * heads + h) * len + l) * dh;
              for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
            }
      });
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3 && heads >= 1 && x.dim(0) % heads == 0,
          "merge_heads: " + shape_string(x.dims()) + " from " + std::to_string(heads) + " heads");
  if (heads == 1) return x;
  const std::size_t batch = x.dim(0) / heads, len = x.dim(1), dh = x.dim(2), d = dh * heads;
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(xv.data() + ((b * heads + h) * len + l) * dh, dh,
                    out.data() + (b * len + l) * d + h * dh);
  return detail::make_result<T>(
      "merge_heads", Shape{batch, len, d}, std::move(out), {x},
      [batch, len, d, dh, heads](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < len; ++l) {
              T* dst = g.data() + ((b * heads + h) * len + l) * dh;
              const T* src = n.grad.data() + (b * len + l) * d + h * dh;
              for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
            }
      });
}

template <typename T>
Tensor<T> mask_keys(const Tensor<T>& scores, std::span<const std::uint8_t> key_mask,
                    std::size_t heads) {
  require(scores.rank() == 3 && heads >= 1 && scores.dim(0) % heads == 0,
          "mask_keys: scores " + shape_string(scores.dims()));
  const std::size_t batch = scores.dim(0) / heads, lq = scores.dim(1), lk = scores.dim(2);
  require(key_mask.size() == batch * lk, "mask_keys: key mask has " +
                                             std::to_string(key_mask.size()) + " entries, need " +
                                             std::to_string(batch * lk));
  constexpr T kMasked = T(-1e9);
  std::vector<T> out(scores.values().begin(), scores.values().end());
  for (std::size_t g = 0; g < batch * heads; ++g) {
    const std::uint8_t* km = key_mask.data() + (g / heads) * lk;
    for (std::size_t q = 0; q < lq; ++q)
      for (std::size_t k = 0; k < lk; ++k)
        if (!km[k]) out[(g * lq + q) * lk + k] = kMasked;
  }
  std::vector<std::uint8_t> saved(key_mask.begin(), key_mask.end());
  return detail::make_result<T>(
      "mask_keys", scores.dims(), std::move(out), {scores},
      [saved = std::move(saved), batch, heads, lq, lk](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        for (std::size_t gi = 0; gi < batch * heads; ++gi) {
          const std::uint8_t* km = saved.data() + (gi / heads) * lk;
          for (std::size_t q = 0; q < lq; ++q)
            for (std::size_t k = 0; k < lk; ++k)
              if (km[k]) g[(gi * lq + q) * lk + k] += n.grad[(gi * lq + q) * lk + k];
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& t) {
  if (t.rank() == 0 || last_dim(t) == 0) throw InvalidShape("softmax_rows: empty last dimension");
  const std::size_t k = last_dim(t);
  const std::size_t rows = t.size() / k;
  std::vector<T> out(t.size());
  auto tv = t.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = tv.data() + r * k;
    T* y = out.data() + r * k;
    const T hi = *std::max_element(x, x + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += (y[j] = std::exp(x[j] - hi));
    for (std::size_t j = 0; j < k; ++j) y[j] /= total;
  }
  return detail::make_result<T>("softmax_rows", t.dims(), std::move(out), {t},
                                [rows, k](TensorNode<T>& n) {
                                  auto& g = parent(n, 0).grad_slot();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = n.values.data() + r * k;
                                    const T* dy = n.grad.data() + r * k;
                                    T dot = 0;
                                    for (std::size_t j = 0; j < k; ++j) dot += y[j] * dy[j];
                                    for (std::size_t j = 0; j < k; ++j)
                                      g[r * k + j] += y[j] * (dy[j] - dot);
                                  }
                                });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  if (x.rank() == 0) throw InvalidShape("layer_norm: scalar input");
  const std::size_t d = last_dim(x);
  require(gain.rank() == 1 && bias.rank() == 1 && gain.dim(0) == d && bias.dim(0) == d,
          "layer_norm: input " + shape_string(x.dims()) + " gain " + shape_string(gain.dims()) +
              " bias " + shape_string(bias.dims()));
  if (!(eps > 0)) throw InvalidParameter("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  std::vector<T> normalized(x.size());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.size());
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      normalized[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.dims(), std::move(out), {x, gain, bias},
      [normalized = std::move(normalized), inv_std = std::move(inv_std), rows,
       d](TensorNode<T>& n) {
        const auto& gv = parent(n, 1).values;
        if (wants_grad(n, 0)) {
          auto& g = parent(n, 0).grad_slot();
          std::vector<T> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = n.grad[r * d + j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * normalized[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              g[r * d + j] += inv_std[r] * (dh[j] - mean_dh - normalized[r * d + j] * mean_dh_h);
          }
        }
        if (wants_grad(n, 1)) {
          auto& g = parent(n, 1).grad_slot();
          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % d] += n.grad[i] * normalized[i];
        }
        if (wants_grad(n, 2)) {
          auto& g = parent(n, 2).grad_slot();
          for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % d] += n.grad[i];
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T a = static_cast<T>(0.044715);
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
  return detail::make_result<T>("gelu", x.dims(), std::move(out), {x}, [c, a](TensorNode<T>& n) {
    auto& g = parent(n, 0).grad_slot();
    const auto& xv = parent(n, 0).values;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(c * (v + a * v * v * v));
      const T dv = T(0.5) * (T(1) + th) +
                   T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * a * v * v);
      g[i] += n.grad[i] * dv;
    }
  });
}

namespace {

void check_rate(double p) {
  if (!(p >= 0.0) || !(p < 1.0)) {
    throw InvalidParameter("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  }
}

template <typename T>
DropoutResult<T> apply_keep_mask(const Tensor<T>& x, std::vector<T> keep, double p) {
  const T factor = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i] * factor;
  Tensor<T> mask(x.dims(), keep, false);
  Tensor<T> output = detail::make_result<T>(
      "dropout", x.dims(), std::move(out), {x},
      [keep = std::move(keep), factor](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * keep[i] * factor;
      });
  return {std::move(output), std::move(mask)};
}

}  // namespace

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double p, RngStream rng) {
  check_rate(p);
  std::vector<T> keep(x.size(), T(1));
  if (p > 0.0) {
    for (auto& k : keep) k = rng.uniform() < p ? T(0) : T(1);
  }
  return apply_keep_mask(x, std::move(keep), p);
}

template <typename T>
DropoutResult<T> dropout_rows(const Tensor<T>& x, double p, std::span<const RngStream> row_streams) {
  check_rate(p);
  require(x.rank() >= 1 && row_streams.size() == x.dim(0),
          "dropout_rows: " + std::to_string(row_streams.size()) + " streams for input " +
              shape_string(x.dims()));
  std::vector<T> keep(x.size(), T(1));
  if (p > 0.0) {
    const std::size_t per_row = x.size() / x.dim(0);
    for (std::size_t b = 0; b < row_streams.size(); ++b) {
      RngStream rng = row_streams[b];
      for (std::size_t i = 0; i < per_row; ++i) keep[b * per_row + i] = rng.uniform() < p ? T(0) : T(1);
    }
  }
  return apply_keep_mask(x, std::move(keep), p);
}

template <typename T>
Tensor<T> gather_positions(const Tensor<T>& x, std::span<const std::size_t> positions) {
  require(x.rank() == 3 && positions.size() == x.dim(0),
          "gather_positions: input " + shape_string(x.dims()) + " with " +
              std::to_string(positions.size()) + " positions");
  const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
  std::vector<T> out(batch * d);
  for (std::size_t b = 0; b < batch; ++b) {
    if (positions[b] >= len) {
      throw ContractViolation("gather_positions: position " + std::to_string(positions[b]) +
                              " out of range for length " + std::to_string(len));
    }
    std::copy_n(x.values().data() + (b * len + positions[b]) * d, d, out.data() + b * d);
  }
  std::vector<std::size_t> saved(positions.begin(), positions.end());
  return detail::make_result<T>("gather_positions", Shape{batch, d}, std::move(out), {x},
                                [saved = std::move(saved), len, d](TensorNode<T>& n) {
                                  auto& g = parent(n, 0).grad_slot();
                                  for (std::size_t b = 0; b < saved.size(); ++b)
                                    for (std::size_t j = 0; j < d; ++j)
                                      g[(b * len + saved[b]) * d + j] += n.grad[b * d + j];
                                });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  if (x.rank() == 0) throw InvalidShape("l2_normalize_rows: scalar input");
  const std::size_t d = last_dim(x);
  const std::size_t rows = x.size() / d;
  constexpr T kMinNorm = T(1e-12);
  std::vector<T> out(x.size());
  std::vector<T> norms(rows);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::max(std::sqrt(ss), kMinNorm);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
  }
  return detail::make_result<T>(
      "l2_normalize_rows", x.dims(), std::move(out), {x},
      [norms = std::move(norms), rows, d](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = n.values.data() + r * d;
          const T* dy = n.grad.data() + r * d;
          // Below the clamp the norm is a constant, so only the 1/norm term remains.
          T dot = 0;
          if (norms[r] > kMinNorm)
            for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (dy[j] - y[j] * dot) / norms[r];
        }
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                        std::span<const std::uint8_t> mask, Reduction reduction) {
  require(logits.rank() == 3, "cross_entropy: logits must be [B, n, V], got " +
                                  shape_string(logits.dims()));
  const std::size_t vocab = logits.dim(2);
  const std::size_t rows = logits.dim(0) * logits.dim(1);
  require(targets.size() == rows && mask.size() == rows,
          "cross_entropy: targets/mask must have " + std::to_string(rows) + " entries");
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw InvalidToken("cross_entropy: target id " + std::to_string(targets[r]) +
                         " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0) throw DegenerateBatch("cross_entropy: mask selects no positions");

  auto lv = logits.values();
  // Accumulate in double so the float build's loss is not dominated by
  // summation error over long batches.
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = lv.data() + r * vocab;
    const T hi = *std::max_element(row, row + vocab);
    double z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - hi));
    total += static_cast<double>(hi) + std::log(z) - static_cast<double>(row[targets[r]]);
  }
  const T denom = reduction == Reduction::kMean ? static_cast<T>(count) : T(1);
  const T loss = static_cast<T>(reduction == Reduction::kMean ? total / count : total);

  std::vector<TokenId> saved_targets(targets.begin(), targets.end());
  std::vector<std::uint8_t> saved_mask(mask.begin(), mask.end());
  return detail::make_result<T>(
      "cross_entropy", Shape{1}, {std::max(loss, T(0))}, {logits},
      [saved_targets = std::move(saved_targets), saved_mask = std::move(saved_mask), rows, vocab,
       denom](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        const auto& lv = parent(n, 0).values;
        const T upstream = n.grad[0] / denom;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!saved_mask[r]) continue;
          const T* row = lv.data() + r * vocab;
          T* gr = g.data() + r * vocab;
          const T hi = *std::max_element(row, row + vocab);
          T z = 0;
          for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - hi);
          for (std::size_t j = 0; j < vocab; ++j) gr[j] += upstream * std::exp(row[j] - hi) / z;
          gr[saved_targets[r]] -= upstream;
        }
      });
}

template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& t, std::span<const std::uint8_t> include) {
  require(t.rank() == 2, "logsumexp_rows: expected [R, k], got " + shape_string(t.dims()));
  const std::size_t rows = t.dim(0), k = t.dim(1);
  require(include.empty() || include.size() == rows * k,
          "logsumexp_rows: include mask must have " + std::to_string(rows * k) + " entries");
  auto on = [&include, k](std::size_t r, std::size_t j) {
    return include.empty() || include[r * k + j] != 0;
  };
  std::vector<T> out(rows);
  auto tv = t.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (on(r, j)) hi = std::max(hi, tv[r * k + j]);
    if (!std::isfinite(hi)) throw DegenerateBatch("logsumexp_rows: row with no included entries");
    T z = 0;
    for (std::size_t j = 0; j < k; ++j)
      if (on(r, j)) z += std::exp(tv[r * k + j] - hi);
    out[r] = hi + std::log(z);
  }
  std::vector<std::uint8_t> saved(include.begin(), include.end());
  return detail::make_result<T>(
      "logsumexp_rows", Shape{rows}, std::move(out), {t},
      [saved = std::move(saved), rows, k](TensorNode<T>& n) {
        auto& g = parent(n, 0).grad_slot();
        const auto& tv = parent(n, 0).values;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < k; ++j)
            if (saved.empty() || saved[r * k + j])
              g[r * k + j] += n.grad[r] * std::exp(tv[r * k + j] - n.values[r]);
      });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& t, std::span<const std::size_t> cols) {
  require(t.rank() == 2 && cols.size() == t.dim(0),
          "pick: expected [R, k] with R column indices, got " + shape_string(t.dims()));
  const std::size_t rows = t.dim(0), k = t.dim(1);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] >= k) throw InvalidShape("pick: column index out of range");
    out[r] = t.values()[r * k + cols[r]];
  }
  std::vector<std::size_t> saved(cols.begin(), cols.end());
  return detail::make_result<T>("pick", Shape{rows}, std::move(out), {t},
                                [saved = std::move(saved), k](TensorNode<T>& n) {
                                  auto& g = parent(n, 0).grad_slot();
                                  for (std::size_t r = 0; r < saved.size(); ++r)
                                    g[r * k + saved[r]] += n.grad[r];
                                });
}

#define DENOSENT_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, double);                                            \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, bool);                   \
  template Tensor<T> concat(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const TokenId>);                      \
  template Tensor<T> add_positional(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> merge_heads(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> mask_keys(const Tensor<T>&, std::span<const std::uint8_t>, std::size_t);    \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);   \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template DropoutResult<T> dropout(const Tensor<T>&, double, RngStream);                        \
  template DropoutResult<T> dropout_rows(const Tensor<T>&, double, std::span<const RngStream>);  \
  template Tensor<T> gather_positions(const Tensor<T>&, std::span<const std::size_t>);           \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const TokenId>,                   \
                                   std::span<const std::uint8_t>, Reduction);                    \
  template Tensor<T> logsumexp_rows(const Tensor<T>&, std::span<const std::uint8_t>);            \
  template Tensor<T> pick(const Tensor<T>&, std::span<const std::size_t>);

DENOSENT_INSTANTIATE_OPS(float)
DENOSENT_INSTANTIATE_OPS(double)

#undef DENOSENT_INSTANTIATE_OPS

}  // namespace denosent::ops
