#include "hicd/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "hicd/error.hpp"

namespace hicd::num {

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

GradTape& tape_of(Var a) {
  if (!a.valid()) throw UsageError("operation on an unbound Var");
  return *a.tape();
}

GradTape& tape_of(Var a, Var b) {
  GradTape& t = tape_of(a);
  if (b.tape() != &t) throw UsageError("operands live on different tapes");
  return t;
}

// Unchecked construction for op outputs: inputs are finite, but overflow can
// still produce inf, so results are validated once here.
Tensor checked(Tensor t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  kernel::gemm_nn(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(),
                  b.cols());
  return out;
}

Var matmul(Var a, Var b) {
  GradTape& t = tape_of(a, b);
  Tensor out = checked(matmul(a.value(), b.value()), "matmul");
  return t.record(std::move(out), {a, b}, [a, b](GradTape& tp, const Tensor&, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (tp.requires_grad(a)) {
      kernel::gemm_nt(g.data().data(), bv.data().data(), tp.grad_buffer(a).data().data(), m, n,
                      k);
    }
    if (tp.requires_grad(b)) {
      kernel::gemm_tn(av.data().data(), g.data().data(), tp.grad_buffer(b).data().data(), k, m,
                      n);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  GradTape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(av.shape()) +
                         " x " + shape_string(bv.shape()) + "^T");
  }
  Tensor out = Tensor::zeros(av.rows(), bv.rows());
  kernel::gemm_nt(av.data().data(), bv.data().data(), out.data().data(), av.rows(), av.cols(),
                  bv.rows());
  return t.record(checked(std::move(out), "matmul_nt"), {a, b},
                  [a, b](GradTape& tp, const Tensor&, const Tensor& g) {
                    const Tensor& x = tp.value(a);
                    const Tensor& y = tp.value(b);
                    const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
                    // out = x y^T: dx = g y, dy = g^T x
                    if (tp.requires_grad(a)) {
                      kernel::gemm_nn(g.data().data(), y.data().data(),
                                      tp.grad_buffer(a).data().data(), m, n, k);
                    }
                    if (tp.requires_grad(b)) {
                      kernel::gemm_tn(g.data().data(), x.data().data(),
                                      tp.grad_buffer(b).data().data(), n, m, k);
                    }
                  });
}

Var add(Var a, Var b) {
  GradTape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return t.record(checked(std::move(out), "add"), {a, b},
                  [a, b](GradTape& tp, const Tensor&, const Tensor& g) {
                    if (tp.requires_grad(a)) tp.accumulate(a, g);
                    if (tp.requires_grad(b)) tp.accumulate(b, g);
                  });
}

Var add_row(Var a, Var row) {
  GradTape& t = tape_of(a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  require_rank2(av, "add_row");
  if (rv.size() != av.cols()) {
    throw DimensionError("add_row: row " + shape_string(rv.shape()) + " does not broadcast over " +
                         shape_string(av.shape()));
  }
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += rv[c];
  }
  return t.record(checked(std::move(out), "add_row"), {a, row},
                  [a, row](GradTape& tp, const Tensor&, const Tensor& g) {
                    if (tp.requires_grad(a)) tp.accumulate(a, g);
                    if (tp.requires_grad(row)) {
                      auto dst = tp.grad_buffer(row).data();
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        auto gr = g.row(r);
                        for (std::size_t c = 0; c < gr.size(); ++c) dst[c] += gr[c];
                      }
                    }
                  });
}

Var scale(Var a, double factor) {
  GradTape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return t.record(checked(std::move(out), "scale"), {a},
                  [a, factor](GradTape& tp, const Tensor&, const Tensor& g) {
                    auto dst = tp.grad_buffer(a).data();
                    auto src = g.data();
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
                  });
}

Var mul(Var a, Var b) {
  GradTape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return t.record(checked(std::move(out), "mul"), {a, b},
                  [a, b](GradTape& tp, const Tensor&, const Tensor& g) {
                    auto gs = g.data();
                    if (tp.requires_grad(a)) {
                      auto dst = tp.grad_buffer(a).data();
                      auto other = tp.value(b).data();
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gs[i] * other[i];
                    }
                    if (tp.requires_grad(b)) {
                      auto dst = tp.grad_buffer(b).data();
                      auto other = tp.value(a).data();
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gs[i] * other[i];
                    }
                  });
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

Var gelu(Var a) {
  GradTape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) {
    const double inner = kSqrt2OverPi * (v + kGeluC * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(inner));
  }
  return t.record(checked(std::move(out), "gelu"), {a},
                  [a](GradTape& tp, const Tensor&, const Tensor& g) {
                    auto x = tp.value(a).data();
                    auto dst = tp.grad_buffer(a).data();
                    auto gs = g.data();
                    for (std::size_t i = 0; i < dst.size(); ++i) {
                      const double v = x[i];
                      const double th = std::tanh(kSqrt2OverPi * (v + kGeluC * v * v * v));
                      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) *
                                                              kSqrt2OverPi *
                                                              (1.0 + 3.0 * kGeluC * v * v);
                      dst[i] += gs[i] * d;
                    }
                  });
}

Var sum(Var a) {
  GradTape& t = tape_of(a);
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return t.record(checked(Tensor::scalar(total), "sum"), {a},
                  [a](GradTape& tp, const Tensor&, const Tensor& g) {
                    const double gv = g[0];
                    for (double& d : tp.grad_buffer(a).data()) d += gv;
                  });
}

void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : row) v /= total;
}

std::vector<double> log_softmax(std::span<const double> row) {
  std::vector<double> out(row.begin(), row.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double total = 0.0;
  for (double v : out) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  for (double& v : out) v -= lse;
  return out;
}

namespace {

template <typename Visible>
Var masked_softmax(Var x, Visible visible) {
  GradTape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "softmax_rows");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = Tensor::zeros(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!visible(r, c)) continue;
      any = true;
      mx = std::max(mx, xv(r, c));
    }
    if (!any) {
      throw NumericError("softmax_rows: row " + std::to_string(r) +
                         " is fully masked (no valid attention target)");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!visible(r, c)) continue;
      const double e = std::exp(xv(r, c) - mx);
      out(r, c) = e;
      total += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= total;
  }
  // Masked entries hold exactly 0 in the output, so the Jacobian form
  // y * (g - <g, y>) gives them exactly zero gradient as well.
  return t.record(std::move(out), {x}, [x](GradTape& tp, const Tensor& y, const Tensor& g) {
    Tensor& dst = tp.grad_buffer(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      auto dr = dst.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += yr[c] * (gr[c] - dot);
    }
  });
}

}  // namespace

Var softmax_rows(Var x, Mask mask) {
  if (mask == Mask::Causal) {
    return masked_softmax(x, [](std::size_t r, std::size_t c) { return c <= r; });
  }
  return masked_softmax(x, [](std::size_t, std::size_t) { return true; });
}

Var softmax_rows(Var x, const std::vector<std::uint8_t>& visible) {
  if (visible.size() != x.value().size()) {
    throw DimensionError("softmax_rows: mask has " + std::to_string(visible.size()) +
                         " entries for input " + shape_string(x.value().shape()));
  }
  const std::size_t cols = x.value().cols();
  return masked_softmax(x, [&visible, cols](std::size_t r, std::size_t c) {
    return visible[r * cols + c] != 0;
  });
}

Var layer_norm(Var x, Var gain, Var bias, double epsilon) {
  GradTape& t = tape_of(x, gain);
  if (bias.tape() != &t) throw UsageError("operands live on different tapes");
  const Tensor& xv = x.value();
  require_rank2(xv, "layer_norm");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(cols) + " entries");
  }
  Tensor out = Tensor::zeros(rows, cols);
  // Saved per row: normalized input and 1/sigma.
  auto normalized = std::make_shared<Tensor>(Tensor::zeros(rows, cols));
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = xv.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + epsilon);
    (*inv_sigma)[r] = is;
    auto nr = normalized->row(r);
    auto orow = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      nr[c] = (xr[c] - mean) * is;
      orow[c] = gv[c] * nr[c] + bv[c];
    }
  }
  return t.record(
      checked(std::move(out), "layer_norm"), {x, gain, bias},
      [x, gain, bias, normalized, inv_sigma](GradTape& tp, const Tensor&, const Tensor& g) {
        const std::size_t rows = g.rows(), cols = g.cols();
        const auto gv = tp.value(gain).data();
        if (tp.requires_grad(gain) || tp.requires_grad(bias)) {
          const bool want_gain = tp.requires_grad(gain);
          const bool want_bias = tp.requires_grad(bias);
          for (std::size_t r = 0; r < rows; ++r) {
            auto gr = g.row(r);
            auto nr = normalized->row(r);
            if (want_gain) {
              auto dg = tp.grad_buffer(gain).data();
              for (std::size_t c = 0; c < cols; ++c) dg[c] += gr[c] * nr[c];
            }
            if (want_bias) {
              auto db = tp.grad_buffer(bias).data();
              for (std::size_t c = 0; c < cols; ++c) db[c] += gr[c];
            }
          }
        }
        if (!tp.requires_grad(x)) return;
        Tensor& dx = tp.grad_buffer(x);
        std::vector<double> dn(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          auto gr = g.row(r);
          auto nr = normalized->row(r);
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            dn[c] = gr[c] * gv[c];
            mean_dn += dn[c];
            mean_dn_n += dn[c] * nr[c];
          }
          mean_dn /= static_cast<double>(cols);
          mean_dn_n /= static_cast<double>(cols);
          auto dr = dx.row(r);
          const double is = (*inv_sigma)[r];
          for (std::size_t c = 0; c < cols; ++c) {
            dr[c] += is * (dn[c] - mean_dn - nr[c] * mean_dn_n);
          }
        }
      });
}

Var embedding(Var table, std::span<const TokenId> ids) {
  GradTape& t = tape_of(table);
  const Tensor& tv = table.value();
  require_rank2(tv, "embedding");
  const std::size_t vocab = tv.rows(), dim = tv.cols();
  Tensor out = Tensor::zeros(ids.size(), dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside table of " + std::to_string(vocab) +
                       " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[i])).begin(), dim, out.row(i).begin());
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return t.record(std::move(out), {table},
                  [table, saved = std::move(saved)](GradTape& tp, const Tensor&, const Tensor& g) {
                    Tensor& dst = tp.grad_buffer(table);
                    for (std::size_t i = 0; i < saved.size(); ++i) {
                      auto dr = dst.row(static_cast<std::size_t>(saved[i]));
                      auto gr = g.row(i);
                      for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c];
                    }
                  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  GradTape& t = tape_of(parts.front());
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (p.tape() != &t) throw UsageError("operands live on different tapes");
    require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != rows) {
      throw DimensionError("concat_cols: row counts disagree (" + std::to_string(rows) + " vs " +
                           std::to_string(p.value().rows()) + ")");
    }
    cols += p.value().cols();
  }
  Tensor out = Tensor::zeros(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.row(r).begin(), pv.cols(), out.row(r).begin() + static_cast<long>(offset));
    }
    offset += pv.cols();
  }
  return t.record(std::move(out), parts, [parts](GradTape& tp, const Tensor&, const Tensor& g) {
    std::size_t offset = 0;
    for (Var p : parts) {
      const std::size_t pc = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Tensor& dst = tp.grad_buffer(p);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r).subspan(offset, pc);
          auto dr = dst.row(r);
          for (std::size_t c = 0; c < pc; ++c) dr[c] += gr[c];
        }
      }
      offset += pc;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  GradTape& t = tape_of(parts.front());
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    if (p.tape() != &t) throw UsageError("operands live on different tapes");
    require_rank2(p.value(), "concat_rows");
    if (p.value().cols() != cols) {
      throw DimensionError("concat_rows: column counts disagree (" + std::to_string(cols) +
                           " vs " + std::to_string(p.value().cols()) + ")");
    }
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (Var p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  Tensor out(Shape{rows, cols});
  std::copy(data.begin(), data.end(), out.data().begin());
  return t.record(std::move(out), parts, [parts](GradTape& tp, const Tensor&, const Tensor& g) {
    std::size_t offset = 0;
    auto gs = g.data();
    for (Var p : parts) {
      const std::size_t n = tp.value(p).size();
      if (tp.requires_grad(p)) {
        auto dst = tp.grad_buffer(p).data();
        for (std::size_t i = 0; i < n; ++i) dst[i] += gs[offset + i];
      }
      offset += n;
    }
  });
}

Var slice(Var x, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols) {
  GradTape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "slice");
  if (row0 + rows > xv.rows() || col0 + cols > xv.cols()) {
    throw DimensionError("slice: block [" + std::to_string(row0) + "+" + std::to_string(rows) +
                         ", " + std::to_string(col0) + "+" + std::to_string(cols) +
                         "] outside " + shape_string(xv.shape()));
  }
  Tensor out = Tensor::zeros(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.row(row0 + r).begin() + static_cast<long>(col0), cols, out.row(r).begin());
  }
  return t.record(std::move(out), {x},
                  [x, row0, col0](GradTape& tp, const Tensor&, const Tensor& g) {
                    Tensor& dst = tp.grad_buffer(x);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      auto gr = g.row(r);
                      auto dr = dst.row(row0 + r).subspan(col0, gr.size());
                      for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c];
                    }
                  });
}

Var nll_loss(Var logits, std::span<const TokenId> targets) {
  GradTape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  require_rank2(lv, "nll_loss");
  if (lv.rows() != targets.size()) {
    throw DimensionError("nll_loss: " + std::to_string(lv.rows()) + " logit rows for " +
                         std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) throw UsageError("nll_loss: no targets");
  const std::size_t vocab = lv.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexError("nll_loss: target id " + std::to_string(targets[r]) + " at position " +
                       std::to_string(r) + " outside vocabulary of " + std::to_string(vocab));
    }
    const auto lp = log_softmax(lv.row(r));
    total -= lp[static_cast<std::size_t>(targets[r])];
  }
  const double count = static_cast<double>(targets.size());
  std::vector<TokenId> saved(targets.begin(), targets.end());
  return t.record(checked(Tensor::scalar(total / count), "nll_loss"), {logits},
                  [logits, saved = std::move(saved), count](GradTape& tp, const Tensor&,
                                                            const Tensor& g) {
                    const Tensor& lv = tp.value(logits);
                    Tensor& dst = tp.grad_buffer(logits);
                    const double gv = g[0] / count;
                    for (std::size_t r = 0; r < saved.size(); ++r) {
                      std::vector<double> p(lv.row(r).begin(), lv.row(r).end());
                      softmax_inplace(p);
                      p[static_cast<std::size_t>(saved[r])] -= 1.0;
                      auto dr = dst.row(r);
                      for (std::size_t c = 0; c < p.size(); ++c) dr[c] += gv * p[c];
                    }
                  });
}

}  // namespace hicd::num
