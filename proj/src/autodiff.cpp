#include "kne/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace kne {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

// ---- Tensor ------------------------------------------------------------

static long shape_numel(const std::vector<long>& shape) {
  long n = 1;
  for (long d : shape) {
    check(d >= 0, "Tensor: negative dimension in ", shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<long> shape, std::vector<double> data)
    : shape_(std::move(shape)),
      data_(std::make_shared<const std::vector<double>>(std::move(data))) {
  check(shape_numel(shape_) == static_cast<long>(data_->size()),
        "Tensor: shape ", shape_str(shape_), " does not match data length ", data_->size());
}

Tensor Tensor::zeros(std::vector<long> shape) {
  long n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<long> shape, double value) {
  long n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

long Tensor::numel() const { return data_ ? static_cast<long>(data_->size()) : 0; }

long Tensor::rows() const { return shape_.empty() ? 1 : shape_.front(); }

long Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::scalar_value() const {
  check(numel() == 1, "Tensor: scalar_value on tensor of shape ", shape_str(shape_));
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

uint64_t Tensor::content_hash() const {
  uint64_t h = fnv1a64(data_->data(), data_->size() * sizeof(double));
  for (long d : shape_) h = fnv1a64(&d, sizeof(d), h);
  return h;
}

// ---- GradientStore / GradientMap ----------------------------------------

std::vector<double>& GradientStore::acc(long node, long numel) {
  auto& slot = bufs_.at(static_cast<size_t>(node));
  if (!slot) slot = std::make_unique<std::vector<double>>(numel, 0.0);
  return *slot;
}

const std::vector<double>* GradientStore::get(long node) const {
  return bufs_.at(static_cast<size_t>(node)).get();
}

std::vector<double>* GradientStore::take(long node) {
  return bufs_.at(static_cast<size_t>(node)).get();
}

Tensor GradientMap::grad(const Tensor& leaf) const {
  check(leaf.tracked() && leaf.tape() == tape_,
        "grad: tensor is not tracked on the tape this backward pass ran on");
  auto it = grads_->find(leaf.node());
  if (it == grads_->end()) return Tensor::zeros(leaf.shape());
  // Stored flat; return in the query tensor's shape.
  return Tensor(leaf.shape(), it->second.vec());
}

bool GradientMap::reachable(const Tensor& leaf) const {
  check(leaf.tracked() && leaf.tape() == tape_,
        "reachable: tensor is not tracked on this tape");
  return grads_->count(leaf.node()) > 0;
}

// ---- Tape ----------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value;
  t.tape_ = this;
  t.node_ = static_cast<long>(nodes_.size());
  nodes_.push_back(Node{"leaf", value.numel(), true, nullptr});
  return t;
}

Tensor Tape::record(const char* op, std::vector<long> shape, std::vector<double> data,
                    std::function<void(const std::vector<double>&, GradientStore&)> backprop) {
  Tensor t(std::move(shape), std::move(data));
  t.tape_ = this;
  t.node_ = static_cast<long>(nodes_.size());
  nodes_.push_back(Node{op, t.numel(), false, std::move(backprop)});
  return t;
}

GradientMap Tape::backward(const Tensor& output) const {
  check(output.tracked() && output.tape() == this,
        "backward: output is not tracked on this tape");
  check(output.numel() == 1, "backward: output must be scalar, got shape ",
        shape_str(output.shape()));

  GradientStore gs(nodes_.size());
  gs.acc(output.node(), 1)[0] = 1.0;
  for (long i = output.node(); i >= 0; --i) {
    const std::vector<double>* g = gs.get(i);
    if (!g) continue;
    const Node& n = nodes_[static_cast<size_t>(i)];
    if (n.backprop) n.backprop(*g, gs);
  }

  GradientMap out;
  out.tape_ = this;
  out.grads_ = std::make_shared<std::map<long, Tensor>>();
  // Only leaf gradients are materialized; intermediates exist transiently.
  for (long i = 0; i <= output.node(); ++i) {
    if (!nodes_[static_cast<size_t>(i)].is_leaf) continue;
    std::vector<double>* g = gs.take(i);
    if (!g) continue;
    const long n = static_cast<long>(g->size());
    out.grads_->emplace(i, Tensor({n}, std::move(*g)));
  }
  return out;
}

GradientMap backward(const Tape& tape, const Tensor& output) { return tape.backward(output); }

// ---- Op helpers ------------------------------------------------------------

namespace {

Tape* common_tape(std::initializer_list<const Tensor*> ts, const char* op) {
  Tape* tp = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (!tp)
      tp = t->tape();
    else
      check(tp == t->tape(), op, ": inputs belong to different tapes");
  }
  return tp;
}

void require_2d(const Tensor& t, const char* op) {
  check(t.ndim() == 2, op, ": expected 2-D tensor, got ", shape_str(t.shape()));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kRmsEps = 1e-6;

}  // namespace

// ---- Primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  check(a.cols() == b.rows(), "matmul: incompatible shapes ", shape_str(a.shape()), " x ",
        shape_str(b.shape()));
  const long m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    CMap A(a.data(), m, k), B(b.data(), k, n);
    MMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  Tape* tp = common_tape({&a, &b}, "matmul");
  if (!tp) return Tensor({m, n}, std::move(out));
  return tp->record("matmul", {m, n}, std::move(out),
                    [a, b, m, k, n](const std::vector<double>& g, GradientStore& gs) {
                      CMap G(g.data(), m, n);
                      if (a.tracked()) {
                        MMap gA(gs.acc(a.node(), a.numel()).data(), m, k);
                        CMap B(b.data(), k, n);
                        gA.noalias() += G * B.transpose();
                      }
                      if (b.tracked()) {
                        MMap gB(gs.acc(b.node(), b.numel()).data(), k, n);
                        CMap A(a.data(), m, k);
                        gB.noalias() += A.transpose() * G;
                      }
                    });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const long m = a.rows(), n = a.cols();
  std::vector<double> out(static_cast<size_t>(m * n));
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = a.at(i, j);
  Tape* tp = common_tape({&a}, "transpose");
  if (!tp) return Tensor({n, m}, std::move(out));
  return tp->record("transpose", {n, m}, std::move(out),
                    [a, m, n](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (long i = 0; i < n; ++i)
                        for (long j = 0; j < m; ++j)
                          ga[static_cast<size_t>(j * n + i)] += g[static_cast<size_t>(i * m + j)];
                    });
}

// Same-shape add, or row-vector broadcast: a is [R,C] and b is {C} or {1,C}.
Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.same_shape(b);
  const bool row_bcast = !same && a.ndim() == 2 &&
                         ((b.ndim() == 1 && b.cols() == a.cols()) ||
                          (b.ndim() == 2 && b.rows() == 1 && b.cols() == a.cols()));
  check(same || row_bcast, "add: incompatible shapes ", shape_str(a.shape()), " + ",
        shape_str(b.shape()));
  std::vector<double> out(a.vec());
  if (same) {
    for (long i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] += b.at(i);
  } else {
    const long r = a.rows(), c = a.cols();
    for (long i = 0; i < r; ++i)
      for (long j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] += b.at(j);
  }
  Tape* tp = common_tape({&a, &b}, "add");
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record("add", a.shape(), std::move(out),
                    [a, b, same](const std::vector<double>& g, GradientStore& gs) {
                      if (a.tracked()) {
                        auto& ga = gs.acc(a.node(), a.numel());
                        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (b.tracked()) {
                        auto& gb = gs.acc(b.node(), b.numel());
                        if (same) {
                          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                        } else {
                          const long r = a.rows(), c = a.cols();
                          for (long i = 0; i < r; ++i)
                            for (long j = 0; j < c; ++j)
                              gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i * c + j)];
                        }
                      }
                    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
  std::vector<double> out(a.vec());
  for (long i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] *= b.at(i);
  Tape* tp = common_tape({&a, &b}, "mul");
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record("mul", a.shape(), std::move(out),
                    [a, b](const std::vector<double>& g, GradientStore& gs) {
                      if (a.tracked()) {
                        auto& ga = gs.acc(a.node(), a.numel());
                        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(static_cast<long>(i));
                      }
                      if (b.tracked()) {
                        auto& gb = gs.acc(b.node(), b.numel());
                        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(static_cast<long>(i));
                      }
                    });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.vec());
  for (double& v : out) v *= s;
  Tape* tp = common_tape({&a}, "scale");
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record("scale", a.shape(), std::move(out),
                    [a, s](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                    });
}

Tensor softmax(const Tensor& a) {
  check(a.ndim() >= 1, "softmax: rank-0 input");
  const long c = a.cols();
  const long r = a.numel() / c;
  std::vector<double> out(static_cast<size_t>(a.numel()));
  for (long i = 0; i < r; ++i) {
    const double* x = a.data() + i * c;
    double mx = x[0];
    for (long j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (long j = 0; j < c; ++j) {
      double e = std::exp(x[j] - mx);
      out[static_cast<size_t>(i * c + j)] = e;
      sum += e;
    }
    for (long j = 0; j < c; ++j) out[static_cast<size_t>(i * c + j)] /= sum;
  }
  Tape* tp = common_tape({&a}, "softmax");
  if (!tp) return Tensor(a.shape(), std::move(out));
  std::vector<double> saved = out;
  return tp->record("softmax", a.shape(), std::move(out),
                    [a, saved = std::move(saved), r, c](const std::vector<double>& g,
                                                        GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (long i = 0; i < r; ++i) {
                        const double* y = saved.data() + i * c;
                        const double* gr = g.data() + i * c;
                        double dot = 0.0;
                        for (long j = 0; j < c; ++j) dot += gr[j] * y[j];
                        for (long j = 0; j < c; ++j)
                          ga[static_cast<size_t>(i * c + j)] += y[j] * (gr[j] - dot);
                      }
                    });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  for (long i = 0; i < a.numel(); ++i) {
    check(a.at(i) > 0.0, "log: non-positive input ", a.at(i), " at flat index ", i);
    out[static_cast<size_t>(i)] = std::log(a.at(i));
  }
  Tape* tp = common_tape({&a}, "log");
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record("log", a.shape(), std::move(out),
                    [a](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.at(static_cast<long>(i));
                    });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  for (long i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] = std::exp(a.at(i));
  Tape* tp = common_tape({&a}, "exp");
  if (!tp) return Tensor(a.shape(), std::move(out));
  std::vector<double> saved = out;
  return tp->record("exp", a.shape(), std::move(out),
                    [a, saved = std::move(saved)](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * saved[i];
                    });
}

Tensor silu(const Tensor& a) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  for (long i = 0; i < a.numel(); ++i) {
    double x = a.at(i);
    out[static_cast<size_t>(i)] = x * stable_sigmoid(x);
  }
  Tape* tp = common_tape({&a}, "silu");
  if (!tp) return Tensor(a.shape(), std::move(out));
  return tp->record("silu", a.shape(), std::move(out),
                    [a](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (size_t i = 0; i < g.size(); ++i) {
                        double x = a.at(static_cast<long>(i));
                        double s = stable_sigmoid(x);
                        ga[i] += g[i] * s * (1.0 + x * (1.0 - s));
                      }
                    });
}

Tensor rms_normalize(const Tensor& x, const Tensor& gain) {
  check(x.ndim() >= 1, "rms_normalize: rank-0 input");
  const long c = x.cols();
  const long r = x.numel() / c;
  check(gain.ndim() == 1 && gain.numel() == c, "rms_normalize: gain shape ",
        shape_str(gain.shape()), " does not match row width ", c);
  std::vector<double> out(static_cast<size_t>(x.numel()));
  std::vector<double> inv_rms(static_cast<size_t>(r));
  for (long i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double ms = 0.0;
    for (long j = 0; j < c; ++j) ms += row[j] * row[j];
    ms = ms / static_cast<double>(c) + kRmsEps;
    double inv = 1.0 / std::sqrt(ms);
    inv_rms[static_cast<size_t>(i)] = inv;
    for (long j = 0; j < c; ++j)
      out[static_cast<size_t>(i * c + j)] = row[j] * inv * gain.at(j);
  }
  Tape* tp = common_tape({&x, &gain}, "rms_normalize");
  if (!tp) return Tensor(x.shape(), std::move(out));
  return tp->record(
      "rms_normalize", x.shape(), std::move(out),
      [x, gain, inv_rms = std::move(inv_rms), r, c](const std::vector<double>& g,
                                                    GradientStore& gs) {
        for (long i = 0; i < r; ++i) {
          const double* row = x.data() + i * c;
          const double* gr = g.data() + i * c;
          double inv = inv_rms[static_cast<size_t>(i)];
          if (x.tracked()) {
            auto& gx = gs.acc(x.node(), x.numel());
            double dot = 0.0;  // sum_j g_j * gain_j * x_j
            for (long j = 0; j < c; ++j) dot += gr[j] * gain.at(j) * row[j];
            double coef = dot * inv * inv * inv / static_cast<double>(c);
            for (long j = 0; j < c; ++j)
              gx[static_cast<size_t>(i * c + j)] += gr[j] * gain.at(j) * inv - coef * row[j];
          }
          if (gain.tracked()) {
            auto& gg = gs.acc(gain.node(), gain.numel());
            for (long j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += gr[j] * row[j] * inv;
          }
        }
      });
}

Tensor rows(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "rows");
  const long n = table.rows(), c = table.cols();
  for (int id : ids)
    check(id >= 0 && id < n, "rows: index ", id, " out of range for table with ", n, " rows");
  const long m = static_cast<long>(ids.size());
  std::vector<double> out(static_cast<size_t>(m * c));
  for (long i = 0; i < m; ++i)
    std::copy_n(table.data() + static_cast<long>(ids[static_cast<size_t>(i)]) * c, c,
                out.data() + i * c);
  Tape* tp = common_tape({&table}, "rows");
  if (!tp) return Tensor({m, c}, std::move(out));
  return tp->record("rows", {m, c}, std::move(out),
                    [table, ids, c](const std::vector<double>& g, GradientStore& gs) {
                      auto& gt = gs.acc(table.node(), table.numel());
                      for (size_t i = 0; i < ids.size(); ++i) {
                        double* dst = gt.data() + static_cast<long>(ids[i]) * c;
                        const double* src = g.data() + static_cast<long>(i) * c;
                        for (long j = 0; j < c; ++j) dst[j] += src[j];
                      }
                    });
}

Tensor row_scatter(const Tensor& src, const std::vector<long>& ids, long n_rows) {
  require_2d(src, "row_scatter");
  check(src.rows() == static_cast<long>(ids.size()), "row_scatter: ", ids.size(),
        " indices for ", src.rows(), " source rows");
  const long c = src.cols();
  std::vector<double> out(static_cast<size_t>(n_rows * c), 0.0);
  std::vector<bool> seen(static_cast<size_t>(n_rows), false);
  for (size_t i = 0; i < ids.size(); ++i) {
    long id = ids[i];
    check(id >= 0 && id < n_rows, "row_scatter: index ", id, " out of range for ", n_rows,
          " rows");
    check(!seen[static_cast<size_t>(id)], "row_scatter: duplicate index ", id);
    seen[static_cast<size_t>(id)] = true;
    std::copy_n(src.data() + static_cast<long>(i) * c, c, out.data() + id * c);
  }
  Tape* tp = common_tape({&src}, "row_scatter");
  if (!tp) return Tensor({n_rows, c}, std::move(out));
  return tp->record("row_scatter", {n_rows, c}, std::move(out),
                    [src, ids, c](const std::vector<double>& g, GradientStore& gs) {
                      auto& gsrc = gs.acc(src.node(), src.numel());
                      for (size_t i = 0; i < ids.size(); ++i) {
                        const double* from = g.data() + ids[i] * c;
                        double* to = gsrc.data() + static_cast<long>(i) * c;
                        for (long j = 0; j < c; ++j) to[j] += from[j];
                      }
                    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  const long nd = parts.front().ndim();
  check(nd == 1 || nd == 2, "concat: expected 1-D or 2-D tensors");
  check(nd == 2 || axis == 0, "concat: axis 1 requires 2-D tensors");
  for (const Tensor& p : parts) {
    check(p.ndim() == nd, "concat: mixed ranks");
    if (axis == 0)
      check(nd == 1 || p.cols() == parts.front().cols(), "concat: column mismatch ",
            shape_str(p.shape()), " vs ", shape_str(parts.front().shape()));
    else
      check(p.rows() == parts.front().rows(), "concat: row mismatch ", shape_str(p.shape()),
            " vs ", shape_str(parts.front().shape()));
  }
  std::vector<long> out_shape;
  std::vector<double> out;
  if (axis == 0) {
    if (nd == 1) {
      long len = 0;
      for (const Tensor& p : parts) len += p.numel();
      out_shape = {len};
      out.reserve(static_cast<size_t>(len));
      for (const Tensor& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
    } else {
      long r = 0;
      const long c = parts.front().cols();
      for (const Tensor& p : parts) r += p.rows();
      out_shape = {r, c};
      out.reserve(static_cast<size_t>(r * c));
      for (const Tensor& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
    }
  } else {
    const long r = parts.front().rows();
    long c = 0;
    for (const Tensor& p : parts) c += p.cols();
    out_shape = {r, c};
    out.resize(static_cast<size_t>(r * c));
    long col0 = 0;
    for (const Tensor& p : parts) {
      for (long i = 0; i < r; ++i)
        std::copy_n(p.data() + i * p.cols(), p.cols(), out.data() + i * c + col0);
      col0 += p.cols();
    }
  }
  Tape* tp = nullptr;
  for (const Tensor& p : parts) {
    if (!p.tracked()) continue;
    if (!tp)
      tp = p.tape();
    else
      check(tp == p.tape(), "concat: inputs belong to different tapes");
  }
  if (!tp) return Tensor(std::move(out_shape), std::move(out));
  const long out_cols = out_shape.size() == 2 ? out_shape[1] : 1;
  return tp->record("concat", std::move(out_shape), std::move(out),
                    [parts, axis, out_cols](const std::vector<double>& g, GradientStore& gs) {
                      if (axis == 0) {
                        size_t off = 0;
                        for (const Tensor& p : parts) {
                          if (p.tracked()) {
                            auto& gp = gs.acc(p.node(), p.numel());
                            for (long i = 0; i < p.numel(); ++i)
                              gp[static_cast<size_t>(i)] += g[off + static_cast<size_t>(i)];
                          }
                          off += static_cast<size_t>(p.numel());
                        }
                      } else {
                        long col0 = 0;
                        for (const Tensor& p : parts) {
                          if (p.tracked()) {
                            auto& gp = gs.acc(p.node(), p.numel());
                            for (long i = 0; i < p.rows(); ++i)
                              for (long j = 0; j < p.cols(); ++j)
                                gp[static_cast<size_t>(i * p.cols() + j)] +=
                                    g[static_cast<size_t>(i * out_cols + col0 + j)];
                          }
                          col0 += p.cols();
                        }
                      }
                    });
}

Tensor slice(const Tensor& a, int axis, long start, long len) {
  check(axis == 0 || axis == 1, "slice: axis must be 0 or 1");
  check(a.ndim() == 1 || a.ndim() == 2, "slice: expected 1-D or 2-D tensor");
  check(a.ndim() == 2 || axis == 0, "slice: axis 1 requires a 2-D tensor");
  const long extent = (axis == 0 && a.ndim() == 2) ? a.rows() : (axis == 1 ? a.cols() : a.numel());
  check(start >= 0 && len >= 0 && start + len <= extent, "slice: range [", start, ", ",
        start + len, ") out of bounds for extent ", extent);
  std::vector<long> out_shape;
  std::vector<double> out;
  if (a.ndim() == 1) {
    out_shape = {len};
    out.assign(a.data() + start, a.data() + start + len);
  } else if (axis == 0) {
    out_shape = {len, a.cols()};
    out.assign(a.data() + start * a.cols(), a.data() + (start + len) * a.cols());
  } else {
    out_shape = {a.rows(), len};
    out.resize(static_cast<size_t>(a.rows() * len));
    for (long i = 0; i < a.rows(); ++i)
      std::copy_n(a.data() + i * a.cols() + start, len, out.data() + i * len);
  }
  Tape* tp = common_tape({&a}, "slice");
  if (!tp) return Tensor(std::move(out_shape), std::move(out));
  return tp->record("slice", std::move(out_shape), std::move(out),
                    [a, axis, start, len](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      if (a.ndim() == 1) {
                        for (long i = 0; i < len; ++i)
                          ga[static_cast<size_t>(start + i)] += g[static_cast<size_t>(i)];
                      } else if (axis == 0) {
                        const long c = a.cols();
                        for (long i = 0; i < len * c; ++i)
                          ga[static_cast<size_t>(start * c + i)] += g[static_cast<size_t>(i)];
                      } else {
                        const long c = a.cols();
                        for (long i = 0; i < a.rows(); ++i)
                          for (long j = 0; j < len; ++j)
                            ga[static_cast<size_t>(i * c + start + j)] +=
                                g[static_cast<size_t>(i * len + j)];
                      }
                    });
}

Tensor reduce_sum(const Tensor& a) {
  double s = 0.0;
  for (long i = 0; i < a.numel(); ++i) s += a.at(i);
  Tape* tp = common_tape({&a}, "reduce_sum");
  if (!tp) return Tensor::scalar(s);
  return tp->record("reduce_sum", {1}, {s},
                    [a](const std::vector<double>& g, GradientStore& gs) {
                      auto& ga = gs.acc(a.node(), a.numel());
                      for (double& v : ga) v += g[0];
                    });
}

Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<std::pair<long, int>>& targets) {
  require_2d(logits, "cross_entropy_with_logits");
  const long t = logits.rows(), v = logits.cols();
  double loss = 0.0;
  for (const auto& [pos, id] : targets) {
    check(pos >= 0 && pos < t, "cross_entropy_with_logits: position ", pos,
          " out of range for ", t, " rows");
    check(id >= 0 && id < v, "cross_entropy_with_logits: token ", id, " out of range for ", v,
          " columns");
    const double* row = logits.data() + pos * v;
    double mx = row[0];
    for (long j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (long j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    loss += mx + std::log(sum) - row[id];
  }
  Tape* tp = common_tape({&logits}, "cross_entropy_with_logits");
  if (!tp) return Tensor::scalar(loss);
  return tp->record(
      "cross_entropy_with_logits", {1}, {loss},
      [logits, targets, v](const std::vector<double>& g, GradientStore& gs) {
        auto& gl = gs.acc(logits.node(), logits.numel());
        for (const auto& [pos, id] : targets) {
          const double* row = logits.data() + pos * v;
          double mx = row[0];
          for (long j = 1; j < v; ++j) mx = std::max(mx, row[j]);
          double sum = 0.0;
          for (long j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
          double* grow = gl.data() + pos * v;
          for (long j = 0; j < v; ++j) grow[j] += g[0] * std::exp(row[j] - mx) / sum;
          grow[id] -= g[0];
        }
      });
}

// ---- Gradient checking ------------------------------------------------------

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& point, double step) {
  check(step > 0.0, "grad_check: step must be positive");

  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const Tensor& p : point) leaves.push_back(tape.leaf(p));
  Tensor y = f(leaves);
  check(y.numel() == 1, "grad_check: f must return a scalar");

  std::vector<std::vector<double>> analytic(point.size());
  if (y.tracked()) {
    GradientMap gm = tape.backward(y);
    for (size_t i = 0; i < point.size(); ++i) analytic[i] = gm.grad(leaves[i]).vec();
  } else {
    // f ignored its inputs entirely: gradient is identically zero.
    for (size_t i = 0; i < point.size(); ++i)
      analytic[i].assign(static_cast<size_t>(point[i].numel()), 0.0);
  }

  double max_err = 0.0;
  for (size_t i = 0; i < point.size(); ++i) {
    for (long c = 0; c < point[i].numel(); ++c) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor> shifted = point;
        std::vector<double> d = point[i].vec();
        d[static_cast<size_t>(c)] += delta;
        shifted[i] = Tensor(point[i].shape(), std::move(d));
        return f(shifted).scalar_value();
      };
      double numeric = (eval_at(step) - eval_at(-step)) / (2.0 * step);
      double a = analytic[i][static_cast<size_t>(c)];
      double err = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
      if (std::isnan(err)) return err;
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace kne
