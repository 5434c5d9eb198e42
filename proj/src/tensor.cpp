#include "dynct/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <mutex>
#include <sstream>

extern "C" void openblas_set_num_threads(int);

namespace dynct::ad {
namespace {

void blas_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

size_t shape_count(const std::vector<int>& shape) {
  size_t n = 1;
  for (int e : shape) {
    if (e < 0) throw ContractViolation("tensor shape extent must be >= 0");
    n *= static_cast<size_t>(e);
  }
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(op) + ": shape mismatch " +
                            shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

void require_2d(const char* op, const Tensor& t) {
  if (t.shape().size() != 2)
    throw ContractViolation(std::string(op) + ": expected 2-D tensor, got " +
                            shape_str(t.shape()));
}

bool g_grad_mode = true;

}  // namespace

bool GradMode::enabled() { return g_grad_mode; }
void GradMode::set(bool on) { g_grad_mode = on; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_count(shape), 0.0),
                     requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_count(shape), value),
                     requires_grad);
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
  if (values.size() != shape_count(shape))
    throw ContractViolation("from_values: " + std::to_string(values.size()) +
                            " values for shape " + shape_str(shape));
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->values = std::move(values);
  t.node_->requires_grad = requires_grad;
  t.node_->leaf = true;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (size() != 1)
    throw ContractViolation("value(): tensor has " + std::to_string(size()) +
                            " elements");
  return node_->values[0];
}

std::span<double> Tensor::values_mut() {
  if (!node_->leaf)
    throw ContractViolation("values_mut: only leaf tensors may be mutated");
  return node_->values;
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.size() != node_->values.size())
    node_->grad.assign(node_->values.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

Tensor Tensor::frozen() const {
  Tensor t;
  t.node_ = node_;
  t.frozen_ = true;
  return t;
}

Tensor Tensor::detached() const {
  return from_values(node_->shape, node_->values, false);
}

std::vector<double>& AdjointStore::at(const Node* n, size_t size) {
  auto it = map_.find(n);
  if (it == map_.end())
    it = map_.emplace(n, std::vector<double>(size, 0.0)).first;
  return it->second;
}

const std::vector<double>* AdjointStore::find(const Node* n) const {
  auto it = map_.find(n);
  return it == map_.end() ? nullptr : &it->second;
}

Tape& Tape::active() {
  static Tape tape;
  return tape;
}

void Tape::record(std::shared_ptr<Node> out, Pullback pull) {
  entries_.push_back({std::move(out), std::move(pull)});
}

void Tape::truncate(size_t mark) {
  if (mark > entries_.size())
    throw ContractViolation("Tape::truncate: mark beyond tape end");
  entries_.resize(mark);
}

void Tape::backward(const Tensor& root) {
  if (root.size() != 1)
    throw ContractViolation("backward: root must be a scalar tensor");
  if (!all_finite(root.values()))
    throw NumericError("backward: root value is not finite");
  AdjointStore adj;
  adj.at(root.node().get(), 1)[0] += 1.0;
  for (size_t i = entries_.size(); i-- > 0;) {
    const Entry& e = entries_[i];
    const std::vector<double>* out_adj = adj.find(e.out.get());
    if (out_adj) e.pull(*out_adj, adj);
  }
  for (const auto& [node, a] : adj.all()) {
    if (!node->leaf || !node->requires_grad) continue;
    Node* n = const_cast<Node*>(node);
    if (n->grad.size() != n->values.size())
      n->grad.assign(n->values.size(), 0.0);
    for (size_t i = 0; i < a.size(); ++i) n->grad[i] += a[i];
  }
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor make_op(std::vector<int> shape, std::vector<double> values,
               const std::vector<Tensor>& track, Pullback pull) {
  bool rec = GradMode::enabled();
  if (rec) {
    rec = false;
    for (const Tensor& t : track)
      if (t.requires_grad()) {
        rec = true;
        break;
      }
  }
  Tensor out = Tensor::from_values(std::move(shape), std::move(values), false);
  if (rec) {
    out.node()->requires_grad = true;
    out.node()->leaf = false;
    Tape::active().record(out.node(), std::move(pull));
  }
  return out;
}

namespace {

// Shared pullback for elementwise y = f(a): da += dfa * dy where the local
// derivative dfa is captured per element.
Tensor unary_elementwise(const Tensor& a, std::vector<double> values,
                         std::vector<double> dfa) {
  bool live = a.requires_grad();
  const Node* an = a.node().get();
  size_t n = a.size();
  std::vector<Tensor> track{a};
  auto keep = a.node();
  return make_op(a.shape(), std::move(values), track,
                 [an, keep, live, n, d = std::move(dfa)](
                     const std::vector<double>& dy, AdjointStore& adj) {
                   if (!live) return;
                   auto& da = adj.at(an, n);
                   for (size_t i = 0; i < n; ++i) da[i] += d[i] * dy[i];
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  size_t n = a.size();
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = a.at(i) + b.at(i);
  bool la = a.requires_grad(), lb = b.requires_grad();
  const Node *an = a.node().get(), *bn = b.node().get();
  auto ka = a.node(), kb = b.node();
  return make_op(a.shape(), std::move(v), {a, b},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (la) {
                     auto& da = adj.at(an, n);
                     for (size_t i = 0; i < n; ++i) da[i] += dy[i];
                   }
                   if (lb) {
                     auto& db = adj.at(bn, n);
                     for (size_t i = 0; i < n; ++i) db[i] += dy[i];
                   }
                   (void)ka;
                   (void)kb;
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  size_t n = a.size();
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = a.at(i) - b.at(i);
  bool la = a.requires_grad(), lb = b.requires_grad();
  const Node *an = a.node().get(), *bn = b.node().get();
  auto ka = a.node(), kb = b.node();
  return make_op(a.shape(), std::move(v), {a, b},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (la) {
                     auto& da = adj.at(an, n);
                     for (size_t i = 0; i < n; ++i) da[i] += dy[i];
                   }
                   if (lb) {
                     auto& db = adj.at(bn, n);
                     for (size_t i = 0; i < n; ++i) db[i] -= dy[i];
                   }
                   (void)ka;
                   (void)kb;
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  size_t n = a.size();
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = a.at(i) * b.at(i);
  bool la = a.requires_grad(), lb = b.requires_grad();
  const Node *an = a.node().get(), *bn = b.node().get();
  auto ka = a.node(), kb = b.node();
  return make_op(a.shape(), std::move(v), {a, b},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (la) {
                     auto& da = adj.at(an, n);
                     for (size_t i = 0; i < n; ++i)
                       da[i] += kb->values[i] * dy[i];
                   }
                   if (lb) {
                     auto& db = adj.at(bn, n);
                     for (size_t i = 0; i < n; ++i)
                       db[i] += ka->values[i] * dy[i];
                   }
                 });
}

Tensor scale(const Tensor& a, double s) {
  size_t n = a.size();
  std::vector<double> v(n), d(n, s);
  for (size_t i = 0; i < n; ++i) v[i] = s * a.at(i);
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor add_scalar(const Tensor& a, double s) {
  size_t n = a.size();
  std::vector<double> v(n), d(n, 1.0);
  for (size_t i = 0; i < n; ++i) v[i] = a.at(i) + s;
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor relu(const Tensor& a) {
  size_t n = a.size();
  std::vector<double> v(n), d(n);
  for (size_t i = 0; i < n; ++i) {
    double x = a.at(i);
    v[i] = x > 0 ? x : 0.0;
    d[i] = x > 0 ? 1.0 : 0.0;
  }
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor leaky_relu(const Tensor& a, double slope) {
  if (!(slope >= 0.0 && slope < 1.0))
    throw ContractViolation("leaky_relu: slope must lie in [0,1)");
  size_t n = a.size();
  std::vector<double> v(n), d(n);
  for (size_t i = 0; i < n; ++i) {
    double x = a.at(i);
    v[i] = x > 0 ? x : slope * x;
    d[i] = x > 0 ? 1.0 : slope;
  }
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor abs(const Tensor& a) {
  size_t n = a.size();
  std::vector<double> v(n), d(n);
  for (size_t i = 0; i < n; ++i) {
    double x = a.at(i);
    v[i] = std::fabs(x);
    d[i] = x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
  }
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor sin(const Tensor& a) {
  size_t n = a.size();
  std::vector<double> v(n), d(n);
  for (size_t i = 0; i < n; ++i) {
    v[i] = std::sin(a.at(i));
    d[i] = std::cos(a.at(i));
  }
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor cos(const Tensor& a) {
  size_t n = a.size();
  std::vector<double> v(n), d(n);
  for (size_t i = 0; i < n; ++i) {
    v[i] = std::cos(a.at(i));
    d[i] = -std::sin(a.at(i));
  }
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractViolation("clamp: lo > hi");
  size_t n = a.size();
  std::vector<double> v(n), d(n);
  for (size_t i = 0; i < n; ++i) {
    double x = a.at(i);
    bool inside = x >= lo && x <= hi;
    v[i] = inside ? x : (x < lo ? lo : hi);
    d[i] = inside ? 1.0 : 0.0;
  }
  return unary_elementwise(a, std::move(v), std::move(d));
}

Tensor complex_abs(const Tensor& re, const Tensor& im) {
  require_same_shape("complex_abs", re, im);
  size_t n = re.size();
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = std::hypot(re.at(i), im.at(i));
  bool lr = re.requires_grad(), li = im.requires_grad();
  const Node *rn = re.node().get(), *in = im.node().get();
  auto kr = re.node(), ki = im.node();
  auto mod = std::make_shared<std::vector<double>>(v);
  return make_op(re.shape(), std::move(v), {re, im},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   const std::vector<double>& m = *mod;
                   if (lr) {
                     auto& dr = adj.at(rn, n);
                     for (size_t i = 0; i < n; ++i)
                       if (m[i] > 0) dr[i] += kr->values[i] / m[i] * dy[i];
                   }
                   if (li) {
                     auto& di = adj.at(in, n);
                     for (size_t i = 0; i < n; ++i)
                       if (m[i] > 0) di[i] += ki->values[i] / m[i] * dy[i];
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  blas_single_thread();
  require_2d("matmul", a);
  require_2d("matmul", b);
  int n = a.dim(0), k = a.dim(1), k2 = b.dim(0), m = b.dim(1);
  if (k != k2)
    throw ContractViolation("matmul: inner extents differ " +
                            shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  std::vector<double> v(static_cast<size_t>(n) * m, 0.0);
  if (n && m && k)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, m, k, 1.0,
                a.values().data(), k, b.values().data(), m, 0.0, v.data(), m);
  bool la = a.requires_grad(), lb = b.requires_grad();
  const Node *an = a.node().get(), *bn = b.node().get();
  auto ka = a.node(), kb = b.node();
  return make_op({n, m}, std::move(v), {a, b},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (la && n && k) {
                     auto& da = adj.at(an, static_cast<size_t>(n) * k);
                     if (m)  // dA += dY B^T
                       cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n,
                                   k, m, 1.0, dy.data(), m, kb->values.data(),
                                   m, 1.0, da.data(), k);
                   }
                   if (lb && k && m) {
                     auto& db = adj.at(bn, static_cast<size_t>(k) * m);
                     if (n)  // dB += A^T dY
                       cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k,
                                   m, n, 1.0, ka->values.data(), k, dy.data(),
                                   m, 1.0, db.data(), m);
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  blas_single_thread();
  require_2d("linear", x);
  require_2d("linear", w);
  int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in)
    throw ContractViolation("linear: weight shape " + shape_str(w.shape()) +
                            " does not match input " + shape_str(x.shape()));
  if (b.shape() != std::vector<int>{out})
    throw ContractViolation("linear: bias shape " + shape_str(b.shape()) +
                            " does not match " + std::to_string(out) +
                            " outputs");
  std::vector<double> v(static_cast<size_t>(n) * out);
  for (int r = 0; r < n; ++r)
    std::memcpy(v.data() + static_cast<size_t>(r) * out, b.values().data(),
                sizeof(double) * static_cast<size_t>(out));
  if (n && in && out)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, out, in, 1.0,
                x.values().data(), in, w.values().data(), in, 1.0, v.data(),
                out);
  bool lx = x.requires_grad(), lw = w.requires_grad(), lb = b.requires_grad();
  const Node *xn = x.node().get(), *wn = w.node().get(), *bn = b.node().get();
  auto kx = x.node(), kw = w.node();
  return make_op(
      {n, out}, std::move(v), {x, w, b},
      [=](const std::vector<double>& dy, AdjointStore& adj) {
        if (lx && n && in && out) {  // dX += dY W
          auto& dx = adj.at(xn, static_cast<size_t>(n) * in);
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, in, out,
                      1.0, dy.data(), out, kw->values.data(), in, 1.0,
                      dx.data(), in);
        }
        if (lw && n && in && out) {  // dW += dY^T X
          auto& dw = adj.at(wn, static_cast<size_t>(out) * in);
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, out, in, n, 1.0,
                      dy.data(), out, kx->values.data(), in, 1.0, dw.data(),
                      in);
        }
        if (lb) {
          auto& db = adj.at(bn, static_cast<size_t>(out));
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < out; ++c)
              db[static_cast<size_t>(c)] += dy[static_cast<size_t>(r) * out + c];
        }
      });
}

Tensor sum(const Tensor& a) {
  size_t n = a.size();
  double s = 0;
  for (size_t i = 0; i < n; ++i) s += a.at(i);
  bool la = a.requires_grad();
  const Node* an = a.node().get();
  auto ka = a.node();
  return make_op({1}, {s}, {a},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (!la) return;
                   auto& da = adj.at(an, n);
                   for (size_t i = 0; i < n; ++i) da[i] += dy[0];
                   (void)ka;
                 });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractViolation("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor row_sum(const Tensor& a) {
  require_2d("row_sum", a);
  int n = a.dim(0), m = a.dim(1);
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < m; ++c)
      v[static_cast<size_t>(r)] += a.at(static_cast<size_t>(r) * m + c);
  bool la = a.requires_grad();
  const Node* an = a.node().get();
  auto ka = a.node();
  return make_op({n, 1}, std::move(v), {a},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (!la) return;
                   auto& da = adj.at(an, static_cast<size_t>(n) * m);
                   for (int r = 0; r < n; ++r)
                     for (int c = 0; c < m; ++c)
                       da[static_cast<size_t>(r) * m + c] +=
                           dy[static_cast<size_t>(r)];
                   (void)ka;
                 });
}

Tensor segment_sum(const Tensor& a, int rows, int width) {
  require_2d("segment_sum", a);
  int c = a.dim(1);
  if (a.dim(0) != rows * width)
    throw ContractViolation("segment_sum: " + std::to_string(a.dim(0)) +
                            " rows cannot split into " + std::to_string(rows) +
                            " groups of " + std::to_string(width));
  std::vector<double> v(static_cast<size_t>(rows) * c, 0.0);
  for (int g = 0; g < rows; ++g)
    for (int w = 0; w < width; ++w)
      for (int j = 0; j < c; ++j)
        v[static_cast<size_t>(g) * c + j] +=
            a.at((static_cast<size_t>(g) * width + w) * c + j);
  bool la = a.requires_grad();
  const Node* an = a.node().get();
  size_t asize = a.size();
  return make_op({rows, c}, std::move(v), {a},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (!la) return;
                   auto& da = adj.at(an, asize);
                   for (int g = 0; g < rows; ++g)
                     for (int w = 0; w < width; ++w)
                       for (int j = 0; j < c; ++j)
                         da[(static_cast<size_t>(g) * width + w) * c + j] +=
                             dy[static_cast<size_t>(g) * c + j];
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
  require_2d("concat_cols", parts[0]);
  int n = parts[0].dim(0), total = 0;
  for (const Tensor& p : parts) {
    require_2d("concat_cols", p);
    if (p.dim(0) != n)
      throw ContractViolation("concat_cols: row count mismatch " +
                              std::to_string(p.dim(0)) + " vs " +
                              std::to_string(n));
    total += p.dim(1);
  }
  std::vector<double> v(static_cast<size_t>(n) * total);
  int off = 0;
  for (const Tensor& p : parts) {
    int m = p.dim(1);
    for (int r = 0; r < n; ++r)
      std::memcpy(v.data() + static_cast<size_t>(r) * total + off,
                  p.values().data() + static_cast<size_t>(r) * m,
                  sizeof(double) * static_cast<size_t>(m));
    off += m;
  }
  struct Part {
    const Node* node;
    size_t size;
    int cols;
    int offset;
    bool live;
  };
  auto meta = std::make_shared<std::vector<Part>>();
  auto keep = std::make_shared<std::vector<std::shared_ptr<Node>>>();
  off = 0;
  for (const Tensor& p : parts) {
    meta->push_back({p.node().get(), p.size(), p.dim(1), off,
                     p.requires_grad()});
    keep->push_back(p.node());
    off += p.dim(1);
  }
  return make_op({n, total}, std::move(v), parts,
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   for (const Part& p : *meta) {
                     if (!p.live) continue;
                     auto& dp = adj.at(p.node, p.size);
                     for (int r = 0; r < n; ++r)
                       for (int c = 0; c < p.cols; ++c)
                         dp[static_cast<size_t>(r) * p.cols + c] +=
                             dy[static_cast<size_t>(r) * total + p.offset + c];
                   }
                   (void)keep;
                 });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_2d("slice_cols", a);
  int n = a.dim(0), m = a.dim(1);
  if (c0 < 0 || c1 > m || c0 >= c1)
    throw ContractViolation("slice_cols: range [" + std::to_string(c0) + "," +
                            std::to_string(c1) + ") invalid for " +
                            std::to_string(m) + " columns");
  int w = c1 - c0;
  std::vector<double> v(static_cast<size_t>(n) * w);
  for (int r = 0; r < n; ++r)
    std::memcpy(v.data() + static_cast<size_t>(r) * w,
                a.values().data() + static_cast<size_t>(r) * m + c0,
                sizeof(double) * static_cast<size_t>(w));
  bool la = a.requires_grad();
  const Node* an = a.node().get();
  size_t asize = a.size();
  return make_op({n, w}, std::move(v), {a},
                 [=](const std::vector<double>& dy, AdjointStore& adj) {
                   if (!la) return;
                   auto& da = adj.at(an, asize);
                   for (int r = 0; r < n; ++r)
                     for (int c = 0; c < w; ++c)
                       da[static_cast<size_t>(r) * m + c0 + c] +=
                           dy[static_cast<size_t>(r) * w + c];
                 });
}

}  // namespace dynct::ad
