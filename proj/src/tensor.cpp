#include "rfuse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_set>

#include <Eigen/Core>

#include "rfuse/binio.hpp"

namespace rfuse::ad {

namespace {

std::atomic<long> g_live{0};
thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// Creates the output node; it joins the graph only when recording is on and a
// parent requires grad.
NodePtr make_node(Shape shape, Buffer value, std::initializer_list<const Tensor*> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (const Tensor* p : parents)
      if (p->defined() && p->requires_grad()) n->requires_grad = true;
    if (n->requires_grad)
      for (const Tensor* p : parents) n->parents.push_back(p->defined() ? p->ptr() : nullptr);
  }
  return n;
}

NodePtr make_node_list(Shape shape, Buffer value, const std::vector<Tensor>& parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.requires_grad()) n->requires_grad = true;
    if (n->requires_grad)
      for (const auto& p : parents) n->parents.push_back(p.ptr());
  }
  return n;
}

// Parent i's gradient buffer, or null when it does not need one.
double* pgrad(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

const Buffer& pval(Node& self, std::size_t i) { return self.parents[i]->value; }

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  check(axis >= 0 && axis < rank, "axis out of range");
  return axis;
}

// Splits a shape around `axis` into outer * n * inner.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};
AxisSplit split(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[i]);
  a.n = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= static_cast<std::size_t>(s[i]);
  return a;
}

Shape drop_axis(const Shape& s, int axis) {
  Shape out = s;
  out.erase(out.begin() + axis);
  return out;
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  check(a.shape() == b.shape(), std::string(op) + ": shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  Buffer out(a.size());
  const auto& x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  auto n = make_node(a.shape(), std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [deriv](Node& self) {
      double* ga = pgrad(self, 0);
      const auto& x = pval(self, 0);
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.value[i]);
    };
  return Tensor(n);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + to_string(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Node::Node() { ++g_live; }
Node::~Node() { --g_live; }
long Node::live_count() { return g_live.load(); }
void Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const auto count = numel(shape);
  return from(std::move(shape), Buffer(count, v), requires_grad);
}

Tensor Tensor::from(Shape shape, const std::vector<double>& data, bool requires_grad) {
  return from(std::move(shape), Buffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer data, bool requires_grad) {
  check(numel(shape) == data.size(), "data length does not match shape " + to_string(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, Buffer{v}, requires_grad); }

int Tensor::dim(int axis) const { return n_->shape.at(static_cast<std::size_t>(norm_axis(axis, rank()))); }

double Tensor::item() const {
  check(size() == 1, "item() on tensor of shape " + to_string(shape()));
  return n_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (n_->grad.empty()) return std::vector<double>(n_->value.size(), 0.0);
  return {n_->grad.begin(), n_->grad.end()};
}

void Tensor::zero_grad() { n_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), data(), false); }

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Tensor& loss) {
  check(loss.defined() && loss.size() == 1, "backward needs a scalar loss");
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order. `owned` keeps every
  // visited node alive until the graph is released below.
  std::vector<Node*> order;
  std::vector<NodePtr> owned;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        owned.push_back(node->parents[next - 1]);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release the graph; leaves keep their gradients.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->requires_grad = false;
    }
  }
  for (Node* n : order) n->parents.clear();
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto n = make_node(a.shape(), std::move(out), {&a, &b});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      for (std::size_t p = 0; p < 2; ++p)
        if (double* g = pgrad(self, p))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "sub");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto n = make_node(a.shape(), std::move(out), {&a, &b});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (double* g = pgrad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    };
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "mul");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto n = make_node(a.shape(), std::move(out), {&a, &b});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      const auto& x = pval(self, 0);
      const auto& y = pval(self, 1);
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
      if (double* g = pgrad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    };
  return Tensor(n);
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor shift(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  check(s.size() == 1, "mul_scalar: scalar operand has shape " + to_string(s.shape()));
  const double sv = s[0];
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  auto n = make_node(a.shape(), std::move(out), {&a, &s});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      const auto& x = pval(self, 0);
      const double sv = pval(self, 1)[0];
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * sv;
      if (double* g = pgrad(self, 1)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += self.grad[i] * x[i];
        g[0] += acc;
      }
    };
  return Tensor(n);
}

Tensor add_scalar(const Tensor& a, const Tensor& s) {
  check(s.size() == 1, "add_scalar: scalar operand has shape " + to_string(s.shape()));
  const double sv = s[0];
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + sv;
  auto n = make_node(a.shape(), std::move(out), {&a, &s});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      if (double* g = pgrad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (double* g = pgrad(self, 1)) {
        double acc = 0.0;
        for (double v : self.grad) acc += v;
        g[0] += acc;
      }
    };
  return Tensor(n);
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) check(v > 0, "log of non-positive value");
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto n = make_node({1}, {s}, {&a});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      double* g = pgrad(self, 0);
      const std::size_t count = self.parents[0]->value.size();
      for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[0];
    };
  return Tensor(n);
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor abs_sum(const Tensor& a) { return sum(abs(a)); }

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

Tensor sum_axis(const Tensor& a, int axis) {
  axis = norm_axis(axis, a.rank());
  const auto sp = split(a.shape(), axis);
  Buffer out(sp.outer * sp.inner, 0.0);
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  Shape shape = drop_axis(a.shape(), axis);
  if (shape.empty()) shape = {1};
  auto n = make_node(shape, std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [sp](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.n; ++j)
          for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.n + j) * sp.inner + i] += self.grad[o * sp.inner + i];
    };
  return Tensor(n);
}

Tensor max_axis(const Tensor& a, int axis) {
  axis = norm_axis(axis, a.rank());
  const auto sp = split(a.shape(), axis);
  Buffer out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(out.size());
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.n * sp.inner + i;
      for (std::size_t j = 1; j < sp.n; ++j) {
        const std::size_t idx = (o * sp.n + j) * sp.inner + i;
        if (x[idx] > x[best]) best = idx;
      }
      out[o * sp.inner + i] = x[best];
      arg[o * sp.inner + i] = best;
    }
  Shape shape = drop_axis(a.shape(), axis);
  if (shape.empty()) shape = {1};
  auto n = make_node(shape, std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [arg = std::move(arg)](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
    };
  return Tensor(n);
}

Tensor logsumexp(const Tensor& a, int axis) {
  axis = norm_axis(axis, a.rank());
  const auto sp = split(a.shape(), axis);
  Buffer out(sp.outer * sp.inner);
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) m = std::max(m, x[(o * sp.n + j) * sp.inner + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) s += std::exp(x[(o * sp.n + j) * sp.inner + i] - m);
      out[o * sp.inner + i] = m + std::log(s);
    }
  Shape shape = drop_axis(a.shape(), axis);
  if (shape.empty()) shape = {1};
  auto n = make_node(shape, std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [sp](Node& self) {
      double* g = pgrad(self, 0);
      const auto& x = pval(self, 0);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double lse = self.value[o * sp.inner + i], go = self.grad[o * sp.inner + i];
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t idx = (o * sp.n + j) * sp.inner + i;
            g[idx] += go * std::exp(x[idx] - lse);
          }
        }
    };
  return Tensor(n);
}

// ---- normalization --------------------------------------------------------

Tensor softmax(const Tensor& a, int axis, double scale_factor) {
  axis = norm_axis(axis, a.rank());
  const auto sp = split(a.shape(), axis);
  Buffer out(a.size());
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) m = std::max(m, scale_factor * x[(o * sp.n + j) * sp.inner + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t idx = (o * sp.n + j) * sp.inner + i;
        out[idx] = std::exp(scale_factor * x[idx] - m);
        s += out[idx];
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[(o * sp.n + j) * sp.inner + i] /= s;
    }
  auto n = make_node(a.shape(), std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [sp, scale_factor](Node& self) {
      double* g = pgrad(self, 0);
      const auto& y = self.value;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double gy = 0.0;
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t idx = (o * sp.n + j) * sp.inner + i;
            gy += self.grad[idx] * y[idx];
          }
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t idx = (o * sp.n + j) * sp.inner + i;
            g[idx] += scale_factor * y[idx] * (self.grad[idx] - gy);
          }
        }
    };
  return Tensor(n);
}

Tensor l2_normalize(const Tensor& a, int axis, double eps) {
  axis = norm_axis(axis, a.rank());
  const auto sp = split(a.shape(), axis);
  Buffer out(a.size());
  Buffer norms(sp.outer * sp.inner);
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const double v = x[(o * sp.n + j) * sp.inner + i];
        s += v * v;
      }
      const double nrm = std::max(std::sqrt(s), eps);
      norms[o * sp.inner + i] = nrm;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t idx = (o * sp.n + j) * sp.inner + i;
        out[idx] = x[idx] / nrm;
      }
    }
  auto n = make_node(a.shape(), std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [sp, norms = std::move(norms)](Node& self) {
      double* g = pgrad(self, 0);
      const auto& y = self.value;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double gy = 0.0;
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t idx = (o * sp.n + j) * sp.inner + i;
            gy += self.grad[idx] * y[idx];
          }
          const double nrm = norms[o * sp.inner + i];
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t idx = (o * sp.n + j) * sp.inner + i;
            g[idx] += (self.grad[idx] - y[idx] * gy) / nrm;
          }
        }
    };
  return Tensor(n);
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  check(numel(shape) == a.size(), "reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  auto n = make_node(std::move(shape), a.data(), {&a});
  if (n->requires_grad)
    n->backward_fn = [](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  return Tensor(n);
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int r = a.rank();
  check(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < r; ++i) check(sorted[i] == i, "permute: not a permutation");

  const Shape& in = a.shape();
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * static_cast<std::size_t>(in[i + 1]);
  // src[i] = input flat index of output element i.
  std::vector<std::size_t> src(a.size());
  std::vector<int> idx(r, 0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::size_t off = 0;
    for (int d = 0; d < r; ++d) off += static_cast<std::size_t>(idx[d]) * in_stride[perm[d]];
    src[i] = off;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[src[i]];
  auto n = make_node(out_shape, std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [src = std::move(src)](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
    };
  return Tensor(n);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat of nothing");
  axis = norm_axis(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    check(p.rank() == static_cast<int>(shape.size()), "concat: rank mismatch");
    for (int d = 0; d < p.rank(); ++d)
      if (d != axis) check(p.shape()[d] == shape[d], "concat: extent mismatch " + to_string(p.shape()));
    total += p.shape()[axis];
  }
  shape[axis] = total;
  const auto sp = split(shape, axis);
  Buffer out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t w = static_cast<std::size_t>(p.shape()[axis]) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * sp.n * sp.inner + off));
    off += w;
  }
  auto n = make_node_list(shape, std::move(out), parts);
  if (n->requires_grad)
    n->backward_fn = [sp, offsets](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        double* g = pgrad(self, k);
        if (!g) continue;
        const std::size_t w = self.parents[k]->value.size() / sp.outer;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += self.grad[o * sp.n * sp.inner + offsets[k] + i];
      }
    };
  return Tensor(n);
}

Tensor expand(const Tensor& a, int axis, int count) {
  check(axis >= 0 && axis <= a.rank(), "expand: axis out of range");
  check(count > 0, "expand: count must be positive");
  Shape shape = a.shape();
  shape.insert(shape.begin() + axis, count);
  std::size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.shape()[i]);
  const std::size_t inner = a.size() / outer;
  const auto c = static_cast<std::size_t>(count);
  Buffer out(a.size() * c);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < c; ++j)
      std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * c + j) * inner));
  auto n = make_node(shape, std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [outer, inner, c](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < c; ++j)
          for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += self.grad[(o * c + j) * inner + i];
    };
  return Tensor(n);
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
  check(a.rank() >= 1 && !rows.empty(), "gather_rows: bad arguments");
  const std::size_t w = a.size() / static_cast<std::size_t>(a.shape()[0]);
  for (int r : rows) check(r >= 0 && r < a.shape()[0], "gather_rows: row out of range");
  Shape shape = a.shape();
  shape[0] = static_cast<int>(rows.size());
  Buffer out(rows.size() * w);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * w), w,
                out.begin() + static_cast<std::ptrdiff_t>(i * w));
  auto n = make_node(shape, std::move(out), {&a});
  if (n->requires_grad)
    n->backward_fn = [rows, w](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < w; ++j) g[static_cast<std::size_t>(rows[i]) * w + j] += self.grad[i * w + j];
    };
  return Tensor(n);
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
        "matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Buffer out(static_cast<std::size_t>(M) * N);
  MapMat(out.data(), M, N).noalias() = CMapMat(a.data().data(), M, K) * CMapMat(b.data().data(), K, N);
  auto n = make_node({M, N}, std::move(out), {&a, &b});
  if (n->requires_grad)
    n->backward_fn = [M, K, N](Node& self) {
      CMapMat G(self.grad.data(), M, N);
      if (double* g = pgrad(self, 0)) MapMat(g, M, K).noalias() += G * CMapMat(pval(self, 1).data(), K, N).transpose();
      if (double* g = pgrad(self, 1)) MapMat(g, K, N).noalias() += CMapMat(pval(self, 0).data(), M, K).transpose() * G;
    };
  return Tensor(n);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[1],
        "matmul_nt " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  const int M = a.shape()[0], K = a.shape()[1], N = b.shape()[0];
  Buffer out(static_cast<std::size_t>(M) * N);
  MapMat(out.data(), M, N).noalias() = CMapMat(a.data().data(), M, K) * CMapMat(b.data().data(), N, K).transpose();
  auto n = make_node({M, N}, std::move(out), {&a, &b});
  if (n->requires_grad)
    n->backward_fn = [M, K, N](Node& self) {
      CMapMat G(self.grad.data(), M, N);
      if (double* g = pgrad(self, 0)) MapMat(g, M, K).noalias() += G * CMapMat(pval(self, 1).data(), N, K);
      if (double* g = pgrad(self, 1)) MapMat(g, N, K).noalias() += G.transpose() * CMapMat(pval(self, 0).data(), M, K);
    };
  return Tensor(n);
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check(x.rank() == 2 && weight.rank() == 2 && x.shape()[1] == weight.shape()[1],
        "dense " + to_string(x.shape()) + " with weight " + to_string(weight.shape()));
  const int N = x.shape()[0], I = x.shape()[1], O = weight.shape()[0];
  if (bias.defined()) check(bias.size() == static_cast<std::size_t>(O), "dense: bias size");
  Buffer out(static_cast<std::size_t>(N) * O);
  MapMat Y(out.data(), N, O);
  Y.noalias() = CMapMat(x.data().data(), N, I) * CMapMat(weight.data().data(), O, I).transpose();
  if (bias.defined())
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < O; ++c) Y(r, c) += bias[static_cast<std::size_t>(c)];
  auto n = make_node({N, O}, std::move(out), {&x, &weight, &bias});
  if (n->requires_grad)
    n->backward_fn = [N, I, O](Node& self) {
      CMapMat G(self.grad.data(), N, O);
      if (double* g = pgrad(self, 0)) MapMat(g, N, I).noalias() += G * CMapMat(pval(self, 1).data(), O, I);
      if (double* g = pgrad(self, 1)) MapMat(g, O, I).noalias() += G.transpose() * CMapMat(pval(self, 0).data(), N, I);
      if (self.parents[2])
        if (double* g = pgrad(self, 2))
          for (int r = 0; r < N; ++r)
            for (int c = 0; c < O; ++c) g[c] += G(r, c);
    };
  return Tensor(n);
}

// ---- volumetric -----------------------------------------------------------

namespace {

// Geometry of a strided k^3 window sweep over a (C, D, H, W) grid.
struct ConvGeom {
  int C, D, H, W;
  int k, s, p;
  int Do, Ho, Wo;
  std::size_t rows() const { return static_cast<std::size_t>(C) * k * k * k; }
  std::size_t out_len() const { return static_cast<std::size_t>(Do) * Ho * Wo; }
  std::size_t in_len() const { return static_cast<std::size_t>(D) * H * W; }
};

ConvGeom make_geom(int C, int D, int H, int W, int k, int s, int p) {
  ConvGeom g{C, D, H, W, k, s, p, 0, 0, 0};
  g.Do = (D + 2 * p - k) / s + 1;
  g.Ho = (H + 2 * p - k) / s + 1;
  g.Wo = (W + 2 * p - k) / s + 1;
  check(g.Do > 0 && g.Ho > 0 && g.Wo > 0, "convolution output would be empty");
  return g;
}

// col[row, off + l] for row = (c, kd, kh, kw), l = (od, oh, ow); ld = row stride.
void im2col(const double* x, const ConvGeom& g, double* col, std::size_t ld, std::size_t off) {
  const std::size_t L = g.out_len();
  for (int c = 0; c < g.C; ++c)
    for (int kd = 0; kd < g.k; ++kd)
      for (int kh = 0; kh < g.k; ++kh)
        for (int kw = 0; kw < g.k; ++kw) {
          const std::size_t row = ((static_cast<std::size_t>(c) * g.k + kd) * g.k + kh) * g.k + kw;
          double* dst = col + row * ld + off;
          std::size_t l = 0;
          for (int od = 0; od < g.Do; ++od) {
            const int id = od * g.s - g.p + kd;
            if (id < 0 || id >= g.D) {
              std::fill_n(dst + l, static_cast<std::size_t>(g.Ho) * g.Wo, 0.0);
              l += static_cast<std::size_t>(g.Ho) * g.Wo;
              continue;
            }
            for (int oh = 0; oh < g.Ho; ++oh) {
              const int ih = oh * g.s - g.p + kh;
              if (ih < 0 || ih >= g.H) {
                std::fill_n(dst + l, g.Wo, 0.0);
                l += g.Wo;
                continue;
              }
              const double* src = x + ((static_cast<std::size_t>(c) * g.D + id) * g.H + ih) * g.W;
              for (int ow = 0; ow < g.Wo; ++ow, ++l) {
                const int iw = ow * g.s - g.p + kw;
                dst[l] = (iw >= 0 && iw < g.W) ? src[iw] : 0.0;
              }
            }
          }
          (void)L;
        }
}

// Adjoint of im2col: accumulates col entries back onto the grid.
void col2im(const double* col, const ConvGeom& g, double* x, std::size_t ld, std::size_t off) {
  for (int c = 0; c < g.C; ++c)
    for (int kd = 0; kd < g.k; ++kd)
      for (int kh = 0; kh < g.k; ++kh)
        for (int kw = 0; kw < g.k; ++kw) {
          const std::size_t row = ((static_cast<std::size_t>(c) * g.k + kd) * g.k + kh) * g.k + kw;
          const double* srcrow = col + row * ld + off;
          std::size_t l = 0;
          for (int od = 0; od < g.Do; ++od) {
            const int id = od * g.s - g.p + kd;
            if (id < 0 || id >= g.D) {
              l += static_cast<std::size_t>(g.Ho) * g.Wo;
              continue;
            }
            for (int oh = 0; oh < g.Ho; ++oh) {
              const int ih = oh * g.s - g.p + kh;
              if (ih < 0 || ih >= g.H) {
                l += g.Wo;
                continue;
              }
              double* dst = x + ((static_cast<std::size_t>(c) * g.D + id) * g.H + ih) * g.W;
              for (int ow = 0; ow < g.Wo; ++ow, ++l) {
                const int iw = ow * g.s - g.p + kw;
                if (iw >= 0 && iw < g.W) dst[iw] += srcrow[l];
              }
            }
          }
        }
}

// Samples per im2col batch, bounding the column buffer to ~32 MB.
int group_size(std::size_t rows, std::size_t len, int N) {
  const std::size_t budget = std::size_t{1} << 22;
  const std::size_t per = std::max<std::size_t>(1, rows * len);
  return static_cast<int>(std::clamp<std::size_t>(budget / per, 1, static_cast<std::size_t>(N)));
}

void check_vol(const Tensor& x, const char* op) {
  check(x.defined() && x.rank() == 5, std::string(op) + ": input must be [N,C,D,H,W], got " +
                                          (x.defined() ? to_string(x.shape()) : std::string("undefined")));
}

}  // namespace

Tensor conv3(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  check_vol(x, "conv3");
  check(weight.rank() == 5 && weight.shape()[1] == x.shape()[1] && weight.shape()[2] == weight.shape()[3] &&
            weight.shape()[3] == weight.shape()[4],
        "conv3: weight " + to_string(weight.shape()) + " for input " + to_string(x.shape()));
  check(stride >= 1 && pad >= 0, "conv3: bad stride/pad");
  const int N = x.shape()[0], O = weight.shape()[0], k = weight.shape()[2];
  if (bias.defined()) check(bias.size() == static_cast<std::size_t>(O), "conv3: bias size");
  const ConvGeom g = make_geom(x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4], k, stride, pad);
  const std::size_t R = g.rows(), L = g.out_len(), in_sz = g.C * g.in_len();
  const int G = group_size(R, L, N);

  Buffer out(static_cast<std::size_t>(N) * O * L);
  Buffer col, prod;
  CMapMat Wm(weight.data().data(), O, static_cast<Eigen::Index>(R));
  for (int n0 = 0; n0 < N; n0 += G) {
    const int gn = std::min(G, N - n0);
    const std::size_t ld = static_cast<std::size_t>(gn) * L;
    col.assign(R * ld, 0.0);
    for (int j = 0; j < gn; ++j) im2col(x.data().data() + (n0 + j) * in_sz, g, col.data(), ld, j * L);
    prod.resize(static_cast<std::size_t>(O) * ld);
    MapMat(prod.data(), O, static_cast<Eigen::Index>(ld)).noalias() =
        Wm * CMapMat(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
    for (int j = 0; j < gn; ++j)
      for (int o = 0; o < O; ++o) {
        double* dst = out.data() + ((static_cast<std::size_t>(n0 + j)) * O + o) * L;
        const double* src = prod.data() + o * ld + j * L;
        const double b = bias.defined() ? bias[static_cast<std::size_t>(o)] : 0.0;
        for (std::size_t l = 0; l < L; ++l) dst[l] = src[l] + b;
      }
  }
  auto n = make_node({N, O, g.Do, g.Ho, g.Wo}, std::move(out), {&x, &weight, &bias});
  if (n->requires_grad)
    n->backward_fn = [g, N, O, G, R, L, in_sz](Node& self) {
      const auto& xv = pval(self, 0);
      const auto& wv = pval(self, 1);
      double* gx = pgrad(self, 0);
      double* gw = pgrad(self, 1);
      double* gb = self.parents[2] ? pgrad(self, 2) : nullptr;
      Buffer col, gy;
      for (int n0 = 0; n0 < N; n0 += G) {
        const int gn = std::min(G, N - n0);
        const std::size_t ld = static_cast<std::size_t>(gn) * L;
        gy.resize(static_cast<std::size_t>(O) * ld);
        for (int j = 0; j < gn; ++j)
          for (int o = 0; o < O; ++o)
            std::copy_n(self.grad.data() + (static_cast<std::size_t>(n0 + j) * O + o) * L, L,
                        gy.data() + o * ld + j * L);
        CMapMat Gy(gy.data(), O, static_cast<Eigen::Index>(ld));
        if (gb)
          for (int o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t l = 0; l < ld; ++l) acc += gy[o * ld + l];
            gb[o] += acc;
          }
        if (gw) {
          col.assign(R * ld, 0.0);
          for (int j = 0; j < gn; ++j) im2col(xv.data() + (n0 + j) * in_sz, g, col.data(), ld, j * L);
          MapMat(gw, O, static_cast<Eigen::Index>(R)).noalias() +=
              Gy * CMapMat(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld)).transpose();
        }
        if (gx) {
          col.resize(R * ld);
          MapMat(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld)).noalias() =
              CMapMat(wv.data(), O, static_cast<Eigen::Index>(R)).transpose() * Gy;
          for (int j = 0; j < gn; ++j) col2im(col.data(), g, gx + (n0 + j) * in_sz, ld, j * L);
        }
      }
    };
  return Tensor(n);
}

Tensor transposed_conv3(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  check_vol(x, "transposed_conv3");
  check(weight.rank() == 5 && weight.shape()[0] == x.shape()[1] && weight.shape()[2] == weight.shape()[3] &&
            weight.shape()[3] == weight.shape()[4],
        "transposed_conv3: weight " + to_string(weight.shape()) + " for input " + to_string(x.shape()));
  check(stride >= 1 && pad >= 0, "transposed_conv3: bad stride/pad");
  const int N = x.shape()[0], Ci = x.shape()[1], O = weight.shape()[1], k = weight.shape()[2];
  if (bias.defined()) check(bias.size() == static_cast<std::size_t>(O), "transposed_conv3: bias size");
  const int Do = (x.shape()[2] - 1) * stride - 2 * pad + k;
  const int Ho = (x.shape()[3] - 1) * stride - 2 * pad + k;
  const int Wo = (x.shape()[4] - 1) * stride - 2 * pad + k;
  check(Do > 0 && Ho > 0 && Wo > 0, "transposed_conv3: empty output");
  // The output grid is the "input" of the equivalent forward convolution.
  const ConvGeom g = make_geom(O, Do, Ho, Wo, k, stride, pad);
  check(g.Do == x.shape()[2] && g.Ho == x.shape()[3] && g.Wo == x.shape()[4],
        "transposed_conv3: geometry is not invertible for this stride/pad");
  const std::size_t R = g.rows(), Lin = g.out_len(), out_sz = static_cast<std::size_t>(O) * g.in_len();
  const int G = group_size(R, Lin, N);

  Buffer out(static_cast<std::size_t>(N) * out_sz, 0.0);
  Buffer xm, col;
  CMapMat Wm(weight.data().data(), Ci, static_cast<Eigen::Index>(R));
  for (int n0 = 0; n0 < N; n0 += G) {
    const int gn = std::min(G, N - n0);
    const std::size_t ld = static_cast<std::size_t>(gn) * Lin;
    xm.resize(static_cast<std::size_t>(Ci) * ld);
    for (int j = 0; j < gn; ++j)
      for (int c = 0; c < Ci; ++c)
        std::copy_n(x.data().data() + (static_cast<std::size_t>(n0 + j) * Ci + c) * Lin, Lin,
                    xm.data() + c * ld + j * Lin);
    col.resize(R * ld);
    MapMat(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld)).noalias() =
        Wm.transpose() * CMapMat(xm.data(), Ci, static_cast<Eigen::Index>(ld));
    for (int j = 0; j < gn; ++j) col2im(col.data(), g, out.data() + (n0 + j) * out_sz, ld, j * Lin);
  }
  if (bias.defined()) {
    const std::size_t vox = g.in_len();
    for (int nn = 0; nn < N; ++nn)
      for (int o = 0; o < O; ++o) {
        double* dst = out.data() + (static_cast<std::size_t>(nn) * O + o) * vox;
        for (std::size_t v = 0; v < vox; ++v) dst[v] += bias[static_cast<std::size_t>(o)];
      }
  }
  auto n = make_node({N, O, Do, Ho, Wo}, std::move(out), {&x, &weight, &bias});
  if (n->requires_grad)
    n->backward_fn = [g, N, Ci, O, G, R, Lin, out_sz](Node& self) {
      const auto& xv = pval(self, 0);
      const auto& wv = pval(self, 1);
      double* gx = pgrad(self, 0);
      double* gw = pgrad(self, 1);
      double* gb = self.parents[2] ? pgrad(self, 2) : nullptr;
      if (gb) {
        const std::size_t vox = g.in_len();
        for (int nn = 0; nn < N; ++nn)
          for (int o = 0; o < O; ++o) {
            const double* src = self.grad.data() + (static_cast<std::size_t>(nn) * O + o) * vox;
            double acc = 0.0;
            for (std::size_t v = 0; v < vox; ++v) acc += src[v];
            gb[o] += acc;
          }
      }
      Buffer col, xm, gxm;
      for (int n0 = 0; n0 < N; n0 += G) {
        const int gn = std::min(G, N - n0);
        const std::size_t ld = static_cast<std::size_t>(gn) * Lin;
        col.assign(R * ld, 0.0);
        for (int j = 0; j < gn; ++j) im2col(self.grad.data() + (n0 + j) * out_sz, g, col.data(), ld, j * Lin);
        CMapMat Cm(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(ld));
        if (gw) {
          xm.resize(static_cast<std::size_t>(Ci) * ld);
          for (int j = 0; j < gn; ++j)
            for (int c = 0; c < Ci; ++c)
              std::copy_n(xv.data() + (static_cast<std::size_t>(n0 + j) * Ci + c) * Lin, Lin,
                          xm.data() + c * ld + j * Lin);
          MapMat(gw, Ci, static_cast<Eigen::Index>(R)).noalias() +=
              CMapMat(xm.data(), Ci, static_cast<Eigen::Index>(ld)) * Cm.transpose();
        }
        if (gx) {
          gxm.resize(static_cast<std::size_t>(Ci) * ld);
          MapMat(gxm.data(), Ci, static_cast<Eigen::Index>(ld)).noalias() =
              CMapMat(wv.data(), Ci, static_cast<Eigen::Index>(R)) * Cm;
          for (int j = 0; j < gn; ++j)
            for (int c = 0; c < Ci; ++c) {
              double* dst = gx + (static_cast<std::size_t>(n0 + j) * Ci + c) * Lin;
              const double* src = gxm.data() + c * ld + j * Lin;
              for (std::size_t l = 0; l < Lin; ++l) dst[l] += src[l];
            }
        }
      }
    };
  return Tensor(n);
}

Tensor nearest_upsample3(const Tensor& x, int f) {
  check_vol(x, "nearest_upsample3");
  check(f >= 1, "nearest_upsample3: factor must be >= 1");
  const int N = x.shape()[0], C = x.shape()[1], D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
  const int Do = D * f, Ho = H * f, Wo = W * f;
  std::vector<std::size_t> src(static_cast<std::size_t>(N) * C * Do * Ho * Wo);
  std::size_t i = 0;
  for (int nc = 0; nc < N * C; ++nc)
    for (int d = 0; d < Do; ++d)
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w)
          src[i++] = ((static_cast<std::size_t>(nc) * D + d / f) * H + h / f) * W + w / f;
  Buffer out(src.size());
  for (std::size_t j = 0; j < src.size(); ++j) out[j] = x[src[j]];
  auto n = make_node({N, C, Do, Ho, Wo}, std::move(out), {&x});
  if (n->requires_grad)
    n->backward_fn = [src = std::move(src)](Node& self) {
      double* g = pgrad(self, 0);
      for (std::size_t j = 0; j < src.size(); ++j) g[src[j]] += self.grad[j];
    };
  return Tensor(n);
}

// ---- ParamStore -----------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (name.empty()) throw std::invalid_argument("parameter name must not be empty");
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  value.node()->requires_grad = true;
  Entry e;
  e.m.assign(value.size(), 0.0);
  e.v.assign(value.size(), 0.0);
  e.value = std::move(value);
  return params_.emplace(name, std::move(e)).first->second.value;
}

Tensor& ParamStore::kaiming_uniform(const std::string& name, Shape shape, int fan_in, Rng& rng) {
  // He-uniform bound for ReLU networks: sqrt(6 / fan_in).
  const double bound = std::sqrt(6.0 / std::max(1, fan_in));
  Buffer data(numel(shape));
  for (auto& v : data) v = uniform(rng, -bound, bound);
  return add(name, Tensor::from(std::move(shape), std::move(data)));
}

Tensor& ParamStore::zeros(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }

Tensor& ParamStore::constant(const std::string& name, Shape shape, double v) {
  return add(name, Tensor::full(std::move(shape), v));
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second.value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second.value;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : params_) out.push_back(k);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : params_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : params_) e.value.zero_grad();
}

void ParamStore::adam_step(const AdamConfig& cfg, bool allow_missing) {
  if (!allow_missing)
    for (const auto& [name, e] : params_)
      if (e.value.node()->grad.empty()) throw std::logic_error("parameter " + name + " has no gradient");
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [_, e] : params_) {
    Node* n = e.value.node();
    if (n->grad.empty()) continue;  // untouched this step: no update
    for (std::size_t i = 0; i < n->value.size(); ++i) {
      const double g = n->grad[i];
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mh = e.m[i] / bc1, vh = e.v[i] / bc2;
      n->value[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

namespace {

template <typename V>
void write_doubles_f32(std::ostream& os, const V& v) {
  std::vector<float> f(v.begin(), v.end());
  binio::write_f32s(os, f.data(), f.size());
}

template <typename V>
void read_f32_doubles(std::istream& is, V& v) {
  std::vector<float> f(v.size());
  binio::read_f32s(is, f.data(), f.size());
  std::copy(f.begin(), f.end(), v.begin());
}

}  // namespace

void ParamStore::save(std::ostream& os) const {
  binio::write_magic(os, "RFC1");
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
  binio::write_pod<std::uint64_t>(os, step_);
  for (const auto& [name, e] : params_) {
    binio::write_str16(os, name);
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.shape()) binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    write_doubles_f32(os, e.value.data());
    write_doubles_f32(os, e.m);
    write_doubles_f32(os, e.v);
  }
}

void ParamStore::load(std::istream& is) {
  binio::expect_magic(is, "RFC1");
  const auto count = binio::read_pod<std::uint32_t>(is);
  if (count != params_.size())
    throw binio::FormatError("checkpoint has " + std::to_string(count) + " parameters, model has " +
                             std::to_string(params_.size()));
  const auto step = binio::read_pod<std::uint64_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = binio::read_str16(is);
    auto it = params_.find(name);
    if (it == params_.end()) throw binio::FormatError("checkpoint parameter not in model: " + name);
    Shape shape(binio::read_pod<std::uint32_t>(is));
    for (auto& d : shape) d = static_cast<int>(binio::read_pod<std::uint32_t>(is));
    Entry& e = it->second;
    if (shape != e.value.shape())
      throw binio::FormatError("shape mismatch for " + name + ": " + to_string(shape) + " vs " +
                               to_string(e.value.shape()));
    read_f32_doubles(is, e.value.mutable_data());
    read_f32_doubles(is, e.m);
    read_f32_doubles(is, e.v);
    e.value.zero_grad();
  }
  step_ = step;
}

void ParamStore::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  save(os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

void ParamStore::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  load(is);
}

// ---- gradient check -------------------------------------------------------

double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      const std::vector<Tensor>& inputs, double h) {
  for (const auto& t : inputs) {
    t.node()->requires_grad = true;
    t.node()->grad.clear();
  }
  backward(f(inputs));
  double worst = 0.0;
  NoGradGuard guard;
  for (const auto& t : inputs) {
    const auto analytic = t.grad();
    auto& x = t.node()->value;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = x[i];
      x[i] = keep + h;
      const double fp = f(inputs).item();
      x[i] = keep - h;
      const double fm = f(inputs).item();
      x[i] = keep;
      const double num = (fp - fm) / (2.0 * h);
      diff2 += (analytic[i] - num) * (analytic[i] - num);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    if (denom > 1e-12) worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

}  // namespace rfuse::ad
