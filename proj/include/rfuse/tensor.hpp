#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rfuse/rng.hpp"

// Dense reverse-mode differentiation engine. Values are stored as doubles;
// checkpoints are written as f32.
namespace rfuse::ad {

using Shape = std::vector<int>;
// Fixed alignment keeps vectorized kernels bit-reproducible across runs.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& s);
std::size_t numel(const Shape& s);

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  Node();
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void ensure_grad();
  /// Number of nodes currently alive in this process.
  static long live_count();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : n_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<double>& data, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer data, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> data, bool requires_grad = false) {
    return from(std::move(shape), Buffer(data), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int axis) const;
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t size() const { return n_->value.size(); }
  bool requires_grad() const { return n_->requires_grad; }

  const Buffer& data() const { return n_->value; }
  Buffer& mutable_data() { return n_->value; }
  std::vector<double> values() const { return {n_->value.begin(), n_->value.end()}; }
  double item() const;
  double operator[](std::size_t i) const { return n_->value[i]; }

  /// Gradient accumulated by backward(); zeros if none reached this tensor.
  std::vector<double> grad() const;
  void zero_grad();

  /// New leaf sharing no history, same values.
  Tensor detach() const;

  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

/// Reverse sweep from a scalar loss. Gradients accumulate (+=) into every
/// reachable tensor that requires grad; afterwards the graph behind `loss`
/// is released so intermediate nodes are freed.
void backward(const Tensor& loss);

/// Disables graph recording in its scope (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor shift(const Tensor& a, double s);
/// a * s where s is a one-element tensor (learnable scalar).
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor add_scalar(const Tensor& a, const Tensor& s);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor abs(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum of absolute values.
Tensor abs_sum(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor max_axis(const Tensor& a, int axis);
Tensor logsumexp(const Tensor& a, int axis);
/// Inner product of two equally shaped tensors.
Tensor dot(const Tensor& a, const Tensor& b);

// ---- normalization ----
/// softmax(scale * a) along `axis`.
Tensor softmax(const Tensor& a, int axis, double scale = 1.0);
Tensor l2_normalize(const Tensor& a, int axis, double eps = 1e-12);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Inserts a new axis of size n at `axis` by repetition.
Tensor expand(const Tensor& a, int axis, int n);
/// Selects rows (entries along axis 0).
Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [M,K] x [K,N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [M,K] x [N,K]^T
/// x [N,in], weight [out,in], bias [out] (may be undefined).
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- volumetric ----
/// x [N,C,D,H,W], weight [O,C,k,k,k], bias [O] (may be undefined).
Tensor conv3(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
/// x [N,C,D,H,W], weight [C,O,k,k,k]; output side (D-1)*stride - 2*pad + k.
Tensor transposed_conv3(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
Tensor nearest_upsample3(const Tensor& x, int factor);

// ---- parameters and optimization ----
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named learnable tensors with Adam state.
class ParamStore {
 public:
  /// Registers a parameter; names must be unique.
  Tensor& add(const std::string& name, Tensor value);
  Tensor& kaiming_uniform(const std::string& name, Shape shape, int fan_in, Rng& rng);
  Tensor& zeros(const std::string& name, Shape shape);
  Tensor& constant(const std::string& name, Shape shape, double v);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t parameter_count() const;
  std::uint64_t step() const { return step_; }

  void zero_grad();
  /// One Adam update with bias correction. Throws if any parameter has no
  /// gradient buffer (backward never reached it and allow_missing is false).
  void adam_step(const AdamConfig& cfg, bool allow_missing = true);

  void save(std::ostream& os) const;
  void load(std::istream& is);
  void save_file(const std::string& path) const;
  void load_file(const std::string& path);

 private:
  struct Entry {
    Tensor value;
    std::vector<double> m, v;
  };
  std::map<std::string, Entry> params_;
  std::uint64_t step_ = 0;
};

/// Central finite-difference check of d(f)/d(inputs). Returns the largest
/// relative error |g_a - g_n| / (|g_a| + |g_n|) (vector norms, per input).
double gradient_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      const std::vector<Tensor>& inputs, double h = 1e-4);

}  // namespace rfuse::ad
