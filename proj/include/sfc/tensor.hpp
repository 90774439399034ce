#pragma once

// Dense row-major f64 tensor with a tape-based reverse-mode autodiff.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// when at least one input requires a gradient. Without an active tape every
// op is a plain function and nothing is retained.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sfc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool produced_by_op = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access; bypasses the tape. Used for initialization and
  // optimizer updates only.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // All-zero span of the right size when no gradient has accumulated yet.
  std::span<const double> grad() const;
  void zero_grad();

  // Copy of the values with no gradient participation.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

using GradFn = std::function<void(std::span<const double> grad_out)>;

class Tape {
 public:
  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    GradFn backward;
  };

  void record(std::string_view op, std::vector<Tensor> inputs, const Tensor& output,
              GradFn backward);
  // Seeds d(loss)/d(loss) = 1 and replays the recorded rules in reverse.
  // Leaf gradients accumulate across calls; intermediate ones are reset.
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

// Makes `tape` the active tape of the calling thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// True when an op over `inputs` must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
// Records `output` (which becomes requires_grad) on the active tape.
void record_op(std::string_view op, std::vector<Tensor> inputs, Tensor& output, GradFn backward);
// Gradient buffer of `t`, allocated (zeroed) on first use.
std::span<double> grad_buffer(const Tensor& t);

// backward() over the active tape. Throws ContractError for non-scalar
// losses or losses that were not produced through a tape.
void backward(const Tensor& loss);

// ---- differentiable primitives ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D only
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& a, Shape shape);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Softmax / log-softmax along the last axis with max subtraction.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
// Concatenate along `axis`; shapes must agree elsewhere.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// ---- serialization ----
// Layout: "SFCT", u32 LE header length, JSON header {"dtype":"f64","shape":[..]},
// then numel little-endian f64 values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// FNV-1a over shape and raw bytes; used for freeze checks.
std::uint64_t content_hash(const Tensor& t, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace sfc
