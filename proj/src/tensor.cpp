#include "sfc/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "sfc/errors.hpp"
#include "sfc/kernels.hpp"

namespace sfc {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

}  // namespace

Tensor::Tensor(Shape shape) : impl_(std::make_shared<detail::TensorImpl>()) {
  check_extents(shape);
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  check_extents(shape);
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.impl_->data) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.impl_->data) v = dist(rng);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::reshape(Shape shape) const { return sfc::reshape(*this, std::move(shape)); }

// ---------------------------------------------------------------- tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, const Tensor& output,
                  GradFn backward) {
  Node node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node.inputs.push_back(t.impl_ptr());
  node.output = output.impl_ptr();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  detail::TensorImpl* target = loss.impl();
  const bool on_tape =
      std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.output.get() == target; });
  if (!on_tape && !target->produced_by_op) {
    if (!target->requires_grad)
      throw ContractError("backward(): loss was not produced through the tape");
    grad_buffer(loss)[0] += 1.0;
    return;
  }
  if (!on_tape) throw ContractError("backward(): loss was recorded on a different tape");

  for (Node& n : nodes_) n.output->grad.assign(n.output->data.size(), 0.0);
  target->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto& g = it->output->grad;
    if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
    it->backward(g);
  }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->requires_grad(); });
}

void record_op(std::string_view op, std::vector<Tensor> inputs, Tensor& output, GradFn backward) {
  output.set_requires_grad(true);
  output.impl()->produced_by_op = true;
  g_active_tape->record(op, std::move(inputs), output, std::move(backward));
}

std::span<double> grad_buffer(const Tensor& t) {
  auto* impl = t.impl();
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw ContractError("backward() called without an active tape");
  g_active_tape->backward(loss);
}

// ---------------------------------------------------------------- ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor out({m, n});
  kernels::gemm(m, n, k, a.data().data(), b.data().data(), out.mutable_data().data(), false);
  if (should_record({&a, &b})) {
    record_op("matmul", {a, b}, out, [a, b, m, n, k](std::span<const double> g) {
      using kernels::Op;
      if (a.requires_grad())
        kernels::gemm(m, k, n, g.data(), Op::None, b.data().data(), Op::Transpose,
                      grad_buffer(a).data(), true);
      if (b.requires_grad())
        kernels::gemm(k, n, m, a.data().data(), Op::Transpose, g.data(), Op::None,
                      grad_buffer(b).data(), true);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Walks the permuted tensor in row-major order, calling
// f(out_offset, src_offset, run_length, src_stride) for each innermost run.
template <typename F>
void for_each_permuted_run(const Shape& in_shape, const std::vector<std::size_t>& order, F&& f) {
  const std::size_t rank = in_shape.size();
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  const std::size_t total = shape_numel(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  const std::size_t inner = out_shape[rank - 1];
  const std::size_t inner_stride = src_stride[rank - 1];
  for (std::size_t flat = 0; flat < total; flat += inner) {
    f(flat, src, inner, inner_stride);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      src += src_stride[ax];
      if (++idx[ax] < out_shape[ax]) break;
      src -= src_stride[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t rank = a.dim();
  if (order.size() != rank) throw DimensionError("permute: order rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(rank, false);
  for (std::size_t ax : order) {
    if (ax >= rank || seen[ax]) throw DimensionError("permute: invalid axis order");
    seen[ax] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.size(order[i]);
  Tensor out(out_shape);
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for_each_permuted_run(a.shape(), order, [&](std::size_t o, std::size_t s, std::size_t n, std::size_t st) {
    for (std::size_t j = 0; j < n; ++j) dst[o + j] = src[s + j * st];
  });
  if (should_record({&a})) {
    record_op("permute", {a}, out, [a, order](std::span<const double> g) {
      double* ga = grad_buffer(a).data();
      for_each_permuted_run(a.shape(), order, [&](std::size_t o, std::size_t s, std::size_t n, std::size_t st) {
        for (std::size_t j = 0; j < n; ++j) ga[s + j * st] += g[o + j];
      });
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (should_record({&a})) {
    record_op("reshape", {a}, out, [a](std::span<const double> g) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (should_record({&a, &b})) {
    record_op("add", {a, b}, out, [a, b](std::span<const double> g) {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = grad_buffer(*t);
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (should_record({&a, &b})) {
    record_op("mul", {a, b}, out, [a, b](std::span<const double> g) {
      if (a.requires_grad()) {
        auto ga = grad_buffer(a);
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = grad_buffer(b);
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (should_record({&a})) {
    record_op("scale", {a}, out, [a, factor](std::span<const double> g) {
      auto ga = grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (should_record({&a})) {
    record_op("sum", {a}, out, [a](std::span<const double> g) {
      auto ga = grad_buffer(a);
      for (double& v : ga) v += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = in.data() + r * n;
    double* yi = o.data() + r * n;
    const double mx = *std::max_element(xi, xi + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (yi[j] = std::exp(xi[j] - mx));
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) yi[j] *= inv;
  }
  if (should_record({&x})) {
    Tensor y = out.detach();
    record_op("softmax", {x}, out, [x, y, n, rows](std::span<const double> g) {
      auto gx = grad_buffer(x);
      auto yv = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * yv[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yv[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = in.data() + r * n;
    double* yi = o.data() + r * n;
    const double mx = *std::max_element(xi, xi + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xi[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) yi[j] = xi[j] - lse;
  }
  if (should_record({&x})) {
    Tensor y = out.detach();
    record_op("log_softmax", {x}, out, [x, y, n, rows](std::span<const double> g) {
      auto gx = grad_buffer(x);
      auto yv = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          gx[r * n + j] += g[r * n + j] - std::exp(yv[r * n + j]) * gs;
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.dim() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.size(i) != first[i])
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(first));
    out_shape[axis] += p.size(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Tensor out(out_shape);
  auto o = out.mutable_data();
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.size(axis) * inner;
    auto src = p.data();
    for (std::size_t r = 0; r < outer; ++r)
      std::copy_n(src.data() + r * chunk, chunk, o.data() + r * out_row + offset);
    offset += chunk;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (active_tape() != nullptr && any) {
    record_op("concat", parts, out, [parts, outer, inner, out_row, axis](std::span<const double> g) {
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        const std::size_t chunk = p.size(axis) * inner;
        if (p.requires_grad()) {
          auto gp = grad_buffer(p);
          for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t j = 0; j < chunk; ++j) gp[r * chunk + j] += g[r * out_row + off + j];
        }
        off += chunk;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- io

namespace {

constexpr char kMagic[4] = {'S', 'F', 'C', 'T'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  nlohmann::json header = {{"dtype", "f64"}, {"shape", t.shape()}};
  const std::string h = header.dump();
  out.write(kMagic, 4);
  const std::uint32_t len = to_little(static_cast<std::uint32_t>(h.size()));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (double v : t.data()) {
    const double le = to_little(v);
    out.write(reinterpret_cast<const char*>(&le), sizeof(le));
  }
  if (!out) throw std::runtime_error("write_tensor: stream failure");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("read_tensor: bad magic");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  len = to_little(len);
  std::string h(len, '\0');
  in.read(h.data(), len);
  if (!in) throw std::runtime_error("read_tensor: truncated header");
  const auto header = nlohmann::json::parse(h);
  if (header.at("dtype") != "f64") throw std::runtime_error("read_tensor: unsupported dtype");
  Shape shape = header.at("shape").get<Shape>();
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) {
    double le = 0.0;
    in.read(reinterpret_cast<char*>(&le), sizeof(le));
    v = to_little(le);
  }
  if (!in) throw std::runtime_error("read_tensor: truncated data");
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(f, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_tensor(f);
}

std::uint64_t content_hash(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t e : t.shape()) mix(&e, sizeof(e));
  mix(t.data().data(), t.numel() * sizeof(double));
  return h;
}

}  // namespace sfc
