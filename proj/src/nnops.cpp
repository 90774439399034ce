#include "sfc/nnops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sfc/errors.hpp"

namespace sfc {

namespace {

struct MapDims {
  std::size_t n, c, t, h, w;
  std::size_t frame() const { return h * w; }
  std::size_t sample() const { return c * t * h * w; }
};

MapDims map_dims(const Tensor& x, const char* op) {
  if (x.dim() == 4) return {1, x.size(0), x.size(1), x.size(2), x.size(3)};
  if (x.dim() == 5) return {x.size(0), x.size(1), x.size(2), x.size(3), x.size(4)};
  throw DimensionError(std::string(op) + ": expected a 4-D or 5-D feature map, got " +
                       shape_str(x.shape()));
}

kernels::ConvGeometry geometry_for(const MapDims& d, const Conv3dLayer& layer) {
  kernels::ConvGeometry g;
  g.c_in = d.c;
  g.t_in = d.t;
  g.h_in = d.h;
  g.w_in = d.w;
  g.c_out = layer.c_out();
  g.kernel = layer.kernel_shape();
  g.stride = layer.stride;
  g.padding = layer.padding;
  for (int ax = 0; ax < 3; ++ax) {
    const std::size_t in = ax == 0 ? d.t : (ax == 1 ? d.h : d.w);
    if (in + 2 * g.padding[ax] < g.kernel[ax])
      throw DimensionError("conv3d: kernel larger than padded input along axis " +
                           std::to_string(ax));
  }
  return g;
}

void frozen_params_check(const FrozenNorm& norm) {
  const std::size_t c = norm.gamma.size();
  if (norm.beta.size() != c || norm.mean.size() != c || norm.var.size() != c)
    throw ContractError("FrozenNorm: inconsistent parameter lengths");
}

}  // namespace

Conv3dLayer Conv3dLayer::make(std::size_t c_in, std::size_t c_out, Triple kernel, Triple stride,
                              std::mt19937_64& rng, double gain) {
  Conv3dLayer layer;
  const std::size_t fan_in = c_in * kernel[0] * kernel[1] * kernel[2];
  layer.kernel = Tensor::randn({c_out, c_in, kernel[0], kernel[1], kernel[2]}, rng,
                               gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  layer.bias = Tensor::zeros({c_out});
  layer.stride = stride;
  layer.padding = {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2};
  return layer;
}

FrozenNorm FrozenNorm::identity(std::size_t channels) {
  FrozenNorm n;
  n.gamma.assign(channels, 1.0);
  n.beta.assign(channels, 0.0);
  n.mean.assign(channels, 0.0);
  n.var.assign(channels, 1.0);
  return n;
}

double FrozenNorm::slope(std::size_t c) const { return gamma[c] / std::sqrt(var[c] + kEps); }
double FrozenNorm::offset(std::size_t c) const { return beta[c] - slope(c) * mean[c]; }

ResidualBlock ResidualBlock::make(std::size_t c_in, std::size_t c_out, Triple kernel_a,
                                  Triple kernel_b, Triple stride, std::mt19937_64& rng) {
  ResidualBlock b;
  b.conv_a = Conv3dLayer::make(c_in, c_out, kernel_a, {1, 1, 1}, rng);
  b.norm_a = FrozenNorm::identity(c_out);
  // Smaller residual-branch init keeps the unnormalized stack stable.
  b.conv_b = Conv3dLayer::make(c_out, c_out, kernel_b, stride, rng, 0.5);
  b.norm_b = FrozenNorm::identity(c_out);
  if (c_in != c_out || stride != Triple{1, 1, 1}) {
    b.projection = Conv3dLayer::make(c_in, c_out, {1, 1, 1}, stride, rng);
    b.projection_norm = FrozenNorm::identity(c_out);
  }
  return b;
}

LinearLayer LinearLayer::make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  LinearLayer l;
  l.weight = Tensor::randn({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  l.bias = Tensor::zeros({out});
  return l;
}

Tensor conv3d(const Tensor& x, const Conv3dLayer& layer) {
  const MapDims d = map_dims(x, "conv3d");
  if (d.c != layer.c_in())
    throw DimensionError("conv3d: input has " + std::to_string(d.c) + " channels, layer expects " +
                         std::to_string(layer.c_in()) + " (input " + shape_str(x.shape()) + ")");
  const kernels::ConvGeometry g = geometry_for(d, layer);
  Shape out_shape = x.dim() == 5 ? Shape{d.n, g.c_out, g.t_out(), g.h_out(), g.w_out()}
                                 : Shape{g.c_out, g.t_out(), g.h_out(), g.w_out()};
  Tensor out(out_shape);
  const std::size_t in_sample = d.sample();
  const std::size_t out_sample = g.c_out * g.out_positions();
  for (std::size_t s = 0; s < d.n; ++s) {
    kernels::conv3d_forward(g, x.data().data() + s * in_sample, layer.kernel.data().data(),
                            layer.bias.data().data(), out.mutable_data().data() + s * out_sample);
  }
  const Tensor& kernel = layer.kernel;
  const Tensor& bias = layer.bias;
  if (should_record({&x, &kernel, &bias})) {
    record_op("conv3d", {x, kernel, bias}, out,
              [x, kernel, bias, g, d, in_sample, out_sample](std::span<const double> grad) {
                for (std::size_t s = 0; s < d.n; ++s) {
                  const double* dy = grad.data() + s * out_sample;
                  if (x.requires_grad())
                    kernels::conv3d_backward_input(g, dy, kernel.data().data(),
                                                   grad_buffer(x).data() + s * in_sample);
                  if (kernel.requires_grad() || bias.requires_grad()) {
                    // Bias gradient is accumulated into a scratch buffer when the
                    // bias itself is frozen.
                    std::vector<double> scratch_db;
                    double* db = nullptr;
                    if (bias.requires_grad()) {
                      db = grad_buffer(bias).data();
                    }
                    if (kernel.requires_grad()) {
                      kernels::conv3d_backward_weight(g, dy, x.data().data() + s * in_sample,
                                                      grad_buffer(kernel).data(), db);
                    } else {
                      for (std::size_t co = 0; co < g.c_out; ++co) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < g.out_positions(); ++p)
                          acc += dy[co * g.out_positions() + p];
                        db[co] += acc;
                      }
                    }
                  }
                }
              });
  }
  return out;
}

Tensor frozen_norm(const Tensor& x, const FrozenNorm& norm) {
  frozen_params_check(norm);
  const MapDims d = map_dims(x, "frozen_norm");
  if (d.c != norm.channels())
    throw DimensionError("frozen_norm: " + std::to_string(norm.channels()) +
                         " channels vs input " + shape_str(x.shape()));
  const std::size_t plane = d.t * d.h * d.w;
  std::vector<double> a(d.c), b(d.c);
  for (std::size_t c = 0; c < d.c; ++c) {
    a[c] = norm.slope(c);
    b[c] = norm.offset(c);
  }
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t base = (s * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) o[base + i] = a[c] * in[base + i] + b[c];
    }
  if (should_record({&x})) {
    record_op("frozen_norm", {x}, out, [x, a, d, plane](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t s = 0; s < d.n; ++s)
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t base = (s * d.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) gx[base + i] += a[c] * g[base + i];
        }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  if (should_record({&x})) {
    record_op("relu", {x}, out, [x](std::span<const double> g) {
      auto gx = grad_buffer(x);
      auto in = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += in[i] > 0.0 ? g[i] : 0.0;
    });
  }
  return out;
}

Tensor residual_block(const Tensor& x, const ResidualBlock& block) {
  Tensor a = relu(frozen_norm(conv3d(x, block.conv_a), block.norm_a));
  Tensor b = frozen_norm(conv3d(a, block.conv_b), block.norm_b);
  Tensor shortcut =
      block.projection ? frozen_norm(conv3d(x, *block.projection), *block.projection_norm) : x;
  return relu(add(b, shortcut));
}

std::vector<double> topk_scores(const Tensor& x) {
  if (x.dim() != 4) throw DimensionError("topk_pool: expected C×T×H×W, got " + shape_str(x.shape()));
  const std::size_t c_n = x.size(0), t_n = x.size(1), frame = x.size(2) * x.size(3);
  std::vector<double> score(t_n, 0.0);
  auto in = x.data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t t = 0; t < t_n; ++t) {
      const double* f = in.data() + (c * t_n + t) * frame;
      double s = 0.0;
      for (std::size_t i = 0; i < frame; ++i) s += std::abs(f[i]);
      score[t] += s;
    }
  const double denom = static_cast<double>(c_n * frame);
  for (double& s : score) s /= denom;
  return score;
}

namespace {

// Gathers frames `indices` of a C×T×H×W map; backward scatters.
Tensor gather_frames(const Tensor& x, const std::vector<std::size_t>& indices, const char* op) {
  const std::size_t c_n = x.size(0), t_n = x.size(1), frame = x.size(2) * x.size(3);
  const std::size_t k = indices.size();
  Tensor out({c_n, k, x.size(2), x.size(3)});
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(in.data() + (c * t_n + indices[j]) * frame, frame, o.data() + (c * k + j) * frame);
  if (should_record({&x})) {
    record_op(op, {x}, out, [x, indices, c_n, t_n, k, frame](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t c = 0; c < c_n; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          double* dst = gx.data() + (c * t_n + indices[j]) * frame;
          const double* src = g.data() + (c * k + j) * frame;
          for (std::size_t i = 0; i < frame; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

void check_window(const Tensor& x, std::size_t window, const char* op) {
  if (x.dim() != 4) throw DimensionError(std::string(op) + ": expected C×T×H×W, got " + shape_str(x.shape()));
  if (window == 0 || x.size(1) % window != 0)
    throw ConfigError(std::string(op) + ": window " + std::to_string(window) +
                      " does not divide T=" + std::to_string(x.size(1)) +
                      "; pad or re-chunk the temporal axis");
}

}  // namespace

TopKResult topk_pool(const Tensor& x, std::size_t keep) {
  const std::vector<double> score = topk_scores(x);
  const std::size_t t_n = score.size();
  if (keep == 0 || keep > t_n)
    throw ConfigError("topk_pool: cannot keep " + std::to_string(keep) + " of " +
                      std::to_string(t_n) + " timesteps; pad or re-chunk the temporal axis");
  std::vector<std::size_t> order(t_n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  TopKResult r;
  r.output = gather_frames(x, order, "topk_pool");
  r.indices = std::move(order);
  return r;
}

Tensor avg_pool_time(const Tensor& x, std::size_t window) {
  check_window(x, window, "avg_pool");
  const std::size_t c_n = x.size(0), t_n = x.size(1), frame = x.size(2) * x.size(3);
  const std::size_t t_out = t_n / window;
  Tensor out({c_n, t_out, x.size(2), x.size(3)});
  auto in = x.data();
  auto o = out.mutable_data();
  const double inv = 1.0 / static_cast<double>(window);
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t j = 0; j < t_out; ++j) {
      double* dst = o.data() + (c * t_out + j) * frame;
      for (std::size_t u = 0; u < window; ++u) {
        const double* src = in.data() + (c * t_n + j * window + u) * frame;
        for (std::size_t i = 0; i < frame; ++i) dst[i] += src[i] * inv;
      }
    }
  if (should_record({&x})) {
    record_op("avg_pool", {x}, out, [x, c_n, t_n, t_out, window, frame, inv](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t c = 0; c < c_n; ++c)
        for (std::size_t j = 0; j < t_out; ++j)
          for (std::size_t u = 0; u < window; ++u) {
            double* dst = gx.data() + (c * t_n + j * window + u) * frame;
            const double* src = g.data() + (c * t_out + j) * frame;
            for (std::size_t i = 0; i < frame; ++i) dst[i] += src[i] * inv;
          }
    });
  }
  return out;
}

Tensor max_pool_time(const Tensor& x, std::size_t window) {
  check_window(x, window, "max_pool");
  const std::size_t c_n = x.size(0), t_n = x.size(1), frame = x.size(2) * x.size(3);
  const std::size_t t_out = t_n / window;
  Tensor out({c_n, t_out, x.size(2), x.size(3)});
  std::vector<std::size_t> argmax(out.numel());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t j = 0; j < t_out; ++j)
      for (std::size_t i = 0; i < frame; ++i) {
        std::size_t best = (c * t_n + j * window) * frame + i;
        for (std::size_t u = 1; u < window; ++u) {
          const std::size_t idx = (c * t_n + j * window + u) * frame + i;
          if (in[idx] > in[best]) best = idx;
        }
        const std::size_t oi = (c * t_out + j) * frame + i;
        o[oi] = in[best];
        argmax[oi] = best;
      }
  if (should_record({&x})) {
    record_op("max_pool", {x}, out, [x, argmax](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.dim() != 5) throw DimensionError("global_avg_pool: expected N×C×T×H×W, got " + shape_str(x.shape()));
  const std::size_t n = x.size(0), c_n = x.size(1);
  const std::size_t plane = x.size(2) * x.size(3) * x.size(4);
  Tensor out({n, c_n});
  auto in = x.data();
  auto o = out.mutable_data();
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t i = 0; i < n * c_n; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += in[i * plane + p];
    o[i] = s * inv;
  }
  if (should_record({&x})) {
    record_op("global_avg_pool", {x}, out, [x, plane, inv](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] += g[i] * inv;
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const LinearLayer& layer) {
  if (x.dim() != 2 || x.size(1) != layer.weight.size(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(layer.weight.shape()));
  const std::size_t n = x.size(0), in = x.size(1), out_n = layer.weight.size(0);
  Tensor out({n, out_n});
  kernels::gemm(n, out_n, in, x.data().data(), kernels::Op::None, layer.weight.data().data(),
                kernels::Op::Transpose, out.mutable_data().data(), false);
  auto o = out.mutable_data();
  auto b = layer.bias.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out_n; ++j) o[r * out_n + j] += b[j];
  const Tensor& w = layer.weight;
  const Tensor& bias = layer.bias;
  if (should_record({&x, &w, &bias})) {
    record_op("linear", {x, w, bias}, out, [x, w, bias, n, in, out_n](std::span<const double> g) {
      if (x.requires_grad())
        kernels::gemm(n, in, out_n, g.data(), w.data().data(), grad_buffer(x).data(), true);
      if (w.requires_grad())
        kernels::gemm(out_n, in, n, g.data(), kernels::Op::Transpose, x.data().data(),
                      kernels::Op::None, grad_buffer(w).data(), true);
      if (bias.requires_grad()) {
        auto gb = grad_buffer(bias);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < out_n; ++j) gb[j] += g[r * out_n + j];
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.dim() != 2) throw DimensionError("cross_entropy: expected B×K logits, got " + shape_str(logits.shape()));
  const std::size_t b = logits.size(0), k = logits.size(1);
  if (labels.size() != b)
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                        std::to_string(b));
  for (std::size_t l : labels)
    if (l >= k) throw ContractError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
  std::vector<double> prob(b * k);
  double loss = 0.0;
  auto z = logits.data();
  for (std::size_t r = 0; r < b; ++r) {
    const double* zi = z.data() + r * k;
    const double mx = *std::max_element(zi, zi + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (prob[r * k + j] = std::exp(zi[j] - mx));
    for (std::size_t j = 0; j < k; ++j) prob[r * k + j] /= s;
    loss += -(zi[labels[r]] - mx - std::log(s));
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(b));
  if (should_record({&logits})) {
    record_op("cross_entropy", {logits}, out, [logits, labels, prob, b, k](std::span<const double> g) {
      auto gz = grad_buffer(logits);
      const double f = g[0] / static_cast<double>(b);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t j = 0; j < k; ++j)
          gz[r * k + j] += f * (prob[r * k + j] - (j == labels[r] ? 1.0 : 0.0));
    });
  }
  return out;
}

void collect_params(const Conv3dLayer& layer, const std::string& prefix,
                    std::vector<NamedParam>& out) {
  out.push_back({prefix + ".kernel", layer.kernel});
  out.push_back({prefix + ".bias", layer.bias});
}

void collect_params(const ResidualBlock& block, const std::string& prefix,
                    std::vector<NamedParam>& out) {
  collect_params(block.conv_a, prefix + ".conv_a", out);
  collect_params(block.conv_b, prefix + ".conv_b", out);
  if (block.projection) collect_params(*block.projection, prefix + ".projection", out);
}

void collect_params(const LinearLayer& layer, const std::string& prefix,
                    std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", layer.weight});
  out.push_back({prefix + ".bias", layer.bias});
}

Tensor pack_norm(const FrozenNorm& norm) {
  const std::size_t c = norm.channels();
  std::vector<double> v;
  v.reserve(4 * c);
  for (const auto* part : {&norm.gamma, &norm.beta, &norm.mean, &norm.var})
    v.insert(v.end(), part->begin(), part->end());
  return Tensor({4, c}, std::move(v));
}

FrozenNorm unpack_norm(const Tensor& packed) {
  if (packed.dim() != 2 || packed.size(0) != 4)
    throw DimensionError("unpack_norm: expected 4×C, got " + shape_str(packed.shape()));
  const std::size_t c = packed.size(1);
  auto d = packed.data();
  FrozenNorm n;
  n.gamma.assign(d.begin(), d.begin() + c);
  n.beta.assign(d.begin() + c, d.begin() + 2 * c);
  n.mean.assign(d.begin() + 2 * c, d.begin() + 3 * c);
  n.var.assign(d.begin() + 3 * c, d.end());
  return n;
}

void collect_norms(const ResidualBlock& block, const std::string& prefix,
                   std::vector<std::pair<std::string, const FrozenNorm*>>& out) {
  out.emplace_back(prefix + ".norm_a", &block.norm_a);
  out.emplace_back(prefix + ".norm_b", &block.norm_b);
  if (block.projection_norm) out.emplace_back(prefix + ".projection_norm", &*block.projection_norm);
}

void collect_norms(ResidualBlock& block, const std::string& prefix,
                   std::vector<std::pair<std::string, FrozenNorm*>>& out) {
  out.emplace_back(prefix + ".norm_a", &block.norm_a);
  out.emplace_back(prefix + ".norm_b", &block.norm_b);
  if (block.projection_norm) out.emplace_back(prefix + ".projection_norm", &*block.projection_norm);
}

namespace {

void set_stats_from(const Tensor& y, FrozenNorm& norm) {
  const MapDims d = map_dims(y, "calibrate");
  const std::size_t plane = d.t * d.h * d.w;
  auto v = y.data();
  for (std::size_t c = 0; c < d.c; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const double x = v[(n * d.c + c) * plane + i];
        s += x;
        s2 += x * x;
      }
    const double cnt = static_cast<double>(d.n * plane);
    const double mu = s / cnt;
    norm.mean[c] = mu;
    norm.var[c] = std::max(s2 / cnt - mu * mu, 1e-6);
  }
}

}  // namespace

Tensor calibrate_block(const Tensor& x, ResidualBlock& block) {
  Tensor a_pre = conv3d(x, block.conv_a);
  set_stats_from(a_pre, block.norm_a);
  Tensor a = relu(frozen_norm(a_pre, block.norm_a));
  Tensor b_pre = conv3d(a, block.conv_b);
  set_stats_from(b_pre, block.norm_b);
  Tensor b = frozen_norm(b_pre, block.norm_b);
  Tensor shortcut = x;
  if (block.projection) {
    Tensor p = conv3d(x, *block.projection);
    set_stats_from(p, *block.projection_norm);
    shortcut = frozen_norm(p, *block.projection_norm);
  }
  return relu(add(b, shortcut));
}

}  // namespace sfc
