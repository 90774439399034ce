#pragma once

// Neural-network layers over 4-D (C×T×H×W) or 5-D (N×C×T×H×W) feature maps.

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sfc/kernels.hpp"
#include "sfc/tensor.hpp"

namespace sfc {

using Triple = kernels::Triple;

struct Conv3dLayer {
  Tensor kernel;  // C_out × C_in × kt × kh × kw
  Tensor bias;    // C_out
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};

  std::size_t c_out() const { return kernel.size(0); }
  std::size_t c_in() const { return kernel.size(1); }
  Triple kernel_shape() const { return {kernel.size(2), kernel.size(3), kernel.size(4)}; }

  // He-normal weights, zero bias. Padding defaults to "same" for odd kernels.
  static Conv3dLayer make(std::size_t c_in, std::size_t c_out, Triple kernel, Triple stride,
                          std::mt19937_64& rng, double gain = 1.0);
};

// Normalization in inference-statistics mode: never updated by training.
struct FrozenNorm {
  static constexpr double kEps = 1e-5;
  std::vector<double> gamma, beta, mean, var;

  static FrozenNorm identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
  // Per-channel affine form y = a·x + b.
  double slope(std::size_t c) const;
  double offset(std::size_t c) const;
};

struct ResidualBlock {
  Conv3dLayer conv_a;
  FrozenNorm norm_a;
  Conv3dLayer conv_b;
  FrozenNorm norm_b;
  std::optional<Conv3dLayer> projection;  // present when channels or stride change
  std::optional<FrozenNorm> projection_norm;

  // conv_a: kernel_a at unit stride; conv_b: kernel_b carrying `stride`.
  static ResidualBlock make(std::size_t c_in, std::size_t c_out, Triple kernel_a, Triple kernel_b,
                            Triple stride, std::mt19937_64& rng);
  std::size_t c_in() const { return conv_a.c_in(); }
  std::size_t c_out() const { return conv_b.c_out(); }
};

struct LinearLayer {
  Tensor weight;  // out × in
  Tensor bias;    // out
  static LinearLayer make(std::size_t in, std::size_t out, std::mt19937_64& rng);
};

Tensor conv3d(const Tensor& x, const Conv3dLayer& layer);
Tensor frozen_norm(const Tensor& x, const FrozenNorm& norm);
Tensor relu(const Tensor& x);
Tensor residual_block(const Tensor& x, const ResidualBlock& block);

// Temporal pooling over a C×T×H×W feature map.
struct TopKResult {
  Tensor output;
  std::vector<std::size_t> indices;  // ascending
};
// Keeps the `keep` timesteps with the largest mean |x| over (C,H,W); ties go
// to the lower index. Output timesteps are in ascending temporal order.
TopKResult topk_pool(const Tensor& x, std::size_t keep);
// Per-timestep TopK score, mean |x| over (C,H,W).
std::vector<double> topk_scores(const Tensor& x);
Tensor avg_pool_time(const Tensor& x, std::size_t window);
Tensor max_pool_time(const Tensor& x, std::size_t window);

// N×C×T×H×W → N×C
Tensor global_avg_pool(const Tensor& x);
// x: N×in → N×out
Tensor linear(const Tensor& x, const LinearLayer& layer);
// Mean over the batch of −log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// Named view of a trainable tensor inside some weight structure.
struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Parameters of building blocks, prefixed by `prefix`.
void collect_params(const Conv3dLayer& layer, const std::string& prefix,
                    std::vector<NamedParam>& out);
void collect_params(const ResidualBlock& block, const std::string& prefix,
                    std::vector<NamedParam>& out);
void collect_params(const LinearLayer& layer, const std::string& prefix,
                    std::vector<NamedParam>& out);

// Frozen statistics of a norm packed as a 4×C tensor (γ, β, μ, σ²).
Tensor pack_norm(const FrozenNorm& norm);
FrozenNorm unpack_norm(const Tensor& packed);
void collect_norms(const ResidualBlock& block, const std::string& prefix,
                   std::vector<std::pair<std::string, const FrozenNorm*>>& out);
void collect_norms(ResidualBlock& block, const std::string& prefix,
                   std::vector<std::pair<std::string, FrozenNorm*>>& out);

// Sets every norm of `block` so that, on the sample `x`, its input has zero
// mean and unit variance per channel. Statistics stay fixed afterwards.
Tensor calibrate_block(const Tensor& x, ResidualBlock& block);

}  // namespace sfc
