#pragma once

// MicroSlow: a five-stage 3D residual network with temporal stride 1
// everywhere, split into a head (stages 1..s) and a tail (stages s+1..5,
// global average pool, linear classifier).

#include <cstdint>
#include <string>
#include <vector>

#include "sfc/nnops.hpp"

namespace sfc {

struct BackboneSpec {
  std::vector<std::size_t> widths{8, 16, 32, 64, 128};
  std::size_t blocks_per_stage = 1;
  std::size_t in_channels = 1;
  std::size_t num_classes = 8;
  Triple kernel_a{3, 1, 1};
  Triple kernel_b{1, 3, 3};

  std::size_t num_stages() const { return widths.size(); }
  // Spatial stride of the first block in stage `i` (0-based).
  Triple stage_stride(std::size_t i) const { return i == 0 ? Triple{1, 1, 1} : Triple{1, 2, 2}; }
  // Input spatial extents must be divisible by this.
  std::size_t spatial_divisor() const { return std::size_t{1} << (num_stages() - 1); }
  void validate() const;
};

struct BackboneWeights {
  std::vector<std::vector<ResidualBlock>> stages;
  LinearLayer classifier;
};

BackboneWeights init_backbone(const BackboneSpec& spec, std::mt19937_64& rng);

// Fixes every norm's statistics from one batch (N×C×T×H×W) of data, stage by
// stage, so activations start standardized.
void calibrate_backbone(BackboneWeights& weights, const Tensor& batch);

// Runs stages [first, last) on a 5-D input.
Tensor forward_stages(const BackboneWeights& weights, const Tensor& x, std::size_t first,
                      std::size_t last);
Tensor forward_full(const BackboneSpec& spec, const BackboneWeights& weights, const Tensor& clip);

void check_input(const BackboneSpec& spec, const Tensor& clip);

class SplitBackbone {
 public:
  // s ∈ {1..num_stages-1}: head = stages 1..s.
  SplitBackbone(const BackboneSpec& spec, const BackboneWeights& weights, std::size_t s);

  std::size_t split() const { return split_; }
  const BackboneSpec& spec() const { return *spec_; }
  const BackboneWeights& weights() const { return *weights_; }

  // 5-D clip → 5-D head feature map.
  Tensor head(const Tensor& clip) const;
  // 5-D feature map of head_channels() channels → N×K logits.
  Tensor tail(const Tensor& features) const;

  std::size_t head_channels() const { return spec_->widths[split_ - 1]; }
  // Head output shape (C×T×H×W) for one C_in×T×H×W input.
  Shape head_output_shape(const Shape& input) const;

  std::vector<NamedParam> head_params() const;
  std::vector<NamedParam> tail_params() const;
  void set_frozen(bool frozen);
  // Hash of every head and tail parameter and norm statistic.
  std::uint64_t content_hash() const;

 private:
  const BackboneSpec* spec_;
  const BackboneWeights* weights_;
  std::size_t split_;
};

std::vector<NamedParam> backbone_params(const BackboneWeights& weights);
std::vector<std::pair<std::string, FrozenNorm*>> backbone_norms(BackboneWeights& weights);
std::vector<std::pair<std::string, const FrozenNorm*>> backbone_norms(const BackboneWeights& weights);
std::uint64_t backbone_hash(const BackboneWeights& weights);

std::string stage_name(std::size_t stage);  // "res1".."res5"

// Directory checkpoint: manifest.json plus one tensor file per parameter.
void save_backbone(const std::string& dir, const BackboneSpec& spec, const BackboneWeights& weights);
void load_backbone(const std::string& dir, BackboneSpec& spec, BackboneWeights& weights);

}  // namespace sfc
