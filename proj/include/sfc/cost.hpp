#pragma once

// Analytic FLOPs / parameter / activation accounting.
//
// A multiply-accumulate counts as 2 FLOPs. Elementwise constants per output
// element: norm 2, relu 1, add 1, softmax 5; per input element: TopK score 2,
// avg/max pool 1, global average pool 1.

#include <cstdint>
#include <string>
#include <vector>

#include "sfc/backbone.hpp"
#include "sfc/selective_compression.hpp"

namespace sfc {

using Count = std::uint64_t;

struct LayerDesc {
  std::string kind;  // conv|norm|relu|add|linear|gap|topk|avg_pool|max_pool|attn_qk|softmax|attn_mv
  std::string name;
  Shape in, out;         // per video, no batch axis
  Triple kernel{1, 1, 1};
  std::size_t inner = 0;  // contraction length for attn_qk / attn_mv / linear
  Count params = 0;
  Count extra_resident = 0;  // scalars alive besides in/out (second add operand, values)
};

struct ModelDescription {
  std::string name;
  std::vector<LayerDesc> layers;
  void append(const ModelDescription& other);
};

Count layer_flops(const LayerDesc& layer);
Count flops_of(const ModelDescription& model);
Count params_of(const ModelDescription& model);
// max over layers of input + output (+ extra) scalars.
Count peak_activation(const ModelDescription& model);

// Stages [first, last) of `spec` on a C×T×H×W input, optionally followed by
// global average pooling and the classifier.
ModelDescription describe_backbone(const BackboneSpec& spec, std::size_t first, std::size_t last,
                                   const Shape& input, bool with_pool, bool with_classifier);
ModelDescription describe_sfc(const SfcConfig& cfg, const Shape& head_output);

constexpr Count kDefaultBudget = Count{1} << 25;  // scalars

struct CostReport {
  Count flops_video = 0;
  Count params = 0;
  Count peak_activation_scalars = 0;
  Count videos_per_batch = 0;
};

// `resident` model copies of the activation footprint are alive at once
// (e.g. all crops of one video batched together).
// videos_per_batch = floor((budget − params) / (resident · peak)), 0 if it
// does not fit.
CostReport memory_report(const ModelDescription& model, Count budget, Count invocations = 1,
                         Count resident = 1);

// Unsplit backbone over `crops` crops of shape crop (C×L×H×W).
CostReport crop_strategy_cost(const BackboneSpec& spec, const Shape& crop, std::size_t crops,
                              Count budget = kDefaultBudget);
// head → SFC → tail on one C×T×H×W input.
CostReport sfc_strategy_cost(const BackboneSpec& spec, std::size_t split, const SfcConfig& cfg,
                             const Shape& input, Count budget = kDefaultBudget);
ModelDescription describe_sfc_pipeline(const BackboneSpec& spec, std::size_t split,
                                       const SfcConfig& cfg, const Shape& input);

}  // namespace sfc
