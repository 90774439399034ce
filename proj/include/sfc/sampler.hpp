#pragma once

// Inference strategies: single crop, uniform (segment) sampling, dense
// multi-crop averaging, whole-video SFC and the untrimmed clip concatenation.

#include <optional>
#include <string>
#include <vector>

#include "sfc/backbone.hpp"
#include "sfc/cost.hpp"
#include "sfc/selective_compression.hpp"

namespace sfc {

struct Video {
  Tensor frames;  // C×T×H×W
  std::size_t label = 0;
  std::string id;
};

enum class StrategyKind { Single, Uniform, Dense, WholeVideoSfc, UntrimmedSfc };

struct Strategy {
  StrategyKind kind = StrategyKind::Single;
  std::size_t clips = 1;            // uniform N, dense N_t, untrimmed N_clips
  std::size_t spatial = 1;          // dense N_s
  std::size_t frames_per_clip = 0;  // untrimmed only
  std::size_t clip_length = 16;     // L
  std::size_t crop = 16;            // square spatial crop

  bool uses_sfc() const { return kind == StrategyKind::WholeVideoSfc || kind == StrategyKind::UntrimmedSfc; }
  std::size_t crop_count() const;
  std::string str() const;
};

// single | uniform:N | dense:NtxNs | sfc | untrimmed:NxF  ("dense" alone is 10x3)
Strategy parse_strategy(const std::string& text, std::size_t clip_length = 16, std::size_t crop = 16);

// round(linspace(lo, hi, n)); the midpoint when n == 1.
std::vector<std::size_t> linspace_starts(std::size_t lo, std::size_t hi, std::size_t n);
// Temporal starts of N clips of length L in T frames: centred within N equal
// segments when they fit, evenly spaced (overlapping) otherwise.
std::vector<std::size_t> uniform_starts(std::size_t t, std::size_t n, std::size_t l);

struct CropWindow {
  std::size_t t0 = 0, length = 0, y0 = 0, x0 = 0;
};
std::vector<CropWindow> crop_windows(const Shape& video, const Strategy& s);
Tensor extract_crop(const Tensor& frames, const CropWindow& w, std::size_t crop);

// Model inputs of the strategy: crops (C×L×crop×crop) for crop strategies, the
// single whole-video or concatenated tensor for SFC strategies.
std::vector<Tensor> enumerate_crops(const Video& video, const Strategy& s);

struct Model {
  const BackboneSpec* spec = nullptr;
  const BackboneWeights* backbone = nullptr;
  std::size_t split = 3;
  const SfcConfig* sfc_config = nullptr;
  const SfcWeights* sfc = nullptr;
};

struct Prediction {
  Tensor probabilities;  // K
  CostReport cost;
  std::optional<SfcResult> attention;  // SFC strategies only
};

Prediction predict_video(const Video& video, const Strategy& s, const Model& model,
                         Count budget = kDefaultBudget);
CostReport strategy_cost(const Strategy& s, const Model& model, const Shape& video_shape,
                         Count budget = kDefaultBudget);

}  // namespace sfc
