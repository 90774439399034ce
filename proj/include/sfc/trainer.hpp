#pragma once

// Stage 1 trains the backbone on random short clips. Stage 2 freezes the
// backbone (weights and norm statistics) and trains only the SFC module on
// whole videos, with gradients flowing through the frozen tail.

#include <functional>
#include <string>
#include <vector>

#include "sfc/synthdata.hpp"

namespace sfc {

struct TrainConfig {
  double lr0 = 0.01;
  std::vector<std::size_t> milestones{8, 12};  // 0-based epochs where lr drops ×0.1
  std::size_t epochs = 15;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  double grad_clip = 0.0;  // global L2 norm limit, 0 disables
  std::size_t batch_size = 8;
  std::size_t clip_length = 16;
  std::size_t crop = 16;
  bool aug_scale = false;
  bool aug_crop = true;
  bool aug_flip = true;
  bool calibrate = true;            // fix norm statistics from data before training
  std::size_t calibration_videos = 32;
  bool cache_head = true;           // stage 2: reuse head features, no augmentation
  std::string val_strategy = "single";  // stage 1 per-epoch validation
  std::size_t val_every = 1;        // 0 disables per-epoch validation
  std::size_t val_limit = 0;        // 0 → whole validation set
  std::uint64_t seed = 0;
  bool verbose = false;
};

double lr_at(const TrainConfig& cfg, std::size_t epoch);

class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum, double weight_decay, double grad_clip = 0.0);
  // Updates every parameter that requires grad; frozen ones are skipped.
  // Returns the gradient norm before clipping.
  double step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_, weight_decay_, grad_clip_;
};

struct MetricsRow {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, train_top1 = 0;
  double val_top1 = -1, val_top5 = -1;  // −1 when not evaluated
};
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

struct Accuracy {
  double top1 = 0, top5 = 0;
};
// Rank-based: a sample counts for top-k when fewer than k classes score
// strictly higher than the true class.
Accuracy score_predictions(const std::vector<Tensor>& probabilities, const std::vector<std::size_t>& labels);

struct EvalResult {
  Accuracy accuracy;
  CostReport cost;  // per video
  std::vector<Tensor> probabilities;
};
EvalResult evaluate(const Model& model, const Strategy& strategy, const std::vector<SynthSample>& data,
                    std::size_t limit = 0);

// Maps a label under horizontal flip; identity when null.
using FlipMap = std::function<std::size_t(std::size_t)>;

std::vector<MetricsRow> train_backbone(const TrainConfig& cfg, const BackboneSpec& spec, BackboneWeights& weights,
                                       const std::vector<SynthSample>& train, const std::vector<SynthSample>& val,
                                       const FlipMap& flip = nullptr);

// Throws InvariantError if any backbone parameter or statistic changes.
std::vector<MetricsRow> train_sfc(const TrainConfig& cfg, SplitBackbone& backbone, const SfcConfig& sfc_cfg,
                                  SfcWeights& sfc, const std::vector<SynthSample>& train,
                                  const std::vector<SynthSample>& val, const FlipMap& flip = nullptr);
// Same, with head features precomputed by head_features(backbone, train, cfg.crop).
// Requires cfg.cache_head.
std::vector<MetricsRow> train_sfc(const TrainConfig& cfg, SplitBackbone& backbone, const SfcConfig& sfc_cfg,
                                  SfcWeights& sfc, const std::vector<SynthSample>& train,
                                  const std::vector<SynthSample>& val, const std::vector<Tensor>& cached_head);

// Center-crop head features of whole videos, one 4-D tensor per video.
std::vector<Tensor> head_features(const SplitBackbone& backbone, const std::vector<SynthSample>& data,
                                  std::size_t crop);

// Mean over rows of M_t of the mass on [start, end), divided by the
// window's share of the timeline.
double motif_attention_ratio(const Tensor& m_t, std::size_t start, std::size_t end);

}  // namespace sfc
