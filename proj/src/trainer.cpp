#include "sfc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>

#include "sfc/errors.hpp"

namespace sfc {

double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr0;
  for (std::size_t m : cfg.milestones)
    if (epoch >= m) lr *= 0.1;
  return lr;
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay, double grad_clip)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay), grad_clip_(grad_clip) {
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

double Sgd::step(double lr) {
  double norm2 = 0.0;
  for (const auto& p : params_)
    if (p.requires_grad())
      for (double g : p.grad()) norm2 += g * g;
  const double norm = std::sqrt(norm2);
  const double factor = grad_clip_ > 0.0 && norm > grad_clip_ ? grad_clip_ / norm : 1.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.requires_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double d = factor * g[j] + weight_decay_ * w[j];
      v[j] = momentum_ * v[j] + d;
      w[j] -= lr * v[j];
    }
  }
  return norm;
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,lr,train_loss,train_top1,val_top1,val_top5\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_top1 << ',';
    if (r.val_top1 >= 0) out << r.val_top1 << ',' << r.val_top5;
    else out << ',';
    out << '\n';
  }
}

Accuracy score_predictions(const std::vector<Tensor>& probs, const std::vector<std::size_t>& labels) {
  if (probs.size() != labels.size() || probs.empty())
    throw ContractError("score_predictions: need one label per prediction");
  Accuracy a;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto p = probs[i].data();
    if (labels[i] >= p.size()) throw ContractError("score_predictions: label out of range");
    const double target = p[labels[i]];
    const auto higher = std::count_if(p.begin(), p.end(), [&](double v) { return v > target; });
    if (higher < 1) a.top1 += 1;
    if (higher < 5) a.top5 += 1;
  }
  a.top1 /= static_cast<double>(probs.size());
  a.top5 /= static_cast<double>(probs.size());
  return a;
}

EvalResult evaluate(const Model& model, const Strategy& strategy, const std::vector<SynthSample>& data,
                    std::size_t limit) {
  const std::size_t n = limit ? std::min(limit, data.size()) : data.size();
  if (n == 0) throw ContractError("evaluate: empty dataset");
  EvalResult r;
  r.probabilities.resize(n);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    Prediction p = predict_video(data[i].video, strategy, model);
    if (i == 0) r.cost = p.cost;
    r.probabilities[i] = p.probabilities;
    labels[i] = data[i].label;
  }
  r.accuracy = score_predictions(r.probabilities, labels);
  return r;
}

namespace {

struct Augment {
  std::size_t t0, length, y0, x0, region;
  bool flip;
};

Augment draw_augment(const TrainConfig& cfg, const Shape& video, std::size_t length, std::mt19937_64& rng,
                     bool random_time) {
  const std::size_t t = video[1], h = video[2], w = video[3];
  if (t < length) throw ConfigError("video has " + std::to_string(t) + " frames; requires at least " + std::to_string(length));
  if (std::min(h, w) < cfg.crop) throw ConfigError("video smaller than crop " + std::to_string(cfg.crop));
  Augment a{0, length, 0, 0, cfg.crop, false};
  a.t0 = random_time ? std::uniform_int_distribution<std::size_t>(0, t - length)(rng) : (t - length) / 2;
  if (cfg.aug_scale) {
    const std::size_t hi = std::min({h, w, cfg.crop + cfg.crop / 4});
    a.region = std::uniform_int_distribution<std::size_t>(cfg.crop, hi)(rng);
  }
  if (cfg.aug_crop) {
    a.y0 = std::uniform_int_distribution<std::size_t>(0, h - a.region)(rng);
    a.x0 = std::uniform_int_distribution<std::size_t>(0, w - a.region)(rng);
  } else {
    a.y0 = (h - a.region) / 2;
    a.x0 = (w - a.region) / 2;
  }
  a.flip = cfg.aug_flip && std::bernoulli_distribution(0.5)(rng);
  return a;
}

// Crop `region`² at (y0, x0), resize to crop² by nearest neighbour, flip.
void write_clip(const Tensor& frames, const Augment& a, std::size_t crop, double* dst) {
  const std::size_t c_n = frames.size(0), t = frames.size(1), h = frames.size(2), w = frames.size(3);
  auto src = frames.data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t i = 0; i < a.length; ++i)
      for (std::size_t y = 0; y < crop; ++y) {
        const std::size_t sy = a.y0 + y * a.region / crop;
        const double* row = src.data() + ((c * t + a.t0 + i) * h + sy) * w;
        double* out = dst + ((c * a.length + i) * crop + y) * crop;
        for (std::size_t x = 0; x < crop; ++x) {
          const std::size_t xx = a.flip ? crop - 1 - x : x;
          out[x] = row[a.x0 + xx * a.region / crop];
        }
      }
}

void check_finite(double loss, const char* stage, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss))
    throw DivergenceError(std::string(stage) + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                          std::to_string(batch) + "; lower the learning rate");
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<Tensor> param_tensors(const std::vector<NamedParam>& named) {
  std::vector<Tensor> out;
  for (const auto& p : named) out.push_back(p.tensor);
  return out;
}

}  // namespace

std::vector<MetricsRow> train_backbone(const TrainConfig& cfg, const BackboneSpec& spec, BackboneWeights& weights,
                                       const std::vector<SynthSample>& train, const std::vector<SynthSample>& val,
                                       const FlipMap& flip) {
  if (train.empty()) throw ConfigError("train_backbone: empty training set");
  if (cfg.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  std::mt19937_64 rng(cfg.seed ^ 0x51ab1eULL);
  const std::size_t c = spec.in_channels, l = cfg.clip_length, crop = cfg.crop;
  const std::size_t clip_numel = c * l * crop * crop;

  auto make_batch = [&](const std::vector<std::size_t>& idx, std::vector<std::size_t>& labels) {
    Tensor x({idx.size(), c, l, crop, crop});
    labels.clear();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& s = train[idx[b]];
      Augment a = draw_augment(cfg, s.video.frames.shape(), l, rng, true);
      write_clip(s.video.frames, a, crop, x.mutable_data().data() + b * clip_numel);
      labels.push_back(a.flip && flip ? flip(s.label) : s.label);
    }
    return x;
  };

  if (cfg.calibrate) {
    std::vector<std::size_t> idx(std::min(cfg.calibration_videos, train.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::size_t> labels;
    calibrate_backbone(weights, make_batch(idx, labels));
  }

  auto params = backbone_params(weights);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  Sgd opt(param_tensors(params), cfg.momentum, cfg.weight_decay, cfg.grad_clip);
  const Strategy val_strategy = parse_strategy(cfg.val_strategy, l, crop);
  Model model{&spec, &weights};

  std::vector<MetricsRow> log;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    MetricsRow row;
    row.epoch = epoch;
    row.lr = lr_at(cfg, epoch);
    double correct = 0, loss_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + std::min(order.size(), start + cfg.batch_size));
      std::vector<std::size_t> labels;
      Tensor x = make_batch(idx, labels);
      Tape tape;
      TapeScope scope(tape);
      Tensor logits = forward_full(spec, weights, x);
      Tensor loss = cross_entropy(logits, labels);
      check_finite(loss.item(), "train_backbone", epoch, batch_no);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(row.lr);
      loss_sum += loss.item() * static_cast<double>(idx.size());
      const std::size_t k = logits.size(1);
      for (std::size_t b = 0; b < idx.size(); ++b)
        correct += argmax_row(logits.data().subspan(b * k, k)) == labels[b] ? 1.0 : 0.0;
    }
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.train_top1 = correct / static_cast<double>(train.size());
    const bool last = epoch + 1 == cfg.epochs;
    if (!val.empty() && cfg.val_every && ((epoch + 1) % cfg.val_every == 0 || last)) {
      for (auto& p : params) p.tensor.set_requires_grad(false);
      EvalResult ev = evaluate(model, val_strategy, val, cfg.val_limit);
      for (auto& p : params) p.tensor.set_requires_grad(true);
      row.val_top1 = ev.accuracy.top1;
      row.val_top5 = ev.accuracy.top5;
    }
    if (cfg.verbose)
      std::cerr << "[backbone] epoch " << epoch << " lr " << row.lr << " loss " << row.train_loss << " top1 "
                << row.train_top1 << " val " << row.val_top1 << '\n';
    log.push_back(row);
  }
  for (auto& p : params) p.tensor.set_requires_grad(false);
  return log;
}

std::vector<Tensor> head_features(const SplitBackbone& backbone, const std::vector<SynthSample>& data,
                                  std::size_t crop) {
  Strategy whole;
  whole.kind = StrategyKind::WholeVideoSfc;
  whole.crop = crop;
  std::vector<Tensor> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tensor x = enumerate_crops(data[i].video, whole).front();
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    Tensor h = backbone.head(x.reshape(s));
    out[i] = h.reshape(Shape(h.shape().begin() + 1, h.shape().end()));
  }
  return out;
}

namespace {

std::vector<MetricsRow> run_sfc_training(const TrainConfig& cfg, SplitBackbone& backbone,
                                         const SfcConfig& sfc_cfg, SfcWeights& sfc,
                                         const std::vector<SynthSample>& train,
                                         const std::vector<SynthSample>& val, const FlipMap& flip,
                                         const std::vector<Tensor>* cached_head) {
  if (train.empty()) throw ConfigError("train_sfc: empty training set");
  if (cfg.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  std::mt19937_64 rng(cfg.seed ^ 0x5fc0ULL);
  backbone.set_frozen(true);
  const std::uint64_t frozen_hash = backbone.content_hash();
  auto verify_frozen = [&](const std::string& when) {
    if (backbone.content_hash() != frozen_hash)
      throw InvariantError("frozen backbone changed during SFC training (" + when + ")");
  };

  std::vector<Tensor> own_cache;
  if (cfg.cache_head && cached_head == nullptr) own_cache = head_features(backbone, train, cfg.crop);
  const std::vector<Tensor>& cache = cached_head ? *cached_head : own_cache;
  // Head features of one video; augmented on the fly when not cached.
  auto features = [&](std::size_t i, std::size_t& label) {
    label = train[i].label;
    if (cfg.cache_head) return cache[i];
    const Shape& vs = train[i].video.frames.shape();
    Augment a = draw_augment(cfg, vs, vs[1], rng, false);
    Tensor x({1, vs[0], vs[1], cfg.crop, cfg.crop});
    write_clip(train[i].video.frames, a, cfg.crop, x.mutable_data().data());
    if (a.flip && flip) label = flip(label);
    Tensor h = backbone.head(x);
    return h.reshape(Shape(h.shape().begin() + 1, h.shape().end()));
  };

  if (cfg.calibrate) {
    const std::size_t n = std::min(cfg.calibration_videos, train.size());
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t label;
      Tensor f = features(i, label);
      Shape s = f.shape();
      s.insert(s.begin(), 1);
      parts.push_back(f.reshape(s));
    }
    calibrate_sfc(sfc, parts.size() == 1 ? parts.front() : concat(parts, 0));
  }

  auto params = sfc_params(sfc);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  Sgd opt(param_tensors(params), cfg.momentum, cfg.weight_decay, cfg.grad_clip);
  Strategy val_strategy;
  val_strategy.kind = StrategyKind::WholeVideoSfc;
  val_strategy.crop = cfg.crop;
  Model model{&backbone.spec(), &backbone.weights(), backbone.split(), &sfc_cfg, &sfc};

  std::vector<MetricsRow> log;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    MetricsRow row;
    row.epoch = epoch;
    row.lr = lr_at(cfg, epoch);
    double correct = 0, loss_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Tensor> parts;
      std::vector<std::size_t> labels;
      for (std::size_t j = start; j < end; ++j) {
        std::size_t label;
        Tensor f = features(order[j], label);
        Shape s = f.shape();
        s.insert(s.begin(), 1);
        parts.push_back(f.reshape(s));
        labels.push_back(label);
      }
      Tensor batch = parts.size() == 1 ? parts.front() : concat(parts, 0);
      Tape tape;
      TapeScope scope(tape);
      Tensor logits = backbone.tail(sfc_forward_batch(batch, sfc_cfg, sfc));
      Tensor loss = cross_entropy(logits, labels);
      check_finite(loss.item(), "train_sfc", epoch, batch_no);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(row.lr);
      loss_sum += loss.item() * static_cast<double>(labels.size());
      const std::size_t k = logits.size(1);
      for (std::size_t b = 0; b < labels.size(); ++b)
        correct += argmax_row(logits.data().subspan(b * k, k)) == labels[b] ? 1.0 : 0.0;
    }
    verify_frozen("after epoch " + std::to_string(epoch));
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.train_top1 = correct / static_cast<double>(train.size());
    const bool last = epoch + 1 == cfg.epochs;
    if (!val.empty() && cfg.val_every && ((epoch + 1) % cfg.val_every == 0 || last)) {
      for (auto& p : params) p.tensor.set_requires_grad(false);
      EvalResult ev = evaluate(model, val_strategy, val, cfg.val_limit);
      for (auto& p : params) p.tensor.set_requires_grad(true);
      row.val_top1 = ev.accuracy.top1;
      row.val_top5 = ev.accuracy.top5;
    }
    if (cfg.verbose)
      std::cerr << "[sfc] epoch " << epoch << " lr " << row.lr << " loss " << row.train_loss << " top1 "
                << row.train_top1 << " val " << row.val_top1 << '\n';
    log.push_back(row);
  }
  for (auto& p : params) p.tensor.set_requires_grad(false);
  return log;
}

}  // namespace

std::vector<MetricsRow> train_sfc(const TrainConfig& cfg, SplitBackbone& backbone, const SfcConfig& sfc_cfg,
                                  SfcWeights& sfc, const std::vector<SynthSample>& train,
                                  const std::vector<SynthSample>& val, const FlipMap& flip) {
  return run_sfc_training(cfg, backbone, sfc_cfg, sfc, train, val, flip, nullptr);
}

std::vector<MetricsRow> train_sfc(const TrainConfig& cfg, SplitBackbone& backbone, const SfcConfig& sfc_cfg,
                                  SfcWeights& sfc, const std::vector<SynthSample>& train,
                                  const std::vector<SynthSample>& val, const std::vector<Tensor>& cached_head) {
  if (!cfg.cache_head) throw ConfigError("train_sfc: cached head features need train.cache_head");
  if (cached_head.size() != train.size())
    throw ConfigError("train_sfc: " + std::to_string(cached_head.size()) + " cached features for " +
                      std::to_string(train.size()) + " videos");
  return run_sfc_training(cfg, backbone, sfc_cfg, sfc, train, val, nullptr, &cached_head);
}

double motif_attention_ratio(const Tensor& m_t, std::size_t start, std::size_t end) {
  if (m_t.dim() != 2 || end > m_t.size(1) || start >= end)
    throw ContractError("motif_attention_ratio: window outside attention map");
  const std::size_t rows = m_t.size(0), cols = m_t.size(1);
  double mass = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = start; c < end; ++c) mass += m_t[r * cols + c];
  mass /= static_cast<double>(rows);
  const double chance = static_cast<double>(end - start) / static_cast<double>(cols);
  return mass / chance;
}

}  // namespace sfc
