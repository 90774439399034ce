#include "sfc/sampler.hpp"

#include <cmath>
#include <regex>

#include "sfc/errors.hpp"

namespace sfc {

std::size_t Strategy::crop_count() const {
  switch (kind) {
    case StrategyKind::Single: return 1;
    case StrategyKind::Uniform: return clips;
    case StrategyKind::Dense: return clips * spatial;
    default: return 1;
  }
}

std::string Strategy::str() const {
  switch (kind) {
    case StrategyKind::Single: return "single";
    case StrategyKind::Uniform: return "uniform:" + std::to_string(clips);
    case StrategyKind::Dense: return "dense:" + std::to_string(clips) + "x" + std::to_string(spatial);
    case StrategyKind::WholeVideoSfc: return "sfc";
    case StrategyKind::UntrimmedSfc:
      return "untrimmed:" + std::to_string(clips) + "x" + std::to_string(frames_per_clip);
  }
  return "?";
}

Strategy parse_strategy(const std::string& text, std::size_t clip_length, std::size_t crop) {
  Strategy s;
  s.clip_length = clip_length;
  s.crop = crop;
  std::smatch m;
  if (text == "single") {
    s.kind = StrategyKind::Single;
  } else if (text == "sfc") {
    s.kind = StrategyKind::WholeVideoSfc;
  } else if (text == "dense") {
    s.kind = StrategyKind::Dense;
    s.clips = 10;
    s.spatial = 3;
  } else if (std::regex_match(text, m, std::regex(R"(uniform:(\d+))"))) {
    s.kind = StrategyKind::Uniform;
    s.clips = std::stoul(m[1]);
  } else if (std::regex_match(text, m, std::regex(R"(dense:(\d+)x(\d+))"))) {
    s.kind = StrategyKind::Dense;
    s.clips = std::stoul(m[1]);
    s.spatial = std::stoul(m[2]);
  } else if (std::regex_match(text, m, std::regex(R"(untrimmed:(\d+)x(\d+))"))) {
    s.kind = StrategyKind::UntrimmedSfc;
    s.clips = std::stoul(m[1]);
    s.frames_per_clip = std::stoul(m[2]);
  } else {
    throw ConfigError("unknown strategy '" + text + "' (single|uniform:N|dense:NtxNs|sfc|untrimmed:NxF)");
  }
  if (s.clips == 0 || s.spatial == 0 || (s.kind == StrategyKind::UntrimmedSfc && s.frames_per_clip == 0))
    throw ConfigError("strategy '" + text + "': counts must be positive");
  if (s.clip_length == 0 || s.crop == 0) throw ConfigError("strategy: clip length and crop must be positive");
  return s;
}

std::vector<std::size_t> linspace_starts(std::size_t lo, std::size_t hi, std::size_t n) {
  if (n == 1) return {lo + (hi - lo) / 2};
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<std::size_t>(std::lround(static_cast<double>(lo) +
                                                  static_cast<double>(hi - lo) * static_cast<double>(i) /
                                                      static_cast<double>(n - 1)));
  return out;
}

std::vector<std::size_t> uniform_starts(std::size_t t, std::size_t n, std::size_t l) {
  if (t < l) throw ConfigError("video has " + std::to_string(t) + " frames; requires at least " + std::to_string(l));
  const double seg = static_cast<double>(t) / static_cast<double>(n);
  if (seg < static_cast<double>(l)) return linspace_starts(0, t - l, n);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<std::size_t>(std::floor(seg * static_cast<double>(i) + (seg - static_cast<double>(l)) / 2.0));
  return out;
}

namespace {

struct Spatial {
  std::size_t y0, x0;
};

std::vector<Spatial> spatial_positions(std::size_t h, std::size_t w, std::size_t crop, std::size_t n) {
  if (h < crop || w < crop)
    throw ConfigError("video spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                      " is smaller than crop " + std::to_string(crop));
  std::vector<Spatial> out;
  if (w >= h) {
    for (std::size_t x : linspace_starts(0, w - crop, n)) out.push_back({(h - crop) / 2, x});
  } else {
    for (std::size_t y : linspace_starts(0, h - crop, n)) out.push_back({y, (w - crop) / 2});
  }
  return out;
}

}  // namespace

std::vector<CropWindow> crop_windows(const Shape& video, const Strategy& s) {
  const std::size_t t = video.at(1), h = video.at(2), w = video.at(3);
  const std::size_t l = s.clip_length;
  std::vector<CropWindow> out;
  const Spatial center = spatial_positions(h, w, s.crop, 1).front();
  auto require = [&](std::size_t need) {
    if (t < need)
      throw ConfigError("strategy " + s.str() + " needs at least " + std::to_string(need) +
                        " frames, video has " + std::to_string(t));
  };
  switch (s.kind) {
    case StrategyKind::Single:
      require(l);
      out.push_back({(t - l) / 2, l, center.y0, center.x0});
      break;
    case StrategyKind::Uniform:
      require(l);
      for (std::size_t t0 : uniform_starts(t, s.clips, l)) out.push_back({t0, l, center.y0, center.x0});
      break;
    case StrategyKind::Dense: {
      require(l);
      const auto sp = spatial_positions(h, w, s.crop, s.spatial);
      for (std::size_t t0 : linspace_starts(0, t - l, s.clips))
        for (const auto& p : sp) out.push_back({t0, l, p.y0, p.x0});
      break;
    }
    case StrategyKind::WholeVideoSfc:
      require(1);
      out.push_back({0, t, center.y0, center.x0});
      break;
    case StrategyKind::UntrimmedSfc:
      require(s.frames_per_clip);
      for (std::size_t t0 : uniform_starts(t, s.clips, s.frames_per_clip))
        out.push_back({t0, s.frames_per_clip, center.y0, center.x0});
      break;
  }
  return out;
}

Tensor extract_crop(const Tensor& frames, const CropWindow& win, std::size_t crop) {
  const std::size_t c_n = frames.size(0), t = frames.size(1), h = frames.size(2), w = frames.size(3);
  if (win.t0 + win.length > t || win.y0 + crop > h || win.x0 + crop > w)
    throw DimensionError("crop window outside video " + shape_str(frames.shape()));
  Tensor out({c_n, win.length, crop, crop});
  auto src = frames.data();
  auto dst = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t i = 0; i < win.length; ++i)
      for (std::size_t y = 0; y < crop; ++y) {
        const double* row = src.data() + ((c * t + win.t0 + i) * h + win.y0 + y) * w + win.x0;
        std::copy_n(row, crop, dst.data() + ((c * win.length + i) * crop + y) * crop);
      }
  return out;
}

std::vector<Tensor> enumerate_crops(const Video& video, const Strategy& s) {
  const auto windows = crop_windows(video.frames.shape(), s);
  std::vector<Tensor> out;
  if (s.kind == StrategyKind::UntrimmedSfc) {
    std::vector<Tensor> parts;
    for (const auto& w : windows) parts.push_back(extract_crop(video.frames, w, s.crop));
    out.push_back(concat(parts, 1));
    return out;
  }
  for (const auto& w : windows) out.push_back(extract_crop(video.frames, w, s.crop));
  return out;
}

namespace {

Tensor stack(const std::vector<Tensor>& items) {
  std::vector<Tensor> parts;
  for (const auto& t : items) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    parts.push_back(t.reshape(s));
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

void require_sfc(const Model& m) {
  if (!m.sfc || !m.sfc_config) throw ConfigError("SFC strategy requires SFC weights");
}

}  // namespace

CostReport strategy_cost(const Strategy& s, const Model& model, const Shape& video_shape, Count budget) {
  const std::size_t c = video_shape.at(0);
  if (!s.uses_sfc())
    return crop_strategy_cost(*model.spec, {c, s.clip_length, s.crop, s.crop}, s.crop_count(), budget);
  require_sfc(model);
  const std::size_t t = s.kind == StrategyKind::UntrimmedSfc ? s.clips * s.frames_per_clip : video_shape.at(1);
  return sfc_strategy_cost(*model.spec, model.split, *model.sfc_config, {c, t, s.crop, s.crop}, budget);
}

Prediction predict_video(const Video& video, const Strategy& s, const Model& model, Count budget) {
  Prediction p;
  std::vector<Tensor> inputs = enumerate_crops(video, s);
  p.cost = strategy_cost(s, model, video.frames.shape(), budget);
  if (!s.uses_sfc()) {
    Tensor probs = softmax(forward_full(*model.spec, *model.backbone, stack(inputs)));
    const std::size_t n = probs.size(0), k = probs.size(1);
    Tensor mean_probs({k});
    auto out = mean_probs.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) out[j] += probs[i * k + j];
    for (double& v : out) v /= static_cast<double>(n);
    p.probabilities = mean_probs;
    return p;
  }
  require_sfc(model);
  SplitBackbone split(*model.spec, *model.backbone, model.split);
  Tensor head = split.head(stack(inputs));
  Shape hs(head.shape().begin() + 1, head.shape().end());
  SfcResult r = sfc_forward(head.reshape(hs), *model.sfc_config, *model.sfc);
  Shape os = r.output.shape();
  os.insert(os.begin(), 1);
  Tensor probs = softmax(split.tail(r.output.reshape(os)));
  p.probabilities = probs.reshape({probs.size(1)});
  p.attention = std::move(r);
  return p;
}

}  // namespace sfc
