#include "sfc/backbone.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "sfc/errors.hpp"

namespace sfc {

namespace fs = std::filesystem;
using nlohmann::json;

void BackboneSpec::validate() const {
  if (widths.empty()) throw ConfigError("backbone.widths must not be empty");
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("backbone.widths entries must be positive");
  if (blocks_per_stage == 0) throw ConfigError("backbone.blocks_per_stage must be positive");
  if (in_channels != 1 && in_channels != 3) throw ConfigError("backbone.in_channels must be 1 or 3");
  if (num_classes < 2) throw ConfigError("backbone.num_classes must be at least 2");
}

BackboneWeights init_backbone(const BackboneSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  BackboneWeights w;
  std::size_t c_in = spec.in_channels;
  for (std::size_t s = 0; s < spec.num_stages(); ++s) {
    std::vector<ResidualBlock> blocks;
    for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
      const Triple stride = b == 0 ? spec.stage_stride(s) : Triple{1, 1, 1};
      blocks.push_back(ResidualBlock::make(c_in, spec.widths[s], spec.kernel_a, spec.kernel_b, stride, rng));
      c_in = spec.widths[s];
    }
    w.stages.push_back(std::move(blocks));
  }
  w.classifier = LinearLayer::make(c_in, spec.num_classes, rng);
  return w;
}

void calibrate_backbone(BackboneWeights& weights, const Tensor& batch) {
  Tensor x = batch;
  for (auto& stage : weights.stages)
    for (auto& block : stage) x = calibrate_block(x, block);
}

Tensor forward_stages(const BackboneWeights& weights, const Tensor& x, std::size_t first,
                      std::size_t last) {
  Tensor y = x;
  for (std::size_t s = first; s < last; ++s)
    for (const auto& block : weights.stages.at(s)) y = residual_block(y, block);
  return y;
}

void check_input(const BackboneSpec& spec, const Tensor& clip) {
  if (clip.dim() != 5)
    throw DimensionError("backbone: expected B×C×T×H×W input, got " + shape_str(clip.shape()));
  if (clip.size(1) != spec.in_channels)
    throw DimensionError("backbone: expected " + std::to_string(spec.in_channels) +
                         " input channels, got " + shape_str(clip.shape()));
  const std::size_t d = spec.spatial_divisor();
  if (clip.size(3) % d != 0 || clip.size(4) % d != 0)
    throw ConfigError("backbone: spatial size " + std::to_string(clip.size(3)) + "x" +
                      std::to_string(clip.size(4)) + " must be divisible by " + std::to_string(d));
}

Tensor forward_full(const BackboneSpec& spec, const BackboneWeights& weights, const Tensor& clip) {
  check_input(spec, clip);
  Tensor f = forward_stages(weights, clip, 0, spec.num_stages());
  return linear(global_avg_pool(f), weights.classifier);
}

SplitBackbone::SplitBackbone(const BackboneSpec& spec, const BackboneWeights& weights, std::size_t s)
    : spec_(&spec), weights_(&weights), split_(s) {
  if (s < 1 || s >= spec.num_stages())
    throw ConfigError("split index " + std::to_string(s) + " outside [1, " +
                      std::to_string(spec.num_stages() - 1) + "]");
}

Tensor SplitBackbone::head(const Tensor& clip) const {
  check_input(*spec_, clip);
  return forward_stages(*weights_, clip, 0, split_);
}

Tensor SplitBackbone::tail(const Tensor& features) const {
  if (features.dim() != 5 || features.size(1) != head_channels())
    throw DimensionError("tail: expected N×" + std::to_string(head_channels()) + "×T×H×W, got " +
                         shape_str(features.shape()));
  Tensor f = forward_stages(*weights_, features, split_, spec_->num_stages());
  return linear(global_avg_pool(f), weights_->classifier);
}

Shape SplitBackbone::head_output_shape(const Shape& input) const {
  std::size_t h = input.at(2), w = input.at(3);
  for (std::size_t s = 1; s < split_; ++s) {
    h /= 2;
    w /= 2;
  }
  return {head_channels(), input.at(1), h, w};
}

std::string stage_name(std::size_t stage) { return "res" + std::to_string(stage + 1); }

namespace {

std::string block_prefix(std::size_t s, std::size_t b) {
  return stage_name(s) + ".b" + std::to_string(b);
}

void stage_params(const BackboneWeights& w, std::size_t first, std::size_t last,
                  std::vector<NamedParam>& out) {
  for (std::size_t s = first; s < last; ++s)
    for (std::size_t b = 0; b < w.stages[s].size(); ++b)
      collect_params(w.stages[s][b], block_prefix(s, b), out);
}

}  // namespace

std::vector<NamedParam> SplitBackbone::head_params() const {
  std::vector<NamedParam> out;
  stage_params(*weights_, 0, split_, out);
  return out;
}

std::vector<NamedParam> SplitBackbone::tail_params() const {
  std::vector<NamedParam> out;
  stage_params(*weights_, split_, spec_->num_stages(), out);
  collect_params(weights_->classifier, "classifier", out);
  return out;
}

void SplitBackbone::set_frozen(bool frozen) {
  for (auto& p : backbone_params(*weights_)) p.tensor.set_requires_grad(!frozen);
}

std::uint64_t SplitBackbone::content_hash() const { return backbone_hash(*weights_); }

std::vector<NamedParam> backbone_params(const BackboneWeights& weights) {
  std::vector<NamedParam> out;
  stage_params(weights, 0, weights.stages.size(), out);
  collect_params(weights.classifier, "classifier", out);
  return out;
}

std::vector<std::pair<std::string, FrozenNorm*>> backbone_norms(BackboneWeights& weights) {
  std::vector<std::pair<std::string, FrozenNorm*>> out;
  for (std::size_t s = 0; s < weights.stages.size(); ++s)
    for (std::size_t b = 0; b < weights.stages[s].size(); ++b)
      collect_norms(weights.stages[s][b], block_prefix(s, b), out);
  return out;
}

std::vector<std::pair<std::string, const FrozenNorm*>> backbone_norms(const BackboneWeights& weights) {
  std::vector<std::pair<std::string, const FrozenNorm*>> out;
  for (std::size_t s = 0; s < weights.stages.size(); ++s)
    for (std::size_t b = 0; b < weights.stages[s].size(); ++b)
      collect_norms(weights.stages[s][b], block_prefix(s, b), out);
  return out;
}

std::uint64_t backbone_hash(const BackboneWeights& weights) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : backbone_params(weights)) h = sfc::content_hash(p.tensor, h);
  for (const auto& [name, norm] : backbone_norms(weights))
    h = sfc::content_hash(pack_norm(*norm), h);
  return h;
}

void save_backbone(const std::string& dir, const BackboneSpec& spec, const BackboneWeights& weights) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "microslow-v1";
  manifest["spec"] = {{"widths", spec.widths},
                      {"blocks_per_stage", spec.blocks_per_stage},
                      {"in_channels", spec.in_channels},
                      {"num_classes", spec.num_classes},
                      {"kernel_a", spec.kernel_a},
                      {"kernel_b", spec.kernel_b}};
  json stages = json::array();
  for (std::size_t s = 0; s < spec.num_stages(); ++s) stages.push_back(stage_name(s));
  manifest["stages"] = stages;
  json params = json::array();
  for (const auto& p : backbone_params(weights)) {
    save_tensor((fs::path(dir) / (p.name + ".bin")).string(), p.tensor);
    params.push_back(p.name);
  }
  manifest["params"] = params;
  json norms = json::array();
  for (const auto& [name, norm] : backbone_norms(weights)) {
    save_tensor((fs::path(dir) / (name + ".bin")).string(), pack_norm(*norm));
    norms.push_back(name);
  }
  manifest["norms"] = norms;
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << '\n';
}

void load_backbone(const std::string& dir, BackboneSpec& spec, BackboneWeights& weights) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw ConfigError("checkpoint: cannot open " + (fs::path(dir) / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
    const json& js = manifest.at("spec");
    spec.widths = js.at("widths").get<std::vector<std::size_t>>();
    spec.blocks_per_stage = js.at("blocks_per_stage").get<std::size_t>();
    spec.in_channels = js.at("in_channels").get<std::size_t>();
    spec.num_classes = js.at("num_classes").get<std::size_t>();
    spec.kernel_a = js.at("kernel_a").get<Triple>();
    spec.kernel_b = js.at("kernel_b").get<Triple>();
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint manifest " + dir + ": " + e.what());
  }
  std::mt19937_64 rng(0);
  weights = init_backbone(spec, rng);
  for (auto& p : backbone_params(weights)) {
    Tensor loaded = load_tensor((fs::path(dir) / (p.name + ".bin")).string());
    if (loaded.shape() != p.tensor.shape())
      throw DimensionError("checkpoint: " + p.name + " has shape " + shape_str(loaded.shape()) +
                           ", expected " + shape_str(p.tensor.shape()));
    std::copy(loaded.data().begin(), loaded.data().end(), p.tensor.mutable_data().begin());
  }
  for (auto& [name, norm] : backbone_norms(weights)) {
    FrozenNorm loaded = unpack_norm(load_tensor((fs::path(dir) / (name + ".bin")).string()));
    if (loaded.channels() != norm->channels())
      throw DimensionError("checkpoint: norm " + name + " channel count mismatch");
    *norm = std::move(loaded);
  }
}

}  // namespace sfc
