#include "sfc/cost.hpp"

#include <algorithm>

#include "sfc/errors.hpp"

namespace sfc {

namespace {

Count numel(const Shape& s) { return s.empty() ? 0 : shape_numel(s); }

Shape conv_out(const Shape& in, std::size_t c_out, const Triple& k, const Triple& stride) {
  Shape out{c_out, 0, 0, 0};
  for (int ax = 0; ax < 3; ++ax) {
    const std::size_t pad = k[ax] / 2;
    out[ax + 1] = (in[ax + 1] + 2 * pad - k[ax]) / stride[ax] + 1;
  }
  return out;
}

struct Builder {
  ModelDescription model;
  Shape cur;

  Shape conv(const std::string& name, const Shape& in, std::size_t c_out, const Triple& k,
             const Triple& stride) {
    LayerDesc l{"conv", name, in, conv_out(in, c_out, k, stride), k};
    l.params = Count(c_out) * in[0] * k[0] * k[1] * k[2] + c_out;
    model.layers.push_back(l);
    return l.out;
  }
  void elementwise(const std::string& kind, const std::string& name, const Shape& s, Count extra = 0) {
    LayerDesc l{kind, name, s, s};
    if (kind == "norm") l.params = 2 * s[0];
    l.extra_resident = extra;
    model.layers.push_back(l);
  }
  // Mirrors residual_block(): conv_a, norm, relu, conv_b, norm, [proj, norm], add, relu.
  Shape block(const std::string& name, const Shape& in, std::size_t c_out, const Triple& ka,
              const Triple& kb, const Triple& stride) {
    Shape a = conv(name + ".conv_a", in, c_out, ka, {1, 1, 1});
    elementwise("norm", name + ".norm_a", a);
    elementwise("relu", name + ".relu_a", a);
    Shape b = conv(name + ".conv_b", a, c_out, kb, stride);
    elementwise("norm", name + ".norm_b", b);
    if (in[0] != c_out || stride != Triple{1, 1, 1}) {
      Shape p = conv(name + ".projection", in, c_out, {1, 1, 1}, stride);
      elementwise("norm", name + ".projection_norm", p);
    }
    elementwise("add", name + ".add", b, numel(b));
    elementwise("relu", name + ".relu", b);
    return b;
  }
};

}  // namespace

void ModelDescription::append(const ModelDescription& other) {
  layers.insert(layers.end(), other.layers.begin(), other.layers.end());
}

Count layer_flops(const LayerDesc& l) {
  const Count in = numel(l.in), out = numel(l.out);
  if (l.kind == "conv") return 2 * Count(l.in.at(0)) * l.kernel[0] * l.kernel[1] * l.kernel[2] * out;
  if (l.kind == "norm") return 2 * out;
  if (l.kind == "relu" || l.kind == "add") return out;
  if (l.kind == "softmax") return 5 * out;
  if (l.kind == "linear") return 2 * Count(l.inner) * out;
  if (l.kind == "gap" || l.kind == "avg_pool" || l.kind == "max_pool") return in;
  if (l.kind == "topk") return 2 * in;
  if (l.kind == "attn_qk" || l.kind == "attn_mv") return 2 * Count(l.inner) * out;
  throw ConfigError("cost: unknown layer kind '" + l.kind + "' (layer " + l.name + ")");
}

Count flops_of(const ModelDescription& model) {
  Count total = 0;
  for (const auto& l : model.layers) total += layer_flops(l);
  return total;
}

Count params_of(const ModelDescription& model) {
  Count total = 0;
  for (const auto& l : model.layers) total += l.params;
  return total;
}

Count peak_activation(const ModelDescription& model) {
  Count peak = 0;
  for (const auto& l : model.layers) peak = std::max(peak, numel(l.in) + numel(l.out) + l.extra_resident);
  return peak;
}

ModelDescription describe_backbone(const BackboneSpec& spec, std::size_t first, std::size_t last,
                                   const Shape& input, bool with_pool, bool with_classifier) {
  if (input.size() != 4) throw DimensionError("cost: expected a C×T×H×W input shape, got " + shape_str(input));
  Builder b;
  b.model.name = "backbone";
  Shape cur = input;
  for (std::size_t s = first; s < last; ++s)
    for (std::size_t k = 0; k < spec.blocks_per_stage; ++k)
      cur = b.block(stage_name(s) + ".b" + std::to_string(k), cur, spec.widths.at(s), spec.kernel_a,
                    spec.kernel_b, k == 0 ? spec.stage_stride(s) : Triple{1, 1, 1});
  if (with_pool) {
    b.model.layers.push_back({"gap", "pool", cur, {cur[0]}});
    cur = {cur[0]};
  }
  if (with_classifier) {
    LayerDesc l{"linear", "classifier", cur, {spec.num_classes}};
    l.inner = cur[0];
    l.params = Count(cur[0]) * spec.num_classes + spec.num_classes;
    b.model.layers.push_back(l);
  }
  return b.model;
}

ModelDescription describe_sfc(const SfcConfig& cfg, const Shape& head) {
  const std::size_t c = head.at(0), t = head.at(1), h = head.at(2), w = head.at(3), p = h * w;
  const std::size_t ca = cfg.abs_channels(c);
  const std::size_t tq = cfg.query_length(t);
  Builder b;
  b.model.name = "sfc";
  Shape abs = head;
  if (cfg.kqv != KqvMode::RawKqv) {
    abs = b.block("abstraction.b0", abs, ca, {3, 1, 1}, {3, 1, 1}, {1, 1, 1});
    abs = b.block("abstraction.b1", abs, ca, {3, 1, 1}, {3, 1, 1}, {1, 1, 1});
  }
  const Shape pooled{abs[0], tq, h, w};
  const char* pool_kind = cfg.pooling == Pooling::TopK ? "topk" : (cfg.pooling == Pooling::Avg ? "avg_pool" : "max_pool");
  b.model.layers.push_back({pool_kind, "pool", abs, pooled});
  const Shape q = b.conv("theta_q", pooled, ca, cfg.kernel, {1, 1, 1});
  const Shape k = b.conv("theta_k", abs, ca, cfg.kernel, {1, 1, 1});
  const Shape v = cfg.kqv == KqvMode::AbsKqv ? abs : head;
  const std::size_t cv = v[0];
  const bool temporal = cfg.tokens == TokenMode::Temporal;
  const Shape m = temporal ? Shape{tq, t} : Shape{tq * p, t * p};
  LayerDesc qk{"attn_qk", "attention.qk", q, m};
  qk.inner = temporal ? ca * p : ca;
  qk.extra_resident = numel(k);
  b.model.layers.push_back(qk);
  b.elementwise("softmax", "attention.softmax", m);
  const Shape out{cv, tq, h, w};
  LayerDesc mv{"attn_mv", "attention.mv", m, out};
  mv.inner = temporal ? t : t * p;
  mv.extra_resident = numel(v);
  b.model.layers.push_back(mv);
  if (cfg.kqv == KqvMode::AbsKqv) b.conv("value_projection", out, c, {1, 1, 1}, {1, 1, 1});
  return b.model;
}

ModelDescription describe_sfc_pipeline(const BackboneSpec& spec, std::size_t split,
                                       const SfcConfig& cfg, const Shape& input) {
  ModelDescription head = describe_backbone(spec, 0, split, input, false, false);
  const Shape head_out = head.layers.back().out;
  ModelDescription sfc = describe_sfc(cfg, head_out);
  const Shape tail_in{head_out[0], cfg.query_length(head_out[1]), head_out[2], head_out[3]};
  ModelDescription tail = describe_backbone(spec, split, spec.num_stages(), tail_in, true, true);
  ModelDescription all;
  all.name = "sfc_pipeline";
  all.append(head);
  all.append(sfc);
  all.append(tail);
  return all;
}

CostReport memory_report(const ModelDescription& model, Count budget, Count invocations, Count resident) {
  if (budget == 0) throw ConfigError("cost: memory budget must be positive");
  CostReport r;
  r.flops_video = flops_of(model) * invocations;
  r.params = params_of(model);
  r.peak_activation_scalars = peak_activation(model) * resident;
  r.videos_per_batch =
      (budget <= r.params || r.peak_activation_scalars == 0) ? 0 : (budget - r.params) / r.peak_activation_scalars;
  return r;
}

CostReport crop_strategy_cost(const BackboneSpec& spec, const Shape& crop, std::size_t crops, Count budget) {
  const ModelDescription m = describe_backbone(spec, 0, spec.num_stages(), crop, true, true);
  return memory_report(m, budget, crops, crops);
}

CostReport sfc_strategy_cost(const BackboneSpec& spec, std::size_t split, const SfcConfig& cfg,
                             const Shape& input, Count budget) {
  return memory_report(describe_sfc_pipeline(spec, split, cfg, input), budget);
}

}  // namespace sfc
