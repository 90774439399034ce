#include "sfc/selective_compression.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "sfc/errors.hpp"

namespace sfc {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t Ratio::keep_count(std::size_t t) const {
  if (den == 0 || num < den) throw ConfigError("tau must be a ratio >= 1, got " + str());
  if ((t * den) % num != 0)
    throw ConfigError("tau=" + str() + " does not divide T=" + std::to_string(t) +
                      " (T*" + std::to_string(den) + "/" + std::to_string(num) +
                      " is not an integer); pad or re-chunk the temporal axis");
  return t * den / num;
}

std::string Ratio::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

Ratio Ratio::parse(const std::string& text) {
  Ratio r;
  try {
    const auto slash = text.find('/');
    std::size_t used = 0;
    if (slash == std::string::npos) {
      r.num = std::stoul(text, &used);
      r.den = 1;
      if (used != text.size()) throw std::invalid_argument(text);
    } else {
      r.num = std::stoul(text.substr(0, slash), &used);
      if (used != slash) throw std::invalid_argument(text);
      const std::string d = text.substr(slash + 1);
      r.den = std::stoul(d, &used);
      if (used != d.size()) throw std::invalid_argument(text);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("invalid ratio '" + text + "', expected N or N/D");
  }
  if (r.den == 0 || r.num < r.den) throw ConfigError("tau must be >= 1, got '" + text + "'");
  const std::size_t g = std::gcd(r.num, r.den);
  r.num /= g;
  r.den /= g;
  return r;
}

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::TopK: return "topk";
    case Pooling::Avg: return "avg";
    case Pooling::Max: return "max";
  }
  return "?";
}

std::string to_string(KqvMode m) {
  switch (m) {
    case KqvMode::AbsKqRawV: return "abs_kq_raw_v";
    case KqvMode::RawKqv: return "raw_kqv";
    case KqvMode::AbsKqv: return "abs_kqv";
  }
  return "?";
}

std::string to_string(TokenMode m) { return m == TokenMode::Temporal ? "temporal" : "spatiotemporal"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "topk") return Pooling::TopK;
  if (s == "avg") return Pooling::Avg;
  if (s == "max") return Pooling::Max;
  throw ConfigError("unknown pooling '" + s + "' (topk|avg|max)");
}

KqvMode parse_kqv(const std::string& s) {
  if (s == "abs_kq_raw_v") return KqvMode::AbsKqRawV;
  if (s == "raw_kqv") return KqvMode::RawKqv;
  if (s == "abs_kqv") return KqvMode::AbsKqv;
  throw ConfigError("unknown kqv mode '" + s + "' (abs_kq_raw_v|raw_kqv|abs_kqv)");
}

TokenMode parse_tokens(const std::string& s) {
  if (s == "temporal") return TokenMode::Temporal;
  if (s == "spatiotemporal") return TokenMode::Spatiotemporal;
  throw ConfigError("unknown token mode '" + s + "' (temporal|spatiotemporal)");
}

Triple parse_kernel(const std::string& s) {
  if (s == "3x1x1") return {3, 1, 1};
  if (s == "1x1x1") return {1, 1, 1};
  if (s == "3x3x3") return {3, 3, 3};
  throw ConfigError("unsupported kernel '" + s + "' (3x1x1|1x1x1|3x3x3)");
}

std::string kernel_str(const Triple& k) {
  return std::to_string(k[0]) + "x" + std::to_string(k[1]) + "x" + std::to_string(k[2]);
}

std::size_t SfcConfig::abs_channels(std::size_t c) const {
  const std::size_t a = abstraction_channels ? abstraction_channels : c / 2;
  if (a == 0) throw ConfigError("abstraction channels must be >= 1");
  return a;
}

std::size_t SfcConfig::query_length(std::size_t t) const {
  const std::size_t keep = tau.keep_count(t);
  if (pooling != Pooling::TopK && tau.den != 1)
    throw ConfigError(to_string(pooling) + " pooling needs an integer tau, got " + tau.str());
  return keep;
}

SfcWeights init_sfc(const SfcConfig& cfg, std::size_t channels, std::size_t positions,
                    std::mt19937_64& rng) {
  SfcWeights w;
  w.channels = channels;
  const std::size_t ca = cfg.abs_channels(channels);
  std::size_t qk_in = channels;
  if (cfg.kqv != KqvMode::RawKqv) {
    w.abstraction.push_back(ResidualBlock::make(channels, ca, {3, 1, 1}, {3, 1, 1}, {1, 1, 1}, rng));
    w.abstraction.push_back(ResidualBlock::make(ca, ca, {3, 1, 1}, {3, 1, 1}, {1, 1, 1}, rng));
    qk_in = ca;
  }
  const double d = static_cast<double>(cfg.tokens == TokenMode::Temporal ? ca * positions : ca);
  // He init has std sqrt(2/fan_in); this gives 1/sqrt(fan_in)·d^(-1/4).
  const double gain = std::pow(d, -0.25) / std::sqrt(2.0);
  w.theta_q = Conv3dLayer::make(qk_in, ca, cfg.kernel, {1, 1, 1}, rng, gain);
  w.theta_k = Conv3dLayer::make(qk_in, ca, cfg.kernel, {1, 1, 1}, rng, gain);
  if (cfg.kqv == KqvMode::AbsKqv)
    w.value_projection = Conv3dLayer::make(ca, channels, {1, 1, 1}, {1, 1, 1}, rng);
  return w;
}

void calibrate_sfc(SfcWeights& w, const Tensor& head_batch) {
  Tensor x = head_batch;
  for (auto& b : w.abstraction) x = calibrate_block(x, b);
}

std::vector<NamedParam> sfc_params(const SfcWeights& w) {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < w.abstraction.size(); ++i)
    collect_params(w.abstraction[i], "abstraction.b" + std::to_string(i), out);
  collect_params(w.theta_q, "theta_q", out);
  collect_params(w.theta_k, "theta_k", out);
  if (w.value_projection) collect_params(*w.value_projection, "value_projection", out);
  return out;
}

namespace {

std::vector<std::pair<std::string, const FrozenNorm*>> sfc_norms(const SfcWeights& w) {
  std::vector<std::pair<std::string, const FrozenNorm*>> out;
  for (std::size_t i = 0; i < w.abstraction.size(); ++i)
    collect_norms(w.abstraction[i], "abstraction.b" + std::to_string(i), out);
  return out;
}

json config_json(const SfcConfig& cfg) {
  return {{"tau", cfg.tau.str()},
          {"pooling", to_string(cfg.pooling)},
          {"kqv", to_string(cfg.kqv)},
          {"kernel", kernel_str(cfg.kernel)},
          {"abstraction_channels", cfg.abstraction_channels},
          {"tokens", to_string(cfg.tokens)}};
}

// Sample `i` of a 5-D tensor as a 4-D tensor; differentiable.
Tensor select_sample(const Tensor& x, std::size_t i) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = shape_numel(s);
  Tensor out(s, std::vector<double>(x.data().begin() + i * n, x.data().begin() + (i + 1) * n));
  if (should_record({&x})) {
    record_op("select", {x}, out, [x, i, n](std::span<const double> g) {
      auto gx = grad_buffer(x);
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j];
    });
  }
  return out;
}

// C×T×H×W → T×(C·H·W)
Tensor time_tokens(const Tensor& x) {
  return reshape(permute(x, {1, 0, 2, 3}), {x.size(1), x.size(0) * x.size(2) * x.size(3)});
}

}  // namespace

std::uint64_t sfc_hash(const SfcWeights& w) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : sfc_params(w)) h = content_hash(p.tensor, h);
  for (const auto& [name, n] : sfc_norms(w)) h = content_hash(pack_norm(*n), h);
  return h;
}

void save_sfc(const std::string& dir, const SfcConfig& cfg, const SfcWeights& w) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "sfc-v1";
  manifest["config"] = config_json(cfg);
  manifest["channels"] = w.channels;
  json names = json::array();
  for (const auto& p : sfc_params(w)) {
    save_tensor((fs::path(dir) / (p.name + ".bin")).string(), p.tensor);
    names.push_back(p.name);
  }
  manifest["params"] = names;
  json norms = json::array();
  for (const auto& [name, n] : sfc_norms(w)) {
    save_tensor((fs::path(dir) / (name + ".bin")).string(), pack_norm(*n));
    norms.push_back(name);
  }
  manifest["norms"] = norms;
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << '\n';
}

void load_sfc(const std::string& dir, SfcConfig& cfg, SfcWeights& w) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw ConfigError("sfc checkpoint: cannot open " + (fs::path(dir) / "manifest.json").string());
  std::size_t channels = 0;
  try {
    json m = json::parse(in);
    const json& c = m.at("config");
    cfg.tau = Ratio::parse(c.at("tau").get<std::string>());
    cfg.pooling = parse_pooling(c.at("pooling").get<std::string>());
    cfg.kqv = parse_kqv(c.at("kqv").get<std::string>());
    cfg.kernel = parse_kernel(c.at("kernel").get<std::string>());
    cfg.abstraction_channels = c.at("abstraction_channels").get<std::size_t>();
    cfg.tokens = parse_tokens(c.at("tokens").get<std::string>());
    channels = m.at("channels").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError("sfc checkpoint manifest " + dir + ": " + e.what());
  }
  std::mt19937_64 rng(0);
  w = init_sfc(cfg, channels, 1, rng);
  for (auto& p : sfc_params(w)) {
    Tensor t = load_tensor((fs::path(dir) / (p.name + ".bin")).string());
    if (t.shape() != p.tensor.shape())
      throw DimensionError("sfc checkpoint: " + p.name + " has shape " + shape_str(t.shape()));
    std::copy(t.data().begin(), t.data().end(), p.tensor.mutable_data().begin());
  }
  for (std::size_t i = 0; i < w.abstraction.size(); ++i) {
    std::vector<std::pair<std::string, FrozenNorm*>> norms;
    collect_norms(w.abstraction[i], "abstraction.b" + std::to_string(i), norms);
    for (auto& [name, n] : norms) *n = unpack_norm(load_tensor((fs::path(dir) / (name + ".bin")).string()));
  }
}

SfcResult sfc_forward(const Tensor& f_head, const SfcConfig& cfg, const SfcWeights& w,
                      const Tensor* forced_attention) {
  if (f_head.dim() != 4)
    throw DimensionError("sfc_forward: expected C×T×H×W, got " + shape_str(f_head.shape()));
  const std::size_t c = f_head.size(0), t = f_head.size(1), h = f_head.size(2), wd = f_head.size(3);
  if (c != w.channels)
    throw DimensionError("sfc_forward: input has " + std::to_string(c) + " channels, weights expect " +
                         std::to_string(w.channels));
  const std::size_t tq = cfg.query_length(t);
  const std::size_t p = h * wd;

  Tensor f_abs = f_head;
  for (const auto& b : w.abstraction) f_abs = residual_block(f_abs, b);

  SfcResult r;
  r.t_query = tq;
  r.t_key = t;
  r.positions = p;
  Tensor pooled;
  switch (cfg.pooling) {
    case Pooling::TopK: {
      auto tk = topk_pool(f_abs, tq);
      pooled = tk.output;
      r.query_times = std::move(tk.indices);
      break;
    }
    case Pooling::Avg:
    case Pooling::Max: {
      const std::size_t win = cfg.tau.num;
      pooled = cfg.pooling == Pooling::Avg ? avg_pool_time(f_abs, win) : max_pool_time(f_abs, win);
      for (std::size_t j = 0; j < tq; ++j) r.query_times.push_back(j * win);
      break;
    }
  }
  Tensor q = conv3d(pooled, w.theta_q);
  Tensor k = conv3d(f_abs, w.theta_k);
  const Tensor& v = cfg.kqv == KqvMode::AbsKqv ? f_abs : f_head;
  const std::size_t cv = v.size(0);
  const std::size_t ck = q.size(0);

  Tensor logits, values;
  if (cfg.tokens == TokenMode::Temporal) {
    logits = matmul(time_tokens(q), transpose(time_tokens(k)));  // Tq×T
    values = time_tokens(v);                                      // T×(Cv·P)
  } else {
    logits = matmul(transpose(reshape(q, {ck, tq * p})), reshape(k, {ck, t * p}));
    values = transpose(reshape(v, {cv, t * p}));  // (T·P)×Cv
  }
  Tensor m;
  if (forced_attention) {
    if (forced_attention->shape() != logits.shape())
      throw DimensionError("sfc_forward: forced attention " + shape_str(forced_attention->shape()) +
                           " vs expected " + shape_str(logits.shape()));
    m = *forced_attention;
  } else {
    m = softmax(logits);
  }
  Tensor mixed = matmul(m, values);
  Tensor out;
  if (cfg.tokens == TokenMode::Temporal)
    out = permute(reshape(mixed, {tq, cv, h, wd}), {1, 0, 2, 3});
  else
    out = reshape(transpose(mixed), {cv, tq, h, wd});
  if (w.value_projection) out = conv3d(out, *w.value_projection);
  r.output = out;
  r.attention = m;
  return r;
}

Tensor sfc_forward_batch(const Tensor& f_head, const SfcConfig& cfg, const SfcWeights& w,
                         std::vector<SfcResult>* details) {
  if (f_head.dim() != 5)
    throw DimensionError("sfc_forward_batch: expected N×C×T×H×W, got " + shape_str(f_head.shape()));
  std::vector<Tensor> outs;
  for (std::size_t i = 0; i < f_head.size(0); ++i) {
    SfcResult r = sfc_forward(select_sample(f_head, i), cfg, w);
    Shape s = r.output.shape();
    s.insert(s.begin(), 1);
    outs.push_back(reshape(r.output, s));
    if (details) details->push_back(std::move(r));
  }
  return outs.size() == 1 ? outs.front() : concat(outs, 0);
}

Tensor temporal_marginal(const SfcResult& r, TokenMode mode) {
  if (mode == TokenMode::Temporal) return r.attention.detach();
  const std::size_t tq = r.t_query, t = r.t_key, p = r.positions;
  Tensor mt({tq, t});
  auto out = mt.mutable_data();
  auto m = r.attention.data();
  const double inv = 1.0 / static_cast<double>(p);
  for (std::size_t j = 0; j < tq; ++j)
    for (std::size_t qp = 0; qp < p; ++qp) {
      const double* row = m.data() + (j * p + qp) * (t * p);
      for (std::size_t i = 0; i < t; ++i) {
        double s = 0.0;
        for (std::size_t kp = 0; kp < p; ++kp) s += row[i * p + kp];
        out[j * t + i] += s * inv;
      }
    }
  return mt;
}

}  // namespace sfc
