#pragma once

// Selective feature compression between a frozen head and tail.
//
//   F_abs = abstraction(F_head)
//   q     = θ_q(pool(F_abs))      (T/τ timesteps)
//   k     = θ_k(F_abs)            (T timesteps)
//   M     = softmax(qᵀ·k)         rows over keys
//   out   = M · v,  v = F_head    (no value transform)

#include <optional>
#include <string>
#include <vector>

#include "sfc/nnops.hpp"

namespace sfc {

// Compression ratio as an exact fraction num/den ≥ 1.
struct Ratio {
  std::size_t num = 2, den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  // Number of kept timesteps T·den/num; ConfigError when not an integer.
  std::size_t keep_count(std::size_t t) const;
  std::string str() const;
  static Ratio parse(const std::string& text);  // "2", "4/3"
  bool operator==(const Ratio&) const = default;
};

enum class Pooling { TopK, Avg, Max };
enum class KqvMode { AbsKqRawV, RawKqv, AbsKqv };
// Temporal: one token per timestep (all channels and positions concatenated).
// Spatiotemporal: one token per (t, h, w) position.
enum class TokenMode { Temporal, Spatiotemporal };

std::string to_string(Pooling p);
std::string to_string(KqvMode m);
std::string to_string(TokenMode m);
Pooling parse_pooling(const std::string& s);
KqvMode parse_kqv(const std::string& s);
TokenMode parse_tokens(const std::string& s);
Triple parse_kernel(const std::string& s);  // "3x1x1"
std::string kernel_str(const Triple& k);

struct SfcConfig {
  Ratio tau{2, 1};
  Pooling pooling = Pooling::TopK;
  KqvMode kqv = KqvMode::AbsKqRawV;
  Triple kernel{3, 1, 1};
  std::size_t abstraction_channels = 0;  // 0 → C/2
  TokenMode tokens = TokenMode::Temporal;

  std::size_t abs_channels(std::size_t c) const;
  // Validates τ against T and the pooling kind; returns the query length.
  std::size_t query_length(std::size_t t) const;
};

struct SfcWeights {
  std::vector<ResidualBlock> abstraction;  // empty in raw_kqv mode
  Conv3dLayer theta_q, theta_k;
  std::optional<Conv3dLayer> value_projection;  // abs_kqv only
  std::size_t channels = 0;                     // head channel count C
};

// `positions` is the head's H·W, used to scale θ so initial logits are O(1).
SfcWeights init_sfc(const SfcConfig& cfg, std::size_t channels, std::size_t positions,
                    std::mt19937_64& rng);
// Fixes abstraction norm statistics from a batch of head features.
void calibrate_sfc(SfcWeights& w, const Tensor& head_batch);

std::vector<NamedParam> sfc_params(const SfcWeights& w);
std::uint64_t sfc_hash(const SfcWeights& w);
void save_sfc(const std::string& dir, const SfcConfig& cfg, const SfcWeights& w);
void load_sfc(const std::string& dir, SfcConfig& cfg, SfcWeights& w);

struct SfcResult {
  Tensor output;                    // C×(T/τ)×H×W
  Tensor attention;                 // M
  std::vector<std::size_t> query_times;  // TopK indices, or window starts
  std::size_t t_query = 0, t_key = 0, positions = 0;
};

// One video, F_head: C×T×H×W. `forced_attention`, when given, replaces
// softmax(qᵀk) (test hook; must match M's shape).
SfcResult sfc_forward(const Tensor& f_head, const SfcConfig& cfg, const SfcWeights& w,
                      const Tensor* forced_attention = nullptr);
// Same over a batch N×C×T×H×W, returning the stacked 5-D output.
Tensor sfc_forward_batch(const Tensor& f_head, const SfcConfig& cfg, const SfcWeights& w,
                         std::vector<SfcResult>* details = nullptr);

// (T/τ)×T map: mean over query positions, sum over key positions.
Tensor temporal_marginal(const SfcResult& r, TokenMode mode);

}  // namespace sfc
