#pragma once

// Run configuration: a JSON document whose every field has a default.
// Unknown keys are rejected with the line they appear on; dot-path overrides
// ("train.sfc.lr0=0.05") are applied after parsing.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfc/trainer.hpp"

namespace sfc {

struct RunConfig {
  BackboneSpec backbone;
  std::size_t split = 3;
  SfcConfig sfc;
  std::string strategy = "sfc";
  std::size_t clip_length = 16;
  std::size_t crop = 16;
  TrainConfig train_backbone;
  TrainConfig train_sfc;
  SynthSpec data;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  // Stage 1 also sees this many trimmed videos (motif covering
  // pretrain_motif_fraction of the timeline) drawn from a separate stream.
  std::size_t pretrain_size = 1000;
  double pretrain_motif_fraction = 1.0;
  std::string cache_dir;
  std::string backbone_checkpoint;
  std::string sfc_checkpoint;
  std::vector<std::string> bench_strategies{"single", "dense:10x3", "sfc"};
  std::vector<std::size_t> viz_videos{0, 1, 2, 3};
  std::uint64_t budget = kDefaultBudget;
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;

  nlohmann::json resolved;

  SynthSpec pretrain_data() const;  // fully merged document, as echoed
};

nlohmann::json default_config_json();

// `text` is the config file body (may be empty for all-defaults); `origin`
// names it in error messages.
RunConfig parse_run_config(const std::string& text, const std::string& origin,
                           const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig from_json(const nlohmann::json& merged);

// Line (1-based) of every object key, by dot path.
std::map<std::string, std::size_t> key_lines(const std::string& text);

}  // namespace sfc
