#include "sfc/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "sfc/errors.hpp"

namespace sfc {

using nlohmann::json;

namespace {

// "KtxKhxKw" with odd extents.
Triple parse_block_kernel(const std::string& text, const std::string& path) {
  Triple k{};
  char x1 = 0, x2 = 0;
  std::istringstream in(text);
  if (!(in >> k[0] >> x1 >> k[1] >> x2 >> k[2]) || x1 != 'x' || x2 != 'x' || in.peek() != EOF ||
      k[0] % 2 == 0 || k[1] % 2 == 0 || k[2] % 2 == 0)
    throw ConfigError(path + ": expected an odd kernel like 3x1x1, got '" + text + "'");
  return k;
}

json train_json(const TrainConfig& t) {
  return {{"lr0", t.lr0},
          {"milestones", t.milestones},
          {"epochs", t.epochs},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"grad_clip", t.grad_clip},
          {"batch_size", t.batch_size},
          {"aug_scale", t.aug_scale},
          {"aug_crop", t.aug_crop},
          {"aug_flip", t.aug_flip},
          {"calibrate", t.calibrate},
          {"calibration_videos", t.calibration_videos},
          {"cache_head", t.cache_head},
          {"val_strategy", t.val_strategy},
          {"val_every", t.val_every},
          {"val_limit", t.val_limit},
          {"verbose", t.verbose}};
}

TrainConfig default_backbone_training() {
  TrainConfig t;
  t.grad_clip = 1.0;
  return t;
}

TrainConfig default_sfc_training() {
  TrainConfig t;
  t.aug_crop = false;
  t.aug_flip = false;
  return t;
}

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return std::string(type_name(a)) == type_name(b);
}

std::string at_line(const std::map<std::string, std::size_t>& lines, const std::string& path,
                    const std::string& origin) {
  auto it = lines.find(path);
  return it == lines.end() ? origin : origin + ":" + std::to_string(it->second);
}

void merge(json& base, const json& user, const std::string& prefix,
           const std::map<std::string, std::size_t>& lines, const std::string& origin) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key()))
      throw ConfigError(at_line(lines, path, origin) + ": unknown key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it->is_object())
        throw ConfigError(at_line(lines, path, origin) + ": '" + path + "' must be an object");
      merge(slot, *it, path, lines, origin);
    } else {
      if (!same_kind(slot, *it))
        throw ConfigError(at_line(lines, path, origin) + ": '" + path + "' must be a " + type_name(slot) +
                          ", got " + type_name(*it));
      slot = *it;
    }
  }
}

void apply_override(json& doc, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + text + "': expected key.path=value");
  const std::string path = text.substr(0, eq), raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc;
  std::stringstream ss(path);
  std::string part, walked;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    walked += (i ? "." : "") + parts[i];
    if (!node->is_object() || !node->contains(parts[i]))
      throw ConfigError("override '" + text + "': unknown key '" + walked + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw ConfigError("override '" + text + "': '" + path + "' is a section");
  // Numbers given as text (e.g. tau=4/3) stay strings when the slot is a string.
  if (node->is_string() && !value.is_string()) value = raw;
  if (!same_kind(*node, value))
    throw ConfigError("override '" + text + "': '" + path + "' must be a " + type_name(*node));
  *node = value;
}

template <typename T>
T get(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + section + "." + key + "' has an invalid value");
  }
}

TrainConfig train_from(const json& j, const std::string& section, std::uint64_t seed, std::size_t clip,
                       std::size_t crop) {
  TrainConfig t;
  t.lr0 = get<double>(j, "lr0", section);
  t.milestones = get<std::vector<std::size_t>>(j, "milestones", section);
  t.epochs = get<std::size_t>(j, "epochs", section);
  t.momentum = get<double>(j, "momentum", section);
  t.weight_decay = get<double>(j, "weight_decay", section);
  t.grad_clip = get<double>(j, "grad_clip", section);
  t.batch_size = get<std::size_t>(j, "batch_size", section);
  t.aug_scale = get<bool>(j, "aug_scale", section);
  t.aug_crop = get<bool>(j, "aug_crop", section);
  t.aug_flip = get<bool>(j, "aug_flip", section);
  t.calibrate = get<bool>(j, "calibrate", section);
  t.calibration_videos = get<std::size_t>(j, "calibration_videos", section);
  t.cache_head = get<bool>(j, "cache_head", section);
  t.val_strategy = get<std::string>(j, "val_strategy", section);
  t.val_every = get<std::size_t>(j, "val_every", section);
  t.val_limit = get<std::size_t>(j, "val_limit", section);
  t.verbose = get<bool>(j, "verbose", section);
  t.clip_length = clip;
  t.crop = crop;
  t.seed = seed;
  if (t.lr0 <= 0.0) throw ConfigError("'" + section + ".lr0' must be positive");
  if (t.batch_size == 0) throw ConfigError("'" + section + ".batch_size' must be positive");
  if (t.momentum < 0.0 || t.momentum >= 1.0) throw ConfigError("'" + section + ".momentum' must be in [0, 1)");
  return t;
}

}  // namespace

json default_config_json() {
  RunConfig d;
  SfcConfig s;
  return {{"backbone",
           {{"widths", d.backbone.widths},
            {"blocks_per_stage", d.backbone.blocks_per_stage},
            {"in_channels", d.backbone.in_channels},
            {"kernel_a", kernel_str(d.backbone.kernel_a)},
            {"kernel_b", kernel_str(d.backbone.kernel_b)},
            {"split", d.split}}},
          {"sfc",
           {{"tau", s.tau.str()},
            {"pooling", to_string(s.pooling)},
            {"kqv", to_string(s.kqv)},
            {"kernel", kernel_str(s.kernel)},
            {"abstraction_channels", s.abstraction_channels},
            {"tokens", to_string(s.tokens)}}},
          {"strategy", {{"name", d.strategy}, {"clip_length", d.clip_length}, {"crop", d.crop},
                        {"bench", d.bench_strategies}, {"viz_videos", d.viz_videos}, {"budget", d.budget}}},
          {"train", {{"backbone", train_json(default_backbone_training())}, {"sfc", train_json(default_sfc_training())}}},
          {"data",
           {{"num_classes", d.data.num_classes},
            {"t_total", d.data.t_total},
            {"height", d.data.height},
            {"width", d.data.width},
            {"motif_fraction", d.data.motif_fraction},
            {"noise", d.data.noise},
            {"distractor_prob", d.data.distractor_prob},
            {"distractor_amplitude", d.data.distractor_amplitude},
            {"wavelength", d.data.wavelength},
            {"speed", d.data.speed},
            {"train_size", d.train_size},
            {"pretrain_size", d.pretrain_size},
            {"pretrain_motif_fraction", d.pretrain_motif_fraction},
            {"val_size", d.val_size},
            {"cache_dir", d.cache_dir}}},
          {"checkpoint", {{"backbone", ""}, {"sfc", ""}}},
          {"output_dir", d.output_dir},
          {"seed", d.seed}};
}

std::map<std::string, std::size_t> key_lines(const std::string& text) {
  std::map<std::string, std::size_t> out;
  // Stack of (is_object, current key) frames.
  std::vector<std::pair<bool, std::string>> stack;
  std::size_t line = 1;
  bool expect_key = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
    } else if (c == '"') {
      std::string s;
      std::size_t j = i + 1;
      for (; j < text.size() && text[j] != '"'; ++j) {
        if (text[j] == '\\' && j + 1 < text.size()) ++j;
        s += text[j];
      }
      if (expect_key && !stack.empty() && stack.back().first) {
        stack.back().second = s;
        std::string path;
        for (const auto& [is_obj, key] : stack)
          if (is_obj) path += (path.empty() ? "" : ".") + key;
        out.emplace(path, line);
        expect_key = false;
      }
      i = j;
    } else if (c == '{') {
      stack.emplace_back(true, "");
      expect_key = true;
    } else if (c == '[') {
      stack.emplace_back(false, "");
    } else if (c == '}' || c == ']') {
      if (!stack.empty()) stack.pop_back();
    } else if (c == ',') {
      expect_key = !stack.empty() && stack.back().first;
    }
  }
  return out;
}

SynthSpec RunConfig::pretrain_data() const {
  SynthSpec s = data;
  s.motif_fraction = pretrain_motif_fraction;
  s.seed = data.seed + 0x9e3779b9ULL;
  return s;
}

RunConfig from_json(const json& m) {
  RunConfig r;
  r.resolved = m;
  const json& b = m.at("backbone");
  r.backbone.widths = get<std::vector<std::size_t>>(b, "widths", "backbone");
  r.backbone.blocks_per_stage = get<std::size_t>(b, "blocks_per_stage", "backbone");
  r.backbone.in_channels = get<std::size_t>(b, "in_channels", "backbone");
  r.backbone.kernel_a = parse_block_kernel(get<std::string>(b, "kernel_a", "backbone"), "backbone.kernel_a");
  r.backbone.kernel_b = parse_block_kernel(get<std::string>(b, "kernel_b", "backbone"), "backbone.kernel_b");
  r.split = get<std::size_t>(b, "split", "backbone");

  const json& s = m.at("sfc");
  r.sfc.tau = Ratio::parse(get<std::string>(s, "tau", "sfc"));
  r.sfc.pooling = parse_pooling(get<std::string>(s, "pooling", "sfc"));
  r.sfc.kqv = parse_kqv(get<std::string>(s, "kqv", "sfc"));
  r.sfc.kernel = parse_kernel(get<std::string>(s, "kernel", "sfc"));
  r.sfc.abstraction_channels = get<std::size_t>(s, "abstraction_channels", "sfc");
  r.sfc.tokens = parse_tokens(get<std::string>(s, "tokens", "sfc"));

  const json& st = m.at("strategy");
  r.strategy = get<std::string>(st, "name", "strategy");
  r.clip_length = get<std::size_t>(st, "clip_length", "strategy");
  r.crop = get<std::size_t>(st, "crop", "strategy");
  r.bench_strategies = get<std::vector<std::string>>(st, "bench", "strategy");
  r.viz_videos = get<std::vector<std::size_t>>(st, "viz_videos", "strategy");
  r.budget = get<std::uint64_t>(st, "budget", "strategy");

  r.seed = m.at("seed").get<std::uint64_t>();
  r.output_dir = m.at("output_dir").get<std::string>();

  const json& d = m.at("data");
  r.data.num_classes = get<std::size_t>(d, "num_classes", "data");
  r.data.t_total = get<std::size_t>(d, "t_total", "data");
  r.data.height = get<std::size_t>(d, "height", "data");
  r.data.width = get<std::size_t>(d, "width", "data");
  r.data.motif_fraction = get<double>(d, "motif_fraction", "data");
  r.data.noise = get<double>(d, "noise", "data");
  r.data.distractor_prob = get<double>(d, "distractor_prob", "data");
  r.data.distractor_amplitude = get<double>(d, "distractor_amplitude", "data");
  r.data.wavelength = get<double>(d, "wavelength", "data");
  r.data.speed = get<double>(d, "speed", "data");
  r.data.seed = r.seed;
  r.train_size = get<std::size_t>(d, "train_size", "data");
  r.val_size = get<std::size_t>(d, "val_size", "data");
  r.pretrain_size = get<std::size_t>(d, "pretrain_size", "data");
  r.pretrain_motif_fraction = get<double>(d, "pretrain_motif_fraction", "data");
  r.cache_dir = get<std::string>(d, "cache_dir", "data");
  r.backbone.num_classes = r.data.num_classes;

  r.train_backbone = train_from(m.at("train").at("backbone"), "train.backbone", r.seed, r.clip_length, r.crop);
  r.train_sfc = train_from(m.at("train").at("sfc"), "train.sfc", r.seed + 1, r.clip_length, r.crop);

  const json& c = m.at("checkpoint");
  r.backbone_checkpoint = get<std::string>(c, "backbone", "checkpoint");
  r.sfc_checkpoint = get<std::string>(c, "sfc", "checkpoint");

  r.backbone.validate();
  r.data.validate();
  if (r.split < 1 || r.split >= r.backbone.num_stages())
    throw ConfigError("'backbone.split' must be in [1, " + std::to_string(r.backbone.num_stages() - 1) + "]");
  if (r.crop % r.backbone.spatial_divisor() != 0)
    throw ConfigError("'strategy.crop' must be divisible by " + std::to_string(r.backbone.spatial_divisor()));
  r.pretrain_data().validate();
  if (r.train_size == 0 || r.val_size == 0) throw ConfigError("'data.train_size' and 'data.val_size' must be positive");
  if (r.budget == 0) throw ConfigError("'strategy.budget' must be positive");
  parse_strategy(r.strategy, r.clip_length, r.crop);
  for (const auto& name : r.bench_strategies) parse_strategy(name, r.clip_length, r.crop);
  return r;
}

RunConfig parse_run_config(const std::string& text, const std::string& origin,
                           const std::vector<std::string>& overrides) {
  json merged = default_config_json();
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    json user;
    try {
      user = json::parse(text);
    } catch (const json::parse_error& e) {
      const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
      const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto ? upto - 1 : 0), '\n');
      throw ConfigError(origin + ":" + std::to_string(line) + ": JSON syntax error: " + e.what());
    }
    if (!user.is_object()) throw ConfigError(origin + ":1: top level must be an object");
    merge(merged, user, "", key_lines(text), origin);
  }
  for (const auto& o : overrides) apply_override(merged, o);
  return from_json(merged);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_run_config(text, path.empty() ? "<defaults>" : path, overrides);
}

}  // namespace sfc
