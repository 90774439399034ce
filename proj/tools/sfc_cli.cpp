// sfc: train, evaluate, benchmark and inspect selective feature compression
// on synthetic videos.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sfc/config.hpp"
#include "sfc/errors.hpp"

namespace fs = std::filesystem;
using namespace sfc;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::string strategy, data_cache, out;
  std::optional<std::uint64_t> seed;
  std::string axis = "tau";
};

RunConfig resolve(const CommonFlags& f) {
  std::vector<std::string> o = f.overrides;
  if (!f.strategy.empty()) o.push_back("strategy.name=\"" + f.strategy + "\"");
  if (!f.data_cache.empty()) o.push_back("data.cache_dir=\"" + f.data_cache + "\"");
  if (f.seed) o.push_back("seed=" + std::to_string(*f.seed));
  if (!f.out.empty()) o.push_back("output_dir=\"" + f.out + "\"");
  RunConfig cfg = load_run_config(f.config, o);
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "config.echo.json") << cfg.resolved.dump(2) << '\n';
  return cfg;
}

std::vector<SynthSample> load_split(const RunConfig& cfg, Split split) {
  const std::size_t n = split == Split::Train ? cfg.train_size : cfg.val_size;
  return cached_dataset(cfg.data, n, split, cfg.cache_dir);
}

FlipMap flip_map(const RunConfig& cfg) {
  const std::size_t k = cfg.data.num_classes;
  return [k](std::size_t l) { return flipped_label(l, k); };
}

std::string backbone_dir(const RunConfig& cfg) {
  return cfg.backbone_checkpoint.empty() ? (fs::path(cfg.output_dir) / "backbone").string() : cfg.backbone_checkpoint;
}

std::string sfc_dir(const RunConfig& cfg) {
  return cfg.sfc_checkpoint.empty() ? (fs::path(cfg.output_dir) / "sfc").string() : cfg.sfc_checkpoint;
}

void load_checked_backbone(const RunConfig& cfg, BackboneSpec& spec, BackboneWeights& w) {
  load_backbone(backbone_dir(cfg), spec, w);
  if (spec.num_classes != cfg.data.num_classes)
    throw ConfigError("backbone checkpoint has " + std::to_string(spec.num_classes) + " classes, data has " +
                      std::to_string(cfg.data.num_classes));
}

std::size_t head_positions(const RunConfig& cfg, std::size_t split) {
  const std::size_t side = cfg.crop >> (split - 1);
  return side * side;
}

void write_cost_header(std::ostream& out) { out << "strategy,flops_video,params,peak,videos_per_batch,top1\n"; }

void write_cost_row(std::ostream& out, const std::string& name, const CostReport& c, double top1) {
  out << name << ',' << c.flops_video << ',' << c.params << ',' << c.peak_activation_scalars << ','
      << c.videos_per_batch << ',';
  if (top1 >= 0) out << std::setprecision(6) << top1;
  out << '\n';
}

int cmd_train_backbone(const RunConfig& cfg) {
  auto train = load_split(cfg, Split::Train);
  if (cfg.pretrain_size > 0) {
    auto trimmed = cached_dataset(cfg.pretrain_data(), cfg.pretrain_size, Split::Train, cfg.cache_dir);
    train.insert(train.end(), trimmed.begin(), trimmed.end());
  }
  auto val = load_split(cfg, Split::Val);
  std::mt19937_64 rng(cfg.seed);
  BackboneWeights w = init_backbone(cfg.backbone, rng);
  auto log = train_backbone(cfg.train_backbone, cfg.backbone, w, train, val, flip_map(cfg));
  save_backbone((fs::path(cfg.output_dir) / "backbone").string(), cfg.backbone, w);
  write_metrics_csv((fs::path(cfg.output_dir) / "metrics.csv").string(), log);
  std::cout << "backbone saved to " << (fs::path(cfg.output_dir) / "backbone").string() << '\n';
  return 0;
}

int cmd_train_sfc(const RunConfig& cfg) {
  BackboneSpec spec;
  BackboneWeights bw;
  load_checked_backbone(cfg, spec, bw);
  auto train = load_split(cfg, Split::Train);
  auto val = load_split(cfg, Split::Val);
  SplitBackbone split(spec, bw, cfg.split);
  std::mt19937_64 rng(cfg.seed + 17);
  SfcWeights sw = init_sfc(cfg.sfc, split.head_channels(), head_positions(cfg, cfg.split), rng);
  auto log = train_sfc(cfg.train_sfc, split, cfg.sfc, sw, train, val, flip_map(cfg));
  save_sfc((fs::path(cfg.output_dir) / "sfc").string(), cfg.sfc, sw);
  write_metrics_csv((fs::path(cfg.output_dir) / "metrics.csv").string(), log);
  std::cout << "sfc saved to " << (fs::path(cfg.output_dir) / "sfc").string() << '\n';
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  BackboneSpec spec;
  BackboneWeights bw;
  load_checked_backbone(cfg, spec, bw);
  const Strategy strategy = parse_strategy(cfg.strategy, cfg.clip_length, cfg.crop);
  SfcConfig sc = cfg.sfc;
  SfcWeights sw;
  Model model{&spec, &bw, cfg.split};
  if (strategy.uses_sfc()) {
    load_sfc(sfc_dir(cfg), sc, sw);
    model.sfc_config = &sc;
    model.sfc = &sw;
  }
  auto val = load_split(cfg, Split::Val);
  EvalResult r = evaluate(model, strategy, val);
  std::ofstream out(fs::path(cfg.output_dir) / "cost.csv");
  write_cost_header(out);
  write_cost_row(out, strategy.str(), r.cost, r.accuracy.top1);
  std::cout << strategy.str() << " top1 " << r.accuracy.top1 << " top5 " << r.accuracy.top5 << " flops "
            << r.cost.flops_video << '\n';
  return 0;
}

int cmd_bench(const RunConfig& cfg) {
  BackboneSpec spec = cfg.backbone;
  BackboneWeights bw;
  const bool have_backbone = fs::exists(fs::path(backbone_dir(cfg)) / "manifest.json");
  std::mt19937_64 rng(cfg.seed + 17);
  if (have_backbone)
    load_checked_backbone(cfg, spec, bw);
  else
    bw = init_backbone(spec, rng);
  SfcConfig sc = cfg.sfc;
  SfcWeights sw;
  const bool have_sfc = fs::exists(fs::path(sfc_dir(cfg)) / "manifest.json");
  if (have_sfc) {
    load_sfc(sfc_dir(cfg), sc, sw);
  } else {
    // cost only depends on shapes; top1 stays blank
    SplitBackbone split(spec, bw, cfg.split);
    sw = init_sfc(sc, split.head_channels(), head_positions(cfg, cfg.split), rng);
  }
  std::vector<SynthSample> val;
  if (have_backbone) val = load_split(cfg, Split::Val);
  std::ofstream out(fs::path(cfg.output_dir) / "cost.csv");
  write_cost_header(out);
  const Shape video{cfg.backbone.in_channels, cfg.data.t_total, cfg.data.height, cfg.data.width};
  for (const auto& name : cfg.bench_strategies) {
    const Strategy s = parse_strategy(name, cfg.clip_length, cfg.crop);
    Model model{&spec, &bw, cfg.split, &sc, &sw};
    CostReport c = strategy_cost(s, model, video, cfg.budget);
    double top1 = -1;
    if (have_backbone && (!s.uses_sfc() || have_sfc)) top1 = evaluate(model, s, val).accuracy.top1;
    write_cost_row(out, s.str(), c, top1);
    write_cost_row(std::cout, s.str(), c, top1);
  }
  return 0;
}

struct AblationSetting {
  std::string value;
  SfcConfig sfc;
  std::size_t split;
};

std::vector<AblationSetting> ablation_settings(const RunConfig& cfg, const std::string& axis) {
  std::vector<AblationSetting> out;
  auto add = [&](const std::string& v, auto mutate) {
    AblationSetting s{v, cfg.sfc, cfg.split};
    mutate(s);
    out.push_back(s);
  };
  if (axis == "tau") {
    for (std::string t : {"1", "4/3", "2", "4"}) add(t, [&](auto& s) { s.sfc.tau = Ratio::parse(t); });
  } else if (axis == "split") {
    for (std::size_t k = 1; k < cfg.backbone.num_stages(); ++k) add(std::to_string(k), [&](auto& s) { s.split = k; });
  } else if (axis == "pooling") {
    for (std::string p : {"topk", "avg", "max"}) add(p, [&](auto& s) { s.sfc.pooling = parse_pooling(p); });
  } else if (axis == "kqv") {
    for (std::string m : {"raw_kqv", "abs_kqv", "abs_kq_raw_v"}) add(m, [&](auto& s) { s.sfc.kqv = parse_kqv(m); });
  } else if (axis == "kernel") {
    for (std::string k : {"1x1x1", "3x3x3", "3x1x1"}) add(k, [&](auto& s) { s.sfc.kernel = parse_kernel(k); });
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (tau|split|pooling|kqv|kernel)");
  }
  return out;
}

int cmd_ablate(const RunConfig& cfg, const std::string& axis) {
  auto settings = ablation_settings(cfg, axis);
  BackboneSpec spec;
  BackboneWeights bw;
  load_checked_backbone(cfg, spec, bw);
  auto train = load_split(cfg, Split::Train);
  auto val = load_split(cfg, Split::Val);
  Strategy whole = parse_strategy("sfc", cfg.clip_length, cfg.crop);
  const Shape video{spec.in_channels, cfg.data.t_total, cfg.data.height, cfg.data.width};
  const std::string path = (fs::path(cfg.output_dir) / ("ablate_" + axis + ".csv")).string();
  std::ofstream out(path);
  out << "axis,value,flops_video,params,peak,videos_per_batch,top1,top5\n";
  for (const auto& s : settings) {
    SplitBackbone split(spec, bw, s.split);
    std::mt19937_64 rng(cfg.seed + 17);
    SfcWeights sw = init_sfc(s.sfc, split.head_channels(), head_positions(cfg, s.split), rng);
    train_sfc(cfg.train_sfc, split, s.sfc, sw, train, {}, flip_map(cfg));
    Model model{&spec, &bw, s.split, &s.sfc, &sw};
    EvalResult r = evaluate(model, whole, val);
    CostReport c = strategy_cost(whole, model, video, cfg.budget);
    out << axis << ',' << s.value << ',' << c.flops_video << ',' << c.params << ',' << c.peak_activation_scalars
        << ',' << c.videos_per_batch << ',' << r.accuracy.top1 << ',' << r.accuracy.top5 << '\n';
    std::cout << axis << '=' << s.value << " top1 " << r.accuracy.top1 << " flops " << c.flops_video << '\n';
  }
  return 0;
}

void write_pgm(const std::string& path, const Tensor& m) {
  const std::size_t rows = m.size(0), cols = m.size(1);
  double hi = 0;
  for (double v : m.data()) hi = std::max(hi, v);
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  for (double v : m.data()) {
    const auto px = static_cast<unsigned char>(hi > 0 ? std::lround(255.0 * v / hi) : 0);
    out.put(static_cast<char>(px));
  }
}

int cmd_viz_attn(const RunConfig& cfg) {
  BackboneSpec spec;
  BackboneWeights bw;
  load_checked_backbone(cfg, spec, bw);
  SfcConfig sc;
  SfcWeights sw;
  load_sfc(sfc_dir(cfg), sc, sw);
  auto val = load_split(cfg, Split::Val);
  Model model{&spec, &bw, cfg.split, &sc, &sw};
  const Strategy whole = parse_strategy("sfc", cfg.clip_length, cfg.crop);
  const fs::path dir = fs::path(cfg.output_dir) / "attn";
  fs::create_directories(dir);
  for (std::size_t i : cfg.viz_videos) {
    if (i >= val.size()) throw ConfigError("viz video index " + std::to_string(i) + " outside validation set");
    Prediction p = predict_video(val[i].video, whole, model);
    Tensor mt = temporal_marginal(*p.attention, sc.tokens);
    const std::string id = val[i].video.id;
    std::ofstream csv(dir / (id + ".csv"));
    csv << std::setprecision(10);
    const std::size_t rows = mt.size(0), cols = mt.size(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) csv << mt[r * cols + c] << (c + 1 == cols ? '\n' : ',');
    write_pgm((dir / (id + ".pgm")).string(), mt);
    std::cout << id << " motif [" << val[i].motif_start << ',' << val[i].motif_end << ") mass ratio "
              << motif_attention_ratio(mt, val[i].motif_start, val[i].motif_end) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective feature compression on synthetic videos"};
  app.require_subcommand(1);
  CommonFlags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON config file");
    sub->add_option("--override", flags.overrides, "dot-path override key=value (repeatable)");
    sub->add_option("--strategy", flags.strategy, "single|uniform:N|dense:NtxNs|sfc|untrimmed:NxF");
    sub->add_option("--data-cache", flags.data_cache, "directory for cached samples");
    sub->add_option("--seed", flags.seed, "random seed");
    sub->add_option("--out", flags.out, "output directory");
  };
  auto* tb = app.add_subcommand("train-backbone", "stage 1: train the backbone on random clips");
  auto* ts = app.add_subcommand("train-sfc", "stage 2: train SFC with the backbone frozen");
  auto* ev = app.add_subcommand("eval", "evaluate one strategy on the validation split");
  auto* be = app.add_subcommand("bench", "cost report across strategies");
  auto* ab = app.add_subcommand("ablate", "sweep one SFC axis");
  auto* va = app.add_subcommand("viz-attn", "export temporal attention maps");
  for (auto* s : {tb, ts, ev, be, ab, va}) add_common(s);
  ab->add_option("--axis", flags.axis, "tau|split|pooling|kqv|kernel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    const RunConfig cfg = resolve(flags);
    if (tb->parsed()) return cmd_train_backbone(cfg);
    if (ts->parsed()) return cmd_train_sfc(cfg);
    if (ev->parsed()) return cmd_eval(cfg);
    if (be->parsed()) return cmd_bench(cfg);
    if (ab->parsed()) return cmd_ablate(cfg, flags.axis);
    if (va->parsed()) return cmd_viz_attn(cfg);
  } catch (const InvariantError& e) {
    std::cerr << "invariant breach: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
