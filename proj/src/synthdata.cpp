#include "sfc/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "sfc/errors.hpp"

namespace sfc {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 sample_rng(const SynthSpec& spec, std::uint64_t index) {
  return std::mt19937_64(splitmix(splitmix(spec.seed) ^ splitmix(index + 0x5f0e)));
}

// Adds amplitude·sin(2π(u·r − speed·i)/λ + phase) to frames [t0, t0 + len),
// where u is the unit vector of `angle` (y axis pointing down).
void render_grating(std::vector<double>& frames, const SynthSpec& spec, std::size_t t0, std::size_t len,
                    double angle, double phase, double amplitude) {
  const std::size_t h = spec.height, w = spec.width;
  const double ux = std::cos(angle), uy = -std::sin(angle);
  const double k = 2.0 * std::numbers::pi / spec.wavelength;
  for (std::size_t i = 0; i < len; ++i) {
    double* frame = frames.data() + (t0 + i) * h * w;
    const double shift = spec.speed * static_cast<double>(i);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double along = ux * static_cast<double>(c) + uy * static_cast<double>(r);
        frame[r * w + c] += amplitude * std::sin(k * (along - shift) + phase);
      }
  }
}

double class_angle(std::size_t k, std::size_t num_classes) {
  return 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_classes);
}

}  // namespace

std::size_t SynthSpec::motif_length() const {
  const auto len = static_cast<std::size_t>(std::lround(motif_fraction * static_cast<double>(t_total)));
  return std::clamp<std::size_t>(len, 1, t_total);
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be at least 2");
  if (t_total == 0 || height == 0 || width == 0) throw ConfigError("data extents must be positive");
  if (!(motif_fraction > 0.0 && motif_fraction <= 1.0)) throw ConfigError("data.motif_fraction must be in (0, 1]");
  if (noise < 0.0 || wavelength <= 0.0) throw ConfigError("data.noise must be >= 0 and wavelength > 0");
  if (distractor_prob < 0.0 || distractor_prob > 1.0) throw ConfigError("data.distractor_prob must be in [0, 1]");
}

std::uint64_t SynthSpec::fingerprint() const {
  nlohmann::json j = {num_classes, t_total, height, width, motif_fraction, noise, distractor_prob,
                      distractor_amplitude, wavelength, speed, seed};
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : j.dump()) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h;
}

std::size_t sample_label(const SynthSpec& spec, std::uint64_t index) {
  auto rng = sample_rng(spec, index);
  return std::uniform_int_distribution<std::size_t>(0, spec.num_classes - 1)(rng);
}

SynthSample generate(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  auto rng = sample_rng(spec, index);
  std::uniform_int_distribution<std::size_t> pick_class(0, spec.num_classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SynthSample s;
  s.label = pick_class(rng);
  const std::size_t t = spec.t_total, len = spec.motif_length();
  s.motif_start = std::uniform_int_distribution<std::size_t>(0, t - len)(rng);
  s.motif_end = s.motif_start + len;

  std::vector<double> frames(t * spec.height * spec.width);
  const double two_pi = 2.0 * std::numbers::pi;
  render_grating(frames, spec, s.motif_start, len, class_angle(s.label, spec.num_classes),
                 two_pi * unit(rng), 1.0);

  const bool distract = unit(rng) < spec.distractor_prob;
  const std::size_t d_len = std::max<std::size_t>(1, len / 2);
  const std::size_t other = (s.label + 1 + pick_class(rng) % (spec.num_classes - 1)) % spec.num_classes;
  const double d_phase = two_pi * unit(rng);
  // Candidate starts that keep the distractor fully outside the motif window.
  std::vector<std::size_t> starts;
  for (std::size_t a = 0; a + d_len <= t; ++a)
    if (a + d_len <= s.motif_start || a >= s.motif_end) starts.push_back(a);
  const std::size_t pick = starts.empty() ? 0 : rng() % starts.size();
  if (distract && !starts.empty())
    render_grating(frames, spec, starts[pick], d_len, class_angle(other, spec.num_classes), d_phase,
                   spec.distractor_amplitude);

  for (double& v : frames) v += spec.noise * gauss(rng);
  s.video.frames = Tensor({1, t, spec.height, spec.width}, std::move(frames));
  s.video.label = s.label;
  s.video.id = "synth_" + std::to_string(index);
  return s;
}

std::uint64_t split_index(Split split, std::size_t i) {
  return split == Split::Train ? i : (std::uint64_t{1} << 40) + i;
}

std::vector<SynthSample> dataset(const SynthSpec& spec, std::size_t n, Split split) {
  if (n == 0) throw ConfigError("dataset size must be positive");
  std::vector<SynthSample> out(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) out[i] = generate(spec, split_index(split, i));
  return out;
}

std::size_t flipped_label(std::size_t label, std::size_t num_classes) {
  return (num_classes + num_classes / 2 - label) % num_classes;
}

void save_sample(const std::string& path, const SynthSample& s, std::uint64_t fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::string header = nlohmann::json{{"id", s.video.id},
                                            {"label", s.label},
                                            {"motif", {s.motif_start, s.motif_end}},
                                            {"spec", std::to_string(fingerprint)}}
                                 .dump();
  const auto len = static_cast<std::uint32_t>(header.size());
  unsigned char le[4] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8),
                         static_cast<unsigned char>(len >> 16), static_cast<unsigned char>(len >> 24)};
  out.write(reinterpret_cast<const char*>(le), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  write_tensor(out, s.video.frames);
}

bool load_sample(const std::string& path, std::uint64_t fingerprint, SynthSample& s) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  unsigned char le[4];
  if (!in.read(reinterpret_cast<char*>(le), 4)) return false;
  const std::uint32_t len = le[0] | (le[1] << 8) | (le[2] << 16) | (std::uint32_t(le[3]) << 24);
  std::string header(len, '\0');
  if (!in.read(header.data(), len)) return false;
  try {
    auto j = nlohmann::json::parse(header);
    if (j.at("spec").get<std::string>() != std::to_string(fingerprint)) return false;
    s.video.id = j.at("id").get<std::string>();
    s.label = j.at("label").get<std::size_t>();
    s.motif_start = j.at("motif").at(0).get<std::size_t>();
    s.motif_end = j.at("motif").at(1).get<std::size_t>();
    s.video.label = s.label;
    s.video.frames = read_tensor(in);
  } catch (const std::exception&) {
    return false;
  }
  return true;
}

std::vector<SynthSample> cached_dataset(const SynthSpec& spec, std::size_t n, Split split,
                                        const std::string& cache_dir) {
  if (cache_dir.empty()) return dataset(spec, n, split);
  fs::create_directories(cache_dir);
  const std::uint64_t fp = spec.fingerprint();
  std::vector<SynthSample> out(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t idx = split_index(split, i);
    const std::string path = (fs::path(cache_dir) / ("synth_" + std::to_string(idx) + "_" +
                                                     std::to_string(fp % 1000003) + ".bin")).string();
    if (!load_sample(path, fp, out[i])) {
      out[i] = generate(spec, idx);
      save_sample(path, out[i], fp);
    }
  }
  return out;
}

}  // namespace sfc
