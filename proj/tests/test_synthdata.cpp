#include <complex>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "sfc/errors.hpp"
#include "sfc/synthdata.hpp"
#include "test_support.hpp"

using namespace sfc;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.height = 16;
  s.width = 16;
  return s;
}

// Frame mean over time, flattened, with a trailing bias feature.
std::vector<double> mean_frame(const SynthSample& s) {
  const std::size_t t = s.video.frames.size(1), p = s.video.frames.size(2) * s.video.frames.size(3);
  std::vector<double> f(p + 1, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < p; ++j) f[j] += s.video.frames[i * p + j] / double(t);
  f[p] = 1.0;
  return f;
}

}  // namespace

TEST_CASE("generation is a pure function of spec and index") {
  const SynthSpec spec = small_spec();
  const SynthSample a = generate(spec, 17), b = generate(spec, 17), c = generate(spec, 18);
  CHECK(sfc::testing::max_abs_diff(a.video.frames.data(), b.video.frames.data()) == 0.0);
  CHECK(a.motif_start == b.motif_start);
  CHECK(content_hash(a.video.frames) != content_hash(c.video.frames));
  SynthSpec other = spec;
  other.seed = 1;
  CHECK(content_hash(generate(other, 17).video.frames) != content_hash(a.video.frames));
  CHECK(sample_label(spec, 17) == a.label);
}

TEST_CASE("motif window placement") {
  SynthSpec spec = small_spec();
  for (std::uint64_t i = 0; i < 200; ++i) {
    const SynthSample s = generate(spec, i);
    CHECK(s.motif_end - s.motif_start == 16);
    CHECK(s.motif_end <= spec.t_total);
  }
  spec.motif_fraction = 1.0;
  const SynthSample full = generate(spec, 3);
  CHECK(full.motif_start == 0);
  CHECK(full.motif_end == 64);
}

TEST_CASE("frames outside the window carry no motif energy when noise and distractors are off") {
  SynthSpec spec = small_spec();
  spec.noise = 0.0;
  spec.distractor_prob = 0.0;
  const SynthSample s = generate(spec, 5);
  const std::size_t p = 16 * 16;
  for (std::size_t t = 0; t < spec.t_total; ++t) {
    double energy = 0;
    for (std::size_t j = 0; j < p; ++j) energy += std::abs(s.video.frames[t * p + j]);
    if (t >= s.motif_start && t < s.motif_end)
      CHECK(energy > 1.0);
    else
      CHECK(energy == 0.0);
  }
}

TEST_CASE("the motif averages to zero over its window on every pixel") {
  SynthSpec spec = small_spec();
  spec.width = 20;
  spec.noise = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const SynthSample s = generate(spec, i);
    const std::size_t p = spec.height * spec.width;
    double worst = 0, peak = 0;
    for (std::size_t j = 0; j < p; ++j) {
      double sum = 0;
      for (std::size_t t = 0; t < spec.t_total; ++t) {
        sum += s.video.frames[t * p + j];
        peak = std::max(peak, std::abs(s.video.frames[t * p + j]));
      }
      worst = std::max(worst, std::abs(sum));
    }
    CHECK(worst < 1e-9);
    CHECK(peak > 0.9);
  }
}

TEST_CASE("class balance over ten thousand samples") {
  const SynthSpec spec = small_spec();
  std::vector<std::size_t> counts(spec.num_classes, 0);
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) ++counts[sample_label(spec, split_index(Split::Train, i))];
  for (std::size_t c : counts) CHECK(std::abs(double(c) / n - 1.0 / spec.num_classes) <= 0.02);
}

TEST_CASE("train and validation splits are disjoint") {
  std::set<std::uint64_t> train;
  for (std::size_t i = 0; i < 5000; ++i) train.insert(split_index(Split::Train, i));
  for (std::size_t i = 0; i < 5000; ++i) CHECK(train.count(split_index(Split::Val, i)) == 0);
  const auto d = dataset(small_spec(), 7, Split::Val);
  CHECK(d.size() == 7);
  CHECK_THROWS_AS(dataset(small_spec(), 0, Split::Val), ConfigError);
}

TEST_CASE("a linear probe on mean frames stays near chance") {
  for (std::size_t width : {16, 20}) {
    SynthSpec spec = small_spec();
    spec.width = width;
    const auto train = dataset(spec, 1500, Split::Train);
    const auto val = dataset(spec, 1000, Split::Val);
    const std::size_t k = spec.num_classes, d = 16 * width + 1;
    std::vector<std::vector<double>> xs;
    for (const auto& s : train) xs.push_back(mean_frame(s));
    std::vector<double> w(k * d, 0.0);
    // Full-batch softmax regression.
    for (int it = 0; it < 300; ++it) {
      std::vector<double> g(k * d, 0.0);
      for (std::size_t n = 0; n < train.size(); ++n) {
        std::vector<double> z(k, 0.0);
        for (std::size_t c = 0; c < k; ++c)
          for (std::size_t j = 0; j < d; ++j) z[c] += w[c * d + j] * xs[n][j];
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0;
        for (double& v : z) sum += (v = std::exp(v - mx));
        for (std::size_t c = 0; c < k; ++c) {
          const double r = z[c] / sum - (c == train[n].label ? 1.0 : 0.0);
          for (std::size_t j = 0; j < d; ++j) g[c * d + j] += r * xs[n][j] / double(train.size());
        }
      }
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 2.0 * g[i];
  }
  std::size_t correct = 0;
  for (const auto& s : val) {
    const auto x = mean_frame(s);
    std::size_t best = 0;
    double best_z = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      double z = 0;
      for (std::size_t j = 0; j < d; ++j) z += w[c * d + j] * x[j];
      if (z > best_z) best_z = z, best = c;
    }
    correct += best == s.label;
  }
  const double acc = double(correct) / double(val.size());
  MESSAGE("mean-frame probe accuracy at width " << width << ": " << acc);
  CHECK(acc <= 1.0 / k + 0.05);
  }
}

TEST_CASE("horizontal flip label map") {
  CHECK(flipped_label(0, 8) == 4);
  CHECK(flipped_label(1, 8) == 3);
  CHECK(flipped_label(2, 8) == 2);
  CHECK(flipped_label(6, 8) == 6);
  CHECK(flipped_label(7, 8) == 5);
  for (std::size_t k = 2; k <= 12; k += 2)
    for (std::size_t l = 0; l < k; ++l) CHECK(flipped_label(flipped_label(l, k), k) == l);
}

TEST_CASE("flipping a motif video matches the flipped class direction") {
  SynthSpec spec = small_spec();
  spec.noise = 0.0;
  spec.distractor_prob = 0.0;
  const double k = 2 * M_PI / spec.wavelength;
  // Per-frame phase advance of the grating component along class c's direction.
  auto phase_step = [&](const SynthSample& s, std::size_t c, bool mirror) {
    const double a = 2 * M_PI * double(c) / 8, ux = std::cos(a), uy = -std::sin(a);
    auto coeff = [&](std::size_t t) {
      std::complex<double> z = 0;
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          const double v = s.video.frames[(t * 16 + y) * 16 + (mirror ? 15 - x : x)];
          z += v * std::polar(1.0, -k * (ux * double(x) + uy * double(y)));
        }
      return z;
    };
    return std::arg(coeff(s.motif_start + 1) / coeff(s.motif_start));
  };
  const double expected = -k * spec.speed;
  for (std::uint64_t i = 0; i < 16; ++i) {
    const SynthSample s = generate(spec, i);
    const std::size_t f = flipped_label(s.label, 8);
    CHECK(phase_step(s, s.label, false) == doctest::Approx(expected).epsilon(0.02));
    CHECK(phase_step(s, f, true) == doctest::Approx(expected).epsilon(0.02));
    // The opposite direction sees the drift reversed.
    CHECK(phase_step(s, (f + 4) % 8, true) == doctest::Approx(-expected).epsilon(0.02));
  }
}

TEST_CASE("cached dataset round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "sfc_cache_test";
  std::filesystem::remove_all(dir);
  const SynthSpec spec = small_spec();
  const auto first = cached_dataset(spec, 4, Split::Train, dir.string());
  const auto second = cached_dataset(spec, 4, Split::Train, dir.string());
  const auto direct = dataset(spec, 4, Split::Train);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(content_hash(second[i].video.frames) == content_hash(direct[i].video.frames));
    CHECK(second[i].motif_start == direct[i].motif_start);
    CHECK(second[i].video.id == first[i].video.id);
  }
  SynthSample out;
  const auto any = std::filesystem::directory_iterator(dir)->path().string();
  CHECK(!load_sample(any, spec.fingerprint() + 1, out));
  std::filesystem::remove_all(dir);
}
