#pragma once

// Synthetic videos whose class is the drift direction of a sinusoidal grating.
// The grating is visible only inside a random window covering a fraction p of
// the video; other frames hold noise and, optionally, a fainter grating
// drifting in a different direction. With len·speed a multiple of the
// wavelength, the motif averages to zero over its window.

#include <cstdint>
#include <string>
#include <vector>

#include "sfc/sampler.hpp"

namespace sfc {

struct SynthSpec {
  std::size_t num_classes = 8;
  std::size_t t_total = 64;
  std::size_t height = 32;
  std::size_t width = 32;
  double motif_fraction = 0.25;
  double noise = 0.2;
  double distractor_prob = 0.5;
  double distractor_amplitude = 0.35;
  double wavelength = 8.0;  // pixels
  double speed = 1.0;  // pixels per frame
  std::uint64_t seed = 0;

  std::size_t motif_length() const;
  void validate() const;
  std::uint64_t fingerprint() const;
};

struct SynthSample {
  Video video;
  std::size_t motif_start = 0, motif_end = 0;  // [start, end)
  std::size_t label = 0;
};

enum class Split { Train, Val };

// Pure function of (spec, index).
SynthSample generate(const SynthSpec& spec, std::uint64_t index);
std::size_t sample_label(const SynthSpec& spec, std::uint64_t index);
// Global index of the i-th sample of a split; train and val never overlap.
std::uint64_t split_index(Split split, std::size_t i);
std::vector<SynthSample> dataset(const SynthSpec& spec, std::size_t n, Split split);
// Same, reading and writing one file per sample under `cache_dir`.
std::vector<SynthSample> cached_dataset(const SynthSpec& spec, std::size_t n, Split split,
                                        const std::string& cache_dir);

// Class of the mirror-image motion under a horizontal flip.
std::size_t flipped_label(std::size_t label, std::size_t num_classes);

void save_sample(const std::string& path, const SynthSample& s, std::uint64_t fingerprint);
// False when the file is missing or was written for another spec.
bool load_sample(const std::string& path, std::uint64_t fingerprint, SynthSample& out);

}  // namespace sfc
