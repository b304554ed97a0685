#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "sgdc/rng.hpp"
#include "sgdc/tensor.hpp"

namespace sgdc {

// Synthetic blob segmentation: smooth irregular foreground blobs on a flat
// background, thin distractor strokes in both regions, Gaussian noise.
struct SynthConfig {
  int image_size = 64;
  int channels = 3;  // grey intensity replicated across channels
  int blobs_min = 1;
  int blobs_max = 3;
  double contrast_min = 0.15;
  double contrast_max = 0.5;
  double noise_std = 0.05;
  int strokes_min = 0;
  int strokes_max = 4;
  int morph_iters = 1;  // boundary band: 3x3 square, this many iterations
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
// Strict: unknown keys are a ConfigError. Missing keys keep their defaults.
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct Sample {
  std::string id;
  Tensor<float> image;  // (C, H, W) in [0, 1]
  Tensor<float> mask;   // (1, H, W) binary
  Tensor<float> edge;   // (1, H, W) == boundary_gt(mask)
};

inline constexpr int kMaxBlobAttempts = 100;

Sample gen_sample(Rng& rng, const SynthConfig& cfg, std::string id = "0");

// Sample i of a dataset is drawn from Rng(mix_seed(seed, i)).
std::vector<Sample> gen_samples(const SynthConfig& cfg, std::uint64_t seed, int count, const std::string& prefix);

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
};

AugmentParams draw_augment(Rng& rng, double max_angle_deg = 20.0);
// Flips, then rotation about the centre (bilinear image, nearest mask, edge
// recomputed from the new mask with `morph_iters`).
Sample apply_augment(const Sample& s, const AugmentParams& a, int morph_iters = 1);
Sample augment(const Sample& s, Rng& rng, int morph_iters = 1);

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
  SynthConfig config;
  std::vector<Sample> samples;
};

// dir/manifest.json + dir/{id}_img.tnsr, {id}_mask.tnsr, {id}_edge.tnsr
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace sgdc
