#pragma once

// Synthetic "aging shapes": a disc whose radius encodes the age group, drawn
// solid or as a ring (the attribute), shifted by a small offset (the
// identity-like nuisance). Analytic oracles read all three back.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ageflow/rng.hpp"
#include "ageflow/tensor.hpp"

namespace ageflow::toy {

inline constexpr int kSize = 32;
inline constexpr int kGroups = 4;
inline constexpr int kAttrs = 2;
inline constexpr int kMaxShift = 3;
inline constexpr double kRadii[kGroups] = {4.0, 7.0, 10.0, 13.0};
inline constexpr int kThreshold = 128;

/// 8-bit single-channel kSize x kSize image, row-major.
using Image = std::vector<std::uint8_t>;

struct ToySample {
  Image image;
  int g = 0;
  int a = 0;  // 0 solid, 1 ring
  int dx = 0;
  int dy = 0;
};

struct SynthOptions {
  bool jitter = true;
  double noise_sigma = 8.0;
};

/// Throws Fault on out-of-range parameters.
ToySample synth_image(int g, int a, int dx, int dy, Rng& rng, const SynthOptions& options = {});

struct Centroid {
  double x = 0;
  double y = 0;
};

/// Foreground (>= 128) centroid; x is the column. Throws Fault on an empty foreground.
Centroid oracle_center(const Image& image);
/// Ring iff the 3x3 mean around the rounded centroid is below 128.
int oracle_attr(const Image& image);
/// Radius estimate from area (solid) or outer boundary (ring), snapped to the nearest group.
int oracle_age(const Image& image);
double oracle_radius(const Image& image);

struct ManifestEntry {
  std::string file;
  int g = 0;
  int a = 0;
  int dx = 0;
  int dy = 0;
  std::string split;  // "train" or "test"
};

using Manifest = std::vector<ManifestEntry>;

/// Deterministic 80/20 assignment from the sample index alone.
std::string split_for_index(int index);

/// Writes img_NNNNN.pgm files and manifest.csv into out_dir. Cells (g, a)
/// are filled round-robin so any multiple of 8 is exactly balanced.
Manifest dataset_generate(int count, std::uint64_t seed, const std::filesystem::path& out_dir);

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

void write_pgm(const std::filesystem::path& path, const Image& image, int width = kSize, int height = kSize);
Image read_pgm(const std::filesystem::path& path, int* width = nullptr, int* height = nullptr);

/// Samples of one split ("" for all), images loaded relative to the manifest directory.
std::vector<ToySample> load_split(const std::filesystem::path& manifest_path, const std::string& split);

/// [N, 1, kSize, kSize] tensor of raw pixel values in [0, 255].
template <typename T>
Tensor<T> to_tensor(const std::vector<const Image*>& images);

/// Rounds and clamps to [0, 255]; x is [1, kSize, kSize] or [kSize, kSize] pixel values.
template <typename T>
Image from_tensor(const Tensor<T>& pixels, std::size_t offset = 0);

}  // namespace ageflow::toy
