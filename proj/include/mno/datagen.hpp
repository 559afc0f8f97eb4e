#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mno/geometry.hpp"

namespace mno {

enum class Generator { kSphereFlow, kGaussianField };

std::string generator_name(Generator g);
Generator parse_generator(const std::string& s);

struct GenSpec {
  Generator generator = Generator::kSphereFlow;
  std::size_t n = 2048;
  std::uint64_t seed = 0;
  double noise_std = 0.0;
  double freestream = 1.0;  // sphere-flow only

  void validate() const;
};

/// Potential flow past the unit sphere with freestream U along +x.
/// Velocity at a point of radius r >= 1 in Cartesian components.
std::array<double, 3> sphere_flow_velocity(const std::array<double, 3>& p, double r, double u);
/// Bernoulli pressure coefficient 1 - |u|^2 / U^2.
double pressure_coefficient(const std::array<double, 3>& velocity, double u);

/// N points uniform in the shell 1 < r <= 3 plus N/8 points on the unit
/// sphere (stored after the shell points). Features: signed distance r - 1
/// (exactly 0 on the surface) and the outward normal p / r. Targets:
/// velocity (3 channels) and the pressure coefficient, O = 4.
PointSample gen_sphere_flow(const GenSpec& spec);

/// Three Gaussian bumps of widths 0.5, 0.1 and 0.02.
struct GaussianBump {
  std::array<double, 3> center;
  double sigma;
  double amplitude;
};

/// Bump parameters drawn from the GenSpec seed (the same stream gen_gaussian_field uses).
std::vector<GaussianBump> gaussian_field_bumps(std::uint64_t seed);
double gaussian_field_value(const std::vector<GaussianBump>& bumps, const std::array<double, 3>& p);

/// N points uniform in the unit cube, no features, one scalar target.
PointSample gen_gaussian_field(const GenSpec& spec);

PointSample generate(const GenSpec& spec);

/// Seed used for sample `index` of a corpus generated from `base_seed`.
std::uint64_t corpus_seed(std::uint64_t base_seed, std::size_t index);

struct CorpusEntry {
  std::string filename;
  std::size_t n = 0;
  std::string generator;
  std::uint64_t seed = 0;
};

/// Writes `count` MNO1 files plus manifest.csv into `dir` and returns the
/// manifest rows.
std::vector<CorpusEntry> gen_corpus(const GenSpec& spec, std::size_t count,
                                    const std::filesystem::path& dir);

/// Reads every file listed in dir/manifest.csv (or, without a manifest, every
/// *.mno file in sorted order).
std::vector<PointSample> load_corpus(const std::filesystem::path& dir);

}  // namespace mno
