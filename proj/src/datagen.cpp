#include "mno/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mno/errors.hpp"
#include "mno/params.hpp"

namespace mno {

std::string generator_name(Generator g) {
  return g == Generator::kSphereFlow ? "sphere-flow" : "gaussian-field";
}

Generator parse_generator(const std::string& s) {
  if (s == "sphere-flow") return Generator::kSphereFlow;
  if (s == "gaussian-field") return Generator::kGaussianField;
  throw std::invalid_argument("unknown generator '" + s + "' (sphere-flow|gaussian-field)");
}

void GenSpec::validate() const {
  if (n < 8) throw std::invalid_argument("generator: N must be at least 8");
  if (!(noise_std >= 0) || !std::isfinite(noise_std)) {
    throw std::invalid_argument("generator: noise std must be finite and >= 0");
  }
  if (!(freestream > 0) || !std::isfinite(freestream)) {
    throw std::invalid_argument("generator: freestream speed must be positive");
  }
}

std::array<double, 3> sphere_flow_velocity(const std::array<double, 3>& p, double r, double u) {
  const std::array<double, 3> er{p[0] / r, p[1] / r, p[2] / r};
  const double cos_t = er[0];
  const double ir3 = 1.0 / (r * r * r);
  const double ur = u * cos_t * (1.0 - ir3);
  // u_theta * e_theta = -U (1 + 1/(2 r^3)) * (sin(theta) e_theta), and
  // sin(theta) e_theta = cos(theta) e_r - e_x, which avoids dividing by sin(theta).
  const double ut = -u * (1.0 + 0.5 * ir3);
  std::array<double, 3> v{};
  for (int c = 0; c < 3; ++c) {
    const double ex = c == 0 ? 1.0 : 0.0;
    v[c] = ur * er[c] + ut * (cos_t * er[c] - ex);
  }
  return v;
}

double pressure_coefficient(const std::array<double, 3>& v, double u) {
  return 1.0 - (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / (u * u);
}

namespace {

std::array<double, 3> random_direction(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    std::array<double, 3> d{normal(rng), normal(rng), normal(rng)};
    const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (len > 1e-12) return {d[0] / len, d[1] / len, d[2] / len};
  }
}

}  // namespace

PointSample gen_sphere_flow(const GenSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n_shell = spec.n, n_surf = spec.n / 8;
  PointSample s;
  s.n = n_shell + n_surf;
  s.f = 4;
  s.o = 4;
  s.name = "sphere-flow-" + std::to_string(spec.seed);
  s.positions.reserve(s.n * 3);
  for (std::size_t i = 0; i < s.n; ++i) {
    const auto dir = random_direction(rng);
    // r^3 uniform on (1, 27] gives a uniform density in the shell.
    const double radius = i < n_shell ? std::cbrt(1.0 + 26.0 * (1.0 - unit(rng))) : 1.0;
    for (int c = 0; c < 3; ++c) s.positions.push_back(static_cast<float>(radius * dir[c]));
  }
  std::normal_distribution<double> noise(0.0, spec.noise_std > 0 ? spec.noise_std : 1.0);
  for (std::size_t i = 0; i < s.n; ++i) {
    const std::array<double, 3> p{s.positions[3 * i], s.positions[3 * i + 1], s.positions[3 * i + 2]};
    const double len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    const bool surface = i >= n_shell;
    const double r = surface ? 1.0 : std::max(len, 1.0);
    const std::array<double, 3> unit_p{p[0] / len, p[1] / len, p[2] / len};
    const std::array<double, 3> q{unit_p[0] * r, unit_p[1] * r, unit_p[2] * r};
    s.features.push_back(surface ? 0.0f : static_cast<float>(r - 1.0));
    for (int c = 0; c < 3; ++c) s.features.push_back(static_cast<float>(unit_p[c]));
    const auto v = sphere_flow_velocity(q, r, spec.freestream);
    std::array<double, 4> t{v[0], v[1], v[2], pressure_coefficient(v, spec.freestream)};
    for (double x : t) {
      if (spec.noise_std > 0) x += noise(rng);
      s.targets.push_back(static_cast<float>(x));
    }
  }
  s.validate();
  return s;
}

std::vector<GaussianBump> gaussian_field_bumps(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<GaussianBump> bumps;
  const double sigmas[] = {0.5, 0.1, 0.02};
  const double amps[] = {1.0, 0.5, 0.25};
  for (int b = 0; b < 3; ++b) {
    GaussianBump g;
    for (auto& c : g.center) c = unit(rng);
    g.sigma = sigmas[b];
    g.amplitude = amps[b];
    bumps.push_back(g);
  }
  return bumps;
}

double gaussian_field_value(const std::vector<GaussianBump>& bumps, const std::array<double, 3>& p) {
  double v = 0;
  for (const auto& b : bumps) {
    double d2 = 0;
    for (int c = 0; c < 3; ++c) d2 += (p[c] - b.center[c]) * (p[c] - b.center[c]);
    v += b.amplitude * std::exp(-d2 / (2 * b.sigma * b.sigma));
  }
  return v;
}

PointSample gen_gaussian_field(const GenSpec& spec) {
  spec.validate();
  const auto bumps = gaussian_field_bumps(spec.seed);
  // Points come from a separate stream so the bump draw stays reproducible.
  Rng rng(spec.seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_std > 0 ? spec.noise_std : 1.0);
  PointSample s;
  s.n = spec.n;
  s.f = 0;
  s.o = 1;
  s.name = "gaussian-field-" + std::to_string(spec.seed);
  for (std::size_t i = 0; i < s.n; ++i) {
    std::array<float, 3> p{};
    for (auto& c : p) c = static_cast<float>(unit(rng));
    s.positions.insert(s.positions.end(), p.begin(), p.end());
    double v = gaussian_field_value(bumps, {p[0], p[1], p[2]});
    if (spec.noise_std > 0) v += noise(rng);
    s.targets.push_back(static_cast<float>(v));
  }
  s.validate();
  return s;
}

PointSample generate(const GenSpec& spec) {
  return spec.generator == Generator::kSphereFlow ? gen_sphere_flow(spec) : gen_gaussian_field(spec);
}

std::uint64_t corpus_seed(std::uint64_t base_seed, std::size_t index) {
  return base_seed * 1000003ULL + index;
}

std::vector<CorpusEntry> gen_corpus(const GenSpec& spec, std::size_t count,
                                    const std::filesystem::path& dir) {
  spec.validate();
  if (count == 0) throw std::invalid_argument("gen_corpus: count must be positive");
  std::filesystem::create_directories(dir);
  std::vector<CorpusEntry> entries;
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.csv").string());
  manifest << "filename,n,generator,seed\n";
  for (std::size_t i = 0; i < count; ++i) {
    GenSpec s = spec;
    s.seed = corpus_seed(spec.seed, i);
    PointSample sample = generate(s);
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.mno", i);
    write_pointset(sample, dir / name);
    CorpusEntry e{name, sample.n, generator_name(spec.generator), s.seed};
    manifest << e.filename << ',' << e.n << ',' << e.generator << ',' << e.seed << '\n';
    entries.push_back(e);
  }
  return entries;
}

std::vector<PointSample> load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::invalid_argument("data directory '" + dir.string() + "' does not exist");
  }
  std::vector<std::filesystem::path> files;
  const auto manifest = dir / "manifest.csv";
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      files.push_back(dir / line.substr(0, line.find(',')));
    }
  } else {
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".mno") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw DataError("no point-set files in '" + dir.string() + "'");
  std::vector<PointSample> out;
  for (const auto& f : files) out.push_back(read_pointset(f));
  return out;
}

}  // namespace mno
