#include "mno/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

#include "CLI11.hpp"
#include "mno/bench.hpp"
#include "mno/datagen.hpp"
#include "mno/errors.hpp"
#include "mno/training.hpp"

namespace fs = std::filesystem;

namespace mno {

std::string dump_fields(const Checkpoint& ckpt, const PointSample& sample) {
  sample.validate();
  if (sample.f != ckpt.config.in_features || sample.o != ckpt.config.out_dim) {
    throw std::invalid_argument("dump-fields: sample has F=" + std::to_string(sample.f) + ", O=" +
                                std::to_string(sample.o) + " but the checkpoint expects F=" +
                                std::to_string(ckpt.config.in_features) + ", O=" +
                                std::to_string(ckpt.config.out_dim));
  }
  const MnoModel<float> model{ckpt.config, ckpt.params};
  const PreparedSample p = prepare_sample(sample, ckpt.stats, ckpt.config.k, {});
  const Tensor<float> pred = predict_physical(model, p, ckpt.stats);
  const std::size_t o = sample.o;

  std::ostringstream os;
  os << std::setprecision(9) << "x,y,z";
  for (std::size_t c = 0; c < o; ++c) os << ",truth_" << c;
  for (std::size_t c = 0; c < o; ++c) os << ",pred_" << c;
  for (std::size_t c = 0; c < o; ++c) os << ",abs_err_" << c;
  os << '\n';
  for (std::size_t i = 0; i < sample.n; ++i) {
    os << sample.positions[i * 3] << ',' << sample.positions[i * 3 + 1] << ','
       << sample.positions[i * 3 + 2];
    for (std::size_t c = 0; c < o; ++c) os << ',' << sample.targets[i * o + c];
    for (std::size_t c = 0; c < o; ++c) os << ',' << pred.values()[i * o + c];
    for (std::size_t c = 0; c < o; ++c) {
      os << ','
         << std::abs(static_cast<double>(pred.values()[i * o + c]) -
                     static_cast<double>(sample.targets[i * o + c]));
    }
    os << '\n';
  }
  return os.str();
}

namespace {

/// Raised for anything the user got wrong on the command line or in the
/// config file; maps to exit status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

/// Output directory built under a sibling staging name and renamed into
/// place on commit(); an uncommitted stage is removed on destruction.
class StagedDir {
 public:
  StagedDir(const fs::path& target, bool overwrite) : target_(target), overwrite_(overwrite) {
    if (target_.empty()) throw UsageError("--out is required");
    target_ = fs::absolute(target_).lexically_normal();
    if (target_.filename().empty()) target_ = target_.parent_path();
    if (fs::exists(target_) && !overwrite_ && !fs::is_empty(target_)) {
      throw UsageError("output directory '" + target_.string() +
                       "' exists and is not empty (pass --overwrite)");
    }
    stage_ = target_;
    stage_ += ".partial-" + std::to_string(::getpid());
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(stage_, ec);
    }
  }

  const fs::path& path() const { return stage_; }
  const fs::path& target() const { return target_; }

  void commit() {
    if (fs::exists(target_)) fs::remove_all(target_);
    fs::rename(stage_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path stage_;
  bool overwrite_;
  bool committed_ = false;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const std::string& what) {
  std::vector<T> out;
  for (const auto& tok : split(s, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw UsageError(what + ": '" + tok + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::string data_fingerprint(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) joined += f.filename().string() + ":" + file_digest(f) + ";";
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : joined) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<PointSample> load_data(const std::string& dir, const std::string& flag) {
  if (dir.empty()) throw UsageError(flag + " is required");
  if (!fs::is_directory(dir)) throw UsageError(flag + ": '" + dir + "' is not a directory");
  auto data = load_corpus(dir);
  if (data.empty()) throw UsageError(flag + ": no samples in '" + dir + "'");
  for (const auto& s : data) {
    if (s.f != data[0].f || s.o != data[0].o) {
      throw DataError("sample '" + s.name + "' has different channel counts from '" + data[0].name + "'");
    }
  }
  return data;
}

/// Field grouping used when none is configured: velocity and surface pressure
/// for sphere-flow corpora, one "all" group otherwise.
std::vector<FieldGroup> inferred_grouping(const std::vector<PointSample>& data) {
  const bool sphere = std::all_of(data.begin(), data.end(), [](const PointSample& s) {
    return s.name.rfind("sphere-flow", 0) == 0 && s.f == 4 && s.o == 4;
  });
  return sphere ? parse_grouping("velocity:0-2,pressure:3@0") : default_grouping(data.at(0).o);
}

// Config keys: flags fill the same flat namespace a config file uses, and a
// flag given on the command line wins over the file.
struct ConfigFlags {
  std::map<std::string, std::string> values;  // key -> raw flag text
  std::vector<std::pair<std::string, CLI::Option*>> options;
  std::string config_path;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    options.emplace_back(key, app->add_option(flag, values[key], help));
  }

  Manifest resolve() const {
    Manifest m;
    if (!config_path.empty()) {
      if (!fs::is_regular_file(config_path)) throw UsageError("--config: cannot read '" + config_path + "'");
      try {
        m = Manifest::load(config_path);
      } catch (const std::exception& e) {
        throw UsageError(std::string("--config: ") + e.what());
      }
      for (const auto& [k, v] : m.entries()) {
        static const char* kPrefixes[] = {"model.", "train.", "gen.", "run.", "artifact.", "norm.", "data.",
                                          "cli."};
        bool ok = false;
        for (const char* p : kPrefixes) ok = ok || k.rfind(p, 0) == 0;
        if (!ok) throw UsageError("--config: unknown key '" + k + "'");
      }
    }
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) m.set(key, values.at(key));
    return m;
  }
};

void add_model_flags(CLI::App* app, ConfigFlags& f) {
  f.add(app, "--blocks", "model.blocks", "number of MNO blocks");
  f.add(app, "--dim", "model.dim", "latent width D");
  f.add(app, "--modes", "model.modes", "global modes M");
  f.add(app, "--heads", "model.heads", "attention heads in the mode space");
  f.add(app, "--k", "model.k", "neighbors per point (including self)");
  f.add(app, "--mask", "model.mask", "enabled modules, e.g. GLM, GL, L");
}

void add_train_flags(CLI::App* app, ConfigFlags& f) {
  f.add(app, "--epochs", "train.epochs", "training epochs");
  f.add(app, "--batch", "train.batch_size", "samples per optimizer step");
  f.add(app, "--lr", "train.max_lr", "peak learning rate");
  f.add(app, "--seed", "train.seed", "initialization and shuffling seed");
  f.add(app, "--precision", "train.precision", "float32 or float64");
  f.add(app, "--grouping", "train.grouping", "field groups, e.g. velocity:0-2,pressure:3@0");
  f.add(app, "--val-fraction", "train.val_fraction", "fraction of --data held out for validation");
  f.add(app, "--weight-decay", "train.weight_decay", "AdamW decoupled weight decay");
  f.add(app, "--pct-start", "train.pct_start", "one-cycle warm-up fraction");
}

/// Model and training configs from resolved keys; in/out widths come from data.
std::pair<MnoConfig, TrainConfig> build_configs(const Manifest& resolved,
                                                const std::vector<PointSample>& data) {
  Manifest m;
  MnoConfig defaults;
  defaults.in_features = data.at(0).f;
  defaults.out_dim = data.at(0).o;
  defaults.to_manifest(m);
  TrainConfig{}.to_manifest(m);
  m.merge(resolved);
  m.set_num("model.in_features", static_cast<unsigned long long>(data[0].f));
  m.set_num("model.out_dim", static_cast<unsigned long long>(data[0].o));
  MnoConfig mc;
  TrainConfig tc;
  try {
    mc = MnoConfig::from_manifest(m);
    tc = TrainConfig::from_manifest(m);
    mc.validate();
    if (tc.grouping.empty()) tc.grouping = inferred_grouping(data);
    tc.validate();
    validate_grouping(tc.grouping, mc.out_dim, mc.in_features);
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return {mc, tc};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

Checkpoint load_ckpt_arg(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::is_regular_file(path)) throw UsageError("--checkpoint: cannot read '" + path + "'");
  return load_checkpoint(path);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string generator = "sphere-flow";
  std::size_t n = 2048;
  std::size_t count = 1;
  std::uint64_t seed = 0;
  double noise = 0.0;
  double freestream = 1.0;
  std::string out;
  bool overwrite = false;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  GenSpec spec;
  try {
    spec.generator = parse_generator(a.generator);
    spec.n = a.n;
    spec.seed = a.seed;
    spec.noise_std = a.noise;
    spec.freestream = a.freestream;
    spec.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (a.count == 0) throw UsageError("--count must be positive");
  StagedDir dir(a.out, a.overwrite);
  const auto entries = gen_corpus(spec, a.count, dir.path());
  Manifest m;
  m.set("run.command", "gen-data");
  m.set("gen.generator", generator_name(spec.generator));
  m.set_num("gen.n", static_cast<unsigned long long>(spec.n));
  m.set_num("gen.count", static_cast<unsigned long long>(a.count));
  m.set_num("gen.seed", static_cast<unsigned long long>(spec.seed));
  m.set_num("gen.noise", spec.noise_std);
  m.set_num("gen.freestream", spec.freestream);
  for (const auto& e : entries) m.set("artifact." + e.filename, file_digest(dir.path() / e.filename));
  m.set("artifact.manifest.csv", file_digest(dir.path() / "manifest.csv"));
  m.save(dir.path() / "run_manifest.txt");
  dir.commit();
  out << "gen-data: wrote " << entries.size() << " " << generator_name(spec.generator) << " samples to "
      << dir.target().string() << '\n';
  return kExitOk;
}

struct DataArgs {
  std::string data;
  std::string test;
  std::string out;
  bool overwrite = false;
};

int cmd_train(const ConfigFlags& flags, const DataArgs& a, std::ostream& out) {
  const Manifest resolved = flags.resolve();
  const auto data = load_data(a.data, "--data");
  const auto [mc, tc] = build_configs(resolved, data);
  StagedDir dir(a.out, a.overwrite);
  out << "train: " << data.size() << " samples, mask " << mc.mask.label() << ", " << tc.epochs
      << " epochs, " << precision_name(tc.precision) << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult res = train(mc, data, tc, dir.path(), [&](const HistoryRow& r) {
    out << "  epoch " << r.epoch << " step " << r.step << " lr " << fmt(r.lr) << " loss "
        << fmt(r.train_loss);
    if (r.val_rl2) out << " val_rl2 " << fmt(*r.val_rl2);
    out << std::endl;
  });
  Manifest m = Manifest::load(dir.path() / "run_manifest.txt");
  tc.to_manifest(m);
  m.set("run.command", "train");
  m.set("data.dir", fs::absolute(a.data).lexically_normal().string());
  m.set("data.fingerprint", data_fingerprint(a.data));
  m.set_num("data.samples", static_cast<unsigned long long>(data.size()));
  m.set_num("run.wall_seconds",
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  m.save(dir.path() / "run_manifest.txt");
  dir.commit();
  out << "train: best epoch " << res.best_epoch << " score " << fmt(res.best_score) << ", artifacts in "
      << dir.target().string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string grouping;
  std::string out;
  bool overwrite = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_ckpt_arg(a.checkpoint);
  const auto data = load_data(a.data, "--data");
  std::vector<FieldGroup> groups;
  try {
    const std::string g = !a.grouping.empty() ? a.grouping : ckpt.manifest.get_or("train.grouping", "");
    groups = g.empty() ? inferred_grouping(data) : parse_grouping(g);
    validate_grouping(groups, ckpt.config.out_dim, ckpt.config.in_features);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (data[0].f != ckpt.config.in_features || data[0].o != ckpt.config.out_dim) {
    throw UsageError("--data channels (F=" + std::to_string(data[0].f) + ", O=" + std::to_string(data[0].o) +
                     ") do not match the checkpoint");
  }
  StagedDir dir(a.out, a.overwrite);
  const MetricsReport rep = evaluate(ckpt, data, groups);
  write_text(dir.path() / "metrics.csv", rep.to_csv());
  Manifest m;
  ckpt.config.to_manifest(m);
  m.set("run.command", "eval");
  m.set("run.checkpoint", fs::absolute(a.checkpoint).lexically_normal().string());
  m.set("run.grouping", grouping_str(groups));
  m.set("run.fingerprint", rep.fingerprint);
  m.set("artifact.checkpoint", file_digest(a.checkpoint));
  m.set("data.dir", fs::absolute(a.data).lexically_normal().string());
  m.set("data.fingerprint", data_fingerprint(a.data));
  m.set("artifact.metrics.csv", file_digest(dir.path() / "metrics.csv"));
  m.save(dir.path() / "run_manifest.txt");
  dir.commit();
  for (const auto& r : rep.rows) out << "eval: " << r.field << " rl2 " << fmt(r.rl2) << " mae " << fmt(r.mae) << '\n';
  return kExitOk;
}

struct AblateArgs {
  DataArgs data;
  std::string masks = "G,L,M,GL,GM,LM,GLM";
  std::string seeds = "0,1,2";
};

int cmd_ablate(const ConfigFlags& flags, const AblateArgs& a, std::ostream& out) {
  std::vector<ModuleMask> masks;
  try {
    for (const auto& tok : split(a.masks, ',')) masks.push_back(ModuleMask::parse(tok));
  } catch (const std::exception& e) {
    throw UsageError(std::string("--masks: ") + e.what());
  }
  if (masks.empty()) throw UsageError("--masks: empty list");
  const auto seeds = parse_list<std::uint64_t>(a.seeds, "--seeds");
  const Manifest resolved = flags.resolve();
  const auto data = load_data(a.data.data, "--data");
  std::vector<PointSample> test;
  if (!a.data.test.empty()) test = load_data(a.data.test, "--test");
  if (test.empty() && data.size() < 2) throw UsageError("ablate: need --test or at least two samples");
  auto [mc, tc] = build_configs(resolved, data);
  if (!test.empty() && (test[0].f != data[0].f || test[0].o != data[0].o)) {
    throw UsageError("--test channels do not match --data");
  }
  StagedDir dir(a.data.out, a.data.overwrite);
  out << "ablate: " << masks.size() << " masks x " << seeds.size() << " seeds, " << tc.epochs << " epochs each\n";
  const auto rows = ablate(mc, tc, data, test, masks, seeds, [&](const AblationRow& r) {
    out << "  " << r.mask.label() << " seed " << r.seed;
    for (const auto& m : r.report.rows) out << ' ' << m.field << '=' << fmt(m.rl2);
    out << std::endl;
  });
  write_text(dir.path() / "ablation.csv", ablation_csv(rows));
  write_text(dir.path() / "table.csv", ablation_table_csv(rows));
  Manifest m;
  mc.to_manifest(m);
  tc.to_manifest(m);
  m.set("run.command", "ablate");
  m.set("run.masks", a.masks);
  m.set("run.seeds", a.seeds);
  m.set("data.dir", fs::absolute(a.data.data).lexically_normal().string());
  m.set("data.fingerprint", data_fingerprint(a.data.data));
  if (!a.data.test.empty()) {
    m.set("data.test_dir", fs::absolute(a.data.test).lexically_normal().string());
    m.set("data.test_fingerprint", data_fingerprint(a.data.test));
  }
  m.set("artifact.ablation.csv", file_digest(dir.path() / "ablation.csv"));
  m.set("artifact.table.csv", file_digest(dir.path() / "table.csv"));
  m.save(dir.path() / "run_manifest.txt");
  dir.commit();
  out << "ablate: wrote " << dir.target().string() << "/table.csv\n";
  return kExitOk;
}

struct GradArgs {
  std::size_t n = 8;
  std::size_t features = 2;
  std::size_t outputs = 2;
  std::size_t dim = 4;
  std::size_t modes = 2;
  std::size_t heads = 1;
  std::size_t k = 2;
  std::size_t blocks = 1;
  std::string mask = "GLM";
  double h = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 0;
  std::string out;
  bool overwrite = false;
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  MnoConfig cfg;
  try {
    cfg.blocks = a.blocks;
    cfg.dim = a.dim;
    cfg.modes = a.modes;
    cfg.heads = a.heads;
    cfg.k = a.k;
    cfg.mask = ModuleMask::parse(a.mask);
    cfg.in_features = a.features;
    cfg.out_dim = a.outputs;
    cfg.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (a.n < a.k) throw UsageError("--n must be at least --k");
  if (!(a.h > 0)) throw UsageError("--step must be positive");
  std::optional<StagedDir> dir;
  if (!a.out.empty()) dir.emplace(a.out, a.overwrite);

  // Random, well-separated sample: uniform positions, normal features/targets.
  Rng rng(a.seed);
  std::uniform_real_distribution<float> unit(-1.0f, 1.0f);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  PointSample s;
  s.n = a.n;
  s.f = a.features;
  s.o = a.outputs;
  s.name = "gradcheck";
  s.positions.resize(a.n * 3);
  s.features.resize(a.n * a.features);
  s.targets.resize(a.n * a.outputs);
  for (auto& v : s.positions) v = unit(rng);
  for (auto& v : s.features) v = normal(rng);
  for (auto& v : s.targets) v = normal(rng);

  const auto model = MnoModel<double>::init(cfg, a.seed);
  const GradCheckReport rep = gradient_check(model, s, a.h);
  const bool pass = rep.max_rel_error < a.tol;
  if (dir) {
    std::ostringstream csv;
    csv << std::setprecision(9) << "max_rel_error,worst_param,worst_index,checked_params,checked_scalars,tol\n"
        << rep.max_rel_error << ',' << rep.worst_param << ',' << rep.worst_index << ','
        << rep.checked_params << ',' << rep.checked_scalars << ',' << a.tol << '\n';
    write_text(dir->path() / "gradcheck.csv", csv.str());
    Manifest m;
    cfg.to_manifest(m);
    m.set("run.command", "gradcheck");
    m.set_num("run.n", static_cast<unsigned long long>(a.n));
    m.set_num("run.h", a.h);
    m.set_num("run.seed", static_cast<unsigned long long>(a.seed));
    m.set("artifact.gradcheck.csv", file_digest(dir->path() / "gradcheck.csv"));
    m.save(dir->path() / "run_manifest.txt");
    dir->commit();
  }
  out << "gradcheck: " << (pass ? "PASS" : "FAIL") << " max_rel_error " << fmt(rep.max_rel_error)
      << " (worst " << rep.worst_param << "[" << rep.worst_index << "]) over " << rep.checked_scalars
      << " scalars in " << rep.checked_params << " tensors\n";
  return pass ? kExitOk : kExitRuntime;
}

struct BenchArgs {
  std::string module = "global";
  std::string n = "1000,2000,4000,8000";
  std::string modes = "64";
  std::size_t k = 8;
  std::size_t dim = 64;
  std::size_t heads = 8;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  std::string out;
  bool overwrite = false;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  std::vector<std::string> modules;
  if (a.module == "all") modules = {"global", "local", "micro"};
  else modules = {a.module};
  for (const auto& m : modules)
    if (m != "global" && m != "local" && m != "micro")
      throw UsageError("--module must be global, local, micro or all");
  BenchSpec spec;
  spec.n_values = parse_list<std::size_t>(a.n, "--n");
  spec.modes_values = parse_list<std::size_t>(a.modes, "--modes");
  spec.k = a.k;
  spec.dim = a.dim;
  spec.heads = a.heads;
  spec.repeats = a.repeats;
  spec.seed = a.seed;
  if (a.repeats == 0) throw UsageError("--repeats must be positive");
  if (a.heads == 0 || a.dim % a.heads != 0) throw UsageError("--dim must be a multiple of --heads");
  for (auto n : spec.n_values)
    if (n < a.k) throw UsageError("--n values must be at least --k");
  std::optional<StagedDir> dir;
  if (!a.out.empty()) dir.emplace(a.out, a.overwrite);
  std::vector<BenchRow> rows;
  for (const auto& m : modules) {
    spec.module = m;
    for (auto& r : bench_module(spec)) rows.push_back(r);
  }
  const std::string csv = bench_csv(rows);
  out << csv;
  if (dir) {
    write_text(dir->path() / "bench.csv", csv);
    Manifest m;
    m.set("run.command", "bench");
    m.set("run.module", a.module);
    m.set("run.n", a.n);
    m.set("run.modes", a.modes);
    m.set_num("run.k", static_cast<unsigned long long>(a.k));
    m.set_num("run.dim", static_cast<unsigned long long>(a.dim));
    m.set_num("run.heads", static_cast<unsigned long long>(a.heads));
    m.set_num("run.repeats", static_cast<unsigned long long>(a.repeats));
    m.set_num("run.seed", static_cast<unsigned long long>(a.seed));
    m.set("artifact.bench.csv", file_digest(dir->path() / "bench.csv"));
    m.save(dir->path() / "run_manifest.txt");
    dir->commit();
  }
  return kExitOk;
}

struct DumpArgs {
  std::string checkpoint;
  std::string sample;
  std::string out;
  bool overwrite = false;
};

int cmd_dump(const DumpArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_ckpt_arg(a.checkpoint);
  if (a.sample.empty()) throw UsageError("--sample is required");
  if (!fs::is_regular_file(a.sample)) throw UsageError("--sample: cannot read '" + a.sample + "'");
  const PointSample sample = read_pointset(a.sample);
  if (sample.f != ckpt.config.in_features || sample.o != ckpt.config.out_dim) {
    throw UsageError("--sample channels (F=" + std::to_string(sample.f) + ", O=" + std::to_string(sample.o) +
                     ") do not match the checkpoint (F=" + std::to_string(ckpt.config.in_features) +
                     ", O=" + std::to_string(ckpt.config.out_dim) + ")");
  }
  StagedDir dir(a.out, a.overwrite);
  write_text(dir.path() / "fields.csv", dump_fields(ckpt, sample));
  Manifest m;
  ckpt.config.to_manifest(m);
  m.set("run.command", "dump-fields");
  m.set("run.checkpoint", fs::absolute(a.checkpoint).lexically_normal().string());
  m.set("run.sample", fs::absolute(a.sample).lexically_normal().string());
  m.set("artifact.checkpoint", file_digest(a.checkpoint));
  m.set("artifact.sample", file_digest(a.sample));
  m.set("artifact.fields.csv", file_digest(dir.path() / "fields.csv"));
  m.save(dir.path() / "run_manifest.txt");
  dir.commit();
  out << "dump-fields: " << sample.n << " points to " << (dir.target() / "fields.csv").string() << '\n';
  return kExitOk;
}

void add_out(CLI::App* app, std::string& out, bool& overwrite, bool required) {
  auto* o = app->add_option("--out", out, "output directory");
  if (required) o->required();
  app->add_flag("--overwrite", overwrite, "replace an existing output directory");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiscale neural operator on point clouds", "mno"};
  app.require_subcommand(1, 1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "write a synthetic MNO1 corpus");
  c_gen->add_option("--generator", gen.generator, "sphere-flow or gaussian-field");
  c_gen->add_option("--n", gen.n, "points per sample");
  c_gen->add_option("--count", gen.count, "number of samples");
  c_gen->add_option("--seed", gen.seed, "base seed");
  c_gen->add_option("--noise", gen.noise, "std of Gaussian noise added to targets");
  c_gen->add_option("--freestream", gen.freestream, "sphere-flow freestream speed");
  add_out(c_gen, gen.out, gen.overwrite, true);

  ConfigFlags train_flags;
  DataArgs train_args;
  auto* c_train = app.add_subcommand("train", "train a model on a corpus");
  c_train->add_option("--config", train_flags.config_path, "key=value config file");
  c_train->add_option("--data", train_args.data, "corpus directory")->required();
  add_out(c_train, train_args.out, train_args.overwrite, true);
  add_model_flags(c_train, train_flags);
  add_train_flags(c_train, train_flags);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score a checkpoint on a corpus");
  c_eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  c_eval->add_option("--data", ev.data, "corpus directory")->required();
  c_eval->add_option("--grouping", ev.grouping, "field groups (default: the training grouping)");
  add_out(c_eval, ev.out, ev.overwrite, true);

  ConfigFlags ablate_flags;
  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "train and score one model per module mask and seed");
  c_ablate->add_option("--config", ablate_flags.config_path, "key=value config file");
  c_ablate->add_option("--data", ab.data.data, "training corpus")->required();
  c_ablate->add_option("--test", ab.data.test, "held-out corpus (default: tail of --data)");
  c_ablate->add_option("--masks", ab.masks, "comma-separated module masks");
  c_ablate->add_option("--seeds", ab.seeds, "comma-separated seeds");
  add_out(c_ablate, ab.data.out, ab.data.overwrite, true);
  add_model_flags(c_ablate, ablate_flags);
  add_train_flags(c_ablate, ablate_flags);

  GradArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "compare reverse-mode and finite-difference gradients");
  c_grad->add_option("--n", gc.n, "points");
  c_grad->add_option("--features", gc.features, "input features F");
  c_grad->add_option("--outputs", gc.outputs, "output channels O");
  c_grad->add_option("--dim", gc.dim, "latent width D");
  c_grad->add_option("--modes", gc.modes, "global modes M");
  c_grad->add_option("--heads", gc.heads, "attention heads");
  c_grad->add_option("--k", gc.k, "neighbors per point");
  c_grad->add_option("--blocks", gc.blocks, "blocks");
  c_grad->add_option("--mask", gc.mask, "enabled modules");
  c_grad->add_option("--step", gc.h, "finite-difference step");
  c_grad->add_option("--tol", gc.tol, "maximum accepted relative error");
  c_grad->add_option("--seed", gc.seed, "seed");
  add_out(c_grad, gc.out, gc.overwrite, false);

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "time attention modules against N and M");
  c_bench->add_option("--module", bn.module, "global, local, micro or all");
  c_bench->add_option("--n", bn.n, "comma-separated point counts");
  c_bench->add_option("--modes", bn.modes, "comma-separated mode counts");
  c_bench->add_option("--k", bn.k, "neighbors per point");
  c_bench->add_option("--dim", bn.dim, "latent width D");
  c_bench->add_option("--heads", bn.heads, "attention heads");
  c_bench->add_option("--repeats", bn.repeats, "minimum timed repetitions (minimum time is reported)");
  c_bench->add_option("--seed", bn.seed, "seed");
  add_out(c_bench, bn.out, bn.overwrite, false);

  DumpArgs dump;
  auto* c_dump = app.add_subcommand("dump-fields", "write per-point truth/prediction/error CSV");
  c_dump->add_option("--checkpoint", dump.checkpoint, "checkpoint file")->required();
  c_dump->add_option("--sample", dump.sample, "MNO1 sample file")->required();
  add_out(c_dump, dump.out, dump.overwrite, true);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "mno: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen(gen, out);
    if (c_train->parsed()) return cmd_train(train_flags, train_args, out);
    if (c_eval->parsed()) return cmd_eval(ev, out);
    if (c_ablate->parsed()) return cmd_ablate(ablate_flags, ab, out);
    if (c_grad->parsed()) return cmd_gradcheck(gc, out);
    if (c_bench->parsed()) return cmd_bench(bn, out);
    if (c_dump->parsed()) return cmd_dump(dump, out);
  } catch (const UsageError& e) {
    err << "mno: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "mno: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "mno: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace mno
