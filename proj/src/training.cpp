#include "mno/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mno/errors.hpp"

namespace mno {

// ---------------------------------------------------------------------------
// Metrics

double rl2(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("rl2: size mismatch");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    den += truth[i] * truth[i];
  }
  if (!(den > 0)) throw NumericError("rl2: reference field has zero norm");
  const double r = std::sqrt(num) / std::sqrt(den);
  if (!std::isfinite(r)) throw NumericError("rl2: non-finite result");
  return r;
}

double mae(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("mae: size mismatch");
  if (pred.empty()) throw std::invalid_argument("mae: empty field");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Field grouping

std::vector<FieldGroup> parse_grouping(const std::string& spec) {
  std::vector<FieldGroup> groups;
  std::stringstream ss(spec);
  std::string item;
  const auto num = [&](const std::string& s) -> std::size_t {
    if (s.empty() || !std::all_of(s.begin(), s.end(), ::isdigit)) {
      throw std::invalid_argument("grouping '" + spec + "': bad number '" + s + "'");
    }
    return std::stoul(s);
  };
  while (std::getline(ss, item, ',')) {
    FieldGroup g;
    const auto colon = item.find(':');
    if (colon == std::string::npos || colon == 0) {
      throw std::invalid_argument("grouping entry '" + item + "' must look like name:a-b");
    }
    g.name = item.substr(0, colon);
    std::string rest = item.substr(colon + 1);
    if (auto at = rest.find('@'); at != std::string::npos) {
      g.zero_feature = num(rest.substr(at + 1));
      rest = rest.substr(0, at);
    }
    if (auto slash = rest.find('/'); slash != std::string::npos) {
      g.steps = num(rest.substr(slash + 1));
      rest = rest.substr(0, slash);
    }
    if (auto dash = rest.find('-'); dash != std::string::npos) {
      g.begin = num(rest.substr(0, dash));
      g.end = num(rest.substr(dash + 1)) + 1;
    } else {
      g.begin = num(rest);
      g.end = g.begin + 1;
    }
    if (g.end <= g.begin) throw std::invalid_argument("grouping entry '" + item + "': empty range");
    if (g.steps == 0 || g.width() % g.steps != 0) {
      throw std::invalid_argument("grouping entry '" + item + "': " + std::to_string(g.width()) +
                                  " channels cannot split into " + std::to_string(g.steps) +
                                  " steps");
    }
    groups.push_back(g);
  }
  if (groups.empty()) throw std::invalid_argument("grouping is empty");
  return groups;
}

std::string grouping_str(const std::vector<FieldGroup>& groups) {
  std::string s;
  for (const auto& g : groups) {
    if (!s.empty()) s += ',';
    s += g.name + ":" + std::to_string(g.begin);
    if (g.width() > 1) s += "-" + std::to_string(g.end - 1);
    if (g.steps > 1) s += "/" + std::to_string(g.steps);
    if (g.zero_feature) s += "@" + std::to_string(*g.zero_feature);
  }
  return s;
}

std::vector<FieldGroup> default_grouping(std::size_t out_dim) {
  return {FieldGroup{"all", 0, out_dim, 1, std::nullopt}};
}

void validate_grouping(const std::vector<FieldGroup>& groups, std::size_t out_dim,
                       std::size_t in_features) {
  for (const auto& g : groups) {
    if (g.end > out_dim) {
      throw std::invalid_argument("field '" + g.name + "' references output channel " +
                                  std::to_string(g.end - 1) + " but O=" + std::to_string(out_dim));
    }
    if (g.zero_feature && *g.zero_feature >= in_features) {
      throw std::invalid_argument("field '" + g.name + "' filters on feature " +
                                  std::to_string(*g.zero_feature) + " but F=" +
                                  std::to_string(in_features));
    }
  }
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (!(max_lr >= 0) || !std::isfinite(max_lr)) {
    throw std::invalid_argument("train: max_lr must be finite and non-negative");
  }
  if (loss != "rl2") throw std::invalid_argument("train: unsupported loss '" + loss + "'");
  if (!(val_fraction >= 0 && val_fraction < 1)) {
    throw std::invalid_argument("train: val_fraction must lie in [0, 1)");
  }
}

void TrainConfig::to_manifest(Manifest& m) const {
  m.set_num("train.epochs", static_cast<unsigned long long>(epochs));
  m.set_num("train.batch_size", static_cast<unsigned long long>(batch_size));
  m.set_num("train.max_lr", max_lr);
  m.set_num("train.seed", static_cast<unsigned long long>(seed));
  m.set("train.precision", precision_name(precision));
  m.set("train.loss", loss);
  m.set("train.grouping", grouping.empty() ? "" : grouping_str(grouping));
  m.set_num("train.beta1", adamw.beta1);
  m.set_num("train.beta2", adamw.beta2);
  m.set_num("train.eps", adamw.eps);
  m.set_num("train.weight_decay", adamw.weight_decay);
  m.set_num("train.pct_start", schedule.pct_start);
  m.set_num("train.div_start", schedule.div_start);
  m.set_num("train.div_final", schedule.div_final);
  m.set_num("train.val_fraction", val_fraction);
}

TrainConfig TrainConfig::from_manifest(const Manifest& m) {
  TrainConfig c;
  const auto d = [&](const char* key, double fallback) {
    return m.has(key) ? std::stod(m.get(key)) : fallback;
  };
  const auto u = [&](const char* key, unsigned long long fallback) {
    return m.has(key) ? std::stoull(m.get(key)) : fallback;
  };
  c.epochs = u("train.epochs", c.epochs);
  c.batch_size = u("train.batch_size", c.batch_size);
  c.max_lr = d("train.max_lr", c.max_lr);
  c.seed = u("train.seed", c.seed);
  if (m.has("train.precision")) c.precision = parse_precision(m.get("train.precision"));
  c.loss = m.get_or("train.loss", c.loss);
  if (!m.get_or("train.grouping", "").empty()) c.grouping = parse_grouping(m.get("train.grouping"));
  c.adamw.beta1 = d("train.beta1", c.adamw.beta1);
  c.adamw.beta2 = d("train.beta2", c.adamw.beta2);
  c.adamw.eps = d("train.eps", c.adamw.eps);
  c.adamw.weight_decay = d("train.weight_decay", c.adamw.weight_decay);
  c.schedule.pct_start = d("train.pct_start", c.schedule.pct_start);
  c.schedule.div_start = d("train.div_start", c.schedule.div_start);
  c.schedule.div_final = d("train.div_final", c.schedule.div_final);
  c.val_fraction = d("train.val_fraction", c.val_fraction);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// MetricsReport

const MetricRow& MetricsReport::row(const std::string& field) const {
  for (const auto& r : rows)
    if (r.field == field) return r;
  throw std::invalid_argument("metrics report has no field '" + field + "'");
}

double MetricsReport::mean_rl2() const {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.field.find('@') != std::string::npos) continue;
    s += r.rl2;
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "field,rl2,mae,samples,wall_seconds,fingerprint\n";
  for (const auto& r : rows) {
    os << r.field << ',' << r.rl2 << ',' << r.mae << ',' << samples << ',' << wall_seconds << ','
       << fingerprint << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Samples and losses

PreparedSample prepare_sample(const PointSample& raw, const NormStats& stats, std::size_t k,
                              const std::vector<FieldGroup>& groups) {
  PreparedSample p;
  p.raw = raw;
  p.normalized = normalize_sample(raw, stats);
  p.graph = knn_graph(p.normalized.positions, k);
  for (const auto& g : groups) {
    std::vector<int> keep;
    if (g.zero_feature) {
      for (std::size_t i = 0; i < raw.n; ++i)
        if (raw.features[i * raw.f + *g.zero_feature] == 0.0f) keep.push_back(static_cast<int>(i));
      if (keep.empty()) {
        throw DataError("sample '" + raw.name + "' has no points for field '" + g.name + "'");
      }
    }
    p.group_points.push_back(std::move(keep));
  }
  return p;
}

namespace {

template <typename T>
Var<T> denormalize_output(Var<T> out, const NormStats& stats) {
  return affine_cols(out, std::vector<T>(stats.target_std.begin(), stats.target_std.end()),
                     std::vector<T>(stats.target_mean.begin(), stats.target_mean.end()));
}

template <typename T>
Tensor<T> group_truth(const PointSample& raw, const FieldGroup& g, const std::vector<int>& points) {
  const std::size_t rows = points.empty() ? raw.n : points.size();
  Tensor<T> t({rows, g.width()});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t i = points.empty() ? r : static_cast<std::size_t>(points[r]);
    for (std::size_t c = 0; c < g.width(); ++c) t.at(r, c) = raw.targets[i * raw.o + g.begin + c];
  }
  return t;
}

}  // namespace

template <typename T>
Var<T> sample_loss(const MnoModel<T>& model, ParamBinding<T>& params, const PreparedSample& s,
                   const NormStats& stats, const std::vector<FieldGroup>& groups) {
  Var<T> pred = denormalize_output(forward(model, params, s.normalized, s.graph), stats);
  std::vector<Var<T>> terms;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const auto& pts = s.group_points.at(gi);
    Var<T> rows = pts.empty() ? pred : gather_rows(pred, pts);
    Var<T> field = (g.begin == 0 && g.end == model.config.out_dim) ? rows
                                                                  : slice_cols(rows, g.begin, g.end);
    try {
      terms.push_back(relative_l2(field, group_truth<T>(s.raw, g, pts)));
    } catch (const NumericError& e) {
      throw NumericError("sample '" + s.raw.name + "', field '" + g.name + "': " + e.what());
    }
  }
  return scale(add_scalars(terms), T(1) / static_cast<T>(terms.size()));
}

template <typename T>
Tensor<T> predict_physical(const MnoModel<T>& model, const PreparedSample& s,
                           const NormStats& stats) {
  Tape<T> tape;
  ParamBinding<T> binding(tape, model.params);
  return denormalize_output(forward(model, binding, s.normalized, s.graph), stats).value();
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::vector<FieldGroup> effective_groups(const TrainConfig& cfg, const MnoConfig& m) {
  auto g = cfg.grouping.empty() ? default_grouping(m.out_dim) : cfg.grouping;
  validate_grouping(g, m.out_dim, m.in_features);
  return g;
}

template <typename T>
ParamSet<float> to_float_params(const ParamSet<T>& p) {
  return p.template cast<float>();
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(MnoModel<T> model, std::vector<PointSample> train,
                    std::vector<PointSample> val, TrainConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)), shuffle_rng_(cfg_.seed ^ 0x9E3779B97F4A7C15ULL) {
  cfg_.validate();
  if (train.empty()) throw std::invalid_argument("train: dataset is empty");
  cfg_.grouping = effective_groups(cfg_, model_.config);
  for (const auto& s : train) {
    if (s.f != model_.config.in_features || s.o != model_.config.out_dim) {
      throw DataError("sample '" + s.name + "' channel counts do not match the model");
    }
  }
  stats_ = NormStats::fit(train);
  for (const auto& s : train) train_.push_back(prepare_sample(s, stats_, model_.config.k, cfg_.grouping));
  for (const auto& s : val) val_.push_back(prepare_sample(s, stats_, model_.config.k, cfg_.grouping));
  opt_.config = cfg_.adamw;
  const std::size_t per_epoch = (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  total_steps_ = per_epoch * cfg_.epochs;
}

template <typename T>
double Trainer<T>::step(const std::vector<std::size_t>& batch) {
  if (batch.empty()) throw std::invalid_argument("Trainer::step: empty batch");
  if (steps_done_ >= total_steps_) throw std::logic_error("Trainer::step: schedule exhausted");
  model_.params.zero_grad();
  const T inv_b = T(1) / static_cast<T>(batch.size());
  double batch_loss = 0;
  for (std::size_t idx : batch) {
    const PreparedSample& s = train_.at(idx);
    Tape<T> tape;
    ParamBinding<T> binding(tape, model_.params);
    Var<T> loss;
    try {
      loss = sample_loss(model_, binding, s, stats_, cfg_.grouping);
    } catch (const NumericError& e) {
      throw TrainingAborted("non-finite loss at step " + std::to_string(steps_done_) +
                            " on sample '" + s.raw.name + "': " + e.what());
    }
    const double lv = static_cast<double>(loss.value().item());
    if (!std::isfinite(lv)) {
      throw TrainingAborted("non-finite loss at step " + std::to_string(steps_done_) +
                            " on sample '" + s.raw.name + "'");
    }
    batch_loss += lv;
    tape.backward(loss);
    for (const auto& [path, var] : binding.bound()) {
      auto& p = model_.params.at(path);
      if (!p.trainable || !tape.has_grad(var.id)) continue;
      auto g = tape.grad(var.id);
      for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i] * inv_b;
    }
  }
  last_lr_ = onecycle_lr(static_cast<std::int64_t>(steps_done_),
                         static_cast<std::int64_t>(total_steps_), cfg_.max_lr > 0 ? cfg_.max_lr : 1.0,
                         cfg_.schedule);
  if (cfg_.max_lr == 0) last_lr_ = 0;
  adamw_step(opt_, model_.params, last_lr_);
  ++steps_done_;
  return batch_loss / static_cast<double>(batch.size());
}

template <typename T>
const HistoryRow& Trainer<T>::run_epoch() {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), shuffle_rng_);
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(order.size(), b + cfg_.batch_size)));
    total += step(batch);
    ++batches;
  }
  HistoryRow row;
  row.epoch = history_.size() + 1;
  row.step = steps_done_;
  row.lr = last_lr_;
  row.train_loss = total / static_cast<double>(batches);
  if (!val_.empty()) row.val_rl2 = mean_loss(val_);
  history_.push_back(row);
  return history_.back();
}

template <typename T>
double Trainer<T>::mean_loss(const std::vector<PreparedSample>& set) const {
  double total = 0;
  for (const auto& s : set) {
    Tape<T> tape;
    ParamBinding<T> binding(tape, model_.params);
    total += static_cast<double>(sample_loss(model_, binding, s, stats_, cfg_.grouping).value().item());
  }
  return total / static_cast<double>(set.size());
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint c;
  c.config = model_.config;
  c.params = to_float_params(model_.params);
  c.stats = stats_;
  cfg_.to_manifest(c.manifest);
  c.manifest.set_num("train.steps_done", static_cast<unsigned long long>(steps_done_));
  c.manifest.set_num("train.epochs_done", static_cast<unsigned long long>(history_.size()));
  return c;
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "epoch,step,lr,train_loss,val_rl2\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.train_loss << ',';
    if (r.val_rl2) os << *r.val_rl2;
    os << '\n';
  }
  return os.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

template <typename T>
TrainResult train_impl(const MnoConfig& model_cfg, const std::vector<PointSample>& dataset,
                       const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir,
                       const EpochCallback& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  std::size_t n_val = 0;
  if (dataset.size() > 1 && cfg.val_fraction > 0) {
    n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(dataset.size()))));
  }
  std::vector<PointSample> tr(dataset.begin(), dataset.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<PointSample> va(dataset.end() - static_cast<std::ptrdiff_t>(n_val), dataset.end());
  Trainer<T> trainer(MnoModel<T>::init(model_cfg, cfg.seed), std::move(tr), std::move(va), cfg);

  TrainResult result;
  result.best_score = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const HistoryRow& row = trainer.run_epoch();
    const double score = row.val_rl2 ? *row.val_rl2 : row.train_loss;
    if (score < result.best_score) {
      result.best_score = score;
      result.best_epoch = row.epoch;
      result.best_checkpoint = trainer.checkpoint();
    }
    if (on_epoch) on_epoch(row);
  }
  result.history = trainer.history();
  result.final_checkpoint = trainer.checkpoint();
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_text(*out_dir / "history.csv", history_csv(result.history));
    save_checkpoint(result.final_checkpoint, *out_dir / "final.ckpt");
    save_checkpoint(result.best_checkpoint, *out_dir / "best.ckpt");
    Manifest m = result.final_checkpoint.manifest;
    model_cfg.to_manifest(m);
    m.set_num("run.best_epoch", static_cast<unsigned long long>(result.best_epoch));
    m.set_num("run.best_score", result.best_score);
    m.set("artifact.final.ckpt", file_digest(*out_dir / "final.ckpt"));
    m.set("artifact.best.ckpt", file_digest(*out_dir / "best.ckpt"));
    m.set("artifact.history.csv", file_digest(*out_dir / "history.csv"));
    m.save(*out_dir / "run_manifest.txt");
  }
  return result;
}

}  // namespace

TrainResult train(const MnoConfig& model_cfg, const std::vector<PointSample>& dataset,
                  const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir,
                  const EpochCallback& on_epoch) {
  if (cfg.precision == Precision::kFloat64) {
    return train_impl<double>(model_cfg, dataset, cfg, out_dir, on_epoch);
  }
  return train_impl<float>(model_cfg, dataset, cfg, out_dir, on_epoch);
}

// ---------------------------------------------------------------------------
// Evaluation

MetricsReport evaluate_predictions(const std::vector<std::vector<double>>& predictions,
                                   const std::vector<PointSample>& dataset,
                                   const std::vector<FieldGroup>& groups) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  if (predictions.size() != dataset.size()) throw std::invalid_argument("evaluate: prediction count mismatch");
  const std::size_t o = dataset[0].o;
  validate_grouping(groups, o, dataset[0].f);

  struct Acc {
    std::string field;
    double rl2 = 0, mae = 0;
  };
  std::vector<Acc> acc;
  for (const auto& g : groups) {
    acc.push_back({g.name});
    if (g.steps > 1)
      for (std::size_t s = 0; s < g.steps; ++s) acc.push_back({g.name + "@" + std::to_string(s + 1)});
  }
  for (std::size_t si = 0; si < dataset.size(); ++si) {
    const auto& sample = dataset[si];
    const auto& pred = predictions[si];
    if (sample.o != o || pred.size() != sample.n * o) {
      throw std::invalid_argument("evaluate: sample '" + sample.name + "' shape mismatch");
    }
    std::size_t a = 0;
    for (const auto& g : groups) {
      std::vector<std::size_t> pts;
      for (std::size_t i = 0; i < sample.n; ++i)
        if (!g.zero_feature || sample.features[i * sample.f + *g.zero_feature] == 0.0f) pts.push_back(i);
      if (pts.empty()) throw DataError("sample '" + sample.name + "' has no points for '" + g.name + "'");
      const auto score = [&](std::size_t c0, std::size_t c1, Acc& out) {
        std::vector<double> p, t;
        for (std::size_t i : pts)
          for (std::size_t c = c0; c < c1; ++c) {
            p.push_back(pred[i * o + c]);
            t.push_back(sample.targets[i * o + c]);
          }
        try {
          out.rl2 += rl2(p, t);
        } catch (const NumericError& e) {
          throw NumericError("sample '" + sample.name + "', field '" + out.field + "': " + e.what());
        }
        out.mae += mae(p, t);
      };
      score(g.begin, g.end, acc[a++]);
      if (g.steps > 1) {
        const std::size_t w = g.width() / g.steps;
        for (std::size_t s = 0; s < g.steps; ++s) score(g.begin + s * w, g.begin + (s + 1) * w, acc[a++]);
      }
    }
  }
  MetricsReport rep;
  rep.samples = dataset.size();
  const double inv = 1.0 / static_cast<double>(dataset.size());
  for (const auto& x : acc) rep.rows.push_back({x.field, x.rl2 * inv, x.mae * inv});
  return rep;
}

MetricsReport evaluate(const Checkpoint& ckpt, const std::vector<PointSample>& dataset,
                       const std::vector<FieldGroup>& groups) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& g = groups.empty() ? default_grouping(ckpt.config.out_dim) : groups;
  validate_grouping(g, ckpt.config.out_dim, ckpt.config.in_features);
  const MnoModel<float> model{ckpt.config, ckpt.params};
  std::vector<std::vector<double>> preds;
  for (const auto& s : dataset) {
    if (s.f != ckpt.config.in_features || s.o != ckpt.config.out_dim) {
      throw std::invalid_argument("evaluate: sample '" + s.name + "' does not match checkpoint channels");
    }
    const PreparedSample p = prepare_sample(s, ckpt.stats, ckpt.config.k, {});
    const Tensor<float> out = predict_physical(model, p, ckpt.stats);
    preds.emplace_back(out.values().begin(), out.values().end());
  }
  MetricsReport rep = evaluate_predictions(preds, dataset, g);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Manifest m;
  ckpt.config.to_manifest(m);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : m.serialize()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  rep.fingerprint = os.str();
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationRow> ablate(const MnoConfig& base, const TrainConfig& cfg,
                                const std::vector<PointSample>& train_data,
                                const std::vector<PointSample>& test,
                                const std::vector<ModuleMask>& masks,
                                const std::vector<std::uint64_t>& seeds,
                                const std::function<void(const AblationRow&)>& on_row) {
  if (masks.empty()) throw std::invalid_argument("ablate: no masks");
  if (seeds.empty()) throw std::invalid_argument("ablate: no seeds");
  std::vector<PointSample> tr = train_data;
  std::vector<PointSample> te = test;
  if (te.empty()) {
    if (train_data.size() < 2) throw std::invalid_argument("ablate: need a held-out set");
    const std::size_t n_te = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(train_data.size()))));
    tr.assign(train_data.begin(), train_data.end() - static_cast<std::ptrdiff_t>(n_te));
    te.assign(train_data.end() - static_cast<std::ptrdiff_t>(n_te), train_data.end());
  }
  std::vector<AblationRow> rows;
  for (const auto& mask : masks) {
    if (!mask.any()) throw std::invalid_argument("ablate: empty module mask");
    for (auto seed : seeds) {
      MnoConfig mc = base;
      mc.mask = mask;
      TrainConfig tc = cfg;
      tc.seed = seed;
      tc.val_fraction = 0;  // the held-out set is scored separately
      TrainResult res = train(mc, tr, tc);
      AblationRow row{mask, seed, evaluate(res.final_checkpoint, te, tc.grouping)};
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "mask,seed,field,rl2,mae\n";
  for (const auto& r : rows)
    for (const auto& m : r.report.rows)
      os << r.mask.label() << ',' << r.seed << ',' << m.field << ',' << m.rl2 << ',' << m.mae << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport gradient_check(const MnoModel<double>& model, const PointSample& sample,
                               double h, const std::vector<FieldGroup>& groups, double floor) {
  if (!(h > 0)) throw std::invalid_argument("gradient_check: h must be positive");
  const auto& g = groups.empty() ? default_grouping(model.config.out_dim) : groups;
  validate_grouping(g, model.config.out_dim, model.config.in_features);
  const NormStats ident = NormStats::identity(sample.f, sample.o);
  const PreparedSample prepared = [&] {
    PreparedSample p = prepare_sample(sample, ident, model.config.k, g);
    // Use the sample exactly as given.
    p.normalized = sample;
    p.graph = knn_graph(sample.positions, model.config.k);
    return p;
  }();

  MnoModel<double> work = model;
  const auto loss_at = [&]() {
    Tape<double> tape;
    ParamBinding<double> binding(tape, work.params);
    return sample_loss(work, binding, prepared, ident, g).value().item();
  };

  Tape<double> tape;
  ParamBinding<double> binding(tape, work.params);
  Var<double> loss = sample_loss(work, binding, prepared, ident, g);
  tape.backward(loss);
  ParamSet<double> grads = work.params;
  binding.collect_grads(grads);

  GradCheckReport rep;
  const auto& mask = model.config.mask;
  for (auto& [path, p] : work.params) {
    if (!p.trainable) continue;
    if ((!mask.global && param_in_module(path, "global")) ||
        (!mask.local && param_in_module(path, "local")) ||
        (!mask.micro && param_in_module(path, "micro"))) {
      continue;
    }
    rep.params.push_back(path);
    ++rep.checked_params;
    const auto& analytic = grads.at(path).grad;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = loss_at();
      p.value[i] = orig - h;
      const double down = loss_at();
      p.value[i] = orig;
      const double fd = (up - down) / (2 * h);
      if (!std::isfinite(fd)) throw NumericError("gradient_check: non-finite difference at " + path);
      const double a = analytic[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
      ++rep.checked_scalars;
      if (rel >= rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = path;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

#define MNO_TRAIN_INSTANTIATE(T)                                                           \
  template Var<T> sample_loss(const MnoModel<T>&, ParamBinding<T>&, const PreparedSample&, \
                              const NormStats&, const std::vector<FieldGroup>&);           \
  template Tensor<T> predict_physical(const MnoModel<T>&, const PreparedSample&,           \
                                      const NormStats&);                                   \
  template class Trainer<T>;

MNO_TRAIN_INSTANTIATE(float)
MNO_TRAIN_INSTANTIATE(double)

namespace {

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

double ablation_median_rl2(const std::vector<AblationRow>& rows, const ModuleMask& mask,
                           const std::string& field) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.mask == mask) v.push_back(r.report.row(field).rl2);
  if (v.empty()) throw std::invalid_argument("ablation: no rows for mask " + mask.label());
  return median(std::move(v));
}

std::string ablation_table_csv(const std::vector<AblationRow>& rows) {
  if (rows.empty()) return "mask\n";
  std::vector<std::string> fields;
  for (const auto& m : rows.front().report.rows)
    if (m.field.find('@') == std::string::npos) fields.push_back(m.field);
  std::vector<ModuleMask> masks;
  for (const auto& r : rows)
    if (std::find(masks.begin(), masks.end(), r.mask) == masks.end()) masks.push_back(r.mask);

  std::ostringstream os;
  os << std::setprecision(9) << "mask";
  for (const auto& f : fields) os << ',' << f << "_rl2," << f << "_mae";
  os << ",mean_rl2\n";
  for (const auto& mask : masks) {
    os << mask.label();
    double total = 0;
    for (const auto& f : fields) {
      std::vector<double> m;
      for (const auto& r : rows)
        if (r.mask == mask) m.push_back(r.report.row(f).mae);
      const double r2 = ablation_median_rl2(rows, mask, f);
      total += r2;
      os << ',' << r2 << ',' << median(std::move(m));
    }
    os << ',' << total / static_cast<double>(fields.size()) << '\n';
  }
  return os.str();
}

}  // namespace mno
