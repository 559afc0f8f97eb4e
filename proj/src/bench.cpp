#include "mno/bench.hpp"

#include <chrono>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mno/model.hpp"

namespace mno {
namespace {

double time_module(const std::string& module, const MnoModel<float>& model, const Tensor<float>& x,
                   const NeighborGraph& graph, std::size_t repeats) {
  // At least `repeats` runs, and enough of them to span ~250 ms, so that the
  // minimum of short kernels is not at the mercy of a few noisy samples.
  double best = std::numeric_limits<double>::infinity();
  double spent = 0;
  for (std::size_t r = 0; r < repeats || spent < 250.0; ++r) {
    Tape<float> tape;
    ParamBinding<float> params(tape, model.params);
    Var<float> xv = tape.constant(x);
    Var<float> offsets = module == "local" ? offsets_constant(tape, graph) : Var<float>{};
    const std::string pre = block_prefix(0) + "." + module;
    const auto t0 = std::chrono::steady_clock::now();
    if (module == "global") global_attention(model.config, params, pre, xv);
    else if (module == "local") local_attention(model.config, params, pre, xv, graph, offsets);
    else micro_attention(model.config, params, pre, xv);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    best = std::min(best, ms);
    spent += ms;
  }
  return best;
}

}  // namespace

std::vector<BenchRow> bench_module(const BenchSpec& spec) {
  if (spec.module != "global" && spec.module != "local" && spec.module != "micro") {
    throw std::invalid_argument("bench: unknown module '" + spec.module + "' (global|local|micro)");
  }
  if (spec.n_values.empty() || spec.modes_values.empty() || spec.repeats == 0) {
    throw std::invalid_argument("bench: need at least one N, one M and one repeat");
  }
  const bool sweep_n = spec.n_values.size() > 1;
  std::vector<BenchRow> rows;
  for (std::size_t m : spec.modes_values) {
    for (std::size_t n : spec.n_values) {
      if (n < spec.k) throw std::invalid_argument("bench: N must be at least k");
      MnoConfig cfg;
      cfg.blocks = 1;
      cfg.dim = spec.dim;
      cfg.modes = m;
      cfg.heads = spec.heads;
      cfg.k = spec.k;
      cfg.in_features = 0;
      cfg.out_dim = 1;
      const auto model = MnoModel<float>::init(cfg, spec.seed);
      Rng rng(spec.seed + n);
      std::uniform_real_distribution<float> unit(-1.0f, 1.0f);
      Tensor<float> x({n, spec.dim});
      for (auto& v : x.values()) v = unit(rng);
      NeighborGraph graph;
      if (spec.module == "local") {
        std::vector<float> pos(n * 3);
        for (auto& v : pos) v = unit(rng);
        graph = knn_graph(pos, spec.k);
      }
      time_module(spec.module, model, x, graph, 1);  // warm-up (also >= 250 ms)
      BenchRow row{spec.module, n, m, spec.k, spec.dim,
                   time_module(spec.module, model, x, graph, spec.repeats), 0.0};
      rows.push_back(row);
    }
  }
  // Ratios along the swept axis.
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const bool same_sweep = sweep_n ? rows[i].modes == rows[i - 1].modes : rows[i].n == rows[i - 1].n;
    if (same_sweep) rows[i].ratio = rows[i].ms / rows[i - 1].ms;
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "module,n,modes,k,dim,ms,ratio\n";
  for (const auto& r : rows) {
    os << r.module << ',' << r.n << ',' << r.modes << ',' << r.k << ',' << r.dim << ',' << r.ms << ','
       << r.ratio << '\n';
  }
  return os.str();
}

}  // namespace mno
