#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mno/geometry.hpp"
#include "mno/model.hpp"

namespace mno {

/// Exit statuses of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `mno` tool. `args` excludes the program name.
/// Subcommands: gen-data, train, eval, ablate, gradcheck, bench, dump-fields.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

/// Per-point CSV with x,y,z, truth_<c>, pred_<c>, abs_err_<c> columns in
/// physical units. Throws std::invalid_argument when the sample's channels
/// do not match the checkpoint.
std::string dump_fields(const Checkpoint& ckpt, const PointSample& sample);

}  // namespace mno
