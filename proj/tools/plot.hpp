#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace forgetlab::cli {

struct PlotInput {
  std::filesystem::path path;
  std::string label;
};

struct PlotSummary {
  std::size_t records = 0;
  std::size_t skipped = 0;
  std::vector<std::string> metrics;  ///< metrics written, in file order
};

/// Reads every metrics file, writes <metric>.csv with columns step, value,
/// run_label and <metric>.svg overlaying the runs. Lines that are not JSON
/// objects with a numeric "step" are skipped and counted.
PlotSummary write_plots(const std::vector<PlotInput>& inputs, const std::filesystem::path& out_dir);

}  // namespace forgetlab::cli
