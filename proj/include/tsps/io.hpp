#pragma once

// File formats and the CLI surface: wide-CSV datasets, key=value run
// configuration with manifest round-tripping, and mode dispatch.

#include <map>
#include <string>
#include <vector>

#include "tsps/core.hpp"
#include "tsps/match.hpp"
#include "tsps/sim.hpp"

namespace tsps {

// Wide CSV: school_id, treatment, z_<name>..., then per cell key
// m_<s>_<a>, w_<s>_<a>, csem_<s>_<a>, y_<s>_<a>. An empty w field is a
// withheld cell; an empty m field means the school has no such cell.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& dataset, const std::string& path);

struct RunConfig {
  std::string mode;  // simulate | fit-ps | match | balance | estimate | approx-check
  std::string input_path;
  std::string scores_path;
  std::string sets_path;
  std::string output_dir = ".";
  std::string ps_kinds = "all";  // naive | rc | ml | all
  std::string outcome = "all";
  std::string estimators = "all";
  std::map<std::string, std::string> csem_tables;  // assessment -> csv path
  bool two_pass = false;
  bool unnormalized = false;
  SimConfig sim;
  MatchSpec match_spec;

  // Serialized form is the manifest: loading it back and rerunning
  // reproduces the artifacts byte for byte.
  static RunConfig from_file(const std::string& path);
  void set_key(const std::string& key, const std::string& value);
  std::string serialize() const;
  std::uint64_t hash() const;
};

// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
int run(const RunConfig& config);

namespace io_detail {
std::string format_double(double v);
void write_file(const std::string& path, const std::string& content);
std::string svg_grouped_bars(const std::string& title,
                             const std::vector<std::string>& group_labels,
                             const std::vector<std::string>& bar_labels,
                             const std::vector<std::vector<double>>& values);
}  // namespace io_detail

}  // namespace tsps
