#pragma once

// Measurement-error covariance construction: per-cell error variances
// csem^2 / m from published CSEMs and test-taker counts. Subgroups are
// mutually exclusive, so the covariance is diagonal.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsps/core.hpp"

namespace tsps {

// Diagonal measurement-error variances, one entry per (school, cell) that
// could be resolved from the chosen CSEM source.
class MeasurementModel {
 public:
  MeasurementModel(int n_schools, int n_cells);

  std::optional<double> error_variance(int school, int cell) const;
  void set(int school, int cell, double variance);
  int n_schools() const { return n_schools_; }
  int n_cells() const { return n_cells_; }

 private:
  int n_schools_;
  int n_cells_;
  std::vector<std::optional<double>> entries_;  // row-major
};

// Piecewise-linear CSEM lookup with flat extrapolation beyond the knots.
class CsemTable {
 public:
  explicit CsemTable(std::vector<std::pair<double, double>> knots);
  static CsemTable from_csv(const std::string& path);

  double lookup(double score) const;
  std::size_t size() const { return knots_.size(); }

 private:
  std::vector<std::pair<double, double>> knots_;  // (score, csem), ascending
};

double lookup_csem(const CsemTable& table, double score);

// CSEM source per cell: per-cell csem fields, or a per-assessment table
// evaluated at a supplied score (obtained average, EB prediction, ...).
using ScoreSource = std::function<std::optional<double>(int school, int cell)>;

// From the per-cell csem fields. Every non-withheld cell must carry a csem;
// withheld cells get an entry too when their csem is present.
MeasurementModel build_sigma(const Dataset& dataset);

// From CsemTables evaluated at scores(school, cell). Cells whose score is
// unavailable are skipped unless non-withheld (then it is an error).
MeasurementModel build_sigma(const Dataset& dataset,
                             const std::map<std::string, CsemTable>& tables,
                             const ScoreSource& scores);

}  // namespace tsps
