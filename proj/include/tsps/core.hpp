#pragma once

// Domain data model shared by all modules: school records with per
// (subgroup, assessment) cells, and the dataset container whose fixed key
// order defines vector layouts downstream.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsps {

// Data that fails a contract (bad file, bad invariant) vs. a numerical
// routine that cannot proceed. The CLI maps these to distinct exit codes.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CellKey {
  std::string subgroup;
  std::string assessment;

  bool operator==(const CellKey&) const = default;
  std::string label() const { return subgroup + "_" + assessment; }
};

// One subgroup-by-assessment cell of a school. A withheld cell has a size
// but no obtained average; it never contributes to likelihoods.
struct SubgroupCell {
  std::string subgroup_key;
  std::string assessment_key;
  unsigned size = 0;                    // m, test-taker count
  std::optional<double> obtained_avg;   // W; absent = withheld
  std::optional<double> csem;           // per-student SEM at this cell
  std::optional<double> outcome_avg;    // Y, post-intervention

  bool withheld() const { return !obtained_avg.has_value(); }
};

struct SchoolRecord {
  std::string school_id;
  int treatment = 0;  // T in {0, 1}
  std::vector<double> covariates;  // Z, error-free
  std::vector<SubgroupCell> cells;

  const SubgroupCell* find_cell(const CellKey& key) const;
};

struct Violation {
  std::string school_id;
  std::string field;
  std::string rule;
};

// Immutable after load; key order is fixed and defines every downstream
// vector layout (W_i, X-hat_i, beta_w, ...).
struct Dataset {
  std::vector<SchoolRecord> records;
  std::vector<std::string> covariate_names;
  std::vector<std::string> subgroup_keys;
  std::vector<std::string> assessment_keys;
  std::vector<CellKey> cell_keys;

  int n_schools() const { return static_cast<int>(records.size()); }
  int n_covariates() const { return static_cast<int>(covariate_names.size()); }
  int n_cells() const { return static_cast<int>(cell_keys.size()); }

  // Index of a cell key in the fixed layout; -1 if absent.
  int cell_index(const CellKey& key) const;

  // Obtained averages for one school in cell-key order; nullopt for
  // withheld or absent cells.
  std::vector<std::optional<double>> obtained_row(int school) const;
};

std::vector<Violation> validate(const Dataset& dataset);

}  // namespace tsps
