#include "tsps/core.hpp"

#include <cmath>
#include <set>
#include <unordered_set>

namespace tsps {

const SubgroupCell* SchoolRecord::find_cell(const CellKey& key) const {
  for (const auto& cell : cells) {
    if (cell.subgroup_key == key.subgroup && cell.assessment_key == key.assessment) {
      return &cell;
    }
  }
  return nullptr;
}

int Dataset::cell_index(const CellKey& key) const {
  for (std::size_t i = 0; i < cell_keys.size(); ++i) {
    if (cell_keys[i] == key) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::optional<double>> Dataset::obtained_row(int school) const {
  std::vector<std::optional<double>> row(cell_keys.size());
  const auto& rec = records.at(school);
  for (std::size_t c = 0; c < cell_keys.size(); ++c) {
    if (const SubgroupCell* cell = rec.find_cell(cell_keys[c])) {
      row[c] = cell->obtained_avg;
    }
  }
  return row;
}

std::vector<Violation> validate(const Dataset& dataset) {
  std::vector<Violation> out;
  const std::size_t n_cov = dataset.covariate_names.size();

  std::unordered_set<std::string> seen_ids;
  for (const auto& rec : dataset.records) {
    if (rec.treatment != 0 && rec.treatment != 1) {
      out.push_back({rec.school_id, "treatment", "treatment must be 0 or 1"});
    }
    if (rec.covariates.size() != n_cov) {
      out.push_back({rec.school_id, "covariates",
                     "covariate length must equal covariate_names length"});
    }
    for (double z : rec.covariates) {
      if (!std::isfinite(z)) {
        out.push_back({rec.school_id, "covariates", "covariates must be finite"});
        break;
      }
    }
    if (!seen_ids.insert(rec.school_id).second) {
      out.push_back({rec.school_id, "school_id", "school_id must be unique"});
    }
    std::set<std::pair<std::string, std::string>> seen_keys;
    for (const auto& cell : rec.cells) {
      const std::string field = cell.subgroup_key + "_" + cell.assessment_key;
      if (cell.size < 1) {
        out.push_back({rec.school_id, field, "size >= 1"});
      }
      if (cell.csem.has_value() && *cell.csem <= 0.0) {
        out.push_back({rec.school_id, field, "csem > 0 when present"});
      }
      if (cell.obtained_avg.has_value() && !std::isfinite(*cell.obtained_avg)) {
        out.push_back({rec.school_id, field, "obtained_avg must be finite"});
      }
      if (!seen_keys.insert({cell.subgroup_key, cell.assessment_key}).second) {
        out.push_back({rec.school_id, field,
                       "subgroup/assessment keys must be unique within a record"});
      }
    }
  }
  return out;
}

}  // namespace tsps
