#include "tsps/measure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tsps {

MeasurementModel::MeasurementModel(int n_schools, int n_cells)
    : n_schools_(n_schools),
      n_cells_(n_cells),
      entries_(static_cast<std::size_t>(n_schools) * n_cells) {}

std::optional<double> MeasurementModel::error_variance(int school, int cell) const {
  return entries_[static_cast<std::size_t>(school) * n_cells_ + cell];
}

void MeasurementModel::set(int school, int cell, double variance) {
  if (variance <= 0.0) {
    throw DataError("error variance must be positive");
  }
  entries_[static_cast<std::size_t>(school) * n_cells_ + cell] = variance;
}

CsemTable::CsemTable(std::vector<std::pair<double, double>> knots)
    : knots_(std::move(knots)) {
  if (knots_.empty()) throw DataError("CsemTable: no knots");
  for (std::size_t i = 0; i < knots_.size(); ++i) {
    if (knots_[i].second <= 0.0) throw DataError("CsemTable: csem must be > 0");
    if (i > 0 && knots_[i].first <= knots_[i - 1].first) {
      throw DataError("CsemTable: knot scores must be strictly increasing");
    }
  }
}

CsemTable CsemTable::from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSEM table: " + path);
  std::vector<std::pair<double, double>> knots;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',')) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected score,csem");
    }
    if (line_no == 1) {
      // optional header row
      try {
        std::stod(a);
      } catch (...) {
        continue;
      }
    }
    try {
      knots.emplace_back(std::stod(a), std::stod(b));
    } catch (...) {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return CsemTable(std::move(knots));
}

double CsemTable::lookup(double score) const {
  if (score <= knots_.front().first) return knots_.front().second;
  if (score >= knots_.back().first) return knots_.back().second;
  const auto hi = std::upper_bound(
      knots_.begin(), knots_.end(), score,
      [](double s, const std::pair<double, double>& k) { return s < k.first; });
  const auto lo = hi - 1;
  const double t = (score - lo->first) / (hi->first - lo->first);
  return lo->second + t * (hi->second - lo->second);
}

double lookup_csem(const CsemTable& table, double score) { return table.lookup(score); }

namespace {

void set_from_csem(MeasurementModel& model, const Dataset& dataset, int school,
                   int cell_idx, const SubgroupCell& cell, double csem) {
  if (csem <= 0.0) {
    throw DataError("csem must be positive for school " +
                    dataset.records[school].school_id + " cell " +
                    dataset.cell_keys[cell_idx].label());
  }
  model.set(school, cell_idx, csem * csem / static_cast<double>(cell.size));
}

}  // namespace

MeasurementModel build_sigma(const Dataset& dataset) {
  MeasurementModel model(dataset.n_schools(), dataset.n_cells());
  for (int i = 0; i < dataset.n_schools(); ++i) {
    const auto& rec = dataset.records[i];
    for (int c = 0; c < dataset.n_cells(); ++c) {
      const SubgroupCell* cell = rec.find_cell(dataset.cell_keys[c]);
      if (!cell) continue;
      if (cell->csem.has_value()) {
        set_from_csem(model, dataset, i, c, *cell, *cell->csem);
      } else if (!cell->withheld()) {
        throw DataError("missing csem for school " + rec.school_id + " cell " +
                        dataset.cell_keys[c].label());
      }
    }
  }
  return model;
}

MeasurementModel build_sigma(const Dataset& dataset,
                             const std::map<std::string, CsemTable>& tables,
                             const ScoreSource& scores) {
  MeasurementModel model(dataset.n_schools(), dataset.n_cells());
  for (int i = 0; i < dataset.n_schools(); ++i) {
    const auto& rec = dataset.records[i];
    for (int c = 0; c < dataset.n_cells(); ++c) {
      const SubgroupCell* cell = rec.find_cell(dataset.cell_keys[c]);
      if (!cell) continue;
      const auto table = tables.find(dataset.cell_keys[c].assessment);
      if (table == tables.end()) {
        throw DataError("no CSEM table for assessment " +
                        dataset.cell_keys[c].assessment);
      }
      const std::optional<double> score = scores(i, c);
      if (score.has_value()) {
        set_from_csem(model, dataset, i, c, *cell, table->second.lookup(*score));
      } else if (!cell->withheld()) {
        throw DataError("no score to evaluate CSEM table for school " +
                        rec.school_id + " cell " + dataset.cell_keys[c].label());
      }
    }
  }
  return model;
}

}  // namespace tsps
