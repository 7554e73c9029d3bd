#include "tsps/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "tsps/estimate.hpp"
#include "tsps/hlm.hpp"
#include "tsps/match.hpp"
#include "tsps/measure.hpp"
#include "tsps/metrics.hpp"
#include "tsps/ps.hpp"

namespace tsps {

namespace {

constexpr const char* kVersion = "0.1.0";

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.push_back("");
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw DataError(where + ": malformed number '" + s + "'");
  }
}

long parse_long(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw DataError(where + ": malformed integer '" + s + "'");
  }
}

// Column labels use the last underscore to separate subgroup from
// assessment, so assessment keys must not contain underscores.
CellKey parse_cell_label(const std::string& label, const std::string& where) {
  const auto pos = label.rfind('_');
  if (pos == std::string::npos || pos == 0 || pos + 1 == label.size()) {
    throw DataError(where + ": cell column needs <subgroup>_<assessment>: " + label);
  }
  return {label.substr(0, pos), label.substr(pos + 1)};
}

}  // namespace

namespace io_detail {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << content;
}

}  // namespace io_detail

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");

  const std::vector<std::string> header = split(line, ',');
  Dataset ds;
  int col_id = -1, col_treatment = -1;
  struct CellCols {
    int m = -1, w = -1, csem = -1, y = -1;
  };
  std::vector<int> cov_cols;
  std::map<std::string, int> cell_of_label;
  std::vector<CellCols> cells;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = trim(header[c]);
    auto cell_slot = [&](const std::string& label) -> CellCols& {
      auto it = cell_of_label.find(label);
      if (it == cell_of_label.end()) {
        it = cell_of_label.emplace(label, static_cast<int>(cells.size())).first;
        cells.emplace_back();
        ds.cell_keys.push_back(parse_cell_label(label, path));
      }
      return cells[it->second];
    };
    if (name == "school_id") {
      col_id = static_cast<int>(c);
    } else if (name == "treatment") {
      col_treatment = static_cast<int>(c);
    } else if (name.rfind("z_", 0) == 0) {
      cov_cols.push_back(static_cast<int>(c));
      ds.covariate_names.push_back(name.substr(2));
    } else if (name.rfind("m_", 0) == 0) {
      cell_slot(name.substr(2)).m = static_cast<int>(c);
    } else if (name.rfind("w_", 0) == 0) {
      cell_slot(name.substr(2)).w = static_cast<int>(c);
    } else if (name.rfind("csem_", 0) == 0) {
      cell_slot(name.substr(5)).csem = static_cast<int>(c);
    } else if (name.rfind("y_", 0) == 0) {
      cell_slot(name.substr(2)).y = static_cast<int>(c);
    } else {
      throw DataError(path + ": unknown column '" + name + "'");
    }
  }
  if (col_id < 0) throw DataError(path + ": header lacks school_id");
  if (col_treatment < 0) throw DataError(path + ": header lacks treatment");
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (cells[k].m < 0 || cells[k].w < 0) {
      throw DataError(path + ": cell " + ds.cell_keys[k].label() +
                      " needs both m_ and w_ columns");
    }
  }
  {
    std::set<std::string> seen;
    for (const auto& key : ds.cell_keys) {
      if (seen.insert(key.subgroup).second) ds.subgroup_keys.push_back(key.subgroup);
    }
    seen.clear();
    for (const auto& key : ds.cell_keys) {
      if (seen.insert(key.assessment).second) {
        ds.assessment_keys.push_back(key.assessment);
      }
    }
  }

  std::set<std::string> ids;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const std::vector<std::string> fields = split(line, ',');
    if (fields.size() != header.size()) {
      throw DataError(where + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(fields.size()));
    }
    SchoolRecord rec;
    rec.school_id = trim(fields[col_id]);
    if (rec.school_id.empty()) throw DataError(where + ": empty school_id");
    if (!ids.insert(rec.school_id).second) {
      throw DataError(where + ": duplicate school_id '" + rec.school_id + "'");
    }
    const long t = parse_long(trim(fields[col_treatment]), where);
    rec.treatment = static_cast<int>(t);
    for (int c : cov_cols) {
      rec.covariates.push_back(parse_double(trim(fields[c]), where));
    }
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const std::string m_str = trim(fields[cells[k].m]);
      if (m_str.empty()) {
        // school has no such cell; the other cell fields must be empty too
        const bool stray =
            !trim(fields[cells[k].w]).empty() ||
            (cells[k].csem >= 0 && !trim(fields[cells[k].csem]).empty()) ||
            (cells[k].y >= 0 && !trim(fields[cells[k].y]).empty());
        if (stray) {
          throw DataError(where + ": cell " + ds.cell_keys[k].label() +
                          " has values but no count");
        }
        continue;
      }
      SubgroupCell cell;
      cell.subgroup_key = ds.cell_keys[k].subgroup;
      cell.assessment_key = ds.cell_keys[k].assessment;
      const long m = parse_long(m_str, where);
      if (m < 0) throw DataError(where + ": negative count");
      cell.size = static_cast<unsigned>(m);
      const std::string w_str = trim(fields[cells[k].w]);
      if (!w_str.empty()) cell.obtained_avg = parse_double(w_str, where);
      if (cells[k].csem >= 0) {
        const std::string s = trim(fields[cells[k].csem]);
        if (!s.empty()) cell.csem = parse_double(s, where);
      }
      if (cells[k].y >= 0) {
        const std::string s = trim(fields[cells[k].y]);
        if (!s.empty()) cell.outcome_avg = parse_double(s, where);
      }
      rec.cells.push_back(std::move(cell));
    }
    ds.records.push_back(std::move(rec));
  }

  const auto violations = validate(ds);
  if (!violations.empty()) {
    const auto& v = violations.front();
    throw DataError(path + ": invalid data (" + std::to_string(violations.size()) +
                    " violations), first: school " + v.school_id + " " + v.field +
                    ": " + v.rule);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ostringstream out;
  out << "school_id,treatment";
  for (const auto& name : ds.covariate_names) out << ",z_" << name;
  for (const auto& key : ds.cell_keys) {
    out << ",m_" << key.label() << ",w_" << key.label() << ",csem_" << key.label()
        << ",y_" << key.label();
  }
  out << "\n";
  for (const auto& rec : ds.records) {
    out << rec.school_id << "," << rec.treatment;
    for (double z : rec.covariates) out << "," << io_detail::format_double(z);
    for (const auto& key : ds.cell_keys) {
      const SubgroupCell* cell = rec.find_cell(key);
      if (!cell) {
        out << ",,,,";
        continue;
      }
      out << "," << cell->size;
      out << ",";
      if (cell->obtained_avg) out << io_detail::format_double(*cell->obtained_avg);
      out << ",";
      if (cell->csem) out << io_detail::format_double(*cell->csem);
      out << ",";
      if (cell->outcome_avg) out << io_detail::format_double(*cell->outcome_avg);
    }
    out << "\n";
  }
  io_detail::write_file(path, out.str());
}

void RunConfig::set_key(const std::string& key, const std::string& value) {
  const std::string where = "config key " + key;
  if (key == "mode") {
    mode = value;
  } else if (key == "input") {
    input_path = value;
  } else if (key == "scores") {
    scores_path = value;
  } else if (key == "sets") {
    sets_path = value;
  } else if (key == "out") {
    output_dir = value;
  } else if (key == "ps_kinds") {
    ps_kinds = value;
  } else if (key == "outcome") {
    outcome = value;
  } else if (key == "estimators") {
    estimators = value;
  } else if (key.rfind("csem_table.", 0) == 0) {
    csem_tables[key.substr(11)] = value;
  } else if (key == "two_pass") {
    two_pass = value == "true" || value == "1";
  } else if (key == "unnormalized") {
    unnormalized = value == "true" || value == "1";
  } else if (key == "sim.design") {
    sim.design = value;
  } else if (key == "sim.n_schools") {
    sim.n_schools = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.n_covariates") {
    sim.n_covariates = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.n_subgroups") {
    sim.n_subgroups = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.reps") {
    sim.n_replications = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.seed") {
    sim.master_seed = static_cast<std::uint64_t>(parse_long(value, where));
  } else if (key == "sim.threads") {
    sim.n_threads = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.calipers") {
    sim.calipers.clear();
    for (const auto& tok : split(value, ';')) {
      sim.calipers.push_back(parse_double(tok, where));
    }
  } else if (key == "sim.estimation_caliper") {
    sim.estimation_caliper = parse_double(value, where);
  } else if (key == "sim.max_controls") {
    sim.max_controls_per_treated = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.max_treated") {
    sim.max_treated_per_control = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.amplitude") {
    sim.effect_amplitude = parse_double(value, where);
  } else if (key == "sim.target_ett") {
    sim.target_ett = parse_double(value, where);
  } else if (key == "sim.tau1") {
    sim.tau1 = parse_double(value, where);
  } else if (key == "sim.tau2") {
    sim.tau2 = parse_double(value, where);
  } else if (key == "sim.sigma") {
    sim.sigma = parse_double(value, where);
  } else if (key == "sim.beta0") {
    sim.beta0 = parse_double(value, where);
  } else if (key == "sim.beta_w") {
    sim.beta_w_each = parse_double(value, where);
  } else if (key == "sim.beta_z") {
    sim.beta_z_each = parse_double(value, where);
  } else if (key == "sim.n_beta_z_nonzero") {
    sim.n_beta_z_nonzero = static_cast<int>(parse_long(value, where));
  } else if (key == "sim.gamma0") {
    sim.gamma0 = parse_double(value, where);
  } else if (key == "sim.signal_fraction") {
    sim.covariate_signal_fraction = parse_double(value, where);
  } else if (key == "sim.size_law") {
    sim.size_law = value;
  } else if (key == "sim.moderate_mean") {
    sim.moderate_mean = parse_double(value, where);
  } else if (key == "sim.small_mean") {
    sim.small_mean = parse_double(value, where);
  } else if (key == "match.caliper") {
    match_spec.caliper_logits = parse_double(value, where);
  } else if (key == "match.max_controls") {
    match_spec.max_controls_per_treated = static_cast<int>(parse_long(value, where));
  } else if (key == "match.max_treated") {
    match_spec.max_treated_per_control = static_cast<int>(parse_long(value, where));
  } else {
    throw DataError("unknown config key: " + key);
  }
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config: " + path);
  RunConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    config.set_key(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return config;
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  auto kv = [&](const std::string& k, const std::string& v) {
    out << k << " = " << v << "\n";
  };
  auto kd = [&](const std::string& k, double v) { kv(k, io_detail::format_double(v)); };
  kv("mode", mode);
  kv("input", input_path);
  kv("scores", scores_path);
  kv("sets", sets_path);
  kv("out", output_dir);
  kv("ps_kinds", ps_kinds);
  kv("outcome", outcome);
  kv("estimators", estimators);
  for (const auto& [assessment, path] : csem_tables) {
    kv("csem_table." + assessment, path);
  }
  kv("two_pass", two_pass ? "true" : "false");
  kv("unnormalized", unnormalized ? "true" : "false");
  kv("sim.design", sim.design);
  kv("sim.n_schools", std::to_string(sim.n_schools));
  kv("sim.n_covariates", std::to_string(sim.n_covariates));
  kv("sim.n_subgroups", std::to_string(sim.n_subgroups));
  kv("sim.reps", std::to_string(sim.n_replications));
  kv("sim.seed", std::to_string(sim.master_seed));
  kv("sim.threads", std::to_string(sim.n_threads));
  {
    std::string cal;
    for (double c : sim.calipers) {
      if (!cal.empty()) cal += ";";
      cal += io_detail::format_double(c);
    }
    kv("sim.calipers", cal);
  }
  kd("sim.estimation_caliper", sim.estimation_caliper);
  kv("sim.max_controls", std::to_string(sim.max_controls_per_treated));
  kv("sim.max_treated", std::to_string(sim.max_treated_per_control));
  kd("sim.amplitude", sim.effect_amplitude);
  kd("sim.target_ett", sim.target_ett);
  kd("sim.tau1", sim.tau1);
  kd("sim.tau2", sim.tau2);
  kd("sim.sigma", sim.sigma);
  kd("sim.beta0", sim.beta0);
  kd("sim.beta_w", sim.beta_w_each);
  kd("sim.beta_z", sim.beta_z_each);
  kv("sim.n_beta_z_nonzero", std::to_string(sim.n_beta_z_nonzero));
  kd("sim.gamma0", sim.gamma0);
  kd("sim.signal_fraction", sim.covariate_signal_fraction);
  kv("sim.size_law", sim.size_law);
  kd("sim.moderate_mean", sim.moderate_mean);
  kd("sim.small_mean", sim.small_mean);
  kd("match.caliper", match_spec.caliper_logits);
  kv("match.max_controls", std::to_string(match_spec.max_controls_per_treated));
  kv("match.max_treated", std::to_string(match_spec.max_treated_per_control));
  return out.str();
}

std::uint64_t RunConfig::hash() const {
  // FNV-1a over the canonical serialization
  std::uint64_t h = 1469598103934665603ULL;
  for (const char c : serialize()) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

namespace io_detail {

std::string svg_grouped_bars(const std::string& title,
                             const std::vector<std::string>& group_labels,
                             const std::vector<std::string>& bar_labels,
                             const std::vector<std::vector<double>>& values) {
  const int width = 720, height = 400;
  const int left = 70, right = 30, top = 50, bottom = 70;
  const int plot_w = width - left - right, plot_h = height - top - bottom;
  const std::vector<std::string> palette{"#1b5e9f", "#7fb3d8", "#2c8a4a",
                                         "#93d3a2", "#c23b22", "#e8a33d"};
  double vmax = 0.0;
  for (const auto& grp : values) {
    for (double v : grp) vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) vmax = 1.0;
  vmax *= 1.1;

  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='"
    << height << "' font-family='sans-serif' font-size='12'>\n";
  s << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='15'>"
    << title << "</text>\n";
  // y axis with 5 ticks
  for (int t = 0; t <= 5; ++t) {
    const double v = vmax * t / 5.0;
    const double y = top + plot_h - plot_h * t / 5.0;
    s << "<line x1='" << left << "' y1='" << y << "' x2='" << width - right
      << "' y2='" << y << "' stroke='#dddddd'/>\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    s << "<text x='" << left - 6 << "' y='" << y + 4
      << "' text-anchor='end'>" << buf << "</text>\n";
  }
  const int n_groups = static_cast<int>(group_labels.size());
  const int n_bars = static_cast<int>(bar_labels.size());
  const double group_w = static_cast<double>(plot_w) / std::max(1, n_groups);
  const double bar_w = group_w * 0.8 / std::max(1, n_bars);
  for (int g = 0; g < n_groups; ++g) {
    for (int b = 0; b < n_bars; ++b) {
      const double v = values[g][b];
      const double h = plot_h * v / vmax;
      const double x = left + g * group_w + group_w * 0.1 + b * bar_w;
      s << "<rect x='" << x << "' y='" << top + plot_h - h << "' width='"
        << bar_w * 0.92 << "' height='" << h << "' fill='"
        << palette[b % palette.size()] << "'/>\n";
    }
    s << "<text x='" << left + g * group_w + group_w / 2 << "' y='"
      << top + plot_h + 18 << "' text-anchor='middle'>" << group_labels[g]
      << "</text>\n";
  }
  for (int b = 0; b < n_bars; ++b) {
    const double x = left + b * 120.0;
    const double y = height - 22;
    s << "<rect x='" << x << "' y='" << y - 10 << "' width='12' height='12' fill='"
      << palette[b % palette.size()] << "'/>\n";
    s << "<text x='" << x + 16 << "' y='" << y << "'>" << bar_labels[b]
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace io_detail

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void require_exists(const std::string& path, const std::string& what) {
  if (path.empty()) throw DataError(what + " path is required");
  if (!std::filesystem::exists(path)) {
    throw DataError(what + " path does not exist: " + path);
  }
}

void write_manifest(const RunConfig& config, const std::string& extra) {
  std::ostringstream out;
  out << "# manifest: rerun with --config <this file>\n";
  out << "# version = " << kVersion << "\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(config.hash()));
  out << "# config_hash = " << buf << "\n";
  out << "# ds_denominator = unweighted pooled SD of the unmatched sample\n";
  out << "# weighting = normalized (Hajek); unnormalized variant also reported\n";
  out << "# effect_shape = amplitude * exp(-X/1000)\n";
  if (!extra.empty()) out << extra;
  out << config.serialize();
  io_detail::write_file(config.output_dir + "/manifest.txt", out.str());
}

std::vector<PsKind> selected_kinds(const std::string& spec) {
  if (spec == "all") return {PsKind::naive, PsKind::rc, PsKind::ml};
  if (spec == "naive") return {PsKind::naive};
  if (spec == "rc") return {PsKind::rc};
  if (spec == "ml") return {PsKind::ml};
  throw DataError("unknown ps kind selection: " + spec);
}

// school_id,kind,prob,logit rows written by fit-ps.
struct ScoreTable {
  std::map<std::string, std::map<std::string, std::pair<double, double>>> rows;
};

ScoreTable load_scores(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scores: " + path);
  ScoreTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    const std::string where = path + ":" + std::to_string(line_no);
    table.rows[f[1]][f[0]] = {parse_double(f[2], where), parse_double(f[3], where)};
  }
  return table;
}

PsFit scores_as_fit(const ScoreTable& table, const std::string& kind,
                    const Dataset& ds) {
  const auto it = table.rows.find(kind);
  if (it == table.rows.end()) {
    throw DataError("scores file has no rows for kind '" + kind + "'");
  }
  PsFit fit;
  fit.kind = kind == "naive"  ? PsKind::naive
             : kind == "rc"   ? PsKind::rc
             : kind == "ml"   ? PsKind::ml
                              : throw DataError("unknown kind: " + kind);
  fit.prob.resize(ds.n_schools());
  fit.logit_score.resize(ds.n_schools());
  for (int i = 0; i < ds.n_schools(); ++i) {
    const auto row = it->second.find(ds.records[i].school_id);
    if (row == it->second.end()) {
      throw DataError("scores file lacks school " + ds.records[i].school_id);
    }
    fit.prob(i) = row->second.first;
    fit.logit_score(i) = row->second.second;
  }
  return fit;
}

MatchResult load_sets(const std::string& path, const Dataset& ds) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open matched sets: " + path);
  std::map<std::string, int> school_index;
  for (int i = 0; i < ds.n_schools(); ++i) school_index[ds.records[i].school_id] = i;
  std::map<std::string, MatchedSet> by_set;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    const auto school = school_index.find(f[1]);
    if (school == school_index.end()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": unknown school " + f[1]);
    }
    if (f[2] == "treated") {
      by_set[f[0]].treated.push_back(school->second);
    } else if (f[2] == "control") {
      by_set[f[0]].controls.push_back(school->second);
    } else {
      throw DataError(path + ":" + std::to_string(line_no) + ": role must be "
                      "treated or control");
    }
  }
  MatchResult result;
  for (auto& [id, set] : by_set) {
    if (set.treated.empty() || set.controls.empty()) {
      throw DataError("matched set " + id + " lacks a treated or control member");
    }
    set.control_weight = static_cast<double>(set.treated.size()) /
                         static_cast<double>(set.controls.size());
    result.sets.push_back(std::move(set));
  }
  return result;
}

std::vector<CellKey> selected_outcomes(const RunConfig& config, const Dataset& ds) {
  if (config.outcome == "all") return ds.cell_keys;
  const CellKey key = parse_cell_label(config.outcome, "outcome selection");
  if (ds.cell_index(key) < 0) {
    throw DataError("outcome " + config.outcome + " not present in the dataset");
  }
  return {key};
}

int run_simulate(const RunConfig& config_in) {
  RunConfig config = config_in;
  if (!std::isfinite(config.sim.effect_amplitude)) {
    config.sim.effect_amplitude =
        calibrate_effect(config.sim, config.sim.master_seed);
  }
  const StudyResult study = run_study(config.sim);
  config.sim = study.config;
  const DesignSpec spec = design_spec(config.sim);

  write_manifest(config, "");

  std::ostringstream unmatched;
  unmatched << "rep,caliper,kind,unmatched_pct\n";
  std::ostringstream estimates;
  estimates << "rep,kind,estimator,subgroup,estimate\n";
  std::ostringstream balance;
  balance << "rep,family,sample,subgroup,ds\n";
  for (const auto& rec : study.records) {
    if (rec.failed) continue;
    for (std::size_t ci = 0; ci < config.sim.calipers.size(); ++ci) {
      for (int kind = 0; kind < kNumKinds; ++kind) {
        unmatched << rec.rep << "," << fmt(config.sim.calipers[ci]) << ","
                  << to_string(static_cast<PsKind>(kind)) << ","
                  << fmt(rec.unmatched_pct[ci][kind]) << "\n";
      }
    }
    for (int kind = 0; kind < kNumKinds; ++kind) {
      for (int est = 0; est < kNumEstimators; ++est) {
        for (int k = 0; k < config.sim.n_subgroups; ++k) {
          estimates << rec.rep << "," << to_string(static_cast<PsKind>(kind)) << ","
                    << kEstimatorNames[est] << ",sg" << k + 1 << ","
                    << fmt(rec.estimates[kind][est][k]) << "\n";
        }
      }
    }
    for (int k = 0; k < config.sim.n_subgroups; ++k) {
      estimates << rec.rep << ",,marginal,sg" << k + 1 << ","
                << fmt(rec.marginal[k]) << "\n";
    }
    for (int fam = 0; fam < kNumFamilies; ++fam) {
      for (int s = 0; s < kNumSamples; ++s) {
        for (int k = 0; k < config.sim.n_subgroups; ++k) {
          balance << rec.rep << "," << kFamilyNames[fam] << "," << kSampleNames[s]
                  << ",sg" << k + 1 << "," << fmt(rec.balance[fam][s][k]) << "\n";
        }
      }
    }
  }
  io_detail::write_file(config.output_dir + "/unmatched.csv", unmatched.str());
  io_detail::write_file(config.output_dir + "/estimates.csv", estimates.str());
  io_detail::write_file(config.output_dir + "/balance.csv", balance.str());

  std::ostringstream summary;
  summary << "section,key,bias,rmse,value\n";
  for (std::size_t ci = 0; ci < config.sim.calipers.size(); ++ci) {
    for (int kind = 0; kind < kNumKinds; ++kind) {
      summary << "unmatched_pct," << fmt(config.sim.calipers[ci]) << "/"
              << to_string(static_cast<PsKind>(kind)) << ",,,"
              << fmt(study.summary.unmatched_pct[ci][kind]) << "\n";
    }
  }
  for (const auto& [key, cell] : study.summary.errors) {
    summary << "error," << key << "," << fmt(cell.bias) << "," << fmt(cell.rmse)
            << ",\n";
  }
  for (const auto& [cls, cell] : study.summary.marginal_errors) {
    summary << "error,marginal/" << cls << "," << fmt(cell.bias) << ","
            << fmt(cell.rmse) << ",\n";
  }
  for (const auto& [key, value] : study.summary.balance) {
    summary << "balance," << key << ",,," << fmt(value) << "\n";
  }
  summary << "meta,n_failed,,," << study.summary.n_failed << "\n";
  summary << "meta,amplitude,,," << fmt(config.sim.effect_amplitude) << "\n";
  io_detail::write_file(config.output_dir + "/summary.csv", summary.str());

  // Figures: balance on X and W per class, and matching-estimator RMSE.
  {
    const std::vector<std::string> samples{"matched-ml", "matched-rc",
                                           "matched-naive", "unmatched"};
    for (const std::string fam : {"X", "W"}) {
      std::vector<std::vector<double>> vals;
      for (const auto& cls : spec.class_order) {
        std::vector<double> row;
        for (const auto& s : samples) {
          row.push_back(study.summary.balance.at(fam + "/" + s + "/" + cls));
        }
        vals.push_back(row);
      }
      io_detail::write_file(
          config.output_dir + "/figure_balance_" + fam + ".svg",
          io_detail::svg_grouped_bars("Average |standardized difference|, " + fam,
                                      spec.class_order, samples, vals));
    }
    std::vector<std::vector<double>> vals;
    const std::vector<std::string> bars{"ml", "rc", "naive", "marginal"};
    for (const auto& cls : spec.class_order) {
      std::vector<double> row;
      for (const auto& kind : {"ml", "rc", "naive"}) {
        row.push_back(
            study.summary.errors.at(std::string(kind) + "/matching/" + cls).rmse);
      }
      row.push_back(study.summary.marginal_errors.at(cls).rmse);
      vals.push_back(row);
    }
    io_detail::write_file(
        config.output_dir + "/figure_rmse.svg",
        io_detail::svg_grouped_bars("Matching-estimator RMSE by PS kind",
                                    spec.class_order, bars, vals));
  }
  return 0;
}

int run_fit_ps(const RunConfig& config) {
  require_exists(config.input_path, "input");
  const Dataset ds = load_dataset(config.input_path);
  const std::vector<PsKind> kinds = selected_kinds(config.ps_kinds);

  bool need_eb = false;
  for (PsKind k : kinds) {
    if (k != PsKind::naive) need_eb = true;
  }
  std::optional<EbPredictions> eb;
  std::optional<MeasurementModel> sigma;
  std::ostringstream info;
  if (need_eb) {
    if (!config.csem_tables.empty()) {
      std::map<std::string, CsemTable> tables;
      for (const auto& [assessment, path] : config.csem_tables) {
        require_exists(path, "csem table");
        tables.emplace(assessment, CsemTable::from_csv(path));
      }
      // Two-pass refit per assessment; single pass evaluates the tables at
      // the obtained averages only.
      const double nan = std::numeric_limits<double>::quiet_NaN();
      EbPredictions merged;
      merged.xhat = Eigen::MatrixXd::Constant(ds.n_schools(), ds.n_cells(), nan);
      merged.cond_var = merged.xhat;
      merged.school_effect = Eigen::VectorXd::Zero(ds.n_schools());
      for (const auto& assessment : ds.assessment_keys) {
        std::pair<HlmFit, EbPredictions> fitted =
            config.two_pass
                ? fit_hlm_two_pass(ds, tables, assessment)
                : [&] {
                    auto obtained = [&](int school, int cell) -> std::optional<double> {
                      const SubgroupCell* c =
                          ds.records[school].find_cell(ds.cell_keys[cell]);
                      return c ? c->obtained_avg : std::nullopt;
                    };
                    const MeasurementModel s1 = build_sigma(ds, tables, obtained);
                    HlmFit f = fit_hlm(ds, s1, assessment);
                    EbPredictions e = predict_eb(f, ds, s1, assessment);
                    return std::make_pair(std::move(f), std::move(e));
                  }();
        for (int i = 0; i < ds.n_schools(); ++i) {
          for (int c = 0; c < ds.n_cells(); ++c) {
            if (ds.cell_keys[c].assessment != assessment) continue;
            merged.xhat(i, c) = fitted.second.xhat(i, c);
            merged.cond_var(i, c) = fitted.second.cond_var(i, c);
          }
        }
        info << "hlm," << assessment << ",tau1=" << fmt(std::sqrt(fitted.first.tau1_sq))
             << ",tau2=" << fmt(std::sqrt(fitted.first.tau2_sq))
             << ",converged=" << fitted.first.converged << "\n";
      }
      // Sigma for ML scoring: tables at the final EB predictions.
      auto eb_scores = [&, merged](int school, int cell) -> std::optional<double> {
        if (std::isfinite(merged.xhat(school, cell))) return merged.xhat(school, cell);
        return std::nullopt;
      };
      sigma = build_sigma(ds, tables, eb_scores);
      eb = std::move(merged);
    } else {
      sigma = build_sigma(ds);
      auto [fits, merged] = fit_eb_all(ds, *sigma);
      for (const auto& f : fits) {
        info << "hlm," << f.assessment << ",tau1=" << fmt(std::sqrt(f.tau1_sq))
             << ",tau2=" << fmt(std::sqrt(f.tau2_sq))
             << ",converged=" << f.converged << "\n";
      }
      eb = std::move(merged);
    }
  }

  std::ostringstream scores;
  scores << "school_id,kind,prob,logit\n";
  int n_fitted = 0;
  for (PsKind kind : kinds) {
    PsFit fit;
    if (kind == PsKind::naive) {
      try {
        fit = ps_naive(ds);
      } catch (const DataError& ex) {
        // an explicit naive request fails hard; under "all" the other
        // estimators still run, which is the point of rc/ml on public data
        if (config.ps_kinds != "all") throw;
        info << "warning,naive,skipped: " << ex.what() << "\n";
        continue;
      }
    } else {
      fit = kind == PsKind::rc ? ps_rc(ds, *eb) : ps_ml(ds, *eb, *sigma);
    }
    ++n_fitted;
    for (int i = 0; i < ds.n_schools(); ++i) {
      scores << ds.records[i].school_id << "," << to_string(kind) << ","
             << io_detail::format_double(fit.prob(i)) << ","
             << io_detail::format_double(fit.logit_score(i)) << "\n";
    }
    info << "ps," << to_string(kind) << ",beta0=" << fmt(fit.beta0)
         << ",deviance=" << fmt(fit.info.deviance)
         << ",converged=" << fit.info.converged
         << ",separation=" << fit.info.separation << "\n";
    if (fit.info.separation) {
      info << "warning," << to_string(kind)
           << ",quasi-separation: some fitted probabilities are within 1e-10 "
              "of 0 or 1\n";
    }
  }
  if (n_fitted == 0) throw DataError("fit-ps: no estimator could be fit");
  io_detail::write_file(config.output_dir + "/ps_scores.csv", scores.str());
  io_detail::write_file(config.output_dir + "/fit_info.csv", info.str());
  write_manifest(config, "");
  return 0;
}

int run_match(const RunConfig& config) {
  require_exists(config.input_path, "input");
  require_exists(config.scores_path, "scores");
  if (config.ps_kinds == "all") {
    throw DataError("match mode needs a single --kind (naive, rc, or ml)");
  }
  const Dataset ds = load_dataset(config.input_path);
  const PsFit fit = scores_as_fit(load_scores(config.scores_path),
                                  config.ps_kinds, ds);
  const MatchResult result = full_match(fit, ds, config.match_spec);
  if (!result.feasible) {
    throw NumericError("matching infeasible under the ratio constraints");
  }

  std::ostringstream out;
  out << "set_id,school_id,role,weight\n";
  for (std::size_t s = 0; s < result.sets.size(); ++s) {
    const auto& set = result.sets[s];
    for (int i : set.treated) {
      out << "set" << s + 1 << "," << ds.records[i].school_id << ",treated,1\n";
    }
    for (int j : set.controls) {
      out << "set" << s + 1 << "," << ds.records[j].school_id << ",control,"
          << io_detail::format_double(set.control_weight) << "\n";
    }
  }
  io_detail::write_file(config.output_dir + "/matched_sets.csv", out.str());

  std::ostringstream summary;
  summary << "key,value\n";
  summary << "n_sets," << result.sets.size() << "\n";
  summary << "n_matched_treated," << result.n_matched_treated() << "\n";
  summary << "n_matched_controls," << result.n_matched_controls() << "\n";
  summary << "n_unmatched_treated," << result.unmatched_treated.size() << "\n";
  summary << "total_distance," << fmt(result.total_distance) << "\n";
  summary << "effective_sample_size," << fmt(effective_sample_size(result)) << "\n";
  for (int i : result.unmatched_treated) {
    summary << "unmatched," << ds.records[i].school_id << "\n";
  }
  io_detail::write_file(config.output_dir + "/match_summary.csv", summary.str());
  write_manifest(config, "");
  return 0;
}

int run_balance(const RunConfig& config) {
  require_exists(config.input_path, "input");
  require_exists(config.sets_path, "sets");
  const Dataset ds = load_dataset(config.input_path);
  const MatchResult matched = load_sets(config.sets_path, ds);

  std::vector<int> treatment(ds.n_schools());
  for (int i = 0; i < ds.n_schools(); ++i) treatment[i] = ds.records[i].treatment;
  std::vector<double> matched_w(ds.n_schools(), 0.0);
  for (const auto& set : matched.sets) {
    for (int i : set.treated) matched_w[i] = 1.0;
    for (int j : set.controls) matched_w[j] = set.control_weight;
  }

  // W balance always; X-hat balance when an HLM fit is possible.
  std::optional<EbPredictions> eb;
  try {
    const MeasurementModel sigma = build_sigma(ds);
    eb = fit_eb_all(ds, sigma).second;
  } catch (const std::exception&) {
    eb.reset();
  }

  std::ostringstream out;
  out << "family,subgroup,assessment,sample,ds\n";
  for (int c = 0; c < ds.n_cells(); ++c) {
    const CellKey& key = ds.cell_keys[c];
    // schools with the cell observed
    std::vector<double> w_vals, xhat_vals;
    std::vector<int> w_treat, xhat_treat;
    std::vector<double> w_wt_un, w_wt_m, x_wt_un, x_wt_m;
    for (int i = 0; i < ds.n_schools(); ++i) {
      const SubgroupCell* cell = ds.records[i].find_cell(key);
      if (cell && !cell->withheld()) {
        w_vals.push_back(*cell->obtained_avg);
        w_treat.push_back(treatment[i]);
        w_wt_un.push_back(1.0);
        w_wt_m.push_back(matched_w[i]);
      }
      if (eb.has_value() && eb->has(i, c)) {
        xhat_vals.push_back(eb->xhat(i, c));
        xhat_treat.push_back(treatment[i]);
        x_wt_un.push_back(1.0);
        x_wt_m.push_back(matched_w[i]);
      }
    }
    auto emit = [&](const std::string& family, const std::vector<double>& vals,
                    const std::vector<int>& treat, const std::vector<double>& w_un,
                    const std::vector<double>& w_m) {
      if (vals.size() < 2) return;
      const double sd = pooled_sd(vals);
      if (sd <= 0.0) return;
      out << family << "," << key.subgroup << "," << key.assessment << ",unmatched,"
          << fmt(standardized_difference(vals, treat, w_un, sd)) << "\n";
      out << family << "," << key.subgroup << "," << key.assessment << ",matched,"
          << fmt(standardized_difference(vals, treat, w_m, sd)) << "\n";
    };
    emit("W", w_vals, w_treat, w_wt_un, w_wt_m);
    if (eb.has_value()) emit("Xhat", xhat_vals, xhat_treat, x_wt_un, x_wt_m);
  }
  io_detail::write_file(config.output_dir + "/balance.csv", out.str());
  write_manifest(config, "");
  return 0;
}

int run_estimate(const RunConfig& config) {
  require_exists(config.input_path, "input");
  require_exists(config.scores_path, "scores");
  const Dataset ds = load_dataset(config.input_path);
  const ScoreTable scores = load_scores(config.scores_path);
  const std::vector<CellKey> outcomes = selected_outcomes(config, ds);

  const bool want_matching =
      config.estimators == "all" || config.estimators == "matching";
  const bool want_weighting =
      config.estimators == "all" || config.estimators == "weighting";
  const bool want_pencomp =
      config.estimators == "all" || config.estimators == "pencomp";
  if (!want_matching && !want_weighting && !want_pencomp) {
    throw DataError("unknown estimator selection: " + config.estimators);
  }
  std::optional<MatchResult> matched;
  if (want_matching) {
    require_exists(config.sets_path, "sets");
    matched = load_sets(config.sets_path, ds);
  }

  std::ostringstream out;
  out << "estimator,ps_kind,subgroup,assessment,point,n_treated,n_control\n";
  auto emit = [&](const EffectEstimate& est) {
    out << est.estimator << ","
        << (est.ps_kind ? to_string(*est.ps_kind) : std::string()) << ","
        << est.outcome_key.subgroup << "," << est.outcome_key.assessment << ","
        << fmt(est.point) << "," << est.n_treated << "," << est.n_control << "\n";
  };
  for (const auto& key : outcomes) {
    if (matched.has_value()) emit(matched_difference(*matched, ds, key));
    for (const PsKind kind : selected_kinds(config.ps_kinds)) {
      if (scores.rows.find(to_string(kind)) == scores.rows.end()) continue;
      const PsFit fit = scores_as_fit(scores, to_string(kind), ds);
      if (want_weighting) {
        emit(odds_weighting(fit, ds, key, !config.unnormalized));
      }
      if (want_pencomp) emit(pencomp(fit, ds, key));
    }
    emit(marginal_difference(ds, key));
  }
  io_detail::write_file(config.output_dir + "/estimates.csv", out.str());
  write_manifest(config, "");
  return 0;
}

int run_approx_check(const RunConfig& config) {
  std::ostringstream out;
  out << "eta,v,mixture,oracle,abs_error\n";
  double max_err = 0.0, at_eta = 0.0, at_v = 0.0;
  for (int ei = 0; ei <= 320; ++ei) {
    const double eta = -8.0 + 0.05 * ei;
    for (int vi = 0; vi <= 100; ++vi) {
      const double v = 0.25 * vi;
      const double a = mixture_probability(eta, v);
      const double o = logistic_normal_oracle(eta, v);
      const double err = std::abs(a - o);
      if (err > max_err) {
        max_err = err;
        at_eta = eta;
        at_v = v;
      }
      out << fmt(eta) << "," << fmt(v) << "," << io_detail::format_double(a) << ","
          << io_detail::format_double(o) << "," << io_detail::format_double(err)
          << "\n";
    }
  }
  std::ostringstream summary;
  summary << "key,value\n";
  summary << "max_abs_error," << io_detail::format_double(max_err) << "\n";
  summary << "at_eta," << fmt(at_eta) << "\n";
  summary << "at_v," << fmt(at_v) << "\n";
  summary << "frozen_tolerance," << io_detail::format_double(kMixtureFrozenTolerance)
          << "\n";
  io_detail::write_file(config.output_dir + "/approx_grid.csv", out.str());
  io_detail::write_file(config.output_dir + "/approx_summary.csv", summary.str());
  write_manifest(config, "");
  return max_err <= kMixtureFrozenTolerance ? 0 : 3;
}

}  // namespace

int run(const RunConfig& config) {
  std::filesystem::create_directories(config.output_dir);
  if (config.mode == "simulate") return run_simulate(config);
  if (config.mode == "fit-ps") return run_fit_ps(config);
  if (config.mode == "match") return run_match(config);
  if (config.mode == "balance") return run_balance(config);
  if (config.mode == "estimate") return run_estimate(config);
  if (config.mode == "approx-check") return run_approx_check(config);
  throw DataError("unknown mode: " + config.mode);
}

}  // namespace tsps
