#include "tsps/match.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>

namespace tsps {

namespace {

constexpr std::int64_t kDistScale = 1000000;     // logits -> integer costs
constexpr std::int64_t kControlBonus = 100'000'000'000;  // > any total distance
constexpr std::int64_t kTreatedBonus = 1'000'000'000'000'000;

struct Arc {
  int to;
  std::int64_t cap;
  std::int64_t cost;
  int rev;  // index of the reverse arc in graph[to]
};

class MinCostFlow {
 public:
  explicit MinCostFlow(int n) : graph_(n), potential_(n, 0) {}

  void add_arc(int from, int to, std::int64_t cap, std::int64_t cost) {
    graph_[from].push_back({to, cap, cost, static_cast<int>(graph_[to].size())});
    graph_[to].push_back({from, 0, -cost, static_cast<int>(graph_[from].size()) - 1});
  }

  // Initial potentials by relaxation in the given topological order; the
  // bonus arcs carry negative costs, so Dijkstra needs this first.
  void init_potentials(const std::vector<int>& topo_order, int source) {
    const std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    std::vector<std::int64_t> dist(graph_.size(), inf);
    dist[source] = 0;
    for (int u : topo_order) {
      if (dist[u] >= inf) continue;
      for (const Arc& a : graph_[u]) {
        if (a.cap > 0 && dist[u] + a.cost < dist[a.to]) {
          dist[a.to] = dist[u] + a.cost;
        }
      }
    }
    for (std::size_t i = 0; i < graph_.size(); ++i) {
      potential_[i] = dist[i] < inf ? dist[i] : 0;
    }
  }

  // Augments along shortest paths while they have negative real cost,
  // i.e. solves the min-cost flow with a free flow value.
  void run(int source, int sink) {
    const std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    const int n = static_cast<int>(graph_.size());
    std::vector<std::int64_t> dist(n);
    std::vector<int> prev_node(n), prev_arc(n);
    for (;;) {
      std::fill(dist.begin(), dist.end(), inf);
      dist[source] = 0;
      using Entry = std::pair<std::int64_t, int>;
      std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> heap;
      heap.push({0, source});
      while (!heap.empty()) {
        const auto [d, u] = heap.top();
        heap.pop();
        if (d > dist[u]) continue;
        for (std::size_t k = 0; k < graph_[u].size(); ++k) {
          const Arc& a = graph_[u][k];
          if (a.cap <= 0) continue;
          const std::int64_t nd = d + a.cost + potential_[u] - potential_[a.to];
          if (nd < dist[a.to]) {
            dist[a.to] = nd;
            prev_node[a.to] = u;
            prev_arc[a.to] = static_cast<int>(k);
            heap.push({nd, a.to});
          }
        }
      }
      if (dist[sink] >= inf) break;
      const std::int64_t real_cost =
          dist[sink] + potential_[sink] - potential_[source];
      if (real_cost >= 0) break;
      for (int i = 0; i < n; ++i) {
        if (dist[i] < inf) potential_[i] += dist[i];
      }
      std::int64_t flow = inf;
      for (int u = sink; u != source; u = prev_node[u]) {
        flow = std::min(flow, graph_[prev_node[u]][prev_arc[u]].cap);
      }
      for (int u = sink; u != source; u = prev_node[u]) {
        Arc& a = graph_[prev_node[u]][prev_arc[u]];
        a.cap -= flow;
        graph_[a.to][a.rev].cap += flow;
      }
    }
  }

  std::int64_t flow_on(int from, int arc_index) const {
    const Arc& a = graph_[from][arc_index];
    return graph_[a.to][a.rev].cap;
  }

  const std::vector<Arc>& arcs(int node) const { return graph_[node]; }

 private:
  std::vector<std::vector<Arc>> graph_;
  std::vector<std::int64_t> potential_;
};

}  // namespace

int MatchResult::n_matched_treated() const {
  int n = 0;
  for (const auto& s : sets) n += static_cast<int>(s.treated.size());
  return n;
}

int MatchResult::n_matched_controls() const {
  int n = 0;
  for (const auto& s : sets) n += static_cast<int>(s.controls.size());
  return n;
}

MatchResult full_match(const std::vector<double>& logit_scores,
                       const std::vector<int>& treatment, const MatchSpec& spec) {
  if (logit_scores.size() != treatment.size()) {
    throw DataError("full_match: score/treatment size mismatch");
  }
  if (spec.caliper_logits <= 0.0) throw DataError("caliper must be positive");
  if (spec.max_controls_per_treated < 1) {
    throw DataError("max_controls_per_treated must be >= 1");
  }

  std::vector<int> treated, controls;
  for (std::size_t i = 0; i < treatment.size(); ++i) {
    (treatment[i] == 1 ? treated : controls).push_back(static_cast<int>(i));
  }
  if (treated.empty() || controls.empty()) {
    throw DataError("full_match needs at least one treated and one control unit");
  }
  const int k2 = spec.max_controls_per_treated;
  const int k1 = spec.max_treated_per_control > 0
                     ? spec.max_treated_per_control
                     : static_cast<int>(treated.size());

  // Caliper screen: a treated unit with no control within the caliper is
  // unmatched before any optimization.
  std::vector<std::vector<std::pair<int, std::int64_t>>> edges(treated.size());
  MatchResult result;
  std::vector<int> kept_treated;
  for (std::size_t a = 0; a < treated.size(); ++a) {
    for (std::size_t b = 0; b < controls.size(); ++b) {
      const double d =
          std::abs(logit_scores[treated[a]] - logit_scores[controls[b]]);
      if (d <= spec.caliper_logits) {
        edges[a].push_back({static_cast<int>(b),
                            static_cast<std::int64_t>(std::llround(d * kDistScale))});
      }
    }
    if (edges[a].empty()) {
      result.unmatched_treated.push_back(treated[a]);
    } else {
      kept_treated.push_back(static_cast<int>(a));
    }
  }
  if (kept_treated.empty()) return result;

  std::vector<int> kept_controls;
  std::vector<int> control_pos(controls.size(), -1);
  for (int a : kept_treated) {
    for (const auto& [b, cost] : edges[a]) {
      if (control_pos[b] < 0) {
        control_pos[b] = static_cast<int>(kept_controls.size());
        kept_controls.push_back(b);
      }
    }
  }

  const int n_t = static_cast<int>(kept_treated.size());
  const int n_c = static_cast<int>(kept_controls.size());
  const int source = 0, sink = 1 + n_t + n_c;
  MinCostFlow flow(sink + 1);

  // Arc 0 per treated carries the mandatory unit at a large bonus; the
  // rest of the ratio capacity is free. Same scheme on the control side.
  for (int ti = 0; ti < n_t; ++ti) {
    flow.add_arc(source, 1 + ti, 1, -kTreatedBonus);
    if (k2 > 1) flow.add_arc(source, 1 + ti, k2 - 1, 0);
  }
  std::int64_t max_total_cost = 0;
  for (int ti = 0; ti < n_t; ++ti) {
    for (const auto& [b, cost] : edges[kept_treated[ti]]) {
      flow.add_arc(1 + ti, 1 + n_t + control_pos[b], 1, cost);
      max_total_cost += cost;
    }
  }
  if (max_total_cost >= kControlBonus ||
      static_cast<std::int64_t>(n_c) >= kTreatedBonus / (2 * kControlBonus)) {
    throw NumericError("full_match: instance too large for exact arithmetic");
  }
  for (int ci = 0; ci < n_c; ++ci) {
    flow.add_arc(1 + n_t + ci, sink, 1, -kControlBonus);
    if (k1 > 1) flow.add_arc(1 + n_t + ci, sink, k1 - 1, 0);
  }

  std::vector<int> topo{source};
  for (int ti = 0; ti < n_t; ++ti) topo.push_back(1 + ti);
  for (int ci = 0; ci < n_c; ++ci) topo.push_back(1 + n_t + ci);
  topo.push_back(sink);
  flow.init_potentials(topo, source);
  flow.run(source, sink);

  // Pairs with positive flow, then reduce to a star forest: drop the most
  // expensive pair whose two endpoints both still have other partners.
  struct Pair {
    int t, c;
    std::int64_t cost;
  };
  std::vector<Pair> pairs;
  for (int ti = 0; ti < n_t; ++ti) {
    const auto& arcs = flow.arcs(1 + ti);
    for (std::size_t k = 0; k < arcs.size(); ++k) {
      const int to = arcs[k].to;
      if (to <= n_t || to >= 1 + n_t + n_c) continue;
      if (flow.flow_on(1 + ti, static_cast<int>(k)) > 0) {
        pairs.push_back({ti, to - 1 - n_t, arcs[k].cost});
      }
    }
  }
  std::vector<int> deg_t(n_t, 0), deg_c(n_c, 0);
  for (const auto& p : pairs) {
    ++deg_t[p.t];
    ++deg_c[p.c];
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.cost != b.cost) return a.cost > b.cost;
    if (a.t != b.t) return a.t < b.t;
    return a.c < b.c;
  });
  bool progress = true;
  std::vector<bool> kept(pairs.size(), true);
  while (progress) {
    progress = false;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      if (!kept[k]) continue;
      if (deg_t[pairs[k].t] > 1 && deg_c[pairs[k].c] > 1) {
        kept[k] = false;
        --deg_t[pairs[k].t];
        --deg_c[pairs[k].c];
        progress = true;
      }
    }
  }

  // Group the star forest into matched sets.
  std::vector<std::vector<int>> by_treated(n_t), by_control(n_c);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (!kept[k]) continue;
    by_treated[pairs[k].t].push_back(pairs[k].c);
    by_control[pairs[k].c].push_back(pairs[k].t);
  }
  std::vector<bool> used_t(n_t, false), used_c(n_c, false);
  auto emit = [&](const std::vector<int>& ts, const std::vector<int>& cs) {
    MatchedSet set;
    for (int ti : ts) {
      set.treated.push_back(treated[kept_treated[ti]]);
      used_t[ti] = true;
    }
    for (int ci : cs) {
      set.controls.push_back(controls[kept_controls[ci]]);
      used_c[ci] = true;
    }
    set.control_weight = static_cast<double>(set.treated.size()) /
                         static_cast<double>(set.controls.size());
    for (int t_rec : set.treated) {
      for (int c_rec : set.controls) {
        result.total_distance +=
            std::abs(logit_scores[t_rec] - logit_scores[c_rec]);
      }
    }
    result.sets.push_back(std::move(set));
  };
  for (int ti = 0; ti < n_t; ++ti) {
    if (by_treated[ti].size() > 1) emit({ti}, by_treated[ti]);
  }
  for (int ci = 0; ci < n_c; ++ci) {
    if (used_c[ci] || by_control[ci].empty()) continue;
    std::vector<int> ts;
    for (int ti : by_control[ci]) {
      if (!used_t[ti]) ts.push_back(ti);
    }
    if (!ts.empty()) emit(ts, {ci});
  }

  // Every retained treated unit must have landed in a set; otherwise the
  // ratio configuration is infeasible and the result is voided.
  for (int ti = 0; ti < n_t; ++ti) {
    if (!used_t[ti]) {
      result.feasible = false;
      result.sets.clear();
      result.total_distance = 0.0;
      return result;
    }
  }
  return result;
}

MatchResult full_match(const PsFit& ps, const Dataset& dataset,
                       const MatchSpec& spec) {
  if (ps.logit_score.size() != dataset.n_schools()) {
    throw DataError("full_match: PS fit does not cover the dataset");
  }
  std::vector<double> logits(ps.logit_score.data(),
                             ps.logit_score.data() + ps.logit_score.size());
  std::vector<int> treatment(dataset.n_schools());
  for (int i = 0; i < dataset.n_schools(); ++i) {
    treatment[i] = dataset.records[i].treatment;
  }
  return full_match(logits, treatment, spec);
}

double effective_sample_size(const MatchResult& result) {
  double sum_w = 0.0, sum_w2 = 0.0;
  int n_treated = 0;
  for (const auto& set : result.sets) {
    n_treated += static_cast<int>(set.treated.size());
    for (std::size_t k = 0; k < set.controls.size(); ++k) {
      sum_w += set.control_weight;
      sum_w2 += set.control_weight * set.control_weight;
    }
  }
  if (result.sets.empty()) return 0.0;
  return n_treated + (sum_w2 > 0.0 ? sum_w * sum_w / sum_w2 : 0.0);
}

}  // namespace tsps
