#include "nettrial/eif.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace nettrial {

namespace {

double map_at(const std::map<long long, double>& m, long long k) {
  auto it = m.find(k);
  return it == m.end() ? 0.0 : it->second;
}

int node_count(const ScenarioSpec& spec) { return spec.tau * spec.N; }

// Pieces of a gradient table under construction, shared by the three
// representation builders.
struct BuiltTable {
  std::map<std::pair<long long, int>, double> table;
  std::map<long long, std::vector<double>> q_rows;
  std::map<long long, long long> denom_ctx;
  std::map<long long, double> hbar;
  int denom_letter = 0;
  double max_ratio = 1.0;
};

std::vector<double> positive_row(const TransitionTable& q, long long c, const ScenarioSpec& spec,
                                 const std::string& who) {
  if (!q.has(c))
    throw ValidationError(who + ": q has no row for reachable context " + std::to_string(c) + " (" +
                          spec.sum_l->decode(c) + ")");
  auto row = q.row(c);
  for (double p : row)
    if (p <= 0.0)
      throw ValidationError(who + ": gradient evaluation needs a strictly positive transition row at context " +
                            std::to_string(c) + " (" + spec.sum_l->decode(c) + ")");
  return {row.begin(), row.end()};
}

// The full states-by-context entry; throws unless every state is present
// (states absent from mean_cl had q(l|c) = 0).
const std::map<int, double>& full_means(const ConditionalEntry& e, const ScenarioSpec& spec, long long c,
                                        const std::string& who) {
  if (static_cast<int>(e.mean_cl.size()) != spec.n_states)
    throw ValidationError(who + ": gradient evaluation needs a strictly positive transition row at context " +
                          std::to_string(c) + " (" + spec.sum_l->decode(c) + ")");
  return e.mean_cl;
}

// rep 2: dbar(c,l) = K(c,l) / hbar(c) with
// K(c,l) = sum_{s,j} hstar_{s,j}(c) * (mean_cl - mean_c), accumulated from
// the conditional tables' own occupancy (their prob_c is exactly the
// counterfactual node marginal).
BuiltTable build_rep2(const ScenarioSpec& spec, const TransitionTable& q, const ContextMarginals& marginals,
                      const std::vector<NodeConditionals>& tables) {
  BuiltTable out;
  std::map<std::pair<long long, int>, double> K;
  for (int idx = 0; idx < node_count(spec); ++idx) {
    for (const auto& [c, e] : tables[static_cast<std::size_t>(idx)].by_context) {
      const auto& means = full_means(e, spec, c, "eif_components");
      for (const auto& [l, m_cl] : means) K[{c, l}] += e.prob_c * (m_cl - e.mean_c);
    }
  }
  for (const auto& [key, k] : K) {
    const long long c = key.first;
    double hb = map_at(marginals.hbar_l, c);
    if (k == 0.0) {
      out.table[key] = 0.0;
    } else if (hb <= 0.0) {
      throw PositivityError(
          "eif_components: context " + std::to_string(c) + " (" + spec.sum_l->decode(c) +
          ") is reachable under g* but has zero average occupancy under the trial design");
    } else {
      out.table[key] = k / hb;
    }
    if (!out.q_rows.count(c)) {
      out.q_rows[c] = positive_row(q, c, spec, "eif_components");
      out.denom_ctx[c] = c;
    }
  }
  out.hbar = marginals.hbar_l;
  out.denom_letter = 0;
  return out;
}

// rep 3: dbar(c,l) = sum_{s,j} [hstarA_{s,j}(cA)/hbarA(cA)] *
// [g*(a|cA)/g_s(a|cA)] * (mean_cl - mean_c) with (a, cA) the structural
// decomposition of c.
BuiltTable build_rep3(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine,
                      const ContextMarginals& marginals, const std::vector<NodeConditionals>& tables) {
  if (engine.adaptive())
    throw UnsupportedError(
        "eif_components: representation 3 needs per-round assignment tables; bandit designs are data-dependent");
  if (!spec.sum_l->decomposes())
    throw ModelMismatchError("eif_components: representation 3 needs an L-summarizer decomposing as (arm, A-context)");
  BuiltTable out;
  const int N = spec.N;
  for (int idx = 0; idx < node_count(spec); ++idx) {
    const int s = idx / N + 1;
    const DesignRule& g_s = engine.rule_at(s);
    for (const auto& [c, e] : tables[static_cast<std::size_t>(idx)].by_context) {
      const int a = spec.sum_l->arm_of(c);
      const long long ca = spec.sum_l->actx_of(c);
      const double hsA = map_at(marginals.hstar_a[static_cast<std::size_t>(idx)], ca);
      const double gstar_p = spec.g_star.dist(ca)[static_cast<std::size_t>(a)];
      if (hsA <= 0.0 || gstar_p <= 0.0) continue;  // zero counterfactual weight
      const double hbA = map_at(marginals.hbar_a, ca);
      if (hbA <= 0.0)
        throw PositivityError("eif_components: A-context " + std::to_string(ca) + " (" + spec.sum_a->decode(ca) +
                              ") is reachable under g* but has zero average occupancy under the trial design");
      const double g_p = g_s.dist(ca)[static_cast<std::size_t>(a)];
      if (g_p <= 0.0)
        throw PositivityError("eif_components: arm " + std::to_string(a) + " in A-context " + std::to_string(ca) +
                              " has positive g* probability but zero design probability at round " +
                              std::to_string(s));
      const double w = (hsA / hbA) * (gstar_p / g_p);
      const auto& means = full_means(e, spec, c, "eif_components");
      for (const auto& [l, m_cl] : means) out.table[{c, l}] += w * (m_cl - e.mean_c);
      if (!out.q_rows.count(c)) {
        out.q_rows[c] = positive_row(q, c, spec, "eif_components");
        out.denom_ctx[c] = ca;
      }
    }
  }
  out.hbar = marginals.hbar_a;
  out.denom_letter = 1;
  return out;
}

// rep 1: exhaustive enumeration under (q, engine).  For each complete
// tau-round trajectory the cumulative ratio W = prod g*/g over all
// assignment nodes converts design-law expectations into counterfactual
// ones; per node (s,j) the trajectory contributes its probability to the
// occupancy of (c,l) and p*W*Y to the weighted outcome sums.
BuiltTable build_rep1(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine,
                      const ContextMarginals& marginals, double budget) {
  const int N = spec.N, tau = spec.tau;
  struct Acc {
    double h = 0.0, yw = 0.0;
    std::map<int, double> h_l, yw_l;
  };
  std::vector<std::map<long long, Acc>> acc(static_cast<std::size_t>(node_count(spec)));
  double max_ratio = 1.0;
  enumerate_paths(spec, q, engine, tau, budget, nullptr, [&](const TrialView& v, double p) {
    double w = 1.0;
    for (int t = 1; t <= tau; ++t) {
      const DesignTheta theta = theta_from_prefix(spec, v, t, engine.update_every());
      for (int i = 1; i <= N; ++i) {
        const std::vector<double> row = engine.dist(spec, v, t, i, theta);
        const long long ca = spec.sum_a->code(v, t, i);
        const int a = v.a(t, i);
        w *= spec.g_star.dist(ca)[static_cast<std::size_t>(a)] / row[static_cast<std::size_t>(a)];
      }
    }
    max_ratio = std::max(max_ratio, w);
    double y = 0.0;
    for (int k = 1; k <= N; ++k) y += spec.outcome(v.l(tau, k));
    y /= N;
    for (int s = 1; s <= tau; ++s) {
      for (int j = 1; j <= N; ++j) {
        Acc& slot = acc[static_cast<std::size_t>((s - 1) * N + j - 1)][spec.sum_l->code(v, s, j)];
        const int l = v.l(s, j);
        slot.h += p;
        slot.yw += p * w * y;
        slot.h_l[l] += p;
        slot.yw_l[l] += p * w * y;
      }
    }
  });

  BuiltTable out;
  out.max_ratio = max_ratio;
  for (int idx = 0; idx < node_count(spec); ++idx) {
    for (const auto& [c, slot] : acc[static_cast<std::size_t>(idx)]) {
      if (static_cast<int>(slot.h_l.size()) != spec.n_states)
        throw ValidationError(
            "eif_components: gradient evaluation needs a strictly positive transition row at context " +
            std::to_string(c) + " (" + spec.sum_l->decode(c) + ")");
      const double hb = map_at(marginals.hbar_l, c);
      if (hb <= 0.0)
        throw PositivityError("eif_components: context " + std::to_string(c) + " (" + spec.sum_l->decode(c) +
                              ") visited by the enumeration has zero average occupancy in the marginals");
      const double e_c = slot.yw / slot.h;
      for (const auto& [l, hl] : slot.h_l) {
        const double e_cl = slot.yw_l.at(l) / hl;
        out.table[{c, l}] += (slot.h / hb) * (e_cl - e_c);
      }
      if (!out.q_rows.count(c)) {
        out.q_rows[c] = positive_row(q, c, spec, "eif_components");
        out.denom_ctx[c] = c;
      }
    }
  }
  out.hbar = marginals.hbar_l;
  out.denom_letter = 0;
  return out;
}

// Conditional tables estimated by common-random-number rollouts: one
// split-half pair of MC estimates per (node, context, state), contexts
// and occupancies taken from the exact g*-leg marginals, mean_c enforced
// as the q-average of mean_cl.
std::vector<NodeConditionals> tables_mc(const ScenarioSpec& spec, const TransitionTable& q,
                                        const ContextMarginals& marginals, long long mc_paths,
                                        std::uint64_t mc_seed, double* max_se) {
  const int N = spec.N;
  std::vector<NodeConditionals> tables(static_cast<std::size_t>(node_count(spec)));
  const long long half = std::max<long long>(1, mc_paths / 2);
  for (int idx = 0; idx < node_count(spec); ++idx) {
    NodeConditionals& node = tables[static_cast<std::size_t>(idx)];
    node.s = idx / N + 1;
    node.j = idx % N + 1;
    for (const auto& [c, hs] : marginals.hstar_l[static_cast<std::size_t>(idx)]) {
      if (hs <= 0.0) continue;
      const std::vector<double> qrow = positive_row(q, c, spec, "eif_components");
      ConditionalEntry e;
      e.prob_c = hs;
      const std::uint64_t seed1 =
          mc_seed * 2654435761ULL + static_cast<std::uint64_t>(idx) * 1000003ULL + static_cast<std::uint64_t>(c) * 7919ULL;
      const std::uint64_t seed2 = seed1 + 0x100000001ULL;
      double mean_c = 0.0;
      for (int l = 0; l < spec.n_states; ++l) {
        const double m1 = conditional_outcome(spec, q, node.s, node.j, c, l, std::nullopt, "mc", half, seed1);
        const double m2 = conditional_outcome(spec, q, node.s, node.j, c, l, std::nullopt, "mc", half, seed2);
        e.mean_cl[l] = 0.5 * (m1 + m2);
        *max_se = std::max(*max_se, 0.5 * std::abs(m1 - m2));
        mean_c += qrow[static_cast<std::size_t>(l)] * e.mean_cl[l];
      }
      e.mean_c = mean_c;
      node.by_context[c] = e;
    }
  }
  return tables;
}

// Variance of the table under (context, state) ~ tail occupancy times q,
// with the horizon-average denominator swapped for the tail average.
double stationary_variance(const EifBundle& b, const ContextMarginals& marginals) {
  const auto& hinf_den = b.denom_letter == 1 ? marginals.hinf_a : marginals.hinf_l;
  double mean = 0.0, m2 = 0.0;
  for (const auto& [c, w] : marginals.hinf_l) {
    if (w <= 0.0) continue;
    auto qit = b.q_rows.find(c);
    if (qit == b.q_rows.end()) continue;  // untabulated: gradient is zero there
    const double den = map_at(hinf_den, b.denom_ctx.at(c));
    if (den <= 0.0)
      throw PositivityError("eif_variance: tail occupancy vanished at tabulated context " + std::to_string(c));
    const double scale = map_at(b.hbar, b.denom_ctx.at(c)) / den;
    const auto& qrow = qit->second;
    for (int l = 0; l < static_cast<int>(qrow.size()); ++l) {
      const double v = b.at(c, l) * scale;
      mean += w * qrow[static_cast<std::size_t>(l)] * v;
      m2 += w * qrow[static_cast<std::size_t>(l)] * v * v;
    }
  }
  return m2 - mean * mean;
}

}  // namespace

double EifBundle::at(long long c, int l) const {
  auto it = table.find({c, l});
  return it == table.end() ? 0.0 : it->second;
}

EifBundle eif_table(const ScenarioSpec& spec, const TransitionTable& q, const DesignEngine& engine,
                    const ContextMarginals& marginals, int rep, const std::string& backend, double budget,
                    long long mc_paths, std::uint64_t mc_seed) {
  if (marginals.N != spec.N || marginals.T < spec.tau)
    throw ValidationError("eif_table: marginals must cover the scenario's units and at least tau rounds");

  if (rep == 0) rep = spec.model_class == "M2" ? 3 : (spec.model_class == "M1" ? 2 : 1);
  if (rep < 1 || rep > 3) throw ValidationError("eif_table: rep must be 0 (auto), 1, 2 or 3");
  if (rep == 2 && spec.model_class != "M1" && spec.model_class != "M2")
    throw ModelMismatchError("eif_table: representation 2 needs within-block context sufficiency (M1 or M2)");
  if (rep == 3 && spec.model_class != "M2")
    throw ModelMismatchError("eif_table: representation 3 needs the decomposing model class (M2)");

  EifBundle out;
  out.rep = rep;
  BuiltTable built;
  double mc_max_se = 0.0;
  if (rep == 1) {
    if (backend != "auto" && backend != "enum")
      throw UnsupportedError("eif_table: representation 1 is enumeration-only (backend " + backend + ")");
    built = build_rep1(spec, q, engine, marginals, budget);
    out.backend = "enum";
  } else {
    std::vector<NodeConditionals> tables;
    if (backend == "mc") {
      tables = tables_mc(spec, q, marginals, mc_paths, mc_seed, &mc_max_se);
      out.backend = "mc";
    } else if (backend == "auto") {
      try {
        const std::string exact = scenario_block_local(spec) ? "chain" : "enum";
        tables = conditional_outcome_tables(spec, q, 0, exact, budget);
        out.backend = exact;
      } catch (const BudgetError&) {
        tables = tables_mc(spec, q, marginals, mc_paths, mc_seed, &mc_max_se);
        out.backend = "mc";
      }
    } else {
      tables = conditional_outcome_tables(spec, q, 0, backend, budget);
      out.backend = backend;
    }
    built = rep == 2 ? build_rep2(spec, q, marginals, tables) : build_rep3(spec, q, engine, marginals, tables);
  }

  out.table = std::move(built.table);
  out.q_rows = std::move(built.q_rows);
  out.denom_ctx = std::move(built.denom_ctx);
  out.hbar = std::move(built.hbar);
  out.denom_letter = built.denom_letter;
  out.max_ratio = built.max_ratio;
  out.sigma2_inf = stationary_variance(out, marginals);

  out.info = json{{"rep", rep}, {"backend", out.backend}, {"marginals_backend", marginals.backend}};
  if (rep == 1) out.info["max_ratio"] = out.max_ratio;
  if (out.backend == "mc") out.info["mc_max_se"] = mc_max_se;
  return out;
}

EifBundle eif_components(const ScenarioSpec& spec, const TransitionTable& q, const TrialData& data,
                         const DesignEngine& engine, const ContextMarginals& marginals, int rep,
                         const std::string& backend, double budget, long long mc_paths, std::uint64_t mc_seed) {
  if (data.N != spec.N) throw ValidationError("eif_components: data has " + std::to_string(data.N) +
                                              " units, scenario declares " + std::to_string(spec.N));
  data.validate_supports(spec.n_arms, spec.n_states);

  const int rep_resolved =
      rep == 0 ? (spec.model_class == "M2" ? 3 : (spec.model_class == "M1" ? 2 : 1)) : rep;
  if (rep_resolved == 1 && (backend == "auto" || backend == "enum")) {
    // A realized assignment with zero design probability makes the
    // cumulative ratio undefined on the observed path.
    const TrialView view{&data, &spec.initial_state};
    for (int t = 1; t <= std::min(spec.tau, data.T); ++t) {
      const DesignTheta theta = theta_from_prefix(spec, view, t, engine.update_every());
      for (int i = 1; i <= spec.N; ++i) {
        const std::vector<double> row = engine.dist(spec, view, t, i, theta);
        if (row[static_cast<std::size_t>(data.a(t, i))] <= 0.0)
          throw PositivityError("eif_components: realized assignment A(" + std::to_string(t) + "," +
                                std::to_string(i) + ") has zero probability under the design");
      }
    }
  }

  EifBundle out = eif_table(spec, q, engine, marginals, rep, backend, budget, mc_paths, mc_seed);

  const TrialView view{&data, &spec.initial_state};
  out.nodes.reserve(static_cast<std::size_t>(data.T) * spec.N);
  double sum = 0.0;
  for (int t = 1; t <= data.T; ++t) {
    for (int i = 1; i <= spec.N; ++i) {
      EifNode n;
      n.t = t;
      n.i = i;
      n.ctx = spec.sum_l->code(view, t, i);
      n.lval = data.l(t, i);
      n.dbar = out.at(n.ctx, n.lval);
      sum += n.dbar;
      out.nodes.push_back(n);
    }
  }
  const double n_nodes = static_cast<double>(out.nodes.size());
  out.pn = out.nodes.empty() ? 0.0 : sum / n_nodes;
  double ss = 0.0;
  for (const EifNode& n : out.nodes) ss += (n.dbar - out.pn) * (n.dbar - out.pn);
  out.sigma2 = out.nodes.empty() ? 0.0 : ss / n_nodes;
  return out;
}

std::pair<double, double> eif_variance(const EifBundle& bundle, const ContextMarginals& marginals) {
  if (bundle.nodes.size() < 2)
    throw ValidationError("eif_variance: needs at least 2 evaluated nodes, have " +
                          std::to_string(bundle.nodes.size()));
  double mean = 0.0;
  for (const EifNode& n : bundle.nodes) mean += n.dbar;
  mean /= static_cast<double>(bundle.nodes.size());
  double ss = 0.0;
  for (const EifNode& n : bundle.nodes) ss += (n.dbar - mean) * (n.dbar - mean);
  return {ss / static_cast<double>(bundle.nodes.size()), stationary_variance(bundle, marginals)};
}

void write_eif_csv(const EifBundle& bundle, std::ostream& os) {
  os << "t,i,c,l,dbar\n";
  os << std::setprecision(17);
  for (const EifNode& n : bundle.nodes)
    os << n.t << ',' << n.i << ',' << n.ctx << ',' << n.lval << ',' << n.dbar << '\n';
}

void write_eif_csv_file(const EifBundle& bundle, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("write_eif_csv_file: cannot open " + path);
  write_eif_csv(bundle, os);
}

// ---------------------------------------------------------------------------
// Remainder

namespace {

// Telescoping part: sum over paths (under g*) and over measurement nodes k
// of  Y * G * [prod q before k] * (q - q0)(at k) * [prod q0 after - prod q
// after],
// which is the exact gap between the plug-in difference and the linear
// correction in the transition factors.
double telescope_part(const ScenarioSpec& spec, const TransitionTable& q, const TransitionTable& q0,
                      double budget) {
  const int N = spec.N, tau = spec.tau;
  const int n_nodes = tau * N;
  const DesignEngine gstar = DesignEngine::fixed(spec.g_star);
  double total = 0.0;
  std::vector<double> qf(static_cast<std::size_t>(n_nodes)), q0f(static_cast<std::size_t>(n_nodes));
  std::vector<double> sq(static_cast<std::size_t>(n_nodes)), s0(static_cast<std::size_t>(n_nodes));
  enumerate_paths(spec, q, gstar, tau, budget, nullptr, [&](const TrialView& v, double) {
    double g = 1.0;
    for (int t = 1; t <= tau; ++t) {
      for (int i = 1; i <= N; ++i) {
        const long long ca = spec.sum_a->code(v, t, i);
        g *= spec.g_star.dist(ca)[static_cast<std::size_t>(v.a(t, i))];
      }
      for (int i = 1; i <= N; ++i) {
        const long long c = spec.sum_l->code(v, t, i);
        const int l = v.l(t, i);
        qf[static_cast<std::size_t>((t - 1) * N + i - 1)] = q.prob(c, l);
        q0f[static_cast<std::size_t>((t - 1) * N + i - 1)] = q0.prob(c, l);
      }
    }
    double y = 0.0;
    for (int k = 1; k <= N; ++k) y += spec.outcome(v.l(tau, k));
    y /= N;
    for (int k = n_nodes - 1; k >= 0; --k) {
      sq[static_cast<std::size_t>(k)] =
          k == n_nodes - 1 ? 1.0 : qf[static_cast<std::size_t>(k + 1)] * sq[static_cast<std::size_t>(k + 1)];
      s0[static_cast<std::size_t>(k)] =
          k == n_nodes - 1 ? 1.0 : q0f[static_cast<std::size_t>(k + 1)] * s0[static_cast<std::size_t>(k + 1)];
    }
    double prefix = 1.0, inner = 0.0;
    for (int k = 0; k < n_nodes; ++k) {
      inner += prefix * (qf[static_cast<std::size_t>(k)] - q0f[static_cast<std::size_t>(k)]) *
               (s0[static_cast<std::size_t>(k)] - sq[static_cast<std::size_t>(k)]);
      prefix *= qf[static_cast<std::size_t>(k)];
    }
    total += y * g * inner;
  });
  return total;
}

}  // namespace

RemainderReport remainder_exact(const ScenarioSpec& spec, const DesignEngine& engine, int T,
                                const TransitionTable& q, int rep_class, double budget) {
  if (spec.model_class != "M1" && spec.model_class != "M2")
    throw ModelMismatchError("remainder_exact: needs within-block context sufficiency (M1 or M2)");
  if (rep_class == 0) rep_class = spec.model_class == "M2" ? 2 : 1;
  if (rep_class != 1 && rep_class != 2)
    throw ValidationError("remainder_exact: rep_class must be 0 (auto), 1 or 2");
  if (rep_class == 2 && spec.model_class != "M2")
    throw ModelMismatchError("remainder_exact: the single-integral form needs the decomposing model class (M2)");
  if (T < spec.tau) throw ValidationError("remainder_exact: horizon T must cover tau");

  const TransitionTable& q0 = spec.q0;
  RemainderReport rep;
  rep.rep_class = rep_class;
  rep.psi_q = gcomp_exact(spec, q, 0, budget).value;
  rep.psi_q0 = gcomp_exact(spec, q0, 0, budget).value;

  const ContextMarginals marg_q = context_marginals(spec, q, engine, T, "auto", budget);
  const ContextMarginals marg_q0 = context_marginals(spec, q0, engine, T, "auto", budget);
  const std::vector<NodeConditionals> tables_q = conditional_outcome_tables(spec, q, 0, "auto", budget);
  const BuiltTable built = build_rep2(spec, q, marg_q, tables_q);

  double mean_d = 0.0;
  for (const auto& [c, w0] : marg_q0.hbar_l) {
    if (w0 <= 0.0) continue;
    const auto row0 = q0.row(c);
    double inner = 0.0;
    for (int l = 0; l < spec.n_states; ++l) {
      auto it = built.table.find({c, l});
      if (it != built.table.end()) inner += row0[static_cast<std::size_t>(l)] * it->second;
    }
    mean_d += w0 * inner;
  }
  rep.mean_d = mean_d;
  rep.r = rep.psi_q - rep.psi_q0 + rep.mean_d;

  if (rep_class == 1) {
    double part = 0.0;
    for (int idx = 0; idx < spec.tau * spec.N; ++idx) {
      for (const auto& [c, e] : tables_q[static_cast<std::size_t>(idx)].by_context) {
        const double hbq = map_at(marg_q.hbar_l, c);
        if (hbq <= 0.0)
          throw PositivityError("remainder_exact: context " + std::to_string(c) +
                                " reachable under g* has zero average occupancy under the trial design");
        const double hb0 = map_at(marg_q0.hbar_l, c);
        const auto& means = full_means(e, spec, c, "remainder_exact");
        double inner = 0.0;
        for (const auto& [l, m_cl] : means)
          inner += (q0.prob(c, l) - q.prob(c, l)) * m_cl;
        part += e.prob_c * ((hb0 - hbq) / hbq) * inner;
      }
    }
    rep.part_marginal = part;
    rep.part_telescope = telescope_part(spec, q, q0, budget);
    rep.parts_gap = std::abs(rep.part_marginal + rep.part_telescope - rep.r);
  } else {
    double part = 0.0;
    for (int idx = 0; idx < spec.tau * spec.N; ++idx) {
      const int s = idx / spec.N + 1, j = idx % spec.N + 1;
      std::map<long long, double> cas = marg_q.hstar_a[static_cast<std::size_t>(idx)];
      for (const auto& [ca, w] : marg_q0.hstar_a[static_cast<std::size_t>(idx)]) cas.emplace(ca, w);
      for (const auto& [ca, unused] : cas) {
        (void)unused;
        const double wq = map_at(marg_q.hstar_a[static_cast<std::size_t>(idx)], ca);
        const double w0 = map_at(marg_q0.hstar_a[static_cast<std::size_t>(idx)], ca);
        const double hbq = map_at(marg_q.hbar_a, ca), hb0 = map_at(marg_q0.hbar_a, ca);
        if ((wq > 0.0 && hbq <= 0.0) || (w0 > 0.0 && hb0 <= 0.0))
          throw PositivityError("remainder_exact: A-context " + std::to_string(ca) +
                                " reachable under g* has zero average occupancy under the trial design");
        const double omega_q = wq > 0.0 ? wq / hbq : 0.0;
        const double omega_0 = w0 > 0.0 ? w0 / hb0 : 0.0;
        if (omega_q == omega_0 || hb0 <= 0.0) continue;
        const std::vector<double> gs_row = spec.g_star.dist(ca);
        for (int a = 0; a < spec.n_arms; ++a) {
          if (gs_row[static_cast<std::size_t>(a)] <= 0.0) continue;
          const long long c = spec.sum_l->compose(a, ca);
          for (int l = 0; l < spec.n_states; ++l) {
            const double dq = q.prob(c, l) - q0.prob(c, l);
            if (dq == 0.0) continue;
            const double ey = conditional_outcome(spec, q, s, j, c, l, j, "auto");
            part += hb0 * gs_row[static_cast<std::size_t>(a)] * (omega_q - omega_0) * dq * ey / spec.N;
          }
        }
      }
    }
    rep.part_single = part;
    rep.parts_gap = std::abs(rep.part_single - rep.r);
  }
  return rep;
}

RemainderSweep remainder_sweep(const ScenarioSpec& spec, const DesignEngine& engine, int T,
                               const TransitionTable& q1, const std::vector<double>& eps, int rep_class,
                               double budget) {
  if (eps.size() < 2) throw ValidationError("remainder_sweep: need at least 2 epsilon values");
  RemainderSweep out;
  for (double e : eps) {
    if (e <= 0.0 || e >= 1.0) throw ValidationError("remainder_sweep: epsilon must lie in (0,1)");
    std::vector<long long> codes = spec.q0.codes();
    std::vector<std::vector<double>> rows;
    rows.reserve(codes.size());
    for (long long c : codes) {
      if (!q1.has(c)) throw ValidationError("remainder_sweep: q1 has no row for context " + std::to_string(c));
      const auto r0 = spec.q0.row(c);
      const auto r1 = q1.row(c);
      std::vector<double> row(r0.size());
      for (std::size_t l = 0; l < row.size(); ++l) row[l] = (1.0 - e) * r0[l] + e * r1[l];
      rows.push_back(std::move(row));
    }
    const TransitionTable q_eps(spec.n_states, std::move(codes), std::move(rows));
    const RemainderReport r = remainder_exact(spec, engine, T, q_eps, rep_class, budget);
    out.eps.push_back(e);
    out.r_abs.push_back(std::abs(r.r));
    if (std::abs(r.r) < 1e-13)
      throw ValidationError("remainder_sweep: remainder vanished at epsilon=" + std::to_string(e) +
                            "; the log-log slope is undefined");
  }
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(out.eps.size());
  for (std::size_t k = 0; k < out.eps.size(); ++k) {
    mx += std::log(out.eps[k]);
    my += std::log(out.r_abs[k]);
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < out.eps.size(); ++k) {
    const double dx = std::log(out.eps[k]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(out.r_abs[k]) - my);
  }
  out.slope = sxy / sxx;
  return out;
}

// ---------------------------------------------------------------------------
// Gradient norm audit

GradientBoundReport gradient_bound_audit(const ScenarioSpec& spec, const DesignEngine& engine, int T,
                                         double budget) {
  if (spec.model_class != "M1" && spec.model_class != "M2")
    throw ModelMismatchError("gradient_bound_audit: needs within-block context sufficiency (M1 or M2)");
  if (T < spec.tau) throw ValidationError("gradient_bound_audit: horizon T must cover tau");
  const int N = spec.N, tau = spec.tau;

  const ContextMarginals marg = context_marginals(spec, spec.q0, engine, T, "auto", budget);
  const std::vector<NodeConditionals> tables = conditional_outcome_tables(spec, spec.q0, 0, "auto", budget);
  const BuiltTable built = build_rep2(spec, spec.q0, marg, tables);

  GradientBoundReport rep;
  for (const auto& [key, v] : built.table) rep.max_abs = std::max(rep.max_abs, std::abs(v));
  for (int idx = 0; idx < tau * N; ++idx) {
    for (const auto& [c, e] : tables[static_cast<std::size_t>(idx)].by_context) {
      const double hb = map_at(marg.hbar_l, c);
      if (hb <= 0.0)
        throw PositivityError("gradient_bound_audit: context " + std::to_string(c) +
                              " reachable under g* has zero average occupancy under the trial design");
      rep.b_hat = std::max(rep.b_hat, e.prob_c / hb);
    }
  }

  // Joint law of ((A,L)(s,j), Y(k)) under (q0, g*), exact by enumeration.
  std::vector<double> yvals;
  for (double v : spec.f_y)
    if (std::find(yvals.begin(), yvals.end(), v) == yvals.end()) yvals.push_back(v);
  std::sort(yvals.begin(), yvals.end());
  const auto yidx = [&](double v) {
    return static_cast<std::size_t>(std::find(yvals.begin(), yvals.end(), v) - yvals.begin());
  };
  const std::size_t n_o = static_cast<std::size_t>(spec.n_arms) * spec.n_states;
  std::vector<std::vector<std::vector<double>>> joint(
      static_cast<std::size_t>(tau * N) * N, std::vector<std::vector<double>>(n_o, std::vector<double>(yvals.size(), 0.0)));
  const DesignEngine gstar = DesignEngine::fixed(spec.g_star);
  enumerate_paths(spec, spec.q0, gstar, tau, budget, nullptr, [&](const TrialView& v, double p) {
    for (int s = 1; s <= tau; ++s) {
      for (int j = 1; j <= N; ++j) {
        const std::size_t o =
            static_cast<std::size_t>(v.a(s, j)) * spec.n_states + static_cast<std::size_t>(v.l(s, j));
        for (int k = 1; k <= N; ++k) {
          const std::size_t slot = (static_cast<std::size_t>((s - 1) * N + j - 1)) * N + (k - 1);
          joint[slot][o][yidx(spec.outcome(v.l(tau, k)))] += p;
        }
      }
    }
  });
  for (int idx = 0; idx < tau * N; ++idx) {
    double sum_k = 0.0;
    for (int k = 0; k < N; ++k)
      sum_k += mixing_coefficients(joint[static_cast<std::size_t>(idx) * N + k]).phi;
    rep.phi_hat = std::max(rep.phi_hat, sum_k);
  }

  rep.bound = 2.0 * tau * rep.b_hat * rep.phi_hat;
  rep.ok = rep.max_abs <= rep.bound * (1.0 + 1e-12) + 1e-12;
  return rep;
}

double rep3_cross_term_gap(const ScenarioSpec& spec, const TransitionTable& q, double budget) {
  if (spec.model_class != "M2")
    throw ModelMismatchError("rep3_cross_term_gap: needs the decomposing model class (M2)");
  const double psi = gcomp_exact(spec, q, 0, budget).value;
  const std::vector<NodeConditionals> tables = conditional_outcome_tables(spec, q, 0, "auto", budget);
  std::vector<double> e_idx(tables.size(), 0.0);
  for (std::size_t idx = 0; idx < tables.size(); ++idx)
    for (const auto& [c, e] : tables[idx].by_context) e_idx[idx] += e.prob_c * e.mean_c;
  double gap = 0.0;
  const int N = spec.N;
  for (std::size_t idx = 0; idx < tables.size(); ++idx) {
    gap = std::max(gap, std::abs(e_idx[idx] - psi));
    if (static_cast<int>(idx) >= N)  // same unit, previous round
      gap = std::max(gap, std::abs(e_idx[idx] - e_idx[idx - static_cast<std::size_t>(N)]));
  }
  return gap;
}

}  // namespace nettrial
