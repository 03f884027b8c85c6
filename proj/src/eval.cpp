#include "seqgen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace seqgen {

namespace {

using NgramCounts = std::map<std::vector<TokenId>, std::size_t>;

NgramCounts ngrams(const Sequence& s, std::size_t n) {
  NgramCounts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    ++out[std::vector<TokenId>(s.begin() + static_cast<std::ptrdiff_t>(i),
                               s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

void check_pairs(const std::vector<Sequence>& c, const std::vector<Sequence>& r, const char* what) {
  if (c.size() != r.size()) throw InvalidArgument(std::string(what) + ": candidate and reference counts differ");
  if (c.empty()) throw InvalidArgument(std::string(what) + ": empty corpus");
}

}  // namespace

double bleu(const std::vector<Sequence>& candidates, const std::vector<Sequence>& references,
            double smoothing) {
  check_pairs(candidates, references, "bleu");
  std::array<double, 4> matches{}, totals{};
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    cand_len += static_cast<double>(candidates[s].size());
    ref_len += static_cast<double>(references[s].size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto c = ngrams(candidates[s], n);
      const auto r = ngrams(references[s], n);
      for (const auto& [g, count] : c) {
        totals[n - 1] += static_cast<double>(count);
        const auto it = r.find(g);
        if (it != r.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
      }
    }
  }
  if (cand_len == 0.0 || matches[0] == 0.0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double m = matches[n] > 0.0 ? matches[n] : smoothing;
    log_p += std::log(m / std::max(totals[n], 1.0)) / 4.0;
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_p);
}

double exact_match(const std::vector<Sequence>& candidates, const std::vector<Sequence>& references) {
  check_pairs(candidates, references, "exact_match");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) hits += candidates[i] == references[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

double energy(const MaskedConditionalModel& model, const Sequence& y, const Sequence& x, EnergyKind kind) {
  if (kind == EnergyKind::pseudo_ll) return -pseudo_log_likelihood(model, y, x);
  if (y.contains(model.vocab().mask_id())) throw InvalidArgument("energy: sequence contains <mask>");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) total += model.conditional_logits(y, {i}, x)[0][y[i]];
  return -total;
}

double partial_energy(const MaskedConditionalModel& model, const Sequence& y, const Sequence& x,
                      EnergyKind kind) {
  const TokenId mask = model.vocab().mask_id();
  double total = 0.0;
  std::size_t filled = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == mask) continue;
    ++filled;
    if (kind == EnergyKind::pseudo_ll)
      total += safe_log(model.conditional(y, {i}, x)[0][y[i]]);
    else
      total += model.conditional_logits(y, {i}, x)[0][y[i]];
  }
  return filled == 0 ? 0.0 : -total / static_cast<double>(filled);
}

std::vector<double> energy_curve(const MaskedConditionalModel& model, const GenerationTrace& trace,
                                 EnergyKind kind) {
  std::vector<double> out;
  out.reserve(trace.intermediates.size());
  for (const auto& y : trace.intermediates) out.push_back(partial_energy(model, y, trace.input, kind));
  return out;
}

std::vector<EnergyGapCurve> energy_gap_curves(const std::map<std::string, std::vector<std::vector<double>>>& curves,
                                              const std::string& baseline, std::size_t points) {
  const auto base_it = curves.find(baseline);
  if (base_it == curves.end()) throw InvalidArgument("energy gaps: baseline '" + baseline + "' missing");
  if (points < 2) throw InvalidArgument("energy gaps: need at least two grid points");
  const auto& base = base_it->second;
  if (base.empty()) throw InvalidArgument("energy gaps: no sentences");
  auto at = [](const std::vector<double>& c, double f) {
    if (c.empty()) throw InvalidArgument("energy gaps: empty curve");
    const double T = static_cast<double>(c.size() - 1);
    return c[static_cast<std::size_t>(std::lround(f * T))];
  };
  std::vector<EnergyGapCurve> out;
  for (const auto& [name, per_sentence] : curves) {
    if (per_sentence.size() != base.size())
      throw InvalidArgument("energy gaps: strategy '" + name + "' covers a different number of sentences");
    EnergyGapCurve g;
    g.strategy = name;
    const double n = static_cast<double>(base.size());
    for (std::size_t k = 0; k < points; ++k) {
      const double f = static_cast<double>(k) / static_cast<double>(points - 1);
      double sum = 0.0, sq = 0.0;
      for (std::size_t s = 0; s < base.size(); ++s) {
        const double gap = at(base[s], f) - at(per_sentence[s], f);
        sum += gap;
        sq += gap * gap;
      }
      const double mean = sum / n;
      const double var = base.size() > 1 ? std::max(0.0, (sq - n * mean * mean) / (n - 1.0)) : 0.0;
      g.fractions.push_back(f);
      g.mean.push_back(mean);
      g.stderr_.push_back(std::sqrt(var / n));
    }
    out.push_back(std::move(g));
  }
  return out;
}

void write_energy_csv(std::ostream& out, const std::vector<EnergyGapCurve>& curves) {
  out << "step_fraction,strategy,mean,stderr\n";
  const auto old = out.precision(12);
  for (const auto& c : curves)
    for (std::size_t k = 0; k < c.fractions.size(); ++k)
      out << c.fractions[k] << ',' << c.strategy << ',' << c.mean[k] << ',' << c.stderr_[k] << '\n';
  out.precision(old);
}

OrderVector order_vector(const GenerationTrace& trace) {
  const std::size_t T = trace.steps.size();
  if (T == 0 || trace.length == 0) throw InvalidArgument("order_vector: empty trace");
  OrderVector v{};
  for (const auto& s : trace.steps)
    if (s.coords.popcount() != 1) throw InvalidArgument("order_vector: trace has multi-position steps");
  for (std::size_t j = 1; j <= 10; ++j) {
    const std::size_t step = (j * T + 9) / 10;
    const std::size_t pos = trace.steps[step - 1].coords.positions()[0];
    v[j - 1] = static_cast<double>(pos + 1) / static_cast<double>(trace.length);
  }
  return v;
}

namespace {

double sq_dist(const OrderVector& a, const OrderVector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

ClusterReport lloyd(const std::vector<OrderVector>& xs, std::vector<OrderVector> centers,
                    std::size_t max_iterations) {
  ClusterReport rep;
  const std::size_t k = centers.size();
  rep.assignments.assign(xs.size(), 0);
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::size_t best = 0;
      double bd = sq_dist(xs[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(xs[i], centers[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (iter == 0 || rep.assignments[i] != best) changed = true;
      rep.assignments[i] = best;
      inertia += bd;
    }
    rep.inertia_history.push_back(inertia);
    if (!changed) break;
    std::vector<OrderVector> sums(k, OrderVector{});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      ++counts[rep.assignments[i]];
      for (std::size_t d = 0; d < 10; ++d) sums[rep.assignments[i]][d] += xs[i][d];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t d = 0; d < 10; ++d) centers[c][d] = sums[c][d] / static_cast<double>(counts[c]);
  }
  rep.centers = std::move(centers);
  rep.counts.assign(k, 0);
  for (std::size_t a : rep.assignments) ++rep.counts[a];
  rep.inertia = rep.inertia_history.back();
  return rep;
}

}  // namespace

ClusterReport kmeans(const std::vector<OrderVector>& xs, std::size_t k, Rng& rng, std::size_t restarts,
                     std::size_t max_iterations) {
  if (k == 0) throw InvalidArgument("kmeans: k must be positive");
  if (xs.size() < k) throw InvalidArgument("kmeans: fewer vectors than clusters");
  if (restarts == 0 || max_iterations == 0) throw InvalidArgument("kmeans: restarts and iterations must be positive");
  ClusterReport best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    std::vector<OrderVector> centers{xs[uniform_index(rng, xs.size())]};
    std::vector<double> d2(xs.size());
    while (centers.size() < k) {
      double total = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& c : centers) m = std::min(m, sq_dist(xs[i], c));
        d2[i] = m;
        total += m;
      }
      centers.push_back(total > 0.0 ? xs[sample_categorical(rng, d2)] : xs[uniform_index(rng, xs.size())]);
    }
    auto rep = lloyd(xs, std::move(centers), max_iterations);
    if (rep.inertia < best.inertia) best = std::move(rep);
  }
  return best;
}

void write_cluster_csv(std::ostream& out, const ClusterReport& report) {
  out << "cluster,size";
  for (std::size_t d = 1; d <= 10; ++d) out << ",c" << d;
  out << '\n';
  const auto old = out.precision(12);
  for (std::size_t c = 0; c < report.centers.size(); ++c) {
    out << c << ',' << report.counts[c];
    for (double v : report.centers[c]) out << ',' << v;
    out << '\n';
  }
  out.precision(old);
}

}  // namespace seqgen
