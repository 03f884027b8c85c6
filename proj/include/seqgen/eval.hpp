#pragma once

// Translation metrics and analyses of decoding behavior: corpus BLEU, exact
// match, sequence energies along a trace, generation-order vectors and their
// k-means clusters.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "seqgen/models.hpp"

namespace seqgen {

inline constexpr double kBleuSmoothing = 0.01;

/// Corpus BLEU-4 in [0, 100] with brevity penalty. Zero higher-order match
/// counts (n >= 2) are replaced by `smoothing`; zero unigram matches give 0.
double bleu(const std::vector<Sequence>& candidates, const std::vector<Sequence>& references,
            double smoothing = kBleuSmoothing);

/// Fraction of candidates identical to their reference.
double exact_match(const std::vector<Sequence>& candidates, const std::vector<Sequence>& references);

enum class EnergyKind { pseudo_ll, raw_logit };

/// pseudo_ll: -sum_i log p(y_i | Y with <mask> at i, X).
/// raw_logit: -sum_i logit_i(y_i) from conditional_logits().
double energy(const MaskedConditionalModel& model, const Sequence& y, const Sequence& x,
              EnergyKind kind = EnergyKind::pseudo_ll);

/// Energy of an intermediate state: the pseudo-LL terms of the filled
/// (non-mask) positions only, divided by their count. 0 when nothing is filled.
double partial_energy(const MaskedConditionalModel& model, const Sequence& y, const Sequence& x,
                      EnergyKind kind = EnergyKind::pseudo_ll);

/// partial_energy of Y^1 .. Y^{T+1}.
std::vector<double> energy_curve(const MaskedConditionalModel& model, const GenerationTrace& trace,
                                 EnergyKind kind = EnergyKind::pseudo_ll);

struct EnergyGapCurve {
  std::string strategy;
  std::vector<double> fractions;
  std::vector<double> mean;
  std::vector<double> stderr_;
};

/// Mean over sentences of (baseline energy - strategy energy) at normalized
/// step fractions k / (points - 1); each curve is read at step round(f * T).
/// `curves` maps strategy name to one energy curve per sentence, all
/// strategies covering the same sentences in the same order.
std::vector<EnergyGapCurve> energy_gap_curves(const std::map<std::string, std::vector<std::vector<double>>>& curves,
                                              const std::string& baseline, std::size_t points = 11);

void write_energy_csv(std::ostream& out, const std::vector<EnergyGapCurve>& curves);

using OrderVector = std::array<double, 10>;

/// Entry j (1-based) is the 1-based position selected at step ceil(j*T/10)
/// divided by L. Requires single-position steps.
OrderVector order_vector(const GenerationTrace& trace);

struct ClusterReport {
  std::vector<OrderVector> centers;
  std::vector<std::size_t> counts;
  std::vector<std::size_t> assignments;
  double inertia = 0.0;
  /// Inertia after each Lloyd iteration of the kept restart.
  std::vector<double> inertia_history;
};

/// Lloyd iterations from k-means++ seeds; the restart with the lowest
/// inertia is kept. Ties in assignment go to the lowest cluster index.
ClusterReport kmeans(const std::vector<OrderVector>& vectors, std::size_t k, Rng& rng,
                     std::size_t restarts = 10, std::size_t max_iterations = 100);

void write_cluster_csv(std::ostream& out, const ClusterReport& report);

}  // namespace seqgen
