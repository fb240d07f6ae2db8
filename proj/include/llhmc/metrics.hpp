// Performance, calibration, uncertainty, MCMC-diagnostic and OOD metrics.

#pragma once

#include "llhmc/core.hpp"

#include <span>
#include <vector>

namespace llhmc::metrics {

struct EvaluationReport {
  double accuracy = 0.0;  // percent
  double macro_f1 = 0.0;  // percent
  double ace = 0.0;
  double raulc = 0.0;  // NaN when undefined (no correct prediction)
  double mean_entropy = 0.0;
};

struct OodReport {
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  double fpr95 = 0.0;
};

/// Shannon entropy in nats with 0 log 0 = 0. Rejects rows that are not
/// distributions (negative entries or sum off by more than 1e-9).
double predictive_entropy(std::span<const double> probs);
double predictive_entropy(const Vector& probs);

/// Two standard errors of the mean, 2 s / sqrt(n) with the n-1 sample std.
double two_sem(std::span<const double> values);

double mean(std::span<const double> values);
/// Sample standard deviation (n-1); zero for fewer than two values.
double sample_std(std::span<const double> values);

/**
 * Adaptive calibration error. For each class the instances are sorted by
 * the predicted probability of that class and cut into `bins` equal-count
 * ranges; the first N % bins ranges receive one extra instance. The
 * result averages |fraction labelled k - mean probability of k| over all
 * (range, class) cells.
 */
double adaptive_calibration_error(const Matrix& probs, std::span<const int> labels,
                                  int bins = 10);

/**
 * Relative area under the lifted curve. The i-th threshold is the i-th
 * smallest uncertainty; A is the accuracy over every instance whose
 * uncertainty does not exceed it and R is the overall accuracy.
 * Throws MetricUndefined when no prediction is correct.
 */
double raulc(std::span<const double> uncertainties, const std::vector<bool>& correct);

/// ESS from precomputed autocorrelations R_1.. (index 0 holds lag 1).
/// Summation stops at the first negative autocorrelation.
double ess_from_autocorrelations(std::size_t n, std::span<const double> autocorr);

/// Biased (divide by N) normalized autocorrelations for lags 1..N-1.
std::vector<double> autocorrelations(std::span<const double> chain);

/// Effective sample size of one scalar chain, clamped to (0, N].
double effective_sample_size(std::span<const double> chain);

/**
 * Potential scale reduction as (E[Var | chain] + Var[E | chain]) /
 * E[Var | chain], using n-1 sample variances for both terms and no
 * split-chain or length correction.
 */
double gelman_rhat(std::span<const std::vector<double>> chains);

/// ROC-AUC, PR-AUC (OOD positive) and FPR at 95% in-distribution recall.
/// Higher scores mean more OOD.
OodReport roc_pr_fpr95(std::span<const double> scores, const std::vector<bool>& is_ood);

double roc_auc(std::span<const double> scores, const std::vector<bool>& is_ood);
double pr_auc(std::span<const double> scores, const std::vector<bool>& is_ood);
double fpr_at_95_recall(std::span<const double> scores, const std::vector<bool>& is_ood);

struct Classification {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

/// Accuracy and unweighted mean per-class F1, both in percent.
Classification accuracy_and_macro_f1(std::span<const int> predicted,
                                     std::span<const int> truth, int num_classes);

/// Row-wise argmax, lowest index on ties.
std::vector<int> argmax_rows(const Matrix& probs);

/// Accuracy, F1, ACE, rAULC (entropy as uncertainty) and mean entropy.
EvaluationReport evaluate(const Matrix& mean_probs, std::span<const int> labels,
                          int bins = 10);

}  // namespace llhmc::metrics
