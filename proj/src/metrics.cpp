#include "llhmc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace llhmc::metrics {

namespace {

std::vector<std::size_t> stable_order(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return idx;
}

void check_binary(std::span<const double> scores, const std::vector<bool>& is_ood) {
  if (scores.size() != is_ood.size()) throw std::invalid_argument("scores and flags differ in length");
  auto n_ood = std::count(is_ood.begin(), is_ood.end(), true);
  if (n_ood == 0 || n_ood == static_cast<std::ptrdiff_t>(is_ood.size())) {
    throw MetricUndefined("OOD metrics need both in-distribution and OOD instances");
  }
}

}  // namespace

double predictive_entropy(std::span<const double> probs) {
  double total = 0.0;
  double h = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("probability must be non-negative");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("probabilities must sum to 1");
  return std::max(h, 0.0);
}

double predictive_entropy(const Vector& probs) {
  return predictive_entropy(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size())));
}

double mean(std::span<const double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double sample_std(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double two_sem(std::span<const double> values) {
  if (values.size() < 2) throw std::invalid_argument("two_sem needs at least two values");
  return 2.0 * sample_std(values) / std::sqrt(static_cast<double>(values.size()));
}

double adaptive_calibration_error(const Matrix& probs, std::span<const int> labels, int bins) {
  const auto n = static_cast<std::size_t>(probs.rows());
  const auto k_classes = probs.cols();
  if (labels.size() != n) throw std::invalid_argument("probability rows and labels differ");
  if (bins < 1) throw std::invalid_argument("bins must be positive");
  if (n < static_cast<std::size_t>(bins)) {
    throw MetricUndefined("adaptive calibration error needs at least as many instances as bins");
  }
  const std::size_t r = static_cast<std::size_t>(bins);
  const std::size_t base = n / r;
  const std::size_t extra = n % r;

  double total = 0.0;
  std::vector<double> column(n);
  for (Index k = 0; k < k_classes; ++k) {
    for (std::size_t i = 0; i < n; ++i) column[i] = probs(static_cast<Index>(i), k);
    auto order = stable_order(column);
    std::size_t pos = 0;
    for (std::size_t b = 0; b < r; ++b) {
      std::size_t size = base + (b < extra ? 1 : 0);
      double conf = 0.0;
      double hits = 0.0;
      for (std::size_t j = pos; j < pos + size; ++j) {
        conf += column[order[j]];
        if (labels[order[j]] == k) hits += 1.0;
      }
      pos += size;
      total += std::abs(hits / static_cast<double>(size) - conf / static_cast<double>(size));
    }
  }
  return total / static_cast<double>(r * static_cast<std::size_t>(k_classes));
}

double raulc(std::span<const double> uncertainties, const std::vector<bool>& correct) {
  const std::size_t n = uncertainties.size();
  if (correct.size() != n) throw std::invalid_argument("uncertainties and flags differ");
  if (n < 2) throw std::invalid_argument("rAULC needs at least two instances");
  const double n_correct = static_cast<double>(std::count(correct.begin(), correct.end(), true));
  if (n_correct == 0.0) throw MetricUndefined("rAULC undefined when no prediction is correct");
  const double overall = n_correct / static_cast<double>(n);
  const double step = 1.0 / static_cast<double>(n);

  auto order = stable_order(uncertainties);
  double sum = 0.0;
  double hits = 0.0;
  std::size_t i = 0;
  while (i < n) {
    // Every instance tied at this uncertainty lies below the threshold.
    std::size_t j = i;
    while (j < n && uncertainties[order[j]] == uncertainties[order[i]]) {
      if (correct[order[j]]) hits += 1.0;
      ++j;
    }
    double lifted = (hits / static_cast<double>(j)) / overall;
    sum += static_cast<double>(j - i) * step * lifted;
    i = j;
  }
  return -1.0 + sum;
}

double ess_from_autocorrelations(std::size_t n, std::span<const double> autocorr) {
  if (n == 0) throw std::invalid_argument("chain length must be positive");
  double sum = 0.0;
  for (std::size_t k = 1; k <= autocorr.size() && k < n; ++k) {
    double rk = autocorr[k - 1];
    if (rk < 0.0) break;
    sum += (1.0 - static_cast<double>(k) / static_cast<double>(n)) * rk;
  }
  double ess = static_cast<double>(n) / (1.0 + 2.0 * sum);
  return std::min(ess, static_cast<double>(n));
}

std::vector<double> autocorrelations(std::span<const double> chain) {
  const std::size_t n = chain.size();
  double m = mean(chain);
  double c0 = 0.0;
  for (double x : chain) c0 += (x - m) * (x - m);
  c0 /= static_cast<double>(n);
  if (!(c0 > 0.0)) throw MetricUndefined("autocorrelation undefined for a zero-variance chain");
  std::vector<double> out;
  out.reserve(n > 0 ? n - 1 : 0);
  for (std::size_t k = 1; k < n; ++k) {
    double ck = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) ck += (chain[t] - m) * (chain[t + k] - m);
    out.push_back(ck / static_cast<double>(n) / c0);
  }
  return out;
}

double effective_sample_size(std::span<const double> chain) {
  const std::size_t n = chain.size();
  if (n < 4) throw std::invalid_argument("ESS needs at least four draws");
  double m = mean(chain);
  double c0 = 0.0;
  for (double x : chain) c0 += (x - m) * (x - m);
  c0 /= static_cast<double>(n);
  if (!(c0 > 0.0)) throw MetricUndefined("ESS undefined for a zero-variance chain");
  // Autocorrelations are computed lazily up to the first negative lag.
  std::vector<double> rho;
  for (std::size_t k = 1; k < n; ++k) {
    double ck = 0.0;
    for (std::size_t t = 0; t + k < n; ++t) ck += (chain[t] - m) * (chain[t + k] - m);
    double rk = ck / static_cast<double>(n) / c0;
    rho.push_back(rk);
    if (rk < 0.0) break;
  }
  return ess_from_autocorrelations(n, rho);
}

double gelman_rhat(std::span<const std::vector<double>> chains) {
  if (chains.size() < 2) throw std::invalid_argument("R-hat needs at least two chains");
  const std::size_t len = chains.front().size();
  if (len < 2) throw std::invalid_argument("R-hat needs at least two draws per chain");
  std::vector<double> means;
  std::vector<double> vars;
  for (const auto& c : chains) {
    if (c.size() != len) throw std::invalid_argument("R-hat chains must have equal length");
    means.push_back(mean(c));
    double s = sample_std(c);
    vars.push_back(s * s);
  }
  double within = mean(vars);
  if (!(within > 0.0)) throw MetricUndefined("R-hat undefined for zero within-chain variance");
  double between_sd = sample_std(means);
  return (within + between_sd * between_sd) / within;
}

double roc_auc(std::span<const double> scores, const std::vector<bool>& is_ood) {
  check_binary(scores, is_ood);
  const std::size_t n = scores.size();
  auto order = stable_order(scores);
  // Mid-ranks give tied pairs half credit.
  double rank_sum_ood = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (is_ood[order[t]]) rank_sum_ood += mid_rank;
    }
    i = j;
  }
  const double n_pos = static_cast<double>(std::count(is_ood.begin(), is_ood.end(), true));
  const double n_neg = static_cast<double>(n) - n_pos;
  return (rank_sum_ood - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double pr_auc(std::span<const double> scores, const std::vector<bool>& is_ood) {
  check_binary(scores, is_ood);
  const std::size_t n = scores.size();
  auto order = stable_order(scores);
  std::reverse(order.begin(), order.end());
  const double n_pos = static_cast<double>(std::count(is_ood.begin(), is_ood.end(), true));
  double tp = 0.0;
  double fp = 0.0;
  double prev_recall = 0.0;
  double area = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (is_ood[order[j]] ? tp : fp) += 1.0;
      ++j;
    }
    double recall = tp / n_pos;
    double precision = tp / (tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

double fpr_at_95_recall(std::span<const double> scores, const std::vector<bool>& is_ood) {
  check_binary(scores, is_ood);
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    (is_ood[i] ? ood_scores : id_scores).push_back(scores[i]);
  }
  std::sort(id_scores.begin(), id_scores.end());
  // Smallest count k with k / n >= 0.95, in exact integer arithmetic.
  const std::size_t n_id = id_scores.size();
  const std::size_t k = (19 * n_id + 19) / 20;
  const double threshold = id_scores[k - 1];
  auto accepted = std::count_if(ood_scores.begin(), ood_scores.end(),
                                [&](double s) { return s <= threshold; });
  return static_cast<double>(accepted) / static_cast<double>(ood_scores.size());
}

OodReport roc_pr_fpr95(std::span<const double> scores, const std::vector<bool>& is_ood) {
  return {roc_auc(scores, is_ood), pr_auc(scores, is_ood), fpr_at_95_recall(scores, is_ood)};
}

Classification accuracy_and_macro_f1(std::span<const int> predicted,
                                     std::span<const int> truth, int num_classes) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("label vectors differ in length");
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  const auto k = static_cast<std::size_t>(num_classes);
  std::vector<double> tp(k, 0.0), fp(k, 0.0), fn(k, 0.0);
  double correct = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto p = static_cast<std::size_t>(predicted[i]);
    auto t = static_cast<std::size_t>(truth[i]);
    if (p >= k || t >= k) throw std::invalid_argument("label outside class range");
    if (p == t) {
      correct += 1.0;
      tp[t] += 1.0;
    } else {
      fp[p] += 1.0;
      fn[t] += 1.0;
    }
  }
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double precision = tp[c] + fp[c] > 0.0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    double recall = tp[c] + fn[c] > 0.0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
    if (precision + recall > 0.0) f1_sum += 2.0 * precision * recall / (precision + recall);
  }
  Classification out;
  out.accuracy = truth.empty() ? 0.0 : 100.0 * correct / static_cast<double>(truth.size());
  out.macro_f1 = 100.0 * f1_sum / static_cast<double>(k);
  return out;
}

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Index i = 0; i < probs.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < probs.cols(); ++k) {
      if (probs(i, k) > probs(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

EvaluationReport evaluate(const Matrix& mean_probs, std::span<const int> labels, int bins) {
  const auto n = static_cast<std::size_t>(mean_probs.rows());
  if (labels.size() != n) throw std::invalid_argument("probability rows and labels differ");
  EvaluationReport r;
  auto predicted = argmax_rows(mean_probs);
  auto cls = accuracy_and_macro_f1(predicted, labels, static_cast<int>(mean_probs.cols()));
  r.accuracy = cls.accuracy;
  r.macro_f1 = cls.macro_f1;

  std::vector<double> entropy(n);
  std::vector<bool> correct(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vector row = mean_probs.row(static_cast<Index>(i)).transpose();
    entropy[i] = predictive_entropy(row);
    correct[i] = predicted[i] == labels[i];
  }
  r.mean_entropy = mean(entropy);

  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    r.ace = adaptive_calibration_error(mean_probs, labels, bins);
  } catch (const MetricUndefined&) {
    r.ace = nan;
  }
  try {
    r.raulc = raulc(entropy, correct);
  } catch (const std::exception&) {
    r.raulc = nan;
  }
  return r;
}

}  // namespace llhmc::metrics
