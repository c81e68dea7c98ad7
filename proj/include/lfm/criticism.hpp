#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lfm/errors.hpp"
#include "lfm/models.hpp"
#include "lfm/rng.hpp"

// Kernel two-sample criticism between variational and oracle posterior
// samples: unbiased MMD^2 with a Gaussian kernel, permutation thresholds, and
// the negative log predictive density.

namespace lfm::criticism {

// rows are sample paths over the comparison vector (observable dimensions on
// the mesh)
struct SampleMatrix {
  std::vector<std::vector<double>> rows;

  int count() const { return static_cast<int>(rows.size()); }
  int width() const { return rows.empty() ? 0 : static_cast<int>(rows[0].size()); }
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// pooled Gram matrix of squared distances; reused across permutations
inline std::vector<double> pooled_sq_dists(const SampleMatrix& a, const SampleMatrix& b) {
  const int n = a.count() + b.count();
  std::vector<const std::vector<double>*> all;
  all.reserve(static_cast<std::size_t>(n));
  for (const auto& r : a.rows) all.push_back(&r);
  for (const auto& r : b.rows) all.push_back(&r);
  std::vector<double> d2(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double v = sq_dist(*all[static_cast<std::size_t>(i)], *all[static_cast<std::size_t>(j)]);
      d2[static_cast<std::size_t>(i) * n + j] = v;
      d2[static_cast<std::size_t>(j) * n + i] = v;
    }
  return d2;
}

// unbiased U-statistic from a kernel Gram over pooled indices
inline double mmd2_from_gram(const std::vector<double>& gram, const std::vector<int>& label,
                             int n_total, int na, int nb) {
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (int i = 0; i < n_total; ++i)
    for (int j = 0; j < n_total; ++j) {
      if (i == j) continue;
      double k = gram[static_cast<std::size_t>(i) * n_total + j];
      if (label[static_cast<std::size_t>(i)] == 0 && label[static_cast<std::size_t>(j)] == 0)
        kaa += k;
      else if (label[static_cast<std::size_t>(i)] == 1 && label[static_cast<std::size_t>(j)] == 1)
        kbb += k;
      else if (label[static_cast<std::size_t>(i)] == 0)
        kab += k;
    }
  return kaa / (double(na) * double(na - 1)) + kbb / (double(nb) * double(nb - 1)) -
         2.0 * kab / (double(na) * double(nb));
}

}  // namespace detail

inline void check_pair(const SampleMatrix& a, const SampleMatrix& b) {
  if (a.count() < 2 || b.count() < 2)
    throw DataError("mmd2 requires at least 2 samples on each side");
  if (a.width() != b.width()) throw DataError("mmd2: sample widths differ");
  for (const auto& r : a.rows)
    if (static_cast<int>(r.size()) != a.width()) throw DataError("mmd2: ragged sample matrix");
  for (const auto& r : b.rows)
    if (static_cast<int>(r.size()) != b.width()) throw DataError("mmd2: ragged sample matrix");
}

// median pairwise distance of the pooled sample
inline double median_bandwidth(const SampleMatrix& a, const SampleMatrix& b) {
  check_pair(a, b);
  auto d2 = detail::pooled_sq_dists(a, b);
  const int n = a.count() + b.count();
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      dists.push_back(std::sqrt(d2[static_cast<std::size_t>(i) * n + j]));
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  double med = dists[dists.size() / 2];
  return med > 0.0 ? med : 1.0;
}

// unbiased MMD^2 with Gaussian kernel exp(-|a-b|^2 / (2 gamma^2))
inline double mmd2_unbiased(const SampleMatrix& a, const SampleMatrix& b, double bandwidth) {
  check_pair(a, b);
  if (!(bandwidth > 0.0)) throw ConfigError("mmd2: bandwidth must be positive");
  const int na = a.count(), nb = b.count(), n = na + nb;
  auto d2 = detail::pooled_sq_dists(a, b);
  std::vector<double> gram(d2.size());
  double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  for (std::size_t i = 0; i < d2.size(); ++i) gram[i] = std::exp(-d2[i] * inv);
  std::vector<int> label(static_cast<std::size_t>(n), 0);
  for (int i = na; i < n; ++i) label[static_cast<std::size_t>(i)] = 1;
  return detail::mmd2_from_gram(gram, label, n, na, nb);
}

// (1 - alpha) empirical quantile of the label-permuted statistic
inline double permutation_threshold(const SampleMatrix& a, const SampleMatrix& b,
                                    double bandwidth, int n_perm, double alpha, Rng rng) {
  check_pair(a, b);
  const int na = a.count(), nb = b.count(), n = na + nb;
  auto d2 = detail::pooled_sq_dists(a, b);
  std::vector<double> gram(d2.size());
  double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  for (std::size_t i = 0; i < d2.size(); ++i) gram[i] = std::exp(-d2[i] * inv);

  std::vector<int> label(static_cast<std::size_t>(n));
  std::vector<double> stats(static_cast<std::size_t>(n_perm));
  for (int p = 0; p < n_perm; ++p) {
    for (int i = 0; i < n; ++i) label[static_cast<std::size_t>(i)] = i < na ? 0 : 1;
    // Fisher-Yates with the dedicated stream
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
      std::swap(label[static_cast<std::size_t>(i)], label[static_cast<std::size_t>(j)]);
    }
    stats[static_cast<std::size_t>(p)] = detail::mmd2_from_gram(gram, label, n, na, nb);
  }
  std::sort(stats.begin(), stats.end());
  int k = static_cast<int>(std::ceil((1.0 - alpha) * n_perm));
  k = std::min(std::max(k, 1), n_perm);
  return stats[static_cast<std::size_t>(k - 1)];
}

struct TwoSampleVerdict {
  double mmd2 = 0.0;
  double threshold = 0.0;
  bool reject = false;
  double bandwidth = 0.0;
};

inline TwoSampleVerdict two_sample_test(const SampleMatrix& a, const SampleMatrix& b, int n_perm,
                                        double alpha, Rng rng, double bandwidth = 0.0) {
  TwoSampleVerdict v;
  v.bandwidth = bandwidth > 0.0 ? bandwidth : median_bandwidth(a, b);
  v.mmd2 = mmd2_unbiased(a, b, v.bandwidth);
  v.threshold = permutation_threshold(a, b, v.bandwidth, n_perm, alpha, rng);
  v.reject = v.mmd2 > v.threshold;
  return v;
}

// Negative log predictive density under the Monte Carlo mixture predictive:
// -(1/N) sum_j log[(1/S) sum_s p(y_j | f_s(tau_j))]. Returns +inf when some
// observation receives zero predictive mass.
//   predictive: per sample s, per test point j, the emission value f(tau_j)
struct NlpdPoint {
  double y = 0.0;
  std::vector<double> f_values;  // one emission value per predictive sample
};

inline double nlpd(const std::vector<NlpdPoint>& points, const models::LikelihoodSpec& lik) {
  if (points.empty()) throw DataError("nlpd: no test points");
  double total = 0.0;
  for (const auto& pt : points) {
    const std::size_t s = pt.f_values.size();
    if (s == 0) throw DataError("nlpd: no predictive samples");
    // log-mean-exp over per-sample log densities
    std::vector<double> lls(s);
    for (std::size_t i = 0; i < s; ++i)
      lls[i] = models::log_likelihood(lik, {pt.y}, {pt.f_values[i]}, {1});
    double mx = *std::max_element(lls.begin(), lls.end());
    if (!std::isfinite(mx)) return std::numeric_limits<double>::infinity();
    double acc = 0.0;
    for (double ll : lls) acc += std::exp(ll - mx);
    total += -(mx + std::log(acc / double(s)));
  }
  return total / double(points.size());
}

}  // namespace lfm::criticism
