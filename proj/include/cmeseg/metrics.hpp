#pragma once

// Segmentation overlap and paired nonparametric statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/image.hpp"

namespace cmeseg {

/// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice(const SegMask& a, const SegMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw ExtentMismatch("dice: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width));
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool x = a.labels[i] != 0, y = b.labels[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline std::map<std::string, double> per_patient_means(const std::vector<std::pair<std::string, double>>& per_image) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& [id, v] : per_image) {
    auto& [sum, n] = acc[id];
    sum += v;
    ++n;
  }
  std::map<std::string, double> out;
  for (const auto& [id, sn] : acc) out[id] = sn.first / static_cast<double>(sn.second);
  return out;
}

struct WilcoxonResult {
  double w = 0.0;           // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  std::size_t n_effective = 0;
  double p_two_sided = 1.0;
  bool exact = true;
};

inline constexpr std::size_t kWilcoxonExactLimit = 25;

/// Mid-ranks of |d| (1-based), ties sharing the average rank.
inline std::vector<double> midranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Wilcoxon matched-pairs signed-rank test on d = x - y.
///
/// Zero differences are dropped. Up to kWilcoxonExactLimit non-zero pairs the
/// two-sided p-value is exact: the null distribution of W+ over all 2^n sign
/// assignments is built by a counting recursion on doubled (integer) mid-ranks.
/// Larger samples use the tie-corrected normal approximation with continuity
/// correction.
inline WilcoxonResult wilcoxon_matched_pairs(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw LengthMismatch("wilcoxon: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  if (x.empty()) throw LengthMismatch("wilcoxon: empty samples");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
  WilcoxonResult r;
  r.n_effective = d.size();
  if (d.empty()) return r;

  std::vector<double> mag(d.size());
  std::transform(d.begin(), d.end(), mag.begin(), [](double v) { return std::abs(v); });
  const std::vector<double> ranks = midranks(mag);
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];
  r.w = std::min(r.w_plus, r.w_minus);
  const std::size_t n = d.size();

  if (n <= kWilcoxonExactLimit) {
    std::vector<std::size_t> doubled(n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      doubled[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
      total += doubled[i];
    }
    std::vector<std::uint64_t> count(total + 1, 0);
    count[0] = 1;
    std::size_t reach = 0;
    for (std::size_t rk : doubled) {
      for (std::size_t s = reach + 1; s-- > 0;)
        if (count[s]) count[s + rk] += count[s];
      reach += rk;
    }
    const auto threshold = static_cast<std::size_t>(std::llround(2.0 * r.w));
    std::uint64_t tail = 0;
    for (std::size_t s = 0; s <= threshold; ++s) tail += count[s];
    const double p = 2.0 * static_cast<double>(tail) / std::ldexp(1.0, static_cast<int>(n));
    r.p_two_sided = std::min(1.0, p);
    r.exact = true;
    return r;
  }

  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1.0) / 4.0;
  double tie_term = 0.0;
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
  const double z = std::max(0.0, std::abs(r.w - mean) - 0.5) / std::sqrt(var);
  r.p_two_sided = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  r.exact = false;
  return r;
}

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

/// Sample mean and (n-1) standard deviation; std is 0 for a single value.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

struct ImageScore {
  std::string patient;
  std::string name;
  double dice_auto = 0.0;
  std::optional<double> dice_inter_grader;
};

struct EvalReport {
  std::vector<ImageScore> images;
  std::map<std::string, double> patient_auto;
  MeanStd overall;
  std::optional<std::map<std::string, double>> patient_inter_grader;
  std::optional<MeanStd> inter_grader;
  std::optional<WilcoxonResult> wilcoxon;
};

/// Per-image Dice against grader 1, per-patient means and, when a second
/// grader is supplied, inter-grader Dice plus a Wilcoxon test pairing each
/// patient's automatic mean with its grader-2 mean.
inline EvalReport build_report(const std::vector<SegMask>& auto_masks, const std::vector<SegMask>& grader1,
                               const std::vector<SegMask>* grader2, const std::vector<std::string>& patients,
                               const std::vector<std::string>& names = {}) {
  if (auto_masks.size() != grader1.size() || patients.size() != grader1.size() ||
      (grader2 && grader2->size() != grader1.size()) || (!names.empty() && names.size() != grader1.size()))
    throw LengthMismatch("build_report: collections are not aligned");
  EvalReport rep;
  std::vector<std::pair<std::string, double>> auto_pairs, inter_pairs;
  std::vector<double> auto_vals, inter_vals;
  for (std::size_t i = 0; i < grader1.size(); ++i) {
    ImageScore s;
    s.patient = patients[i];
    s.name = names.empty() ? std::to_string(i) : names[i];
    s.dice_auto = dice(auto_masks[i], grader1[i]);
    auto_pairs.emplace_back(s.patient, s.dice_auto);
    auto_vals.push_back(s.dice_auto);
    if (grader2) {
      s.dice_inter_grader = dice((*grader2)[i], grader1[i]);
      inter_pairs.emplace_back(s.patient, *s.dice_inter_grader);
      inter_vals.push_back(*s.dice_inter_grader);
    }
    rep.images.push_back(std::move(s));
  }
  rep.patient_auto = per_patient_means(auto_pairs);
  rep.overall = mean_std(auto_vals);
  if (grader2 && !grader1.empty()) {
    rep.patient_inter_grader = per_patient_means(inter_pairs);
    rep.inter_grader = mean_std(inter_vals);
    std::vector<double> a, b;
    for (const auto& [id, v] : rep.patient_auto) {
      a.push_back(v);
      b.push_back(rep.patient_inter_grader->at(id));
    }
    rep.wilcoxon = wilcoxon_matched_pairs(a, b);
  }
  return rep;
}

/// Key-value blocks followed by a fixed-width summary table.
inline void write_report(std::ostream& os, const EvalReport& r) {
  os.precision(17);
  os << "[summary]\n";
  os << "images=" << r.images.size() << "\n";
  os << "dice_mean=" << r.overall.mean << "\n";
  os << "dice_std=" << r.overall.std << "\n";
  if (r.inter_grader) {
    os << "inter_grader_dice_mean=" << r.inter_grader->mean << "\n";
    os << "inter_grader_dice_std=" << r.inter_grader->std << "\n";
  }
  if (r.wilcoxon) {
    os << "[wilcoxon]\n";
    os << "w=" << r.wilcoxon->w << "\n";
    os << "w_plus=" << r.wilcoxon->w_plus << "\n";
    os << "w_minus=" << r.wilcoxon->w_minus << "\n";
    os << "n_effective=" << r.wilcoxon->n_effective << "\n";
    os << "exact=" << (r.wilcoxon->exact ? "true" : "false") << "\n";
    os << "p_two_sided=" << r.wilcoxon->p_two_sided << "\n";
  }
  os << "[patients]\n";
  for (const auto& [id, v] : r.patient_auto) {
    os << "patient=" << id << " dice_mean=" << v;
    if (r.patient_inter_grader) os << " inter_grader_dice_mean=" << r.patient_inter_grader->at(id);
    os << "\n";
  }
  os << "[images]\n";
  for (const auto& s : r.images) {
    os << "patient=" << s.patient << " image=" << s.name << " dice=" << s.dice_auto;
    if (s.dice_inter_grader) os << " inter_grader_dice=" << *s.dice_inter_grader;
    os << "\n";
  }
  os << "\n";
  std::ostringstream t;
  t.setf(std::ios::fixed);
  t.precision(4);
  t << "patient        auto Dice";
  if (r.patient_inter_grader) t << "   inter-grader";
  t << "\n";
  for (const auto& [id, v] : r.patient_auto) {
    t << id << std::string(id.size() < 15 ? 15 - id.size() : 1, ' ') << v;
    if (r.patient_inter_grader) t << "        " << r.patient_inter_grader->at(id);
    t << "\n";
  }
  t << "overall        " << r.overall.mean << " +/- " << r.overall.std << "\n";
  if (r.wilcoxon) t << "wilcoxon       W=" << r.wilcoxon->w << " p=" << r.wilcoxon->p_two_sided << "\n";
  os << "# " << std::string(20, '-') << "\n";
  std::istringstream lines(t.str());
  for (std::string line; std::getline(lines, line);) os << "# " << line << "\n";
}

}  // namespace cmeseg
