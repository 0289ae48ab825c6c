#pragma once

// Straight-line reference implementations used to cross-check the library.
// Plain loops over std::vector<double>; no autograd and no shared helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "apattack/autograd.hpp"
#include "apattack/rng.hpp"

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double l2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / (norm(a) * norm(b));
}

// -log softmax(logits)[target]
inline double neg_log_softmax(const std::vector<double>& logits, std::size_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l);
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[target] - mx - std::log(z));
}

// Symmetric CLIP loss over diagonal pairs.
inline double clip_loss(const Rows& img, const Rows& txt, double tau) {
  const std::size_t n = img.size();
  double i2t = 0.0, t2i = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<double> row(n), col(n);
    for (std::size_t b = 0; b < n; ++b) {
      row[b] = cosine(img[a], txt[b]) / tau;
      col[b] = cosine(txt[a], img[b]) / tau;
    }
    i2t += neg_log_softmax(row, a);
    t2i += neg_log_softmax(col, a);
  }
  return i2t / n + t2i / n;
}

// Supervised-contrastive inversion loss: per anchor, the mean over same-pid
// positives of -log softmax, averaged over anchors, both directions summed.
inline double inversion_loss(const Rows& img, const Rows& txt, const std::vector<int>& pids, double tau,
                             bool include_self = true) {
  const std::size_t n = img.size();
  double i2t = 0.0, t2i = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<double> row(n), col(n);
    for (std::size_t b = 0; b < n; ++b) {
      row[b] = cosine(img[a], txt[b]) / tau;
      col[b] = cosine(txt[a], img[b]) / tau;
    }
    double sr = 0.0, sc = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < n; ++b) {
      if (pids[b] != pids[a] || (!include_self && b == a)) continue;
      sr += neg_log_softmax(row, b);
      sc += neg_log_softmax(col, b);
      ++count;
    }
    i2t += sr / count;
    t2i += sc / count;
  }
  return i2t / n + t2i / n;
}

// Farthest different-pid row by L2, lowest index on ties.
inline std::vector<std::size_t> farthest_negative(const Rows& x, const std::vector<int>& pids) {
  std::vector<std::size_t> out(x.size());
  for (std::size_t a = 0; a < x.size(); ++a) {
    double best = -1.0;
    for (std::size_t b = 0; b < x.size(); ++b) {
      if (pids[b] == pids[a]) continue;
      const double d = l2(x[a], x[b]);
      if (d > best) {
        best = d;
        out[a] = b;
      }
    }
  }
  return out;
}

// Least cosine-similar different-pid row, lowest index on ties.
inline std::vector<std::size_t> least_similar_negative(const Rows& x, const std::vector<int>& pids) {
  std::vector<std::size_t> out(x.size());
  for (std::size_t a = 0; a < x.size(); ++a) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < x.size(); ++b) {
      if (pids[b] == pids[a]) continue;
      const double s = cosine(x[a], x[b]);
      if (s < best) {
        best = s;
        out[a] = b;
      }
    }
  }
  return out;
}

// mean_n max(0, |adv_n - clean_neg| - |adv_n - clean_n| + alpha)
inline double triplet(const Rows& clean, const Rows& adv, const std::vector<int>& pids, double alpha) {
  const auto neg = farthest_negative(clean, pids);
  double s = 0.0;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    s += std::max(0.0, l2(adv[n], clean[neg[n]]) - l2(adv[n], clean[n]) + alpha);
  }
  return s / clean.size();
}

// clean[n][i] is slot i of sample n.
inline double semantic_loss(const std::vector<Rows>& clean, const std::vector<Rows>& adv,
                            const std::vector<int>& pids, double alpha) {
  double total = 0.0;
  for (std::size_t i = 0; i < clean.front().size(); ++i) {
    Rows c, a;
    for (std::size_t n = 0; n < clean.size(); ++n) {
      c.push_back(clean[n][i]);
      a.push_back(adv[n][i]);
    }
    total += triplet(c, a, pids, alpha);
  }
  return total;
}

// Precision at each relevant rank, averaged.
inline double average_precision(const std::vector<bool>& rel) {
  double hits = 0.0, s = 0.0;
  for (std::size_t k = 0; k < rel.size(); ++k) {
    if (rel[k]) {
      hits += 1.0;
      s += hits / static_cast<double>(k + 1);
    }
  }
  return s / hits;
}

inline Rows random_rows(apattack::Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  Rows r(n, std::vector<double>(d));
  for (auto& row : r)
    for (auto& v : row) v = scale * rng.normal();
  return r;
}

inline apattack::ag::Tensor to_tensor(const Rows& rows) {
  apattack::ag::Tensor t({rows.size(), rows.front().size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) t.data[i * rows[i].size() + j] = rows[i][j];
  return t;
}

// Central differences of f at every entry of x, which is restored afterwards.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor)
inline double relative_error(const std::vector<double>& a, std::span<const double> b, double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

}  // namespace oracle
