#pragma once

// Shared fixtures and brute-force reference implementations for the tests.

#include "agreid/agreid.hpp"

#include <functional>
#include <random>

namespace testing_support {

using namespace agreid;
using ad::Index;
using ad::Var;

inline AttributeSchema schema_with(int T) {
  std::vector<AttributeCategory> cats;
  for (int t = 0; t < T; ++t) {
    AttributeCategory c{"cat" + std::to_string(t), {}};
    for (int s = 0; s < 2 + t % 3; ++s) c.subcategories.push_back("s" + std::to_string(s));
    cats.push_back(c);
  }
  return AttributeSchema(cats);
}

/// 16x8 images, patch 4, two layers of width 8.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_height = 16;
  c.image_width = 8;
  c.patch_size = 4;
  c.C_v = 8;
  c.C = 8;
  c.L = 2;
  c.heads = 2;
  c.T = 3;
  c.T_hat = 4;
  c.K = 2;
  c.C_t = 8;
  c.L_t = 1;
  c.context_len = 24;
  return c;
}

inline Image random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

inline Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// A labelled batch for a model: `ids` identities with `per_id` images each.
struct ToyBatch {
  std::vector<Image> images;
  std::vector<int> views;
  std::vector<int> labels;
  std::vector<std::vector<int>> attributes;

  std::vector<const Image*> pointers() const {
    std::vector<const Image*> p;
    for (const auto& i : images) p.push_back(&i);
    return p;
  }
};

inline ToyBatch toy_batch(const ModelConfig& cfg, const AttributeSchema& schema, int ids, int per_id,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ToyBatch b;
  for (int i = 0; i < ids; ++i) {
    std::vector<int> attrs;
    for (int t = 0; t < schema.size(); ++t) attrs.push_back(static_cast<int>(rng() % static_cast<unsigned>(schema.arity(t))));
    for (int k = 0; k < per_id; ++k) {
      b.images.push_back(random_image(cfg.image_height, cfg.image_width, rng));
      b.views.push_back(k % 2);
      b.labels.push_back(i);
      b.attributes.push_back(attrs);
    }
  }
  return b;
}

inline Var model_loss(const Model& m, const ToyBatch& b) {
  const auto f = forward(m, b.pointers(), b.views, &b.attributes);
  return batch_loss(m, f, b.labels, &b.attributes).first;
}

/// Central-difference derivative of `f` with respect to one entry of `x`.
inline double central_difference(Matrix& x, Index i, Index j, double h, const std::function<double()>& f) {
  const double orig = x(i, j);
  x(i, j) = orig + h;
  const double up = f();
  x(i, j) = orig - h;
  const double down = f();
  x(i, j) = orig;
  return (up - down) / (2 * h);
}

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

// ---------------------------------------------------------------------------
// Ranking oracle: rank of every gallery item counted pair by pair.

struct OracleResult {
  double mAP = 0;
  std::vector<double> cmc;
  int evaluated = 0;
  int skipped = 0;
};

inline OracleResult ranking_oracle(const Matrix& d, const std::vector<int>& qid, const std::vector<int>& gid,
                                   const std::vector<int>& qcam, const std::vector<int>& gcam, bool exclude,
                                   int max_rank) {
  OracleResult r;
  r.cmc.assign(static_cast<size_t>(max_rank), 0.0);
  double ap_total = 0;
  for (Index i = 0; i < d.rows(); ++i) {
    auto valid = [&](Index j) {
      return !(exclude && gid[static_cast<size_t>(j)] == qid[static_cast<size_t>(i)] &&
               gcam[static_cast<size_t>(j)] == qcam[static_cast<size_t>(i)]);
    };
    // 1-based rank of gallery item j among the valid items
    auto rank_of = [&](Index j) {
      int rank = 1;
      for (Index k = 0; k < d.cols(); ++k)
        if (k != j && valid(k) && (d(i, k) < d(i, j) || (d(i, k) == d(i, j) && k < j))) ++rank;
      return rank;
    };
    std::vector<int> match_ranks;
    for (Index j = 0; j < d.cols(); ++j)
      if (valid(j) && gid[static_cast<size_t>(j)] == qid[static_cast<size_t>(i)]) match_ranks.push_back(rank_of(j));
    if (match_ranks.empty()) {
      ++r.skipped;
      continue;
    }
    ++r.evaluated;
    double ap = 0;
    for (int rank : match_ranks) {
      int hits_up_to = 0;
      for (int other : match_ranks)
        if (other <= rank) ++hits_up_to;
      ap += static_cast<double>(hits_up_to) / rank;
    }
    ap_total += ap / static_cast<double>(match_ranks.size());
    const int first = *std::min_element(match_ranks.begin(), match_ranks.end());
    for (int k = 1; k <= max_rank; ++k)
      if (first <= k) r.cmc[static_cast<size_t>(k - 1)] += 1;
  }
  if (r.evaluated) {
    r.mAP = ap_total / r.evaluated;
    for (auto& c : r.cmc) c /= r.evaluated;
  }
  return r;
}

/// Random ranking problem with coarse distances so ties are common.
inline eval::RankingProblem random_problem(std::mt19937_64& rng) {
  eval::RankingProblem p;
  const Index nq = 1 + static_cast<Index>(rng() % 10);
  const Index ng = 1 + static_cast<Index>(rng() % 50);
  const int n_ids = 1 + static_cast<int>(rng() % 6);
  p.distances.resize(nq, ng);
  for (Index i = 0; i < p.distances.size(); ++i) p.distances.data()[i] = static_cast<double>(rng() % 6) / 5.0;
  for (Index i = 0; i < nq; ++i) {
    p.query_ids.push_back(static_cast<int>(rng() % static_cast<unsigned>(n_ids)));
    p.query_cameras.push_back(static_cast<int>(rng() % 2));
  }
  for (Index j = 0; j < ng; ++j) {
    p.gallery_ids.push_back(static_cast<int>(rng() % static_cast<unsigned>(n_ids)));
    p.gallery_cameras.push_back(static_cast<int>(rng() % 2));
  }
  p.exclude_same_camera = rng() % 2 == 0;
  return p;
}

// ---------------------------------------------------------------------------
// Chance floor: metrics of the same problem with distances drawn at random.

inline eval::MetricsReport shuffled_metrics(eval::RankingProblem p, std::uint64_t seed, int max_rank) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index i = 0; i < p.distances.size(); ++i) p.distances.data()[i] = u(rng);
  return eval::evaluate_ranking(p, max_rank);
}

}  // namespace testing_support
