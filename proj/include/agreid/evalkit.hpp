#pragma once

// Retrieval evaluation: distances, mAP, CMC and attribute scoring.

#include "agreid/core.hpp"

#include <numeric>

namespace agreid::eval {

using ad::Index;

struct DistanceResult {
  Matrix distances;               // [Nq, Ng]
  std::vector<Index> zero_query;  // rows with a zero vector under cosine
  std::vector<Index> zero_gallery;
};

/// cosine: 1 - <q^, g^> on L2-normalized rows; euclidean: L2 distance.
/// Under cosine a zero vector gets the maximum distance 2 everywhere.
inline DistanceResult pairwise_distance(const Matrix& q, const Matrix& g, Metric metric) {
  if (q.cols() != g.cols()) throw ShapeMismatch("query and gallery widths differ");
  if (!q.allFinite() || !g.allFinite()) throw NumericError("non-finite feature in pairwise_distance");
  DistanceResult r;
  if (metric == Metric::euclidean) {
    r.distances.resize(q.rows(), g.rows());
    for (Index i = 0; i < q.rows(); ++i)
      for (Index j = 0; j < g.rows(); ++j) r.distances(i, j) = (q.row(i) - g.row(j)).norm();
    return r;
  }
  auto normalize = [](const Matrix& m, std::vector<Index>& zeros) {
    Matrix out = m;
    for (Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (n > 0) out.row(i) /= n;
      else zeros.push_back(i);
    }
    return out;
  };
  const Matrix qn = normalize(q, r.zero_query);
  const Matrix gn = normalize(g, r.zero_gallery);
  r.distances = (Matrix::Ones(q.rows(), g.rows()) - qn * gn.transpose()).eval();
  for (Index i : r.zero_query) r.distances.row(i).setConstant(2.0);
  for (Index j : r.zero_gallery) r.distances.col(j).setConstant(2.0);
  return r;
}

struct RankingProblem {
  Matrix distances;  // [Nq, Ng]
  std::vector<int> query_ids, gallery_ids;
  std::vector<int> query_cameras, gallery_cameras;
  std::vector<int> query_views, gallery_views;
  /// Drop gallery entries sharing both identity and camera with the query.
  bool exclude_same_camera = false;
};

inline RankingProblem make_problem(const Matrix& query, const Matrix& gallery, const std::vector<PersonSample>& qs,
                                   const std::vector<PersonSample>& gs, Metric metric, bool exclude = false) {
  RankingProblem p;
  p.distances = pairwise_distance(query, gallery, metric).distances;
  for (const auto& s : qs) {
    p.query_ids.push_back(s.identity);
    p.query_cameras.push_back(s.camera_id);
    p.query_views.push_back(s.view_id);
  }
  for (const auto& s : gs) {
    p.gallery_ids.push_back(s.identity);
    p.gallery_cameras.push_back(s.camera_id);
    p.gallery_views.push_back(s.view_id);
  }
  p.exclude_same_camera = exclude;
  return p;
}

inline void check(const RankingProblem& p) {
  const auto nq = static_cast<size_t>(p.distances.rows());
  const auto ng = static_cast<size_t>(p.distances.cols());
  if (p.query_ids.size() != nq || p.gallery_ids.size() != ng) throw ShapeMismatch("identity lists do not match distances");
  if (p.exclude_same_camera && (p.query_cameras.size() != nq || p.gallery_cameras.size() != ng))
    throw ShapeMismatch("camera lists required by the exclusion rule");
}

/// Match flags of the ranked, filtered gallery for query i: ascending distance,
/// ties by gallery index.
inline std::vector<bool> ranked_matches(const RankingProblem& p, Index i, std::vector<Index>* order_out = nullptr) {
  const Index ng = p.distances.cols();
  std::vector<Index> order(static_cast<size_t>(ng));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return p.distances(i, a) < p.distances(i, b); });
  std::vector<bool> matches;
  std::vector<Index> kept;
  const int qid = p.query_ids[static_cast<size_t>(i)];
  for (Index j : order) {
    const int gid = p.gallery_ids[static_cast<size_t>(j)];
    if (p.exclude_same_camera && gid == qid &&
        p.gallery_cameras[static_cast<size_t>(j)] == p.query_cameras[static_cast<size_t>(i)])
      continue;
    matches.push_back(gid == qid);
    kept.push_back(j);
  }
  if (order_out) *order_out = std::move(kept);
  return matches;
}

struct MetricsReport {
  double mAP = 0;
  std::vector<double> cmc;
  int n_queries_evaluated = 0;
  int n_queries_skipped = 0;
  std::string protocol;
  std::vector<double> attribute_accuracy;
};

inline double average_precision(const std::vector<bool>& matches) {
  double sum = 0;
  int hits = 0;
  for (size_t k = 0; k < matches.size(); ++k)
    if (matches[k]) sum += static_cast<double>(++hits) / static_cast<double>(k + 1);
  return hits ? sum / hits : 0.0;
}

/// mAP and CMC in one pass. Queries without any valid match are skipped and
/// counted.
inline MetricsReport evaluate_ranking(const RankingProblem& p, int max_rank) {
  check(p);
  MetricsReport r;
  r.cmc.assign(static_cast<size_t>(std::max(max_rank, 0)), 0.0);
  double ap_sum = 0;
  for (Index i = 0; i < p.distances.rows(); ++i) {
    const auto matches = ranked_matches(p, i);
    const auto first = std::find(matches.begin(), matches.end(), true);
    if (first == matches.end()) {
      ++r.n_queries_skipped;
      continue;
    }
    ++r.n_queries_evaluated;
    ap_sum += average_precision(matches);
    for (auto k = static_cast<size_t>(first - matches.begin()); k < r.cmc.size(); ++k) r.cmc[k] += 1.0;
  }
  if (r.n_queries_evaluated > 0) {
    r.mAP = ap_sum / r.n_queries_evaluated;
    for (auto& c : r.cmc) c /= r.n_queries_evaluated;
  }
  return r;
}

inline double compute_map(const RankingProblem& p) { return evaluate_ranking(p, 0).mAP; }

inline std::vector<double> compute_cmc(const RankingProblem& p, int max_rank) {
  if (max_rank > p.distances.cols()) throw std::invalid_argument("CMC rank exceeds gallery size");
  return evaluate_ranking(p, max_rank).cmc;
}

/// Per-category fraction of samples whose predicted label equals the truth.
inline std::vector<double> attribute_accuracy(const std::vector<std::vector<int>>& pred,
                                              const std::vector<std::vector<int>>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeMismatch("prediction and label counts differ");
  const size_t T = gt.front().size();
  std::vector<double> acc(T, 0.0);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != T || gt[i].size() != T) throw ShapeMismatch("ragged label rows");
    for (size_t t = 0; t < T; ++t) acc[t] += pred[i][t] == gt[i][t] ? 1.0 : 0.0;
  }
  for (auto& a : acc) a /= static_cast<double>(pred.size());
  return acc;
}

struct RankedList {
  std::vector<Index> order;
  std::vector<double> distances;
};

/// Gallery ranked by cosine distance to one query attribute token.
inline RankedList attribute_query_retrieval(const Eigen::RowVectorXd& query, const Matrix& gallery) {
  const auto d = pairwise_distance(Matrix(query), gallery, Metric::cosine).distances;
  RankedList r;
  r.order.resize(static_cast<size_t>(gallery.rows()));
  std::iota(r.order.begin(), r.order.end(), Index{0});
  std::stable_sort(r.order.begin(), r.order.end(), [&](Index a, Index b) { return d(0, a) < d(0, b); });
  for (Index j : r.order) r.distances.push_back(d(0, j));
  return r;
}

inline Json to_json(const MetricsReport& r) {
  Json j = {{"protocol", r.protocol},
            {"mAP", r.mAP},
            {"cmc", r.cmc},
            {"n_queries_evaluated", r.n_queries_evaluated},
            {"n_queries_skipped", r.n_queries_skipped}};
  if (!r.attribute_accuracy.empty()) {
    j["attribute_accuracy"] = r.attribute_accuracy;
    j["mean_attribute_accuracy"] =
        std::accumulate(r.attribute_accuracy.begin(), r.attribute_accuracy.end(), 0.0) / r.attribute_accuracy.size();
  }
  return j;
}

/// query_id, rank, gallery_id, distance, is_match rows for one protocol.
inline std::string rank_list_csv(const RankingProblem& p, int top_k) {
  std::ostringstream os;
  os << "query_id,rank,gallery_id,distance,is_match\n";
  os.precision(17);
  for (Index i = 0; i < p.distances.rows(); ++i) {
    std::vector<Index> order;
    const auto matches = ranked_matches(p, i, &order);
    for (size_t k = 0; k < order.size() && static_cast<int>(k) < top_k; ++k)
      os << i << ',' << k + 1 << ',' << order[k] << ',' << p.distances(i, order[k]) << ',' << (matches[k] ? 1 : 0)
         << '\n';
  }
  return os.str();
}

}  // namespace agreid::eval
