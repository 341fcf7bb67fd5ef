#pragma once

#include "l2d/common.hpp"
#include "l2d/model_core.hpp"
#include "l2d/transitions.hpp"

#include "json.hpp"

#include <set>
#include <string>

namespace l2d {

using Json = nlohmann::json;

namespace serialize {

/// Matrices are stored row-major as nested arrays; vectors as flat arrays.
inline Json to_json(const Mat &m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json to_json(const Vec &v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Mat mat_from_json(const Json &j, Eigen::Index rows, Eigen::Index cols, const std::string &what) {
  if (rows == 0 || cols == 0) {
    return Mat(rows, cols);
  }
  if (j.is_number()) {
    if (rows != cols) throw ConfigError(what + ": scalar shorthand needs a square matrix");
    return j.get<double>() * Mat::Identity(rows, cols);
  }
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw ConfigError(what + ": expected " + std::to_string(rows) + " rows");
  }
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json &row = j[static_cast<size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError(what + ": row " + std::to_string(i) + " must have " + std::to_string(cols) + " entries");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<size_t>(c)].get<double>();
  }
  return m;
}

inline Vec vec_from_json(const Json &j, Eigen::Index n, const std::string &what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n) {
    throw ConfigError(what + ": expected an array of length " + std::to_string(n));
  }
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = j[static_cast<size_t>(i)].get<double>();
  return v;
}

/// Rejects keys outside `allowed` (no silent defaults for misspellings).
inline void check_keys(const Json &obj, const std::set<std::string> &allowed, const std::string &where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto &[key, _] : obj.items()) {
    if (allowed.count(key) == 0) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

inline Json belief_to_json(const GaussianBelief &b) { return {{"mean", to_json(b.mean)}, {"cov", to_json(b.cov)}}; }

inline GaussianBelief belief_from_json(const Json &j, Eigen::Index d, const std::string &what) {
  check_keys(j, {"mean", "cov"}, what);
  return {vec_from_json(j.at("mean"), d, what + ".mean"), mat_from_json(j.at("cov"), d, d, what + ".cov")};
}

inline Json to_json(const TransitionParams &tp) {
  Json wq = Json::array(), wk = Json::array();
  for (const auto &m : tp.query_weights) wq.push_back(to_json(m));
  for (const auto &m : tp.key_weights) wk.push_back(to_json(m));
  return {{"query_weights", wq},
          {"query_bias", to_json(tp.query_bias)},
          {"key_weights", wk},
          {"key_bias", to_json(tp.key_bias)},
          {"l2_weight", tp.l2_weight}};
}

inline TransitionParams transition_from_json(const Json &j, int M, int a, int d) {
  check_keys(j, {"query_weights", "query_bias", "key_weights", "key_bias", "l2_weight"}, "transition");
  TransitionParams tp = TransitionParams::zeros(M, a, d);
  for (int l = 0; l < M; ++l) {
    tp.query_weights[l] = mat_from_json(j.at("query_weights").at(l), a, d, "transition.query_weights");
    tp.key_weights[l] = mat_from_json(j.at("key_weights").at(l), a, d, "transition.key_weights");
  }
  tp.query_bias = mat_from_json(j.at("query_bias"), M, a, "transition.query_bias");
  tp.key_bias = mat_from_json(j.at("key_bias"), M, a, "transition.key_bias");
  tp.l2_weight = j.value("l2_weight", 0.0);
  return tp;
}

inline Json to_json(const ModelParams &p) {
  Json j;
  j["num_regimes"] = p.num_regimes;
  j["d_g"] = p.d_g;
  j["d_alpha"] = p.d_alpha;
  j["d_y"] = p.d_y;
  j["d_context"] = p.d_context;
  j["d_attn"] = p.d_attn;
  j["transition"] = to_json(p.transition);
  auto per_regime = [](const std::vector<Mat> &v) {
    Json a = Json::array();
    for (const auto &m : v) a.push_back(to_json(m));
    return a;
  };
  j["A_g"] = per_regime(p.A_g);
  j["Q_g"] = per_regime(p.Q_g);
  j["A_u"] = per_regime(p.A_u);
  j["Q_u"] = per_regime(p.Q_u);
  j["prior_z"] = to_json(p.prior_z);
  Json pg = Json::array(), bp = Json::array();
  for (const auto &b : p.prior_g) pg.push_back(belief_to_json(b));
  for (const auto &b : p.birth_prior) bp.push_back(belief_to_json(b));
  j["prior_g"] = pg;
  j["birth_prior"] = bp;
  Json ex = Json::array();
  for (const auto &[k, e] : p.experts) {
    ex.push_back({{"id", k}, {"B", to_json(e.loading)}, {"R", per_regime(e.noise)}, {"beta", e.fee}});
  }
  j["experts"] = ex;
  return j;
}

inline ModelParams model_params_from_json(const Json &j) {
  check_keys(j, {"num_regimes", "d_g", "d_alpha", "d_y", "d_context", "d_attn", "transition", "A_g", "Q_g", "A_u",
                 "Q_u", "prior_z", "prior_g", "birth_prior", "experts"},
             "model_params");
  ModelParams p;
  p.num_regimes = j.at("num_regimes").get<int>();
  p.d_g = j.at("d_g").get<int>();
  p.d_alpha = j.at("d_alpha").get<int>();
  p.d_y = j.value("d_y", 1);
  p.d_context = j.at("d_context").get<int>();
  p.d_attn = j.at("d_attn").get<int>();
  const int M = p.num_regimes;
  p.transition = transition_from_json(j.at("transition"), M, p.d_attn, p.d_context);
  auto per_regime = [&](const char *key, Eigen::Index r, Eigen::Index c) {
    std::vector<Mat> v;
    const Json &a = j.at(key);
    if (!a.is_array() || static_cast<int>(a.size()) != M) {
      throw ConfigError(std::string(key) + ": expected one entry per regime");
    }
    for (int m = 0; m < M; ++m) v.push_back(mat_from_json(a[m], r, c, key));
    return v;
  };
  p.A_g = per_regime("A_g", p.d_g, p.d_g);
  p.Q_g = per_regime("Q_g", p.d_g, p.d_g);
  p.A_u = per_regime("A_u", p.d_alpha, p.d_alpha);
  p.Q_u = per_regime("Q_u", p.d_alpha, p.d_alpha);
  p.prior_z = vec_from_json(j.at("prior_z"), M, "prior_z");
  for (int m = 0; m < M; ++m) {
    p.prior_g.push_back(belief_from_json(j.at("prior_g").at(m), p.d_g, "prior_g"));
    p.birth_prior.push_back(belief_from_json(j.at("birth_prior").at(m), p.d_alpha, "birth_prior"));
  }
  for (const auto &e : j.at("experts")) {
    check_keys(e, {"id", "B", "R", "beta"}, "experts[]");
    ExpertParams ep;
    ep.loading = mat_from_json(e.at("B"), p.d_alpha, p.d_g, "experts[].B");
    for (int m = 0; m < M; ++m) ep.noise.push_back(mat_from_json(e.at("R").at(m), p.d_y, p.d_y, "experts[].R"));
    ep.fee = e.value("beta", 0.0);
    p.experts[e.at("id").get<int>()] = ep;
  }
  p.validate();
  return p;
}

} // namespace serialize
} // namespace l2d
