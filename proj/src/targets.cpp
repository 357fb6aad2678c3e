// Copyright 2026 The StAD Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "stad/targets.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace stad::targets {

using json = nlohmann::json;

double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

GaussianMixture::GaussianMixture(std::vector<Component> comps, int context_dim)
    : context_dim_(context_dim), comps_(std::move(comps)) {
  if (comps_.empty()) fail(ErrorCode::kInvalidTarget, "mixture needs a component");
  dim_ = comps_[0].mean.size();
  double wsum = 0.0;
  for (auto& c : comps_) {
    if (c.mean.size() != dim_ || c.cov.rows() != dim_ || c.cov.cols() != dim_)
      fail(ErrorCode::kInvalidTarget, "component shape");
    if (!(c.weight > 0.0)) fail(ErrorCode::kInvalidTarget, "component weight must be positive");
    if (context_dim_ > 0) {
      if (c.context_map.size() == 0) c.context_map = Matrix::Zero(dim_, context_dim_);
      if (c.context_map.rows() != dim_ || c.context_map.cols() != context_dim_)
        fail(ErrorCode::kInvalidTarget, "context map shape");
    }
    wsum += c.weight;
  }
  for (auto& c : comps_) {
    c.weight /= wsum;
    if (!c.cov.isApprox(c.cov.transpose(), 1e-12))
      fail(ErrorCode::kInvalidTarget, "covariance not symmetric");
    Eigen::LLT<Matrix> llt(c.cov);
    if (llt.info() != Eigen::Success || !(Matrix(llt.matrixL()).diagonal().array() > 0.0).all())
      fail(ErrorCode::kInvalidTarget, "covariance not positive definite");
    Matrix l = llt.matrixL();
    const double logdet = 2.0 * l.diagonal().array().log().sum();
    chol_.push_back(l);
    log_norm_.push_back(std::log(c.weight) -
                        0.5 * (logdet + static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi)));
  }
}

Vector GaussianMixture::component_mean(std::size_t k, const Vector* c) const {
  const auto& comp = comps_[k];
  if (context_dim_ == 0 || !c) return comp.mean;
  return comp.mean + comp.context_map * *c;
}

void GaussianMixture::check_inputs(const Vector& x, const Vector* c) const {
  if (x.size() != dim_) fail(ErrorCode::kDimensionMismatch, "target dim");
  if (context_dim_ > 0 && (!c || c->size() != context_dim_))
    fail(ErrorCode::kDimensionMismatch, "target context dim");
}

double GaussianMixture::log_density(const Vector& x, const Vector* c) const {
  check_inputs(x, c);
  Vector terms(static_cast<Index>(comps_.size()));
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    Vector r = x - component_mean(k, c);
    Vector y = chol_[k].triangularView<Eigen::Lower>().solve(r);
    terms(static_cast<Index>(k)) = log_norm_[k] - 0.5 * y.squaredNorm();
  }
  return log_sum_exp(terms);
}

Vector GaussianMixture::score(const Vector& x, const Vector* c) const {
  check_inputs(x, c);
  const Index kc = static_cast<Index>(comps_.size());
  Vector terms(kc);
  Matrix scores(dim_, kc);
  for (Index k = 0; k < kc; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    Vector r = x - component_mean(ku, c);
    const auto l = chol_[ku].triangularView<Eigen::Lower>();
    Vector y = l.solve(r);
    terms(k) = log_norm_[ku] - 0.5 * y.squaredNorm();
    scores.col(k) = -l.transpose().solve(y);
  }
  Vector gamma = (terms.array() - log_sum_exp(terms)).exp();
  return scores * gamma;
}

Matrix GaussianMixture::sample(Index n, Rng& rng, const Matrix* contexts) const {
  if (context_dim_ > 0 && (!contexts || contexts->rows() != context_dim_ || contexts->cols() != n))
    fail(ErrorCode::kDimensionMismatch, "sample needs one context per draw");
  Matrix out(dim_, n);
  for (Index i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < comps_.size() && u >= comps_[k].weight) u -= comps_[k++].weight;
    Vector ci;
    if (context_dim_ > 0) ci = contexts->col(i);
    out.col(i) = component_mean(k, context_dim_ > 0 ? &ci : nullptr) +
                 chol_[k] * normal_vector(rng, dim_);
  }
  return out;
}

GaussianMixture GaussianMixture::affine(const Vector& shift, const Vector& scale) const {
  if (shift.size() != dim_ || scale.size() != dim_ || !(scale.array() > 0.0).all())
    fail(ErrorCode::kInvalidTarget, "affine transform needs positive per-coordinate scale");
  Vector inv = scale.cwiseInverse();
  std::vector<Component> out;
  for (const auto& c : comps_) {
    Component d = c;
    d.mean = (c.mean - shift).cwiseProduct(inv);
    d.cov = inv.asDiagonal() * c.cov * inv.asDiagonal();
    d.cov = 0.5 * (d.cov + d.cov.transpose()).eval();
    if (context_dim_ > 0) d.context_map = inv.asDiagonal() * c.context_map;
    out.push_back(std::move(d));
  }
  return GaussianMixture(std::move(out), context_dim_);
}

Vector GaussianMixture::marginal_mean() const {
  Vector m = Vector::Zero(dim_);
  for (const auto& c : comps_) m += c.weight * c.mean;
  return m;
}

Vector GaussianMixture::marginal_variance() const {
  Vector second = Vector::Zero(dim_);
  for (const auto& c : comps_) {
    Vector v = c.cov.diagonal() + c.mean.cwiseAbs2();
    if (context_dim_ > 0) v += c.context_map.rowwise().squaredNorm();
    second += c.weight * v;
  }
  return second - marginal_mean().cwiseAbs2();
}

// ---------------------------------------------------------------------------

GaussianMixture make_gaussian(const Vector& mean, const Matrix& cov) {
  return GaussianMixture({Component{1.0, mean, cov, {}}});
}

GaussianMixture make_isotropic_mixture(const Matrix& means, double std_dev, const Vector* weights) {
  if (!(std_dev > 0.0)) fail(ErrorCode::kInvalidTarget, "component std must be positive");
  std::vector<Component> comps;
  const Index d = means.rows();
  for (Index k = 0; k < means.cols(); ++k)
    comps.push_back(Component{weights ? (*weights)(k) : 1.0, means.col(k),
                              std_dev * std_dev * Matrix::Identity(d, d), {}});
  return GaussianMixture(std::move(comps));
}

GaussianMixture make_two_moons(int per_arc, double std_dev) {
  Matrix means(2, 2 * per_arc);
  for (int i = 0; i < per_arc; ++i) {
    const double a = std::numbers::pi * i / (per_arc - 1);
    means.col(i) << std::cos(a), std::sin(a);
    means.col(per_arc + i) << 1.0 - std::cos(a), 0.5 - std::sin(a);
  }
  return make_isotropic_mixture(means, std_dev);
}

GaussianMixture make_conditional_gaussian(const Matrix& context_map, const Matrix& cov,
                                          const Vector* offset) {
  Vector mean = offset ? *offset : Vector::Zero(context_map.rows());
  return GaussianMixture({Component{1.0, mean, cov, context_map}},
                         static_cast<int>(context_map.cols()));
}

namespace {
Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}
}  // namespace

GaussianMixture make_mixture2d() {
  std::vector<Component> comps;
  auto cov = [](double a, double b, double rho) {
    Matrix s(2, 2);
    s << a * a, rho * a * b, rho * a * b, b * b;
    return s;
  };
  comps.push_back({0.35, vec2(-1.0, -0.6), cov(0.45, 0.3, 0.4), {}});
  comps.push_back({0.25, vec2(1.1, 0.9), cov(0.35, 0.5, -0.3), {}});
  comps.push_back({0.25, vec2(0.9, -1.0), cov(0.3, 0.3, 0.0), {}});
  comps.push_back({0.15, vec2(-0.8, 1.2), cov(0.25, 0.4, 0.5), {}});
  return GaussianMixture(std::move(comps));
}

GaussianMixture make_cosmos_like(std::uint64_t seed, const CosmosLikeConfig& cfg) {
  Rng rng(seed, {0xC05305ULL});
  std::vector<Component> comps;
  Vector w(cfg.components);
  for (int k = 0; k < cfg.components; ++k) w(k) = 1.0 + rng.uniform();
  const double gain = cfg.context_gain / std::sqrt(static_cast<double>(cfg.context_dim));
  for (int k = 0; k < cfg.components; ++k) {
    Component c;
    c.weight = w(k);
    c.mean = cfg.mean_spread * normal_vector(rng, cfg.dim);
    Vector var(cfg.dim);
    for (int i = 0; i < cfg.dim; ++i)
      var(i) = cfg.var_min + (cfg.var_max - cfg.var_min) * rng.uniform();
    c.cov = var.asDiagonal();
    c.context_map = gain * normal_matrix(rng, cfg.dim, cfg.context_dim);
    comps.push_back(std::move(c));
  }
  return GaussianMixture(std::move(comps), cfg.context_dim);
}

// ---------------------------------------------------------------------------

Dataset sample_dataset(const GaussianMixture& target, Index n, std::uint64_t seed) {
  Dataset ds;
  ds.seed = seed;
  Rng rng(seed, {0xDA7AULL});
  Rng ctx_rng = rng.split(1);
  Rng x_rng = rng.split(2);
  ds.context = normal_matrix(ctx_rng, target.context_dim(), n);
  ds.x = target.sample(n, x_rng, target.context_dim() > 0 ? &ds.context : nullptr);
  ds.shift = Vector::Zero(target.dim());
  ds.scale = Vector::Ones(target.dim());
  return ds;
}

void normalize(Dataset& ds) {
  const double n = static_cast<double>(ds.size());
  if (ds.size() < 2) fail(ErrorCode::kInvalidTarget, "need at least two samples to normalize");
  Vector mean = ds.x.rowwise().mean();
  Vector sd = ((ds.x.colwise() - mean).rowwise().squaredNorm() / (n - 1.0)).cwiseSqrt();
  if (!(sd.array() > 1e-12).all())
    fail(ErrorCode::kInvalidTarget, "zero-variance coordinate in dataset");
  ds.x = (ds.x.colwise() - mean).array().colwise() / sd.array();
  // Compose with any earlier normalization.
  ds.shift += ds.scale.cwiseProduct(mean);
  ds.scale = ds.scale.cwiseProduct(sd);
}

Dataset select_columns(const Dataset& ds, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > ds.size())
    fail(ErrorCode::kShapeError, "dataset slice out of range");
  Dataset out = ds;
  out.x = ds.x.middleCols(begin, count);
  out.context = ds.context.middleCols(begin, count);
  return out;
}

void write_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  for (Index i = 0; i < ds.dim(); ++i) out << (i ? "," : "") << "x" << i;
  for (Index i = 0; i < ds.context_dim(); ++i) out << ",c" << i;
  out << '\n';
  out.precision(17);
  for (Index j = 0; j < ds.size(); ++j) {
    for (Index i = 0; i < ds.dim(); ++i) out << (i ? "," : "") << ds.x(i, j);
    for (Index i = 0; i < ds.context_dim(); ++i) out << ',' << ds.context(i, j);
    out << '\n';
  }
}

Dataset read_csv(const std::string& path, int context_dim) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> names;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) names.push_back(tok);
  }
  int header_ctx = 0;
  for (const auto& n : names) header_ctx += !n.empty() && n[0] == 'c';
  if (context_dim < 0) context_dim = header_ctx;
  const int cols = static_cast<int>(names.size());
  const int d = cols - context_dim;
  if (d < 1) fail(ErrorCode::kShapeError, path + ": header has too few columns");
  std::vector<double> vals;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    int c = 0;
    while (std::getline(ss, tok, ',')) {
      try {
        vals.push_back(std::stod(tok));
      } catch (const std::exception&) {
        fail(ErrorCode::kShapeError, path + ": bad number '" + tok + "' on row " +
                                         std::to_string(rows + 2));
      }
      ++c;
    }
    if (c != cols)
      fail(ErrorCode::kShapeError, path + ": row " + std::to_string(rows + 2) + " has " +
                                       std::to_string(c) + " fields, expected " +
                                       std::to_string(cols));
    ++rows;
  }
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      vals.data(), rows, cols);
  Dataset ds;
  ds.x = m.leftCols(d).transpose();
  ds.context = m.rightCols(context_dim).transpose();
  ds.shift = Vector::Zero(d);
  ds.scale = Vector::Ones(d);
  return ds;
}

void write_raw(const std::string& path, const Dataset& ds) {
  const Index d = ds.dim(), c = ds.context_dim(), n = ds.size();
  Matrix rows(d + c, n);
  rows.topRows(d) = ds.x;
  if (c > 0) rows.bottomRows(c) = ds.context;
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  // Column-major (d+c) x n is row-major n x (d+c).
  out.write(reinterpret_cast<const char*>(rows.data()),
            static_cast<std::streamsize>(rows.size() * sizeof(double)));
  json side = {{"format", "float64-le-rowmajor"},
               {"rows", n},
               {"dim", d},
               {"context_dim", c},
               {"seed", ds.seed},
               {"shift", std::vector<double>(ds.shift.data(), ds.shift.data() + d)},
               {"scale", std::vector<double>(ds.scale.data(), ds.scale.data() + d)}};
  std::ofstream js(path + ".json");
  js << side.dump(2) << '\n';
  if (!out || !js) fail(ErrorCode::kIo, "short write to " + path);
}

Dataset read_raw(const std::string& path) {
  std::ifstream js(path + ".json");
  if (!js) fail(ErrorCode::kIo, "cannot open " + path + ".json");
  json side;
  try {
    side = json::parse(js);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfigError, path + ".json: " + e.what());
  }
  const Index n = side.at("rows").get<Index>();
  const Index d = side.at("dim").get<Index>();
  const Index c = side.value("context_dim", Index{0});
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  Matrix rows(d + c, n);
  in.read(reinterpret_cast<char*>(rows.data()),
          static_cast<std::streamsize>(rows.size() * sizeof(double)));
  if (!in) fail(ErrorCode::kShapeError, path + ": file shorter than sidecar declares");
  Dataset ds;
  ds.x = rows.topRows(d);
  ds.context = rows.bottomRows(c);
  ds.seed = side.value("seed", std::uint64_t{0});
  auto sh = side.value("shift", std::vector<double>(static_cast<std::size_t>(d), 0.0));
  auto sc = side.value("scale", std::vector<double>(static_cast<std::size_t>(d), 1.0));
  if (static_cast<Index>(sh.size()) != d || static_cast<Index>(sc.size()) != d)
    fail(ErrorCode::kShapeError, path + ".json: shift/scale length");
  ds.shift = Eigen::Map<Vector>(sh.data(), d);
  ds.scale = Eigen::Map<Vector>(sc.data(), d);
  return ds;
}

}  // namespace stad::targets
