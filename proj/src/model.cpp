#include "fedclust/model.hpp"

#include <cmath>
#include <random>

namespace fedclust {

std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu")
    return Activation::Relu;
  if (s == "identity" || s == "linear")
    return Activation::Identity;
  throw InvalidArgument("unknown activation '" + s + "'");
}

// ---------------------------------------------------------------------------
// DenseStack

Eigen::Index DenseStack::in_dim() const { return layers.empty() ? 0 : layers.front().W.cols(); }
Eigen::Index DenseStack::out_dim() const { return layers.empty() ? 0 : layers.back().W.rows(); }

bool DenseStack::is_linear() const {
  for (const auto& l : layers)
    if (l.act != Activation::Identity || !l.b.isZero(0.0))
      return false;
  return true;
}

void DenseStack::validate() const {
  if (layers.empty())
    throw DimensionError("dense stack has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.b.size() != l.W.rows())
      throw DimensionError("layer " + std::to_string(i) + ": bias length " +
                           std::to_string(l.b.size()) + " != rows " + std::to_string(l.W.rows()));
    if (i > 0 && layers[i - 1].W.rows() != l.W.cols())
      throw DimensionError("layer " + std::to_string(i) + " expects " + std::to_string(l.W.cols()) +
                           " inputs but previous layer emits " +
                           std::to_string(layers[i - 1].W.rows()));
  }
}

namespace {

void apply_activation(Matrix& m, Activation a) {
  if (a == Activation::Relu)
    m = m.cwiseMax(0.0);
}

} // namespace

Matrix DenseStack::forward(const Matrix& X) const { return forward_trace(X).back(); }

std::vector<Matrix> DenseStack::forward_trace(const Matrix& X) const {
  if (X.rows() != in_dim())
    throw DimensionError("forward: input has " + std::to_string(X.rows()) + " rows, stack expects " +
                         std::to_string(in_dim()));
  std::vector<Matrix> out;
  out.reserve(layers.size() + 1);
  out.push_back(X);
  for (const auto& l : layers) {
    Matrix h = l.W * out.back();
    h.colwise() += l.b;
    apply_activation(h, l.act);
    out.push_back(std::move(h));
  }
  return out;
}

Matrix DenseStack::product() const {
  Matrix prod = Matrix::Identity(in_dim(), in_dim());
  for (const auto& l : layers)
    prod = l.W * prod;
  return prod;
}

void ClusterContrastiveModel::validate() const {
  encoder.validate();
  predictor.validate();
  if (predictor.in_dim() != encoder.out_dim() || predictor.out_dim() != encoder.out_dim())
    throw DimensionError("predictor must map the latent dimension " +
                         std::to_string(encoder.out_dim()) + " onto itself");
}

// ---------------------------------------------------------------------------
// Construction

namespace {

DenseStack random_stack(Eigen::Index in, const std::vector<Eigen::Index>& hidden, Eigen::Index out,
                        Activation hidden_act, std::mt19937_64& rng) {
  DenseStack s;
  std::vector<Eigen::Index> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    const Activation act = last ? Activation::Identity : hidden_act;
    const double gain = act == Activation::Relu ? 2.0 : 1.0;
    std::normal_distribution<double> normal(0.0, std::sqrt(gain / static_cast<double>(dims[i])));
    DenseLayer layer;
    layer.W.resize(dims[i + 1], dims[i]);
    for (Eigen::Index r = 0; r < layer.W.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.W.cols(); ++c)
        layer.W(r, c) = normal(rng);
    layer.b = Vector::Zero(dims[i + 1]);
    layer.act = act;
    s.layers.push_back(std::move(layer));
  }
  return s;
}

DenseStack linear_stack(const std::vector<Matrix>& weights) {
  DenseStack s;
  for (const auto& W : weights)
    s.layers.push_back({W, Vector::Zero(W.rows()), Activation::Identity});
  return s;
}

} // namespace

ClusterContrastiveModel make_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.in_dim < 1 || spec.d_latent < 1)
    throw InvalidArgument("make_model: dimensions must be positive");
  std::mt19937_64 rng(seed);
  ClusterContrastiveModel m;
  m.encoder = random_stack(spec.in_dim, spec.encoder_hidden, spec.d_latent, spec.hidden_activation, rng);
  m.predictor =
      random_stack(spec.d_latent, spec.predictor_hidden, spec.d_latent, spec.hidden_activation, rng);
  m.validate();
  return m;
}

ClusterContrastiveModel make_linear_model(const std::vector<Matrix>& encoder_weights,
                                          const std::vector<Matrix>& predictor_weights) {
  ClusterContrastiveModel m{linear_stack(encoder_weights), linear_stack(predictor_weights)};
  m.validate();
  return m;
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0))
    throw InvalidArgument("train: lambda must be set and non-negative");
  if (!(eta_reg >= 0.0))
    throw InvalidArgument("train: eta_reg must be non-negative");
  if (!(lr >= 0.0))
    throw InvalidArgument("train: lr must be non-negative");
  if (local_epochs < 0)
    throw InvalidArgument("train: local_epochs must be non-negative");
  if (batch_size < 1)
    throw InvalidArgument("train: batch_size must be positive");
}

// ---------------------------------------------------------------------------
// Forward

namespace {

void normalize_columns(const Matrix& m, Matrix& hat, std::vector<char>& degenerate) {
  hat.resize(m.rows(), m.cols());
  degenerate.assign(static_cast<std::size_t>(m.cols()), 0);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n < kDegenerateNorm) {
      degenerate[j] = 1;
      hat.col(j).setZero();
    } else {
      hat.col(j) = m.col(j) / n;
    }
  }
}

} // namespace

ForwardResult forward(const ClusterContrastiveModel& model, const Matrix& X) {
  ForwardResult r;
  r.Z = model.encoder.forward(X);
  r.P = model.predictor.forward(r.Z);
  return r;
}

ForwardCache make_forward_cache(const ClusterContrastiveModel& model,
                                const ClusterContrastiveModel& global_model, const Matrix& X,
                                const Labels& labels, int k) {
  if (static_cast<Eigen::Index>(labels.size()) != X.cols())
    throw DimensionError("forward cache: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(X.cols()) + " samples");
  if (k < 1)
    throw InvalidArgument("forward cache: k must be positive");
  ForwardCache c;
  c.encoder_trace = model.encoder.forward_trace(X);
  c.predictor_trace = model.predictor.forward_trace(c.encoder_trace.back());
  c.P_global = global_model.predictor.forward(global_model.encoder.forward(X));
  normalize_columns(c.Z(), c.z_hat, c.z_degenerate);
  normalize_columns(c.P(), c.p_hat, c.p_degenerate);
  normalize_columns(c.P_global, c.pg_hat, c.pg_degenerate);
  c.labels = labels;
  c.k = k;
  c.counts.assign(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    if (l < 0 || l >= k)
      throw InvalidArgument("forward cache: label " + std::to_string(l) + " outside [0, k)");
    ++c.counts[l];
  }
  return c;
}

double neg_cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    throw DimensionError("neg_cosine: length mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kDegenerateNorm || nb < kDegenerateNorm)
    throw DegenerateInput("neg_cosine: vector norm below 1e-12");
  return -a.dot(b) / (na * nb);
}

Labels nearest_centroid(const Matrix& representations, const Matrix& centroids) {
  if (centroids.rows() < 1)
    throw InvalidArgument("assign_labels: no centroids");
  if (centroids.cols() != representations.rows())
    throw DimensionError("assign_labels: centroid dimension " + std::to_string(centroids.cols()) +
                         " != representation dimension " + std::to_string(representations.rows()));
  Labels out(static_cast<std::size_t>(representations.cols()));
  for (Eigen::Index i = 0; i < representations.cols(); ++i) {
    int best = 0;
    double best_d = (centroids.row(0).transpose() - representations.col(i)).squaredNorm();
    for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
      const double d = (centroids.row(c).transpose() - representations.col(i)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    out[i] = best;
  }
  return out;
}

Labels assign_labels(const DenseStack& encoder, const Matrix& centroids, const Matrix& X) {
  return nearest_centroid(encoder.forward(X), centroids);
}

// ---------------------------------------------------------------------------
// Loss

namespace {

// Per-cluster sums of the normalized representations (stop-gradient targets).
Matrix cluster_target_sums(const ForwardCache& c) {
  Matrix sums = Matrix::Zero(c.Z().rows(), c.k);
  for (Eigen::Index j = 0; j < c.batch_size(); ++j)
    if (!c.z_degenerate[j])
      sums.col(c.labels[j]) += c.z_hat.col(j);
  return sums;
}

void require_nonempty(const ForwardCache& c) {
  for (int n : c.counts)
    if (n > 0)
      return;
  throw InvalidArgument("ccfc_loss: no cluster has any samples");
}

} // namespace

LossTerms ccfc_loss_terms(const ForwardCache& c, const TrainConfig& cfg) {
  require_nonempty(c);
  const Matrix sums = cluster_target_sums(c);
  const double k = c.k;
  LossTerms t;
  for (Eigen::Index i = 0; i < c.batch_size(); ++i) {
    if (c.p_degenerate[i]) {
      ++t.skipped;
      continue;
    }
    const int cl = c.labels[i];
    const double nc = c.counts[cl];
    t.similarity -= c.p_hat.col(i).dot(sums.col(cl)) / (k * nc * nc);
    if (!c.pg_degenerate[i])
      t.proximity -= cfg.lambda * c.p_hat.col(i).dot(c.pg_hat.col(i)) / (k * nc);
  }
  if (cfg.eta_reg != 0.0) {
    const double dl = static_cast<double>(c.Z().rows());
    t.decorrelation = cfg.eta_reg / (dl * dl) * frobenius_norm_sq(covariance(c.Z()));
  }
  return t;
}

double ccfc_loss(const ForwardCache& cache, const TrainConfig& cfg) {
  return ccfc_loss_terms(cache, cfg).total();
}

double ccfc_loss(const ClusterContrastiveModel& model, const ClusterContrastiveModel& global_model,
                 const Matrix& X, const Labels& labels, int k, const TrainConfig& cfg) {
  return ccfc_loss(make_forward_cache(model, global_model, X, labels, k), cfg);
}

// ---------------------------------------------------------------------------
// Backward

Matrix prediction_gradient(const ForwardCache& c, const TrainConfig& cfg, int* skipped) {
  require_nonempty(c);
  const Matrix sums = cluster_target_sums(c);
  const double k = c.k;
  Matrix dP = Matrix::Zero(c.P().rows(), c.P().cols());
  int skip = 0;
  for (Eigen::Index i = 0; i < c.batch_size(); ++i) {
    if (c.p_degenerate[i]) {
      ++skip;
      continue;
    }
    const int cl = c.labels[i];
    const double nc = c.counts[cl];
    // dloss/dp_hat_i, then through the normalization Jacobian (I - p̂p̂ᵀ)/|p|
    Vector g = -sums.col(cl) / (k * nc * nc);
    if (!c.pg_degenerate[i])
      g -= cfg.lambda / (k * nc) * c.pg_hat.col(i);
    const auto ph = c.p_hat.col(i);
    dP.col(i) = (g - ph * ph.dot(g)) / c.P().col(i).norm();
  }
  if (skipped)
    *skipped = skip;
  return dP;
}

namespace {

// Backpropagates dOut through `stack`, filling `grad` and returning dInput.
Matrix backprop_stack(const DenseStack& stack, const std::vector<Matrix>& trace, Matrix dOut,
                      StackGradient& grad) {
  const std::size_t L = stack.layers.size();
  grad.dW.resize(L);
  grad.db.resize(L);
  for (std::size_t idx = L; idx-- > 0;) {
    const auto& layer = stack.layers[idx];
    if (layer.act == Activation::Relu)
      dOut = dOut.cwiseProduct((trace[idx + 1].array() > 0.0).cast<double>().matrix());
    grad.dW[idx] = dOut * trace[idx].transpose();
    grad.db[idx] = dOut.rowwise().sum();
    dOut = layer.W.transpose() * dOut;
  }
  return dOut;
}

} // namespace

Gradients backward(const ClusterContrastiveModel& model, const ForwardCache& c,
                   const TrainConfig& cfg) {
  Gradients g;
  const Matrix dP = prediction_gradient(c, cfg, &g.skipped);
  Matrix dZ = backprop_stack(model.predictor, c.predictor_trace, dP, g.predictor);
  if (cfg.eta_reg != 0.0) {
    // d/dZ (eta/d'^2)|Sigma|_F^2 = 4 eta / (d'^2 n) * Sigma * (Z - mean)
    const Matrix& Z = c.Z();
    const double dl = static_cast<double>(Z.rows());
    const double n = static_cast<double>(Z.cols());
    const Matrix centered = Z.colwise() - Z.rowwise().mean();
    const Matrix sigma = covariance(Z);
    dZ += (4.0 * cfg.eta_reg / (dl * dl * n)) * sigma * centered;
  }
  backprop_stack(model.encoder, c.encoder_trace, dZ, g.encoder);
  return g;
}

ClusterContrastiveModel sgd_step(const ClusterContrastiveModel& model, const Gradients& grads,
                                 double lr) {
  ClusterContrastiveModel out = model;
  auto step = [lr](DenseStack& s, const StackGradient& g) {
    if (g.dW.size() != s.layers.size() || g.db.size() != s.layers.size())
      throw DimensionError("sgd_step: gradient does not match model depth");
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      s.layers[i].W -= lr * g.dW[i];
      s.layers[i].b -= lr * g.db[i];
    }
  };
  step(out.encoder, grads.encoder);
  step(out.predictor, grads.predictor);
  return out;
}

// ---------------------------------------------------------------------------
// Flat parameter views

namespace {

template <typename Fn>
void for_each_layer(const ClusterContrastiveModel& m, Fn&& fn) {
  for (const auto& l : m.encoder.layers)
    fn(l);
  for (const auto& l : m.predictor.layers)
    fn(l);
}

void append(Vector& out, Eigen::Index& pos, const Matrix& W, const Vector& b) {
  for (Eigen::Index r = 0; r < W.rows(); ++r)
    for (Eigen::Index c = 0; c < W.cols(); ++c)
      out(pos++) = W(r, c);
  out.segment(pos, b.size()) = b;
  pos += b.size();
}

} // namespace

Eigen::Index parameter_count(const ClusterContrastiveModel& model) {
  Eigen::Index n = 0;
  for_each_layer(model, [&](const DenseLayer& l) { n += l.W.size() + l.b.size(); });
  return n;
}

Vector flatten(const ClusterContrastiveModel& model) {
  Vector out(parameter_count(model));
  Eigen::Index pos = 0;
  for_each_layer(model, [&](const DenseLayer& l) { append(out, pos, l.W, l.b); });
  return out;
}

Vector flatten(const Gradients& grads) {
  Eigen::Index n = 0;
  for (const auto* s : {&grads.encoder, &grads.predictor})
    for (std::size_t i = 0; i < s->dW.size(); ++i)
      n += s->dW[i].size() + s->db[i].size();
  Vector out(n);
  Eigen::Index pos = 0;
  for (const auto* s : {&grads.encoder, &grads.predictor})
    for (std::size_t i = 0; i < s->dW.size(); ++i)
      append(out, pos, s->dW[i], s->db[i]);
  return out;
}

ClusterContrastiveModel unflatten(const ClusterContrastiveModel& like, const Vector& params) {
  if (params.size() != parameter_count(like))
    throw DimensionError("unflatten: parameter vector has wrong length");
  ClusterContrastiveModel out = like;
  Eigen::Index pos = 0;
  for (auto* s : {&out.encoder, &out.predictor})
    for (auto& l : s->layers) {
      for (Eigen::Index r = 0; r < l.W.rows(); ++r)
        for (Eigen::Index c = 0; c < l.W.cols(); ++c)
          l.W(r, c) = params(pos++);
      l.b = params.segment(pos, l.b.size());
      pos += l.b.size();
    }
  return out;
}

bool same_architecture(const ClusterContrastiveModel& a, const ClusterContrastiveModel& b) {
  auto same = [](const DenseStack& x, const DenseStack& y) {
    if (x.layers.size() != y.layers.size())
      return false;
    for (std::size_t i = 0; i < x.layers.size(); ++i)
      if (x.layers[i].W.rows() != y.layers[i].W.rows() ||
          x.layers[i].W.cols() != y.layers[i].W.cols() || x.layers[i].act != y.layers[i].act)
        return false;
    return true;
  };
  return same(a.encoder, b.encoder) && same(a.predictor, b.predictor);
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json model_to_json(const ClusterContrastiveModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for_each_layer(model, [&](const DenseLayer& l) {
    std::vector<double> w(static_cast<std::size_t>(l.W.size()));
    std::size_t pos = 0;
    for (Eigen::Index r = 0; r < l.W.rows(); ++r)
      for (Eigen::Index c = 0; c < l.W.cols(); ++c)
        w[pos++] = l.W(r, c);
    std::vector<double> b(l.b.data(), l.b.data() + l.b.size());
    layers.push_back({{"rows", l.W.rows()},
                      {"cols", l.W.cols()},
                      {"w", w},
                      {"b", b},
                      {"act", to_string(l.act)}});
  });
  return {{"encoder_layers", model.encoder.layers.size()}, {"layers", layers}};
}

ClusterContrastiveModel model_from_json(const nlohmann::json& j) {
  try {
    const auto& layers = j.at("layers");
    const std::size_t n_enc = j.at("encoder_layers").get<std::size_t>();
    if (n_enc < 1 || n_enc >= layers.size())
      throw FormatError("checkpoint: encoder_layers must split the layer list into two stacks");
    ClusterContrastiveModel m;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& lj = layers[i];
      const auto rows = lj.at("rows").get<Eigen::Index>();
      const auto cols = lj.at("cols").get<Eigen::Index>();
      const auto w = lj.at("w").get<std::vector<double>>();
      const auto b = lj.at("b").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != rows * cols ||
          static_cast<Eigen::Index>(b.size()) != rows)
        throw FormatError("checkpoint: layer " + std::to_string(i) + " has inconsistent sizes");
      DenseLayer l;
      l.W = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          w.data(), rows, cols);
      l.b = Eigen::Map<const Vector>(b.data(), rows);
      l.act = activation_from_string(lj.at("act").get<std::string>());
      (i < n_enc ? m.encoder : m.predictor).layers.push_back(std::move(l));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

} // namespace fedclust
