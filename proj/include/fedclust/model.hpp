#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedclust/numerics.hpp"

namespace fedclust {

/// Norm below which a column is treated as degenerate in cosine terms.
inline constexpr double kDegenerateNorm = 1e-12;

enum class Activation { Identity, Relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Matrix W; ///< out x in
  Vector b; ///< out
  Activation act = Activation::Identity;
};

/// Feed-forward stack of dense layers acting on column samples.
struct DenseStack {
  std::vector<DenseLayer> layers;

  Eigen::Index in_dim() const;
  Eigen::Index out_dim() const;
  /// True when every activation is the identity and every bias is zero.
  bool is_linear() const;
  void validate() const;

  Matrix forward(const Matrix& X) const;
  /// Layer outputs with the input prepended: out[0] = X, out.back() = forward(X).
  std::vector<Matrix> forward_trace(const Matrix& X) const;
  /// End-to-end matrix W_L ... W_1 (meaningful in linear mode).
  Matrix product() const;
};

/// Encoder f (backbone + projector) followed by predictor h.
struct ClusterContrastiveModel {
  DenseStack encoder;
  DenseStack predictor;

  Eigen::Index d_latent() const { return encoder.out_dim(); }
  void validate() const;
};

/// Architecture for make_model: hidden layers use `hidden_activation`, the
/// encoder and predictor output layers are affine.
struct ModelSpec {
  Eigen::Index in_dim = 0;
  std::vector<Eigen::Index> encoder_hidden;
  Eigen::Index d_latent = 0;
  std::vector<Eigen::Index> predictor_hidden;
  Activation hidden_activation = Activation::Relu;
};

/// He-normal weights for relu layers, LeCun-normal otherwise; zero biases.
ClusterContrastiveModel make_model(const ModelSpec& spec, std::uint64_t seed);

/// Linear model built from explicit weight matrices (zero biases).
ClusterContrastiveModel make_linear_model(const std::vector<Matrix>& encoder_weights,
                                          const std::vector<Matrix>& predictor_weights);

struct TrainConfig {
  double lambda = std::numeric_limits<double>::quiet_NaN(); ///< must be set explicitly
  double eta_reg = 0.0;                                      ///< 0 gives plain CCFC
  double lr = 0.01;
  int local_epochs = 1;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Everything the loss and its gradient need from one forward pass over a batch.
struct ForwardCache {
  std::vector<Matrix> encoder_trace;   ///< [X, ..., Z]
  std::vector<Matrix> predictor_trace; ///< [Z, ..., P]
  Matrix P_global;                     ///< h_g(f_g(X)), a constant
  Matrix z_hat, p_hat, pg_hat;         ///< column-normalized Z, P, P_global
  std::vector<char> z_degenerate, p_degenerate, pg_degenerate;
  Labels labels;
  int k = 0;
  std::vector<int> counts; ///< samples per cluster in this batch

  const Matrix& X() const { return encoder_trace.front(); }
  const Matrix& Z() const { return encoder_trace.back(); }
  const Matrix& P() const { return predictor_trace.back(); }
  Eigen::Index batch_size() const { return X().cols(); }
};

ForwardCache make_forward_cache(const ClusterContrastiveModel& model,
                                const ClusterContrastiveModel& global_model, const Matrix& X,
                                const Labels& labels, int k);

struct ForwardResult {
  Matrix Z;
  Matrix P;
};

ForwardResult forward(const ClusterContrastiveModel& model, const Matrix& X);

/// -a.b / (|a||b|). Throws DegenerateInput when either norm is below 1e-12.
double neg_cosine(const Vector& a, const Vector& b);

/// Index of the nearest centroid (rows of `centroids`) to f(x) for every
/// column x of X; ties go to the smaller index.
Labels assign_labels(const DenseStack& encoder, const Matrix& centroids, const Matrix& X);
Labels nearest_centroid(const Matrix& representations, const Matrix& centroids);

struct LossTerms {
  double similarity = 0.0;    ///< cluster-invariance term
  double proximity = 0.0;     ///< distance to the global model's predictions (times lambda)
  double decorrelation = 0.0; ///< eta / d'^2 * |Sigma|_F^2
  int skipped = 0;            ///< degenerate prediction columns left out

  double total() const { return similarity + proximity + decorrelation; }
};

LossTerms ccfc_loss_terms(const ForwardCache& cache, const TrainConfig& cfg);
double ccfc_loss(const ForwardCache& cache, const TrainConfig& cfg);
double ccfc_loss(const ClusterContrastiveModel& model, const ClusterContrastiveModel& global_model,
                 const Matrix& X, const Labels& labels, int k, const TrainConfig& cfg);

struct StackGradient {
  std::vector<Matrix> dW;
  std::vector<Vector> db;
};

struct Gradients {
  StackGradient encoder;
  StackGradient predictor;
  int skipped = 0;
};

/// Reverse-mode gradient of ccfc_loss with respect to every weight and bias
/// of `model`. The normalized representations and the global predictions are
/// held constant.
Gradients backward(const ClusterContrastiveModel& model, const ForwardCache& cache,
                   const TrainConfig& cfg);

/// Gradient of the loss with respect to the raw predictions P (d' x n),
/// excluding the decorrelation term.
Matrix prediction_gradient(const ForwardCache& cache, const TrainConfig& cfg, int* skipped = nullptr);

/// W <- W - lr * dW, b <- b - lr * db.
ClusterContrastiveModel sgd_step(const ClusterContrastiveModel& model, const Gradients& grads,
                                 double lr);

// Flat parameter views, in layer order (encoder then predictor, W row-major then b).
Eigen::Index parameter_count(const ClusterContrastiveModel& model);
Vector flatten(const ClusterContrastiveModel& model);
Vector flatten(const Gradients& grads);
ClusterContrastiveModel unflatten(const ClusterContrastiveModel& like, const Vector& params);
bool same_architecture(const ClusterContrastiveModel& a, const ClusterContrastiveModel& b);

nlohmann::json model_to_json(const ClusterContrastiveModel& model);
ClusterContrastiveModel model_from_json(const nlohmann::json& j);

} // namespace fedclust
