#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gridpose::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // Adam first moment
  Matrix v;  // Adam second moment
  long step = 0;
};

/// Owns every trainable tensor of a model. Addresses are stable, so layers
/// keep raw pointers into the store.
class ParamStore {
 public:
  // Uniform in [-bound, bound]; bound 0 gives zeros.
  Param& add(const std::string& name, int rows, int cols, double bound, std::mt19937_64& rng);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::unique_ptr<Param>>& params() const { return params_; }
  std::size_t scalar_count() const;
  void zero_grad();
  void scale_grad(double s);

  // Binary checkpoint: magic, version, then named float32 tensors.
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, Param*> index_;
};

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Applies one Adam update to the parameters accepted by `filter` (all when empty).
void adam_step(ParamStore& store, const AdamConfig& cfg, const std::function<bool(const Param&)>& filter = {});

/// C x H x W tensor stored as a C x (H*W) matrix; column index y*W + x.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix data;

  static FeatureMap zeros(int c, int h, int w);
  double at(int c, int y, int x) const { return data(c, static_cast<Eigen::Index>(y) * width + x); }
  double& at(int c, int y, int x) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
};

// Fully connected layer on row vectors: y = x W^T + b.
class Dense {
 public:
  Dense() = default;
  Dense(ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_y);
  int in() const { return static_cast<int>(w_->value.cols()); }
  int out() const { return static_cast<int>(w_->value.rows()); }
  Param& weight() { return *w_; }
  Param& bias() { return *b_; }

 private:
  Param* w_ = nullptr;
  Param* b_ = nullptr;
  Matrix x_;
  bool cached_ = false;
};

// Square-kernel convolution with zero padding kernel/2.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride, std::mt19937_64& rng);

  FeatureMap forward(const FeatureMap& x);
  FeatureMap backward(const FeatureMap& grad_y);

 private:
  Param* w_ = nullptr;
  Param* b_ = nullptr;
  int in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1;
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
  RowMatrix cols_;
  bool cached_ = false;
};

/// Hash of every discrete decision (ReLU sign, max argmax, clamp, bit
/// hardening) taken while a trace is open on this thread. Two evaluations
/// with equal hashes lie on the same smooth piece of the network function,
/// which is what finite-difference checks need to know.
class PatternTrace {
 public:
  static void begin();
  static std::uint64_t end();
  static bool active();
  static void mix(std::uint64_t value);
};

Matrix relu(const Matrix& x);
// Gradient of ReLU given its output; the derivative at 0 is 0.
Matrix relu_backward(const Matrix& y, const Matrix& grad_y);
Matrix sigmoid(const Matrix& x);

FeatureMap relu(const FeatureMap& x);
FeatureMap relu_backward(const FeatureMap& y, const FeatureMap& grad_y);
FeatureMap avg_pool(const FeatureMap& x, int factor);
FeatureMap avg_pool_backward(const FeatureMap& grad_y, int factor);
FeatureMap upsample_nearest(const FeatureMap& x, int factor);
FeatureMap upsample_nearest_backward(const FeatureMap& grad_y, int factor);
FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b);
std::pair<FeatureMap, FeatureMap> split_channels(const FeatureMap& g, int first_channels);

}  // namespace gridpose::nn
