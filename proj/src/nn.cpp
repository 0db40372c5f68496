#include "gridpose/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gridpose/errors.hpp"

namespace gridpose::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'G', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError("truncated checkpoint " + path, 0);
  return v;
}

}  // namespace

Param& ParamStore::add(const std::string& name, int rows, int cols, double bound, std::mt19937_64& rng) {
  if (index_.count(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Matrix::Zero(rows, cols);
  if (bound > 0.0) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = u(rng);
  }
  p->grad = Matrix::Zero(rows, cols);
  p->m = Matrix::Zero(rows, cols);
  p->v = Matrix::Zero(rows, cols);
  Param& ref = *p;
  index_[name] = p.get();
  params_.push_back(std::move(p));
  return ref;
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
  return *it->second;
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
  return *it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

void ParamStore::scale_grad(double s) {
  for (auto& p : params_) p->grad *= s;
}

void ParamStore::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(os, 2);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.cols()));
    // row-major element order
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) put<float>(os, static_cast<float>(p->value(r, c)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

void ParamStore::load(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + where);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw ParseError("bad checkpoint magic in " + where, 0);
  if (take<std::uint32_t>(is, where) != kVersion) throw ParseError("unsupported checkpoint version in " + where, 0);
  const auto count = take<std::uint32_t>(is, where);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = take<std::uint32_t>(is, where);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError("truncated checkpoint " + where, 0);
    const auto ndim = take<std::uint32_t>(is, where);
    if (ndim != 2) throw ParseError("tensor '" + name + "' is not 2-D", 0);
    const auto rows = take<std::uint32_t>(is, where);
    const auto cols = take<std::uint32_t>(is, where);
    Param& p = get(name);
    if (p.value.rows() != rows || p.value.cols() != cols) {
      throw InvalidArgument("shape mismatch for tensor '" + name + "' in " + where);
    }
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = take<float>(is, where);
  }
}

void adam_step(ParamStore& store, const AdamConfig& cfg, const std::function<bool(const Param&)>& filter) {
  for (const auto& pp : store.params()) {
    Param& p = *pp;
    if (filter && !filter(p)) continue;
    ++p.step;
    p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad;
    p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    p.value.array() -= cfg.lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + cfg.eps);
  }
}

namespace {

// Shape only; the caller overwrites every entry.
FeatureMap shaped(int c, int h, int w) {
  FeatureMap f;
  f.channels = c;
  f.height = h;
  f.width = w;
  f.data.resize(c, static_cast<Eigen::Index>(h) * w);
  return f;
}

}  // namespace

FeatureMap FeatureMap::zeros(int c, int h, int w) {
  FeatureMap f;
  f.channels = c;
  f.height = h;
  f.width = w;
  f.data = Matrix::Zero(c, static_cast<Eigen::Index>(h) * w);
  return f;
}

Dense::Dense(ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w_ = &store.add(name + ".weight", out, in, bound, rng);
  b_ = &store.add(name + ".bias", 1, out, bound, rng);
}

Matrix Dense::forward(const Matrix& x) {
  if (x.cols() != w_->value.cols()) throw InvalidArgument("dense layer input width mismatch");
  x_ = x;
  cached_ = true;
  Matrix y = x * w_->value.transpose();
  y.rowwise() += b_->value.row(0);
  return y;
}

Matrix Dense::backward(const Matrix& grad_y) {
  if (!cached_) throw StateError("dense backward without a forward pass");
  w_->grad.noalias() += grad_y.transpose() * x_;
  b_->grad.row(0) += grad_y.colwise().sum();
  return grad_y * w_->value;
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride,
               std::mt19937_64& rng)
    : in_(in), out_(out), kernel_(kernel), stride_(stride) {
  if (kernel % 2 == 0 || stride < 1) throw InvalidArgument("convolution needs an odd kernel and positive stride");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  w_ = &store.add(name + ".weight", out, in * kernel * kernel, bound, rng);
  b_ = &store.add(name + ".bias", out, 1, bound, rng);
}

FeatureMap Conv2d::forward(const FeatureMap& x) {
  if (x.channels != in_) throw InvalidArgument("convolution input has " + std::to_string(x.channels) +
                                               " channels, expected " + std::to_string(in_));
  const int pad = kernel_ / 2;
  in_h_ = x.height;
  in_w_ = x.width;
  out_h_ = (x.height + 2 * pad - kernel_) / stride_ + 1;
  out_w_ = (x.width + 2 * pad - kernel_) / stride_ + 1;
  const int kk = kernel_ * kernel_;
  // Channel-major copy so both sides of the im2col gather walk memory along x.
  const RowMatrix xr = x.data;
  // Every entry is written below; padding taps get explicit zeros.
  cols_.resize(static_cast<Eigen::Index>(in_) * kk, static_cast<Eigen::Index>(out_h_) * out_w_);
  for (int c = 0; c < in_; ++c) {
    const double* src = xr.row(c).data();
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        double* dst = cols_.row(static_cast<Eigen::Index>(c) * kk + ky * kernel_ + kx).data();
        for (int oy = 0; oy < out_h_; ++oy) {
          const int iy = oy * stride_ + ky - pad;
          double* drow = dst + static_cast<std::ptrdiff_t>(oy) * out_w_;
          if (iy < 0 || iy >= in_h_) {
            std::fill(drow, drow + out_w_, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::ptrdiff_t>(iy) * in_w_;
          for (int ox = 0; ox < out_w_; ++ox) {
            const int ix = ox * stride_ + kx - pad;
            drow[ox] = (ix >= 0 && ix < in_w_) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
  cached_ = true;
  FeatureMap y;
  y.channels = out_;
  y.height = out_h_;
  y.width = out_w_;
  y.data.noalias() = w_->value * cols_;
  y.data.colwise() += b_->value.col(0);
  return y;
}

FeatureMap Conv2d::backward(const FeatureMap& grad_y) {
  if (!cached_) throw StateError("convolution backward without a forward pass");
  w_->grad.noalias() += grad_y.data * cols_.transpose();
  b_->grad.col(0) += grad_y.data.rowwise().sum();
  RowMatrix gcols;
  gcols.noalias() = w_->value.transpose() * grad_y.data;
  RowMatrix gxr = RowMatrix::Zero(in_, static_cast<Eigen::Index>(in_h_) * in_w_);
  const int pad = kernel_ / 2;
  const int kk = kernel_ * kernel_;
  for (int c = 0; c < in_; ++c) {
    double* dst = gxr.row(c).data();
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const double* src = gcols.row(static_cast<Eigen::Index>(c) * kk + ky * kernel_ + kx).data();
        for (int oy = 0; oy < out_h_; ++oy) {
          const int iy = oy * stride_ + ky - pad;
          if (iy < 0 || iy >= in_h_) continue;
          double* drow = dst + static_cast<std::ptrdiff_t>(iy) * in_w_;
          const double* srow = src + static_cast<std::ptrdiff_t>(oy) * out_w_;
          for (int ox = 0; ox < out_w_; ++ox) {
            const int ix = ox * stride_ + kx - pad;
            if (ix >= 0 && ix < in_w_) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
  FeatureMap gx;
  gx.channels = in_;
  gx.height = in_h_;
  gx.width = in_w_;
  gx.data = gxr;
  return gx;
}

namespace {
thread_local bool trace_on = false;
thread_local std::uint64_t trace_hash = 0;
}  // namespace

void PatternTrace::begin() {
  trace_on = true;
  trace_hash = 1469598103934665603ull;
}

std::uint64_t PatternTrace::end() {
  trace_on = false;
  return trace_hash;
}

bool PatternTrace::active() { return trace_on; }

void PatternTrace::mix(std::uint64_t value) {
  if (!trace_on) return;
  trace_hash = (trace_hash ^ value) * 1099511628211ull;
}

Matrix relu(const Matrix& x) {
  if (trace_on) {
    for (Eigen::Index i = 0; i < x.size(); ++i) PatternTrace::mix(x.data()[i] > 0.0 ? 1 : 2);
  }
  return x.cwiseMax(0.0);
}

Matrix relu_backward(const Matrix& y, const Matrix& grad_y) {
  return (y.array() > 0.0).select(grad_y, 0.0);
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

FeatureMap relu(const FeatureMap& x) {
  FeatureMap y = x;
  y.data = relu(x.data);
  return y;
}

FeatureMap relu_backward(const FeatureMap& y, const FeatureMap& grad_y) {
  FeatureMap g = grad_y;
  g.data = relu_backward(y.data, grad_y.data);
  return g;
}

FeatureMap avg_pool(const FeatureMap& x, int factor) {
  if (factor < 1 || x.height % factor || x.width % factor) throw InvalidArgument("pool factor must divide the map size");
  FeatureMap y = FeatureMap::zeros(x.channels, x.height / factor, x.width / factor);
  const double w = 1.0 / (factor * factor);
  for (int c = 0; c < x.channels; ++c)
    for (int iy = 0; iy < x.height; ++iy)
      for (int ix = 0; ix < x.width; ++ix) y.at(c, iy / factor, ix / factor) += w * x.at(c, iy, ix);
  return y;
}

FeatureMap avg_pool_backward(const FeatureMap& grad_y, int factor) {
  FeatureMap g = shaped(grad_y.channels, grad_y.height * factor, grad_y.width * factor);
  const double w = 1.0 / (factor * factor);
  for (int c = 0; c < g.channels; ++c)
    for (int iy = 0; iy < g.height; ++iy)
      for (int ix = 0; ix < g.width; ++ix) g.at(c, iy, ix) = w * grad_y.at(c, iy / factor, ix / factor);
  return g;
}

FeatureMap upsample_nearest(const FeatureMap& x, int factor) {
  FeatureMap y = shaped(x.channels, x.height * factor, x.width * factor);
  for (int c = 0; c < y.channels; ++c)
    for (int iy = 0; iy < y.height; ++iy)
      for (int ix = 0; ix < y.width; ++ix) y.at(c, iy, ix) = x.at(c, iy / factor, ix / factor);
  return y;
}

FeatureMap upsample_nearest_backward(const FeatureMap& grad_y, int factor) {
  FeatureMap g = FeatureMap::zeros(grad_y.channels, grad_y.height / factor, grad_y.width / factor);
  for (int c = 0; c < grad_y.channels; ++c)
    for (int iy = 0; iy < grad_y.height; ++iy)
      for (int ix = 0; ix < grad_y.width; ++ix) g.at(c, iy / factor, ix / factor) += grad_y.at(c, iy, ix);
  return g;
}

FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b) {
  if (a.height != b.height || a.width != b.width) throw InvalidArgument("concatenated maps differ in size");
  FeatureMap y = shaped(a.channels + b.channels, a.height, a.width);
  y.data.topRows(a.channels) = a.data;
  y.data.bottomRows(b.channels) = b.data;
  return y;
}

std::pair<FeatureMap, FeatureMap> split_channels(const FeatureMap& g, int first_channels) {
  FeatureMap a = shaped(first_channels, g.height, g.width);
  FeatureMap b = shaped(g.channels - first_channels, g.height, g.width);
  a.data = g.data.topRows(first_channels);
  b.data = g.data.bottomRows(g.channels - first_channels);
  return {std::move(a), std::move(b)};
}

}  // namespace gridpose::nn
