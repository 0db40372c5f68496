#include "gridpose/graphnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gridpose/errors.hpp"

namespace gridpose {

using nn::Matrix;
using nn::Vector;

NodeFeatures edgeconv_forward(const NodeFeatures& f, const KnnGraph& g, const Matrix& theta, const Matrix& phi,
                              EdgeConvCache* cache) {
  if (g.node_count() != f.rows()) throw InvalidArgument("feature rows do not match the graph size");
  if (theta.rows() != phi.rows() || theta.cols() != phi.cols() || theta.cols() != f.cols()) {
    throw InvalidArgument("EdgeConv weight shapes do not match the features");
  }
  if (g.degree() < 1) throw InvalidArgument("EdgeConv needs at least one neighbour per node");
  const Eigen::Index n = f.rows(), co = theta.rows();
  const Matrix a = f * theta.transpose();
  const Matrix b = f * (phi - theta).transpose();
  Matrix out = Matrix::Zero(n, co);
  std::vector<int> source(static_cast<std::size_t>(n * co), -1);
  for (Eigen::Index m = 0; m < co; ++m) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = -1;
      for (int j : g.neighbors(static_cast<int>(i))) {
        if (a(j, m) > best) {
          best = a(j, m);
          arg = j;
        }
      }
      const double pre = best + b(i, m);
      if (nn::PatternTrace::active()) {
        nn::PatternTrace::mix(static_cast<std::uint64_t>(arg) * 2 + (pre > 0.0 ? 1 : 0));
      }
      if (pre > 0.0) {
        out(i, m) = pre;
        source[static_cast<std::size_t>(m * n + i)] = arg;
      }
    }
  }
  if (cache) {
    cache->input = f;
    cache->output = out;
    cache->source = std::move(source);
    cache->valid = true;
  }
  return out;
}

EdgeConvGrads edgeconv_backward(const Matrix& grad_out, const EdgeConvCache& cache, const Matrix& theta,
                                const Matrix& phi) {
  if (!cache.valid) throw StateError("EdgeConv backward without a cached forward pass");
  const Eigen::Index n = cache.input.rows(), co = theta.rows();
  if (grad_out.rows() != n || grad_out.cols() != co) throw InvalidArgument("EdgeConv gradient shape mismatch");
  Matrix ga = Matrix::Zero(n, co), gb = Matrix::Zero(n, co);
  for (Eigen::Index m = 0; m < co; ++m) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const int src = cache.source[static_cast<std::size_t>(m * n + i)];
      if (src < 0) continue;
      ga(src, m) += grad_out(i, m);
      gb(i, m) += grad_out(i, m);
    }
  }
  EdgeConvGrads out;
  const Matrix gbf = gb.transpose() * cache.input;
  out.theta = ga.transpose() * cache.input - gbf;
  out.phi = gbf;
  out.input = ga * theta + gb * (phi - theta);
  return out;
}

EdgeConv::EdgeConv(nn::ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  theta_ = &store.add(name + ".theta", out, in, bound, rng);
  phi_ = &store.add(name + ".phi", out, in, bound, rng);
}

NodeFeatures EdgeConv::forward(const NodeFeatures& f, const KnnGraph& g) {
  return edgeconv_forward(f, g, theta_->value, phi_->value, &cache_);
}

Matrix EdgeConv::backward(const Matrix& grad_out) {
  EdgeConvGrads gr = edgeconv_backward(grad_out, cache_, theta_->value, phi_->value);
  theta_->grad += gr.theta;
  phi_->grad += gr.phi;
  return std::move(gr.input);
}

InitEmbedding::InitEmbedding(nn::ParamStore& store, int keypoints, int channels, int slots, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  w_ = &store.add("graph.init.weight", keypoints, channels, bound, rng);
  b_ = &store.add("graph.init.bias", keypoints, slots, bound, rng);
}

NodeFeatures InitEmbedding::forward(const FeatureMap& f0) {
  if (f0.channels != w_->value.cols()) throw InvalidArgument("F0 channel count does not match the embedding");
  if (f0.data.cols() != b_->value.cols()) throw InvalidArgument("F0 spatial size does not match the embedding");
  f0_ = f0;
  cached_ = true;
  Matrix e = w_->value * f0.data;
  e += b_->value;
  return e;
}

FeatureMap InitEmbedding::backward(const Matrix& grad) {
  if (!cached_) throw StateError("embedding backward without a forward pass");
  w_->grad.noalias() += grad * f0_.data.transpose();
  b_->grad += grad;
  FeatureMap g = FeatureMap::zeros(f0_.channels, f0_.height, f0_.width);
  g.data.noalias() = w_->value.transpose() * grad;
  return g;
}

Head::Head(nn::ParamStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng)
    : l1_(store, name + ".fc1", in, hidden, rng), l2_(store, name + ".fc2", hidden, out, rng) {}

Matrix Head::forward(const Matrix& x) {
  hidden_ = nn::relu(l1_.forward(x));
  prob_ = nn::sigmoid(l2_.forward(hidden_));
  return prob_;
}

Matrix Head::backward(const Matrix& grad_prob) {
  const Matrix g = grad_prob.cwiseProduct(prob_.cwiseProduct((1.0 - prob_.array()).matrix()));
  return l1_.backward(nn::relu_backward(hidden_, l2_.backward(g)));
}

void StagePlan::validate() const {
  if (keypoints < 2) throw InvalidArgument("need at least two keypoints");
  if (base_depth < 1 || depth <= base_depth) throw InvalidArgument("stage plan needs 1 <= d0 < d");
  if (stage0_layers < 1 || refine_layers < 1 || head_hidden < 1) throw InvalidArgument("layer counts must be >= 1");
  if (patch < 1 || patch % 2 == 0) throw InvalidArgument("patch size must be odd");
}

GraphNet::GraphNet(nn::ParamStore& store, const StagePlan& plan, int feature_channels,
                   const std::vector<int>& pyramid_channels, std::mt19937_64& rng)
    : plan_(plan), pyramid_channels_(pyramid_channels) {
  plan_.validate();
  if (static_cast<int>(pyramid_channels.size()) != plan_.stages()) {
    throw InvalidArgument("one pyramid level per refinement stage is required");
  }
  const int w = plan_.width();
  init_ = InitEmbedding(store, plan_.keypoints, feature_channels, plan_.width(), rng);
  for (int l = 0; l < plan_.stage0_layers; ++l) stage0_.emplace_back(store, "graph.stage0.conv" + std::to_string(l), w, w, rng);
  head_v_ = Head(store, "graph.stage0.head_v", w, plan_.head_hidden, 1, rng);
  head_x_ = Head(store, "graph.stage0.head_x", w, plan_.head_hidden, plan_.base_depth, rng);
  head_y_ = Head(store, "graph.stage0.head_y", w, plan_.head_hidden, plan_.base_depth, rng);
  for (int j = 1; j <= plan_.stages(); ++j) {
    const std::string name = "graph.stage" + std::to_string(j);
    Refinement r;
    r.projection = nn::Dense(store, name + ".project", w + patch_width(j), w, rng);
    for (int l = 0; l < plan_.refine_layers; ++l) r.layers.emplace_back(store, name + ".conv" + std::to_string(l), w, w, rng);
    r.head_x = Head(store, name + ".head_x", w, plan_.head_hidden, 1, rng);
    r.head_y = Head(store, name + ".head_y", w, plan_.head_hidden, 1, rng);
    refine_.push_back(std::move(r));
  }
}

int GraphNet::patch_width(int stage) const {
  const int level = plan_.base_depth + stage;
  return crop_patch_size(pyramid_channels_.at(stage - 1), level, level - 1, plan_.patch);
}

NodeFeatures GraphNet::init_embedding(const FeatureMap& f0) {
  if (f0.height != (1 << plan_.base_depth) || f0.width != (1 << plan_.base_depth)) {
    throw InvalidArgument("F0 must be 2^d0 x 2^d0");
  }
  return init_.forward(f0);
}

GraphPrediction GraphNet::predict_stage0(const NodeFeatures& f, const KnnGraph& g, NodeFeatures* updated) {
  if (f.rows() != plan_.keypoints || f.cols() != plan_.width()) throw InvalidArgument("stage-0 feature shape");
  NodeFeatures h = f;
  for (auto& layer : stage0_) h = layer.forward(h, g);
  GraphPrediction p;
  p.v = head_v_.forward(h).col(0);
  p.x = head_x_.forward(h);
  p.y = head_y_.forward(h);
  if (updated) *updated = std::move(h);
  return p;
}

std::pair<Vector, Vector> GraphNet::predict_refinement(int stage, const NodeFeatures& f, const Matrix& patches,
                                                       const KnnGraph& g, NodeFeatures* updated) {
  if (stage < 1 || stage > plan_.stages()) throw InvalidArgument("refinement stage out of range");
  Refinement& r = refine_[stage - 1];
  if (f.rows() != plan_.keypoints) throw InvalidArgument("refinement features need one row per keypoint");
  if (patches.rows() != f.rows() || patches.cols() != patch_width(stage)) {
    throw InvalidArgument("patch matrix shape does not match stage " + std::to_string(stage));
  }
  Matrix cat(f.rows(), f.cols() + patches.cols());
  cat << f, patches;
  NodeFeatures h = r.projection.forward(cat);
  for (auto& layer : r.layers) h = layer.forward(h, g);
  std::pair<Vector, Vector> bits{r.head_x.forward(h).col(0), r.head_y.forward(h).col(0)};
  if (updated) *updated = std::move(h);
  return bits;
}

std::vector<CellIndex> prefix_cells(const Matrix& x_prob, const Matrix& y_prob, int level) {
  if (x_prob.cols() < level || y_prob.cols() < level) throw InvalidArgument("not enough bits for the prefix");
  std::vector<CellIndex> cells(static_cast<std::size_t>(x_prob.rows()));
  for (Eigen::Index i = 0; i < x_prob.rows(); ++i) {
    CellIndex c{level, 0, 0};
    for (int k = 0; k < level; ++k) {
      c.ix = 2 * c.ix + (x_prob(i, k) >= 0.5 ? 1 : 0);
      c.iy = 2 * c.iy + (y_prob(i, k) >= 0.5 ? 1 : 0);
    }
    nn::PatternTrace::mix(static_cast<std::uint64_t>(c.ix) << 32 | static_cast<std::uint32_t>(c.iy));
    cells[static_cast<std::size_t>(i)] = c;
  }
  return cells;
}

GraphPrediction GraphNet::forward(const FeatureMap& f0, const std::vector<FeatureMap>& pyramid, const KnnGraph& g,
                                  int stages_to_run, const BinaryCodeSet* teacher) {
  if (stages_to_run < 0 || stages_to_run > plan_.stages()) throw InvalidArgument("stage count out of range");
  if (static_cast<int>(pyramid.size()) < stages_to_run) throw InvalidArgument("pyramid is missing levels");
  if (teacher && static_cast<int>(teacher->size()) != plan_.keypoints) throw InvalidArgument("teacher code count");
  const int d0 = plan_.base_depth;
  NodeFeatures h;
  GraphPrediction head = predict_stage0(init_embedding(f0), g, &h);
  GraphPrediction p;
  p.v = head.v;
  p.x = Matrix::Zero(plan_.keypoints, d0 + stages_to_run);
  p.y = Matrix::Zero(plan_.keypoints, d0 + stages_to_run);
  p.x.leftCols(d0) = head.x;
  p.y.leftCols(d0) = head.y;
  cells_.clear();
  pyramid_sizes_.clear();
  for (int j = 1; j <= stages_to_run; ++j) {
    const int level = d0 + j - 1;
    std::vector<CellIndex> cells;
    if (teacher) {
      for (const auto& code : *teacher) cells.push_back(prefix_cell(code, level));
    } else {
      cells = prefix_cells(p.x.leftCols(level), p.y.leftCols(level), level);
    }
    const FeatureMap& map = pyramid[j - 1];
    if (map.channels != pyramid_channels_[j - 1] || map.width != (1 << (level + 1))) {
      throw InvalidArgument("pyramid level " + std::to_string(j) + " has the wrong shape");
    }
    Matrix patches(plan_.keypoints, patch_width(j));
    for (int i = 0; i < plan_.keypoints; ++i) patches.row(i) = crop_patch(map, cells[i], plan_.patch).transpose();
    NodeFeatures next;
    auto [bx, by] = predict_refinement(j, h, patches, g, &next);
    h = std::move(next);
    p.x.col(level) = bx;
    p.y.col(level) = by;
    cells_.push_back(cells);
    pyramid_sizes_.push_back(map.width);
  }
  p.fusion_cells = cells_;
  stages_run_ = stages_to_run;
  forward_done_ = true;
  return p;
}

GraphNet::Grads GraphNet::backward(const Vector& grad_v, const Matrix& grad_x, const Matrix& grad_y) {
  if (!forward_done_) throw StateError("graph backward without a forward pass");
  const int d0 = plan_.base_depth;
  if (grad_x.cols() < d0 + stages_run_ || grad_y.cols() < d0 + stages_run_) {
    throw InvalidArgument("bit gradient has too few columns");
  }
  Grads out;
  for (int j = 1; j <= plan_.stages(); ++j) {
    const int size = j <= stages_run_ ? pyramid_sizes_[j - 1] : 1 << (d0 + j);
    out.pyramid.push_back(FeatureMap::zeros(pyramid_channels_[j - 1], size, size));
  }
  const int w = plan_.width();
  Matrix gh = Matrix::Zero(plan_.keypoints, w);
  for (int j = stages_run_; j >= 1; --j) {
    Refinement& r = refine_[j - 1];
    gh += r.head_x.backward(grad_x.col(d0 + j - 1));
    gh += r.head_y.backward(grad_y.col(d0 + j - 1));
    for (auto it = r.layers.rbegin(); it != r.layers.rend(); ++it) gh = it->backward(gh);
    const Matrix gcat = r.projection.backward(gh);
    gh = gcat.leftCols(w);
    for (int i = 0; i < plan_.keypoints; ++i) {
      crop_patch_backward(gcat.row(i).tail(gcat.cols() - w).transpose(), out.pyramid[j - 1], cells_[j - 1][i],
                          plan_.patch);
    }
  }
  gh += head_v_.backward(grad_v);
  gh += head_x_.backward(grad_x.leftCols(d0));
  gh += head_y_.backward(grad_y.leftCols(d0));
  for (auto it = stage0_.rbegin(); it != stage0_.rend(); ++it) gh = it->backward(gh);
  out.f0 = init_.backward(gh);
  return out;
}

LossBreakdown total_loss(double l_v, double l_x, double l_y, double l_mask) {
  LossBreakdown b{l_v, l_x, l_y, l_mask, 0.0};
  b.total = l_v + l_x + l_y + l_mask;
  return b;
}

namespace {

// Binary cross-entropy of one clamped probability and its derivative w.r.t. p.
double bce(double p, double t, double* dp) {
  const double c = std::clamp(p, kLossEps, 1.0 - kLossEps);
  nn::PatternTrace::mix(p <= kLossEps ? 1 : (p >= 1.0 - kLossEps ? 2 : 3));
  if (dp) *dp = (p > kLossEps && p < 1.0 - kLossEps) ? -(t / c - (1.0 - t) / (1.0 - c)) : 0.0;
  return -(t * std::log(c) + (1.0 - t) * std::log(1.0 - c));
}

}  // namespace

double loss_v(const Vector& prob, const BinaryCodeSet& target, Vector* grad) {
  if (static_cast<std::size_t>(prob.size()) != target.size() || target.empty()) {
    throw InvalidArgument("b_v prediction and target sizes differ");
  }
  const double n = static_cast<double>(target.size());
  if (grad) grad->setZero(prob.size());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    double d = 0.0;
    sum += bce(prob[i], target[i].v ? 1.0 : 0.0, grad ? &d : nullptr);
    if (grad) (*grad)[i] = d / n;
  }
  return sum / n;
}

IndexLoss loss_xy(const Matrix& prob_x, const Matrix& prob_y, const BinaryCodeSet& target, int bits, Matrix* grad_x,
                  Matrix* grad_y) {
  if (static_cast<std::size_t>(prob_x.rows()) != target.size() || prob_y.rows() != prob_x.rows()) {
    throw InvalidArgument("index-code prediction and target sizes differ");
  }
  if (bits < 1 || prob_x.cols() < bits || prob_y.cols() < bits) throw InvalidArgument("not enough predicted bits");
  if (grad_x) grad_x->setZero(prob_x.rows(), prob_x.cols());
  if (grad_y) grad_y->setZero(prob_y.rows(), prob_y.cols());
  std::size_t inside = 0;
  for (const auto& c : target) inside += c.v ? 1 : 0;
  IndexLoss out;
  if (inside == 0) {
    out.empty = true;
    return out;
  }
  const double norm = static_cast<double>(bits) * static_cast<double>(inside);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto& c = target[i];
    if (!c.v) continue;
    if (static_cast<int>(c.x.size()) < bits || static_cast<int>(c.y.size()) < bits) {
      throw InvalidArgument("target code is shorter than the supervised bits");
    }
    for (int k = 0; k < bits; ++k) {
      double dx = 0.0, dy = 0.0;
      out.l_x += bce(prob_x(i, k), c.x[k], &dx);
      out.l_y += bce(prob_y(i, k), c.y[k], &dy);
      if (grad_x) (*grad_x)(i, k) = dx / norm;
      if (grad_y) (*grad_y)(i, k) = dy / norm;
    }
  }
  out.l_x /= norm;
  out.l_y /= norm;
  return out;
}

double loss_mask(const FeatureMap& logits, const FeatureMap& target, FeatureMap* grad) {
  if (logits.channels != 2 || target.channels != 2 || logits.height != target.height ||
      logits.width != target.width) {
    throw InvalidArgument("mask logits and targets must both be 2 x H x W");
  }
  const Matrix s = nn::sigmoid(logits.data);
  const Matrix diff = s - target.data;
  if (nn::PatternTrace::active()) {
    for (Eigen::Index i = 0; i < diff.size(); ++i) nn::PatternTrace::mix(diff.data()[i] > 0 ? 1 : 2);
  }
  const double count = static_cast<double>(diff.size());
  if (grad) {
    *grad = FeatureMap::zeros(2, logits.height, logits.width);
    grad->data = diff.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); })
                     .cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())) /
                 count;
  }
  return diff.cwiseAbs().sum() / count;
}

}  // namespace gridpose
