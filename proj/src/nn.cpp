#include "tsg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tsg::nn {

int ParameterSet::add(std::string name, int rows, int cols) {
  if (index_.contains(name)) {
    throw std::logic_error("duplicate parameter " + name);
  }
  const int id = size();
  index_[name] = id;
  names_.push_back(std::move(name));
  values_.push_back(Mat::Zero(rows, cols));
  return id;
}

int ParameterSet::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? -1 : it->second;
}

long long ParameterSet::scalar_count() const {
  long long n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::vector<Mat> ParameterSet::zeros_like() const {
  std::vector<Mat> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.push_back(Mat::Zero(v.rows(), v.cols()));
  return out;
}

void set_zero(Gradients& g) {
  for (auto& m : g) m.setZero();
}

void add_into(Gradients& dst, const Gradients& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

double squared_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& m : g) s += m.squaredNorm();
  return s;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Mat sigmoid(const Mat& x) {
  return x.unaryExpr([](double v) { return sigmoid(v); });
}

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_mask(const Mat& pre) {
  return (pre.array() > 0.0).cast<double>().matrix();
}

Vec softmax(const Vec& x) {
  const double m = x.maxCoeff();
  // std::exp maps -inf to exactly 0; the vectorized path leaves a denormal.
  Vec e = (x.array() - m).unaryExpr([](double v) { return std::exp(v); }).matrix();
  return e / e.sum();
}

Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    RowVec e = (x.row(r).array() - m).unaryExpr([](double v) { return std::exp(v); }).matrix();
    out.row(r) = e / e.sum();
  }
  return out;
}

// ---- Linear -------------------------------------------------------------------

Linear Linear::create(ParameterSet& params, const std::string& name, int in,
                      int out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = params.add(name + ".weight", out, in);
  l.bias = params.add(name + ".bias", out, 1);
  return l;
}

Mat Linear::forward(const ParameterSet& p, const Mat& x) const {
  Mat y = p[weight] * x;
  y.colwise() += p[bias].col(0);
  return y;
}

Mat Linear::backward(const ParameterSet& p, const Mat& x, const Mat& dy,
                     Gradients& g) const {
  g[weight].noalias() += dy * x.transpose();
  g[bias].col(0) += dy.rowwise().sum();
  return p[weight].transpose() * dy;
}

// ---- LSTM -----------------------------------------------------------------------

Lstm Lstm::create(ParameterSet& params, const std::string& name, int in,
                  int hidden, bool reverse) {
  Lstm l;
  l.in = in;
  l.hidden = hidden;
  l.reverse = reverse;
  l.w_input = params.add(name + ".w_input", 4 * hidden, in);
  l.w_hidden = params.add(name + ".w_hidden", 4 * hidden, hidden);
  l.bias = params.add(name + ".bias", 4 * hidden, 1);
  return l;
}

Mat Lstm::forward(const ParameterSet& p, const Mat& x,
                  LstmCache& cache) const {
  const int steps = static_cast<int>(x.cols());
  const int h = hidden;
  cache.x = x;
  cache.gates.resize(4 * h, steps);
  cache.cell.resize(h, steps);
  cache.hidden.resize(h, steps);

  Mat pre = p[w_input] * x;
  pre.colwise() += p[bias].col(0);

  Vec h_prev = Vec::Zero(h);
  Vec c_prev = Vec::Zero(h);
  const Mat& wh = p[w_hidden];
  for (int s = 0; s < steps; ++s) {
    const int t = reverse ? steps - 1 - s : s;
    Vec a = pre.col(t);
    a.noalias() += wh * h_prev;
    auto gates = cache.gates.col(t);
    for (int k = 0; k < h; ++k) {
      gates(k) = sigmoid(a(k));
      gates(h + k) = sigmoid(a(h + k));
      gates(2 * h + k) = std::tanh(a(2 * h + k));
      gates(3 * h + k) = sigmoid(a(3 * h + k));
    }
    for (int k = 0; k < h; ++k) {
      const double c = gates(h + k) * c_prev(k) + gates(k) * gates(2 * h + k);
      cache.cell(k, t) = c;
      cache.hidden(k, t) = gates(3 * h + k) * std::tanh(c);
    }
    h_prev = cache.hidden.col(t);
    c_prev = cache.cell.col(t);
  }
  return cache.hidden;
}

Mat Lstm::backward(const ParameterSet& p, const LstmCache& cache,
                   const Mat& dh, Gradients& g) const {
  const int steps = static_cast<int>(cache.x.cols());
  const int h = hidden;
  Mat dpre(4 * h, steps);
  Vec dh_next = Vec::Zero(h);
  Vec dc_next = Vec::Zero(h);
  const Mat& wh = p[w_hidden];

  for (int s = steps - 1; s >= 0; --s) {
    const int t = reverse ? steps - 1 - s : s;
    const int prev = reverse ? t + 1 : t - 1;  // previous step in recurrence
    const bool has_prev = s > 0;
    const auto gates = cache.gates.col(t);
    Vec dht = dh.col(t) + dh_next;
    for (int k = 0; k < h; ++k) {
      const double c = cache.cell(k, t);
      const double tc = std::tanh(c);
      const double i = gates(k), f = gates(h + k), gg = gates(2 * h + k),
                   o = gates(3 * h + k);
      const double c_prev = has_prev ? cache.cell(k, prev) : 0.0;
      const double dc = dc_next(k) + dht(k) * o * (1.0 - tc * tc);
      dpre(k, t) = dc * gg * i * (1.0 - i);
      dpre(h + k, t) = dc * c_prev * f * (1.0 - f);
      dpre(2 * h + k, t) = dc * i * (1.0 - gg * gg);
      dpre(3 * h + k, t) = dht(k) * tc * o * (1.0 - o);
      dc_next(k) = dc * f;
    }
    dh_next.noalias() = wh.transpose() * dpre.col(t);
    if (has_prev) {
      g[w_hidden].noalias() += dpre.col(t) * cache.hidden.col(prev).transpose();
    }
  }
  g[w_input].noalias() += dpre * cache.x.transpose();
  g[bias].col(0) += dpre.rowwise().sum();
  return p[w_input].transpose() * dpre;
}

// ---- BiLSTM ----------------------------------------------------------------------

BiLstm BiLstm::create(ParameterSet& params, const std::string& name, int in,
                      int hidden_per_direction) {
  BiLstm b;
  b.fwd = Lstm::create(params, name + ".fwd", in, hidden_per_direction, false);
  b.bwd = Lstm::create(params, name + ".bwd", in, hidden_per_direction, true);
  return b;
}

Mat BiLstm::forward(const ParameterSet& p, const Mat& x,
                    BiLstmCache& cache) const {
  Mat out(out_dim(), x.cols());
  out.topRows(fwd.hidden) = fwd.forward(p, x, cache.fwd);
  out.bottomRows(bwd.hidden) = bwd.forward(p, x, cache.bwd);
  return out;
}

Mat BiLstm::backward(const ParameterSet& p, const BiLstmCache& cache,
                     const Mat& dh, Gradients& g) const {
  Mat dx = fwd.backward(p, cache.fwd, dh.topRows(fwd.hidden), g);
  dx += bwd.backward(p, cache.bwd, dh.bottomRows(bwd.hidden), g);
  return dx;
}

void initialize(ParameterSet& params, Rng& rng) {
  for (int i = 0; i < params.size(); ++i) {
    Mat& m = params[i];
    const std::string& name = params.name(i);
    double fan_in = static_cast<double>(m.cols());
    bool lstm_bias = false;
    if (name.ends_with(".bias")) {
      const std::string stem = name.substr(0, name.size() - 5);
      if (int w = params.find(stem + ".weight"); w >= 0) {
        fan_in = static_cast<double>(params[w].cols());
      } else if (int wh = params.find(stem + ".w_hidden"); wh >= 0) {
        fan_in = static_cast<double>(params[wh].cols());
        lstm_bias = true;
      }
    } else if (name.ends_with(".w_input")) {
      // Same bound as the recurrent weights, as in common LSTM defaults.
      const std::string stem = name.substr(0, name.size() - 8);
      if (int wh = params.find(stem + ".w_hidden"); wh >= 0) {
        fan_in = static_cast<double>(params[wh].cols());
      }
    }
    const double bound = 1.0 / std::sqrt(std::max(1.0, fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
    if (lstm_bias) {
      const Eigen::Index h = m.rows() / 4;
      m.middleRows(h, h).setOnes();
    }
  }
}

}  // namespace tsg::nn
