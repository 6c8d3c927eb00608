#pragma once

// Small dense-layer toolkit with hand-written backward passes.
//
// Sequences are stored feature-major: a (dim x T) matrix, one column per time
// step. Parameters live in a ParameterSet and layers refer to them by index,
// so a model can be copied by value and gradients can be held in a separate
// buffer per worker.

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "tsg/random.hpp"

namespace tsg::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

class ParameterSet {
 public:
  int add(std::string name, int rows, int cols);

  Mat& operator[](int i) { return values_[i]; }
  const Mat& operator[](int i) const { return values_[i]; }

  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  int find(std::string_view name) const;  // -1 when absent
  long long scalar_count() const;

  std::vector<Mat> zeros_like() const;

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, int> index_;
};

using Gradients = std::vector<Mat>;

void set_zero(Gradients& g);
void add_into(Gradients& dst, const Gradients& src);
double squared_norm(const Gradients& g);

// ---- elementwise helpers --------------------------------------------------------

Mat sigmoid(const Mat& x);
double sigmoid(double x);
Mat relu(const Mat& x);
Mat relu_mask(const Mat& pre);  // 1 where pre > 0

/// Softmax over all entries of a vector.
Vec softmax(const Vec& x);
/// Softmax of each row of a matrix.
Mat softmax_rows(const Mat& x);

// ---- layers -------------------------------------------------------------------

/// y = W x + b on each column.
struct Linear {
  int weight = -1;
  int bias = -1;
  int in = 0;
  int out = 0;

  static Linear create(ParameterSet& params, const std::string& name, int in,
                       int out);

  Mat forward(const ParameterSet& p, const Mat& x) const;
  /// Accumulates dW, db and returns dx.
  Mat backward(const ParameterSet& p, const Mat& x, const Mat& dy,
               Gradients& g) const;
};

struct LstmCache {
  Mat x;      // in x T
  Mat gates;  // 4h x T, post-activation [i f g o]
  Mat cell;   // h x T
  Mat hidden; // h x T
};

/// Single-direction LSTM with zero initial state. When `reverse` is set the
/// recurrence runs from the last column to the first; outputs stay aligned
/// with the input columns.
struct Lstm {
  int w_input = -1;
  int w_hidden = -1;
  int bias = -1;
  int in = 0;
  int hidden = 0;
  bool reverse = false;

  static Lstm create(ParameterSet& params, const std::string& name, int in,
                     int hidden, bool reverse);

  Mat forward(const ParameterSet& p, const Mat& x, LstmCache& cache) const;
  Mat backward(const ParameterSet& p, const LstmCache& cache, const Mat& dh,
               Gradients& g) const;
};

struct BiLstmCache {
  LstmCache fwd;
  LstmCache bwd;
};

/// Concatenates forward and backward hidden states: output is 2h x T.
struct BiLstm {
  Lstm fwd;
  Lstm bwd;

  static BiLstm create(ParameterSet& params, const std::string& name, int in,
                       int hidden_per_direction);

  int out_dim() const { return fwd.hidden + bwd.hidden; }
  Mat forward(const ParameterSet& p, const Mat& x, BiLstmCache& cache) const;
  Mat backward(const ParameterSet& p, const BiLstmCache& cache, const Mat& dh,
               Gradients& g) const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor; LSTM forget-gate
/// biases start at 1.
void initialize(ParameterSet& params, Rng& rng);

}  // namespace tsg::nn
