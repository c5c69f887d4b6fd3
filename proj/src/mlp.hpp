#pragma once

// Small dense network (tanh hidden layers, linear output) with Adam.
// Batches are row-major: one sample per row.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace divergent::detail {

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> sizes, std::mt19937_64& rng) : sizes_(std::move(sizes)) {
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const double s = std::sqrt(1.0 / sizes_[l]);
      std::normal_distribution<double> n(0.0, s);
      Eigen::MatrixXd w(sizes_[l], sizes_[l + 1]);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
      w_.push_back(w);
      b_.push_back(Eigen::RowVectorXd::Zero(sizes_[l + 1]));
    }
  }

  const std::vector<int>& sizes() const { return sizes_; }
  std::size_t layers() const { return w_.size(); }
  std::vector<Eigen::MatrixXd>& weights() { return w_; }
  std::vector<Eigen::RowVectorXd>& biases() { return b_; }
  const std::vector<Eigen::MatrixXd>& weights() const { return w_; }
  const std::vector<Eigen::RowVectorXd>& biases() const { return b_; }

  struct Tape {
    std::vector<Eigen::MatrixXd> act;  // act[0] = input, act[l+1] = output of layer l
  };

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Tape* tape = nullptr) const {
    Eigen::MatrixXd h = x;
    if (tape) tape->act = {x};
    for (std::size_t l = 0; l < w_.size(); ++l) {
      Eigen::MatrixXd z = h * w_[l];
      z.rowwise() += b_[l];
      if (l + 1 < w_.size()) z = z.array().tanh().matrix();
      h = std::move(z);
      if (tape) tape->act.push_back(h);
    }
    return h;
  }

  struct Grad {
    std::vector<Eigen::MatrixXd> w;
    std::vector<Eigen::RowVectorXd> b;
  };

  Grad backward(const Tape& tape, Eigen::MatrixXd d_out) const {
    Grad g;
    g.w.resize(w_.size());
    g.b.resize(w_.size());
    Eigen::MatrixXd delta = std::move(d_out);
    for (std::size_t l = w_.size(); l-- > 0;) {
      if (l + 1 < w_.size())
        delta = (delta.array() * (1.0 - tape.act[l + 1].array().square())).matrix();
      g.w[l] = tape.act[l].transpose() * delta;
      g.b[l] = delta.colwise().sum();
      if (l > 0) delta = delta * w_[l].transpose();
    }
    return g;
  }

 private:
  std::vector<int> sizes_;
  std::vector<Eigen::MatrixXd> w_;
  std::vector<Eigen::RowVectorXd> b_;
};

class Adam {
 public:
  explicit Adam(const Mlp& net, double lr = 1e-3) : lr_(lr) {
    for (std::size_t l = 0; l < net.layers(); ++l) {
      mw_.push_back(Eigen::MatrixXd::Zero(net.weights()[l].rows(), net.weights()[l].cols()));
      vw_.push_back(mw_.back());
      mb_.push_back(Eigen::RowVectorXd::Zero(net.biases()[l].size()));
      vb_.push_back(mb_.back());
    }
  }

  void step(Mlp& net, const Mlp::Grad& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t l = 0; l < net.layers(); ++l) {
      mw_[l] = b1_ * mw_[l] + (1 - b1_) * g.w[l];
      vw_[l] = b2_ * vw_[l] + (1 - b2_) * g.w[l].cwiseProduct(g.w[l]);
      net.weights()[l].array() -= lr_ * (mw_[l].array() / c1) / ((vw_[l].array() / c2).sqrt() + eps_);
      mb_[l] = b1_ * mb_[l] + (1 - b1_) * g.b[l];
      vb_[l] = b2_ * vb_[l] + (1 - b2_) * g.b[l].cwiseProduct(g.b[l]);
      net.biases()[l].array() -= lr_ * (mb_[l].array() / c1) / ((vb_[l].array() / c2).sqrt() + eps_);
    }
  }

  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
  std::vector<Eigen::MatrixXd> mw_, vw_;
  std::vector<Eigen::RowVectorXd> mb_, vb_;
};

}  // namespace divergent::detail
