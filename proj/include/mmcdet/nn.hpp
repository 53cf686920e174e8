#pragma once

// Named parameter storage, deterministic initialisation and the optimiser.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mmcdet/autograd.hpp"
#include "mmcdet/rng.hpp"

namespace mmcdet::nn {

using ag::Matrix;
using ag::Parameter;

// Owns parameters with stable addresses, iterated in insertion order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix value) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  Parameter& get(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter '" + name + "'");
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter*> all() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

// Gaussian init scaled by 1/sqrt(fan_in); the stream depends only on
// (seed, name) so adding a parameter never perturbs the others.
inline Matrix init_normal(std::uint64_t seed, const std::string& name, Eigen::Index rows, Eigen::Index cols,
                          double stddev) {
  Rng rng(derive_seed(seed, fnv1a(name)));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  }
  return m;
}

inline Matrix init_linear(std::uint64_t seed, const std::string& name, Eigen::Index fan_in, Eigen::Index fan_out) {
  return init_normal(seed, name, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

struct OptimizerConfig {
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  double decay = 0.99;   // squared-gradient averaging
  double epsilon = 1e-8;
  double clip_norm = 5.0;  // global gradient norm clip; <= 0 disables
};

// RMSProp without momentum: fixed step size scaled per coordinate by a running
// RMS of past gradients.
class RmsProp {
 public:
  explicit RmsProp(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }

  void step(ParameterStore& store) {
    double sq = 0.0;
    for (Parameter* p : store.all()) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    for (Parameter* p : store.all()) {
      Matrix& v = state_[p->name];
      if (v.size() == 0) v = Matrix::Zero(p->value.rows(), p->value.cols());
      Matrix g = p->grad * clip;
      if (cfg_.weight_decay > 0) g += cfg_.weight_decay * p->value;
      v = cfg_.decay * v + (1.0 - cfg_.decay) * g.cwiseProduct(g);
      p->value.array() -= cfg_.learning_rate * g.array() / (v.array().sqrt() + cfg_.epsilon);
    }
    ++steps_;
  }

  std::map<std::string, Matrix>& state() { return state_; }
  const std::map<std::string, Matrix>& state() const { return state_; }
  long steps() const { return steps_; }
  void set_steps(long s) { steps_ = s; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Matrix> state_;
  long steps_ = 0;
};

}  // namespace mmcdet::nn
