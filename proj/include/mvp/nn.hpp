#pragma once
// Named parameter storage, graph binding, initialization and the Adam
// optimizer shared by the reward model and the toy diffusion model.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mvp/tensor.hpp"

namespace mvp {

using Rng = std::mt19937_64;

/// Ordered name -> tensor map. Ordering is lexicographic so iteration,
/// checkpoints and optimizer state are deterministic.
class ParamStore {
 public:
  Matrix& add(const std::string& name, Matrix m) {
    auto [it, inserted] = tensors_.insert_or_assign(name, std::move(m));
    return it->second;
  }
  [[nodiscard]] bool contains(const std::string& name) const { return tensors_.contains(name); }
  Matrix& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  [[nodiscard]] const Matrix& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  [[nodiscard]] const std::map<std::string, Matrix>& tensors() const { return tensors_; }
  std::map<std::string, Matrix>& tensors() { return tensors_; }

  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : tensors_) n += m.size();
    return n;
  }
  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : tensors_) out.push_back(k);
    return out;
  }
  bool operator==(const ParamStore&) const = default;

 private:
  std::map<std::string, Matrix> tensors_;
};

/// One forward pass worth of graph leaves for a ParamStore.
///
/// Parameters accepted by `trainable` become gradient-tracking leaves; the
/// rest are constants. After `ad::backward`, `gradients()` collects the
/// accumulated gradient of every tracked leaf.
class Bindings {
 public:
  Bindings(const ParamStore& store, std::function<bool(const std::string&)> trainable)
      : store_(&store), trainable_(std::move(trainable)) {}

  /// All parameters as constants.
  static Bindings frozen(const ParamStore& store) {
    return Bindings(store, [](const std::string&) { return false; });
  }
  /// All parameters tracked.
  static Bindings all(const ParamStore& store) {
    return Bindings(store, [](const std::string&) { return true; });
  }

  const ad::Var& operator[](const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Matrix& m = store_->at(name);
    ad::Var v = (trainable_ && trainable_(name)) ? ad::parameter(m) : ad::constant(m);
    return vars_.emplace(name, std::move(v)).first->second;
  }

  [[nodiscard]] std::map<std::string, Matrix> gradients() const {
    std::map<std::string, Matrix> out;
    for (const auto& [name, v] : vars_) {
      if (!v.requires_grad()) continue;
      Matrix g = v.grad();
      if (g.size() != v.value().size()) g = Matrix(v.rows(), v.cols(), 0.0);
      out.emplace(name, std::move(g));
    }
    return out;
  }

 private:
  const ParamStore* store_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, ad::Var> vars_;
};

inline Matrix randn(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (auto& x : m.data) x = dist(rng);
  return m;
}

/// Xavier-style normal init for a (fan_in x fan_out) weight.
inline Matrix init_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng, double gain = 1.0) {
  return randn(fan_in, fan_out, gain * std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), rng);
}

inline void add_linear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                       double gain = 1.0) {
  ps.add(prefix + ".w", init_weight(in, out, rng, gain));
  ps.add(prefix + ".b", Matrix(1, out, 0.0));
}

inline void add_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".gain", Matrix(1, dim, 1.0));
  ps.add(prefix + ".bias", Matrix(1, dim, 0.0));
}

inline ad::Var apply_linear(Bindings& b, const std::string& prefix, const ad::Var& x) {
  return ad::linear(x, b[prefix + ".w"], b[prefix + ".b"]);
}

inline ad::Var apply_layer_norm(Bindings& b, const std::string& prefix, const ad::Var& x) {
  return ad::layer_norm(x, b[prefix + ".gain"], b[prefix + ".bias"]);
}

// Learning-rate schedules ----------------------------------------------------

enum class Schedule { constant, cosine };

/// Linear warm-up over `warmup` steps, then constant or cosine annealing to 0
/// at `total` steps.
inline double scheduled_lr(double base, Schedule schedule, std::size_t step, std::size_t total,
                           std::size_t warmup = 0) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (schedule == Schedule::constant || total <= warmup) return base;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, total - warmup)));
  return 0.5 * base * (1.0 + std::cos(M_PI * progress));
}

/// Adam with bias correction. State is keyed by parameter name, so only the
/// parameters that ever receive a gradient are touched.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& params, const std::map<std::string, Matrix>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Matrix& p = params.at(name);
      auto& [m, v] = state_[name];
      if (m.size() != p.size()) m = Matrix(p.rows, p.cols, 0.0), v = Matrix(p.rows, p.cols, 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g.data[i];
        v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
        p.data[i] -= lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + eps_);
      }
    }
  }

  [[nodiscard]] std::uint64_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> state_;
};

/// Sum gradient maps in place (acc += g).
inline void accumulate(std::map<std::string, Matrix>& acc, const std::map<std::string, Matrix>& g, double w = 1.0) {
  for (const auto& [name, m] : g) {
    auto it = acc.find(name);
    if (it == acc.end()) {
      Matrix scaled = m;
      for (auto& x : scaled.data) x *= w;
      acc.emplace(name, std::move(scaled));
    } else {
      for (std::size_t i = 0; i < m.size(); ++i) it->second.data[i] += w * m.data[i];
    }
  }
}

}  // namespace mvp
