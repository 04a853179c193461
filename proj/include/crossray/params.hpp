#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crossray/ops.hpp"

namespace crossray {

/// A trainable tensor and its Adam state.
template <std::floating_point T>
struct Param {
  Tensor<T> value;
  Tensor<T> first_moment;
  Tensor<T> second_moment;
  std::int64_t step = 0;
};

/// Name-addressed tensors handed to network code; either plain values
/// (inference) or tape leaves (training).
template <std::floating_point T>
class Weights {
 public:
  using value_type = T;

  void set(const std::string& name, Tensor<T> t) { map_[name] = std::move(t); }
  bool contains(const std::string& name) const { return map_.count(name) != 0; }
  const Tensor<T>& operator[](const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  const std::map<std::string, Tensor<T>>& items() const noexcept { return map_; }

 private:
  std::map<std::string, Tensor<T>> map_;
};

template <std::floating_point T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> value) {
    Param<T> p;
    p.first_moment = Tensor<T>(value.shape());
    p.second_moment = Tensor<T>(value.shape());
    p.value = value.detach();
    params_[name] = std::move(p);
  }
  void add_param(const std::string& name, Param<T> p) {
    if (p.first_moment.shape() != p.value.shape() || p.second_moment.shape() != p.value.shape()) {
      throw ShapeError("param '" + name + "': Adam moments must match parameter shape " + shape_str(p.value.shape()));
    }
    params_[name] = std::move(p);
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Param<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  Param<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& value(const std::string& name) const { return at(name).value; }
  void set_value(const std::string& name, Tensor<T> v) {
    auto& p = at(name);
    if (v.shape() != p.value.shape()) {
      throw ShapeError("param '" + name + "': new value " + shape_str(v.shape()) + " vs " + shape_str(p.value.shape()));
    }
    p.value = v.detach();
  }
  void erase_prefix(const std::string& prefix) {
    std::erase_if(params_, [&](const auto& kv) { return kv.first.rfind(prefix, 0) == 0; });
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.numel();
    return n;
  }
  const std::map<std::string, Param<T>>& items() const noexcept { return params_; }

  /// Plain (untracked) view for inference.
  Weights<T> weights() const {
    Weights<T> w;
    for (const auto& [k, p] : params_) w.set(k, p.value);
    return w;
  }

  /// Registers every parameter accepted by `filter` as a leaf on `tape`;
  /// the rest enter the graph as constants.
  Weights<T> bind(Tape<T>& tape, const std::function<bool(const std::string&)>& filter = {}) const {
    Weights<T> w;
    for (const auto& [k, p] : params_) {
      w.set(k, (!filter || filter(k)) ? tape.leaf(p.value) : p.value);
    }
    return w;
  }

  template <std::floating_point U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    auto conv = [](const Tensor<T>& t) {
      std::vector<U> v(t.values().begin(), t.values().end());
      return Tensor<U>(t.shape(), std::move(v));
    };
    for (const auto& [k, p] : params_) {
      Param<U> q{conv(p.value), conv(p.first_moment), conv(p.second_moment), p.step};
      out.add_param(k, std::move(q));
    }
    return out;
  }

 private:
  std::map<std::string, Param<T>> params_;
};

/// Gradients keyed by parameter name.
template <std::floating_point T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Maps leaf-node gradients back to parameter names.
template <std::floating_point T>
Gradients<T> named_gradients(const Weights<T>& bound, const std::map<NodeId, Tensor<T>>& leaf_grads) {
  Gradients<T> out;
  for (const auto& [name, t] : bound.items()) {
    if (!t.tracked()) continue;
    auto it = leaf_grads.find(t.node());
    if (it != leaf_grads.end()) out.emplace(name, it->second);
  }
  return out;
}

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam step with bias correction on every parameter present in `grads`.
template <std::floating_point T>
void adam_update(ParamSet<T>& params, const Gradients<T>& grads, const AdamOptions& opt) {
  if (!(opt.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    if (g.shape() != p.value.shape()) {
      throw ShapeError("adam: gradient " + shape_str(g.shape()) + " does not match parameter '" + name + "' " +
                       shape_str(p.value.shape()));
    }
    p.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step));
    auto x = p.value.clone();
    auto m = p.first_moment.clone();
    auto v = p.second_moment.clone();
    auto xs = x.mutable_values();
    auto ms = m.mutable_values();
    auto vs = v.mutable_values();
    auto gs = g.values();
    const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      ms[i] = b1 * ms[i] + (T(1) - b1) * gs[i];
      vs[i] = b2 * vs[i] + (T(1) - b2) * gs[i] * gs[i];
      const double mhat = static_cast<double>(ms[i]) / bc1;
      const double vhat = static_cast<double>(vs[i]) / bc2;
      xs[i] = static_cast<T>(static_cast<double>(xs[i]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
    p.value = std::move(x);
    p.first_moment = std::move(m);
    p.second_moment = std::move(v);
  }
}

/// He-uniform weights: U(-b, b) with b = sqrt(6 / fan_in).
template <std::floating_point T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0;
  std::size_t coords_checked = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;
  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
  }
  double max_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_relative_error);
    return m;
  }
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  std::size_t max_coords = 256;
  std::uint64_t seed = 0;
};

using ScalarFn = std::function<Tensor<double>(const Weights<double>&)>;

/// Compares reverse-mode gradients of `f` against central differences
/// (step 1e-5 * max(1, |x|)) on up to `max_coords` seeded coordinates per
/// parameter. Error per parameter is max |analytic - numeric| over the
/// checked coordinates, relative to the larger of the two gradients' max
/// magnitudes there, floored at 1e-6 max(1, |f|) so parameters with an
/// identically zero gradient compare differencing noise to a noise scale.
inline GradCheckReport grad_check(const ScalarFn& f, const ParamSet<double>& point, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  Gradients<double> analytic;
  double f0 = 0;
  {
    Tape<double> tape;
    auto bound = point.bind(tape);
    auto loss = f(bound);
    if (loss.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
    f0 = loss.item();
    if (loss.tracked()) analytic = named_gradients(bound, backprop(tape, loss));
  }
  std::mt19937_64 rng(opt.seed);
  ParamSet<double> work = point;
  for (const auto& name : point.names()) {
    const auto& base = point.value(name);
    const std::size_t n = base.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords);
    }
    auto a_it = analytic.find(name);
    double max_diff = 0, scale = 0;
    for (auto i : coords) {
      const double x0 = base[i];
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      auto eval = [&](double x) {
        auto t = base.clone();
        t.mutable_values()[i] = x;
        work.set_value(name, t);
        return f(work.weights()).item();
      };
      const double numeric = (eval(x0 + h) - eval(x0 - h)) / (2 * h);
      const double an = a_it == analytic.end() ? 0.0 : a_it->second[i];
      max_diff = std::max(max_diff, std::abs(an - numeric));
      scale = std::max({scale, std::abs(an), std::abs(numeric)});
    }
    work.set_value(name, base);
    GradCheckEntry e;
    e.name = name;
    e.coords_checked = coords.size();
    scale = std::max(scale, 1e-6 * std::max(1.0, std::abs(f0)));
    e.max_relative_error = max_diff / scale;
    e.passed = e.max_relative_error <= opt.tolerance;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace crossray
