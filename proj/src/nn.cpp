#include "apattack/nn.hpp"

#include <cmath>

#include "apattack/digest.hpp"
#include "apattack/errors.hpp"

namespace apattack::nn {

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_to_float(ag::Tensor& t) {
  for (auto& v : t.data) v = round_to_float(v);
}

ag::Var ParameterList::add(std::string name, ag::Tensor init) {
  for (const auto& p : items_) {
    if (p.name == name) throw InputError("duplicate parameter name '" + name + "'");
  }
  round_to_float(init);
  auto var = ag::Var::leaf(std::move(init), trainable_);
  items_.push_back({std::move(name), var});
  return var;
}

std::vector<ag::Var> ParameterList::vars() const {
  std::vector<ag::Var> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.var);
  return out;
}

const ag::Var& ParameterList::at(std::string_view name) const {
  for (const auto& p : items_) {
    if (p.name == name) return p.var;
  }
  throw InputError("no parameter named '" + std::string(name) + "'");
}

void ParameterList::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (auto& p : items_) p.var.set_requires_grad(trainable);
}

void ParameterList::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

ArrayList ParameterList::to_arrays(std::string_view prefix) const {
  ArrayList out;
  out.reserve(items_.size());
  for (const auto& p : items_) {
    NamedArray a;
    a.name = std::string(prefix) + p.name;
    a.shape = p.var.shape();
    a.values.reserve(p.var.numel());
    for (double v : p.var.value().data) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

void ParameterList::load_arrays(const ArrayList& arrays, std::string_view prefix) {
  for (auto& p : items_) {
    const std::string full = std::string(prefix) + p.name;
    const NamedArray* found = nullptr;
    for (const auto& a : arrays) {
      if (a.name == full) {
        found = &a;
        break;
      }
    }
    if (found == nullptr) throw LoadError("checkpoint is missing array '" + full + "'");
    if (found->shape != p.var.shape()) {
      throw LoadError("array '" + full + "' has shape " + ag::shape_string(found->shape) + ", expected " +
                      ag::shape_string(p.var.shape()));
    }
    auto& dst = p.var.mutable_value().data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(found->values[i]);
  }
  // Arrays under our prefix that we did not consume are a garbled container.
  for (const auto& a : arrays) {
    if (a.name.compare(0, prefix.size(), prefix) != 0) continue;
    bool known = false;
    for (const auto& p : items_) known = known || (std::string(prefix) + p.name == a.name);
    if (!known) throw LoadError("unexpected array '" + a.name + "' in checkpoint");
  }
}

std::string ParameterList::checksum() const {
  Sha256 h;
  for (const auto& p : items_) {
    h.update(p.name);
    for (auto d : p.var.shape()) {
      const auto dim = static_cast<std::uint64_t>(d);
      h.update(&dim, sizeof dim);
    }
    const auto& data = p.var.value().data;
    h.update(data.data(), data.size() * sizeof(double));
  }
  return h.hex();
}

ag::Tensor uniform_fan_in(Rng& rng, ag::Shape shape, std::size_t fan_in, double gain) {
  ag::Tensor t(std::move(shape));
  const double bound = gain / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Adam::Adam(std::vector<ag::Var> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.learning_rate >= 0.0)) throw ConfigError("Adam learning rate must be >= 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto grad = params_[k].grad();
    if (grad.empty()) continue;
    auto& value = params_[k].mutable_value().data;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * grad[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] = round_to_float(value[i] - options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon));
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace apattack::nn
