#pragma once

// Parameter storage, initialisation and the Adam optimizer shared by every
// trainable or frozen network in the toolkit.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apattack/autograd.hpp"
#include "apattack/rng.hpp"

namespace apattack::nn {

// Serialisable array: the unit of the checkpoint container.
struct NamedArray {
  std::string name;
  ag::Shape shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

using ArrayList = std::vector<NamedArray>;

struct Parameter {
  std::string name;
  ag::Var var;
};

// Ordered collection of named parameters. Values are kept exactly
// representable in 32-bit floats so a checkpoint round trip is lossless.
class ParameterList {
 public:
  ag::Var add(std::string name, ag::Tensor init);

  const std::vector<Parameter>& items() const { return items_; }
  std::vector<ag::Var> vars() const;
  const ag::Var& at(std::string_view name) const;
  std::size_t size() const { return items_.size(); }

  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }
  void zero_grad();

  ArrayList to_arrays(std::string_view prefix = {}) const;
  // Strict: every parameter must be present under prefix with its exact
  // shape; failures name the offending array.
  void load_arrays(const ArrayList& arrays, std::string_view prefix = {});

  // SHA-256 over names, shapes and values.
  std::string checksum() const;

 private:
  std::vector<Parameter> items_;
  bool trainable_ = false;
};

double round_to_float(double v);
void round_to_float(ag::Tensor& t);

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) scaled by gain.
ag::Tensor uniform_fan_in(Rng& rng, ag::Shape shape, std::size_t fan_in, double gain = 1.0);

struct AdamOptions {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ag::Var> params, AdamOptions options);

  // Applies one update from the gradients currently stored on the params,
  // then rounds each value to float precision.
  void step();
  void zero_grad();
  std::uint64_t steps() const { return t_; }

 private:
  std::vector<ag::Var> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace apattack::nn
