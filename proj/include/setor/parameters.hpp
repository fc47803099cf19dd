#pragma once

#include "setor/tensor.hpp"

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace setor {

/// Named learnable tensors, kept in registration order.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Matrix init);
  Tensor& uniform(const std::string& name, Index rows, Index cols, double bound, std::mt19937_64& rng);
  Tensor& zeros(const std::string& name, Index rows, Index cols);
  Tensor& ones(const std::string& name, Index rows, Index cols);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  /// Every tensor whose name starts with `prefix`.
  std::vector<Tensor> group(const std::string& prefix) const;

  void zero_grad();

  /// Deep copy of the current values (for best-epoch snapshots).
  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Adadelta with an optional learning-rate multiplier (1.0 is the classic rule).
struct AdadeltaState {
  double rho = 0.95;
  double eps = 1e-6;
  double learning_rate = 1.0;
  std::vector<Matrix> sq_grad;
  std::vector<Matrix> sq_update;
};

/// One update over `params`. Grads are left untouched; every parameter must
/// carry a gradient buffer (call zero_grad before the backward pass).
void adadelta_step(std::span<Tensor> params, AdadeltaState& state);

/// Text checkpoint: values are written as hexadecimal floats so a
/// save/load round trip is bit-exact.
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);

/// Loads into an existing store. Names must match and shapes must agree.
void load_checkpoint(ParameterStore& store, const std::filesystem::path& path);

/// Raw name -> matrix map, without a store to validate against.
std::map<std::string, Matrix> read_checkpoint(const std::filesystem::path& path);

}  // namespace setor
