#include "setor/parameters.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace setor {

Tensor& ParameterStore::add(const std::string& name, Matrix init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(Tensor::parameter(std::move(init)));
  return tensors_.back();
}

Tensor& ParameterStore::uniform(const std::string& name, Index rows, Index cols, double bound,
                                std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return add(name, std::move(m));
}

Tensor& ParameterStore::zeros(const std::string& name, Index rows, Index cols) {
  return add(name, Matrix::Zero(rows, cols));
}

Tensor& ParameterStore::ones(const std::string& name, Index rows, Index cols) {
  return add(name, Matrix::Ones(rows, cols));
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return tensors_[it->second];
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return tensors_[it->second];
}

std::vector<Tensor> ParameterStore::group(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].rfind(prefix, 0) == 0) out.push_back(tensors_[i]);
  }
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

std::vector<Matrix> ParameterStore::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(tensors_.size());
  for (const auto& t : tensors_) out.push_back(t.value());
  return out;
}

void ParameterStore::restore(const std::vector<Matrix>& values) {
  if (values.size() != tensors_.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) tensors_[i].mutable_value() = values[i];
}

void adadelta_step(std::span<Tensor> params, AdadeltaState& state) {
  if (state.sq_grad.size() != params.size()) {
    state.sq_grad.clear();
    state.sq_update.clear();
    for (const auto& p : params) {
      state.sq_grad.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.sq_update.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) throw std::logic_error("adadelta_step: parameter " + std::to_string(i) + " has no gradient");
    auto g = p.grad().array();
    auto acc_g = state.sq_grad[i].array();
    auto acc_u = state.sq_update[i].array();
    acc_g = state.rho * acc_g + (1.0 - state.rho) * g.square();
    Matrix update = (-((acc_u + state.eps).sqrt() / (acc_g + state.eps).sqrt()) * g).matrix();
    acc_u = state.rho * acc_u + (1.0 - state.rho) * update.array().square();
    p.mutable_value() += state.learning_rate * update;
  }
}

// Format:
//   setor-checkpoint 1
//   <count>
//   <name> <rows> <cols>
//   <rows*cols hexfloat values, one row per line>
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << "setor-checkpoint 1\n" << store.size() << "\n";
  out << std::hexfloat;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Matrix& m = store.tensors()[i].value();
    out << store.names()[i] << " " << m.rows() << " " << m.cols() << "\n";
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << m(r, c);
      out << "\n";
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

std::map<std::string, Matrix> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  in >> magic >> version >> count;
  if (magic != "setor-checkpoint" || version != 1) throw std::runtime_error("not a setor checkpoint: " + path.string());
  std::map<std::string, Matrix> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::string name;
    Index rows = 0, cols = 0;
    if (!(in >> name >> rows >> cols) || rows < 0 || cols < 0) {
      throw std::runtime_error("malformed checkpoint header for entry " + std::to_string(k));
    }
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
      std::string token;
      if (!(in >> token)) throw std::runtime_error("truncated checkpoint at " + name);
      char* end = nullptr;
      m.data()[i] = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0') throw std::runtime_error("bad value in checkpoint at " + name);
    }
    out.emplace(name, std::move(m));
  }
  return out;
}

void load_checkpoint(ParameterStore& store, const std::filesystem::path& path) {
  auto values = read_checkpoint(path);
  if (values.size() != store.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(values.size()) + " tensors, model expects " +
                             std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& name = store.names()[i];
    auto it = values.find(name);
    if (it == values.end()) throw std::runtime_error("checkpoint missing parameter " + name);
    Tensor& t = store.tensors()[i];
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw std::runtime_error("dimension mismatch for " + name + ": checkpoint " + std::to_string(it->second.rows()) +
                               "x" + std::to_string(it->second.cols()) + ", model " + std::to_string(t.rows()) + "x" +
                               std::to_string(t.cols()));
    }
    t.mutable_value() = it->second;
  }
}

}  // namespace setor
