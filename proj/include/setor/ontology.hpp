#pragma once

#include "setor/parameters.hpp"
#include "setor/tensor.hpp"

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace setor {

class OntologyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Medical ontology DAG. Leaves occupy ids [0, leaf_count) in declaration
/// order, ancestors occupy [leaf_count, leaf_count + ancestor_count) in name order.
struct OntologyDAG {
  int leaf_count = 0;
  int ancestor_count = 0;
  int root = -1;
  std::vector<std::vector<int>> parents;  // per node id, sorted ascending
  std::vector<int> category_of;           // per leaf
  std::vector<std::string> names;         // external ids, per node
  std::vector<std::string> leaf_labels;   // per leaf

  int node_count() const { return leaf_count + ancestor_count; }
  int category_count() const;
  std::vector<int> children_of(int node) const;
};

/// Parses the ontology text format:
///
///     ## free-form comment
///     #root <node>
///     #leaf <node>\t<label>\t<category>
///     <child>\t<parent>
///
/// Blank lines are ignored; any other line is rejected. `#root` is optional
/// when exactly one node has no parents.
OntologyDAG parse_ontology(std::istream& in);
OntologyDAG load_ontology(const std::filesystem::path& path);
void write_ontology(const OntologyDAG& dag, std::ostream& out);
void save_ontology(const OntologyDAG& dag, const std::filesystem::path& path);

/// Leaf followed by its distinct ancestors, breadth-first by depth, ties by id.
std::vector<int> ancestors(const OntologyDAG& dag, int leaf_id);

/// Attention parameters of the ontological embedding. Row convention:
/// score(i, j) = tanh([E_i, E_j] * proj + bias) * weight.
struct OntologyAttention {
  Tensor proj;    // 2d x a
  Tensor bias;    // 1 x a
  Tensor weight;  // a x 1
};

struct OntologyEmbedding {
  Tensor g;                     // leaf_count x d
  Matrix alpha;                 // leaf_count x max ancestor-set size, zero-padded
  std::vector<std::vector<int>> sets;  // the ancestor set used for each leaf
};

/// Precomputed ancestor sets, reused across forward passes.
class AncestorTable {
 public:
  explicit AncestorTable(const OntologyDAG& dag);
  const std::vector<std::vector<int>>& sets() const { return sets_; }
  std::size_t width() const { return width_; }

 private:
  std::vector<std::vector<int>> sets_;
  std::size_t width_ = 0;
};

/// G_i = sum_j alpha_ij E_j over j in the ancestor set of leaf i, alpha a
/// softmax of the attention score with the child embedding concatenated first.
OntologyEmbedding ontological_embedding(const Tensor& basic, const OntologyAttention& attn,
                                        const AncestorTable& table);

}  // namespace setor
