#include "setor/ontology.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>

namespace setor {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, '\t')) out.push_back(field);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

[[noreturn]] void fail(std::size_t line_no, const std::string& what) {
  throw OntologyError("ontology line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

int OntologyDAG::category_count() const {
  int mx = -1;
  for (int c : category_of) mx = std::max(mx, c);
  return mx + 1;
}

std::vector<int> OntologyDAG::children_of(int node) const {
  std::vector<int> out;
  for (int i = 0; i < node_count(); ++i) {
    if (std::find(parents[i].begin(), parents[i].end(), node) != parents[i].end()) out.push_back(i);
  }
  return out;
}

OntologyDAG parse_ontology(std::istream& in) {
  struct LeafDecl {
    std::string id, label;
    int category;
  };
  std::vector<LeafDecl> leaves;
  std::vector<std::pair<std::string, std::string>> edges;
  std::string root_name;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("##", 0) == 0) continue;
    auto fields = split_tabs(line);
    if (fields[0] == "#leaf") {
      if (fields.size() != 4 || fields[1].empty()) fail(line_no, "expected #leaf<TAB>id<TAB>label<TAB>category");
      int cat = 0;
      try {
        std::size_t used = 0;
        cat = std::stoi(fields[3], &used);
        if (used != fields[3].size() || cat < 0) throw std::invalid_argument("category");
      } catch (const std::exception&) {
        fail(line_no, "bad category '" + fields[3] + "'");
      }
      leaves.push_back({fields[1], fields[2], cat});
    } else if (fields[0] == "#root") {
      if (fields.size() != 2 || fields[1].empty()) fail(line_no, "expected #root<TAB>id");
      if (!root_name.empty()) fail(line_no, "duplicate #root");
      root_name = fields[1];
    } else if (!fields[0].empty() && fields[0][0] == '#') {
      fail(line_no, "unknown directive '" + fields[0] + "'");
    } else {
      if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
        fail(line_no, "expected child<TAB>parent");
      }
      edges.emplace_back(fields[0], fields[1]);
    }
  }

  OntologyDAG dag;
  std::map<std::string, int> id_of;
  for (const auto& leaf : leaves) {
    if (!id_of.emplace(leaf.id, static_cast<int>(dag.names.size())).second) {
      throw OntologyError("leaf declared twice: " + leaf.id);
    }
    dag.names.push_back(leaf.id);
    dag.leaf_labels.push_back(leaf.label);
    dag.category_of.push_back(leaf.category);
  }
  dag.leaf_count = static_cast<int>(leaves.size());
  if (dag.leaf_count == 0) throw OntologyError("ontology declares no leaves");

  // Ancestor ids follow name order, so they do not depend on line order and
  // a write/parse round trip keeps every id.
  std::set<std::string> ancestor_names;
  for (const auto& [child, parent] : edges) {
    for (const auto* name : {&child, &parent}) {
      if (!id_of.count(*name)) ancestor_names.insert(*name);
    }
  }
  if (!root_name.empty() && !id_of.count(root_name)) ancestor_names.insert(root_name);
  for (const auto& name : ancestor_names) {
    id_of.emplace(name, static_cast<int>(dag.names.size()));
    dag.names.push_back(name);
  }
  std::vector<std::pair<int, int>> links;
  for (const auto& [child, parent] : edges) links.emplace_back(id_of.at(child), id_of.at(parent));

  const int n = static_cast<int>(dag.names.size());
  dag.ancestor_count = n - dag.leaf_count;
  dag.parents.assign(n, {});
  for (const auto& [c, p] : links) {
    if (p < dag.leaf_count) {
      throw OntologyError("leaf " + dag.names[p] + " used as a parent of " + dag.names[c]);
    }
    dag.parents[c].push_back(p);
  }
  for (auto& ps : dag.parents) {
    std::sort(ps.begin(), ps.end());
    ps.erase(std::unique(ps.begin(), ps.end()), ps.end());
  }

  // Cycle detection by colored DFS along parent links.
  std::vector<int> color(n, 0);
  for (int start = 0; start < n; ++start) {
    if (color[start] != 0) continue;
    std::vector<std::pair<int, std::size_t>> stack{{start, 0}};
    color[start] = 1;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < dag.parents[node].size()) {
        const int p = dag.parents[node][next++];
        if (color[p] == 1) {
          throw OntologyError("cycle detected at edge " + dag.names[node] + " -> " + dag.names[p]);
        }
        if (color[p] == 0) {
          color[p] = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        color[node] = 2;
        stack.pop_back();
      }
    }
  }

  if (root_name.empty()) {
    std::vector<int> tops;
    for (int i = dag.leaf_count; i < n; ++i) {
      if (dag.parents[i].empty()) tops.push_back(i);
    }
    if (tops.empty()) throw OntologyError("ontology has no root");
    dag.root = tops.front();
  } else {
    dag.root = id_of.at(root_name);
    if (dag.root < dag.leaf_count) throw OntologyError("root " + root_name + " is declared as a leaf");
    if (!dag.parents[dag.root].empty()) throw OntologyError("root " + root_name + " has parents");
  }

  // Every node must reach the root.
  std::vector<char> reaches(n, 0);
  reaches[dag.root] = 1;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int i = 0; i < n; ++i) {
      if (reaches[i]) continue;
      for (int p : dag.parents[i]) {
        if (reaches[p]) {
          reaches[i] = 1;
          changed = true;
          break;
        }
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!reaches[i]) throw OntologyError("orphan node " + dag.names[i] + " has no path to root " + dag.names[dag.root]);
  }
  return dag;
}

OntologyDAG load_ontology(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw OntologyError("cannot open ontology file: " + path.string());
  return parse_ontology(in);
}

void write_ontology(const OntologyDAG& dag, std::ostream& out) {
  out << "## setor ontology: " << dag.leaf_count << " leaves, " << dag.ancestor_count << " ancestors\n";
  out << "#root\t" << dag.names[dag.root] << "\n";
  for (int i = 0; i < dag.leaf_count; ++i) {
    out << "#leaf\t" << dag.names[i] << "\t" << dag.leaf_labels[i] << "\t" << dag.category_of[i] << "\n";
  }
  for (int i = 0; i < dag.node_count(); ++i) {
    for (int p : dag.parents[i]) out << dag.names[i] << "\t" << dag.names[p] << "\n";
  }
}

void save_ontology(const OntologyDAG& dag, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw OntologyError("cannot write ontology file: " + path.string());
  write_ontology(dag, out);
}

std::vector<int> ancestors(const OntologyDAG& dag, int leaf_id) {
  if (leaf_id < 0 || leaf_id >= dag.leaf_count) {
    throw std::out_of_range("ancestors: leaf id " + std::to_string(leaf_id) + " outside [0," +
                            std::to_string(dag.leaf_count) + ")");
  }
  std::vector<int> out{leaf_id};
  std::set<int> seen{leaf_id};
  std::vector<int> frontier{leaf_id};
  while (!frontier.empty()) {
    std::set<int> next;
    for (int node : frontier) {
      for (int p : dag.parents[node]) {
        if (!seen.count(p)) next.insert(p);
      }
    }
    frontier.assign(next.begin(), next.end());
    for (int p : frontier) {
      seen.insert(p);
      out.push_back(p);
    }
  }
  return out;
}

AncestorTable::AncestorTable(const OntologyDAG& dag) {
  sets_.reserve(dag.leaf_count);
  for (int i = 0; i < dag.leaf_count; ++i) {
    sets_.push_back(ancestors(dag, i));
    width_ = std::max(width_, sets_.back().size());
  }
}

OntologyEmbedding ontological_embedding(const Tensor& basic, const OntologyAttention& attn,
                                        const AncestorTable& table) {
  const auto& sets = table.sets();
  const Index leaves = static_cast<Index>(sets.size());
  const Index d = basic.cols();
  const Index width = static_cast<Index>(table.width());
  if (attn.proj.rows() != 2 * d) {
    throw ShapeError("ontological_embedding", "projection expects " + std::to_string(2 * d) + " rows, has " +
                                                  std::to_string(attn.proj.rows()));
  }

  // [E_i, E_j] * P == E_i * P_top + E_j * P_bottom; the child half is shared.
  Tensor child = slice_rows(basic, 0, leaves);
  Tensor child_part = add(matmul(child, slice_rows(attn.proj, 0, d)), attn.bias);
  Tensor proj_ancestor = slice_rows(attn.proj, d, d);

  Mask allowed = Mask::Constant(leaves, width, false);
  std::vector<Tensor> members;
  std::vector<Tensor> scores;
  members.reserve(width);
  scores.reserve(width);
  std::vector<int> ids(leaves);
  for (Index a = 0; a < width; ++a) {
    for (Index i = 0; i < leaves; ++i) {
      const bool present = a < static_cast<Index>(sets[i].size());
      ids[i] = present ? sets[i][a] : static_cast<int>(i);
      allowed(i, a) = present;
    }
    Tensor member = gather_rows(basic, ids);
    members.push_back(member);
    scores.push_back(matmul(tanh(add(child_part, matmul(member, proj_ancestor))), attn.weight));
  }
  Tensor alpha = softmax_rows(concat_cols(scores), allowed);

  Tensor g = mul(members[0], slice_cols(alpha, 0, 1));
  for (Index a = 1; a < width; ++a) g = add(g, mul(members[a], slice_cols(alpha, a, 1)));
  return {g, alpha.value(), sets};
}

}  // namespace setor
