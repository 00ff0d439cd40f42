#pragma once

// Sum-product networks stored as a flat, topologically ordered node table.
// All inference runs in natural-log space; -inf encodes probability zero.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "toponets/common.hpp"

namespace toponets {

using NodeId = std::uint32_t;
using VarId = std::uint32_t;

inline constexpr NodeId kInvalidNode = 0xffffffffu;

enum class NodeKind : std::uint8_t { Sum = 0, Product = 1, Indicator = 2 };

/// Interned variable scopes, filled in by check_validity().
struct ScopeTable {
    std::vector<std::vector<VarId>> scopes;
    std::vector<std::uint32_t> node_scope;  // per node, index into scopes
};

struct ValidityReport {
    std::vector<NodeId> incomplete_sums;
    std::vector<NodeId> non_decomposable_products;
    bool ok() const { return incomplete_sums.empty() && non_decomposable_products.empty(); }
};

class SpnBuilder;
class Spn;
ValidityReport check_validity(Spn& spn);

class Spn {
public:
    Spn() = default;

    std::size_t num_nodes() const { return kinds_.size(); }
    std::size_t num_edges() const { return children_.size(); }
    std::size_t num_variables() const { return cards_.size(); }
    std::uint32_t cardinality(VarId v) const { return cards_[v]; }
    std::span<const std::uint32_t> cardinalities() const { return cards_; }
    /// Offset of variable v's first indicator slot in a flat (var, value) table.
    std::uint32_t indicator_offset(VarId v) const { return ind_offsets_[v]; }
    std::size_t num_indicator_slots() const { return ind_offsets_.empty() ? 0 : ind_offsets_.back(); }

    NodeId root() const { return root_; }
    NodeKind kind(NodeId n) const { return kinds_[n]; }
    std::span<const NodeId> children(NodeId n) const {
        return {children_.data() + offsets_[n], offsets_[n + 1] - offsets_[n]};
    }
    /// First edge index of node n; edge e of node n is edge_begin(n) + e.
    std::uint32_t edge_begin(NodeId n) const { return offsets_[n]; }
    std::span<const double> weights(NodeId n) const {
        return {weights_.data() + offsets_[n], offsets_[n + 1] - offsets_[n]};
    }
    std::span<const double> log_weights(NodeId n) const {
        return {log_weights_.data() + offsets_[n], offsets_[n + 1] - offsets_[n]};
    }
    std::span<const double> all_weights() const { return weights_; }
    std::span<const double> all_log_weights() const { return log_weights_; }
    std::span<const NodeId> all_children() const { return children_; }
    std::span<const std::uint32_t> all_offsets() const { return offsets_; }
    std::span<const NodeKind> all_kinds() const { return kinds_; }

    VarId indicator_var(NodeId n) const { return leaf_var_[n]; }
    std::uint32_t indicator_value(NodeId n) const { return leaf_value_[n]; }

    /// Replace the weights of Sum node n. Weights must be positive.
    void set_weights(NodeId n, std::span<const double> w);
    /// Replace all edge weights at once (entries on non-Sum edges are ignored).
    void set_all_weights(std::span<const double> w);

    bool validated() const { return scopes_ != nullptr; }
    /// Scope of node n; only available after a successful check_validity().
    std::span<const VarId> scope(NodeId n) const;

    bool operator==(const Spn& o) const;

private:
    friend class SpnBuilder;
    friend ValidityReport check_validity(Spn& spn);

    std::vector<std::uint32_t> cards_;
    std::vector<std::uint32_t> ind_offsets_;
    std::vector<NodeKind> kinds_;
    std::vector<std::uint32_t> offsets_{0};
    std::vector<NodeId> children_;
    std::vector<double> weights_;
    std::vector<double> log_weights_;
    std::vector<VarId> leaf_var_;
    std::vector<std::uint32_t> leaf_value_;
    NodeId root_ = kInvalidNode;
    std::shared_ptr<const ScopeTable> scopes_;
};

/// Appends nodes in topological order; children must already exist.
class SpnBuilder {
public:
    explicit SpnBuilder(std::vector<std::uint32_t> cardinalities = {});

    VarId add_variable(std::uint32_t cardinality);
    std::size_t num_variables() const { return cards_.size(); }
    std::size_t num_nodes() const { return kinds_.size(); }
    std::uint32_t cardinality(VarId v) const { return cards_[v]; }

    /// Shared indicator leaf for (v, value); created on first use.
    NodeId indicator(VarId v, std::uint32_t value);
    NodeId sum(std::span<const NodeId> children, std::span<const double> weights);
    NodeId product(std::span<const NodeId> children);

    /// Copy every node reachable from `roots` in `src` into this builder,
    /// renaming variables through `var_map` (indexed by source VarId).
    /// Returns the new ids of `roots` in order.
    std::vector<NodeId> append(const Spn& src, std::span<const NodeId> roots,
                               std::span<const VarId> var_map);

    Spn build(NodeId root) &&;

private:
    void check_child(NodeId c) const;

    std::vector<std::uint32_t> cards_;
    std::vector<NodeKind> kinds_;
    std::vector<std::uint32_t> offsets_{0};
    std::vector<NodeId> children_;
    std::vector<double> weights_;
    std::vector<VarId> leaf_var_;
    std::vector<std::uint32_t> leaf_value_;
    std::vector<std::vector<NodeId>> indicators_;  // per var, per value
};

/// Raw node record used by the node-table constructor and the file formats.
struct NodeRecord {
    NodeKind kind = NodeKind::Product;
    std::vector<NodeId> children;
    std::vector<double> weights;
    VarId var = 0;
    std::uint32_t value = 0;
};

/// Build an Spn from an arbitrarily ordered node table. Nodes are re-sorted
/// topologically; unreachable nodes are kept. Throws StructuralError on
/// cycles, dangling child ids or malformed records.
Spn spn_from_node_table(std::vector<std::uint32_t> cardinalities,
                        const std::vector<NodeRecord>& nodes, NodeId root);

/// Per-variable boolean masks; an all-true mask marginalizes the variable.
class Evidence {
public:
    Evidence() = default;
    explicit Evidence(std::span<const std::uint32_t> cardinalities);
    explicit Evidence(const Spn& spn) : Evidence(spn.cardinalities()) {}

    std::size_t num_variables() const { return offsets_.size() - 1; }
    std::uint32_t cardinality(VarId v) const { return offsets_[v + 1] - offsets_[v]; }

    void observe(VarId v, std::uint32_t value);
    void marginalize(VarId v);
    void set(VarId v, std::uint32_t value, bool allowed) { mask_[offsets_[v] + value] = allowed; }
    bool allowed(VarId v, std::uint32_t value) const { return mask_[offsets_[v] + value] != 0; }
    bool is_observed(VarId v) const;  // exactly one allowed value
    std::span<const std::uint8_t> mask() const { return mask_; }

    /// Log indicator inputs (0 or -inf) in the flat (var, value) layout.
    std::vector<double> log_indicators() const;

    bool operator==(const Evidence&) const = default;

private:
    std::vector<std::uint32_t> offsets_{0};
    std::vector<std::uint8_t> mask_;
};

/// Counts arithmetic edge visits; used to confirm linear-time inference.
struct OpCounter {
    std::uint64_t edge_ops = 0;
};

/// Checks completeness and decomposability and caches per-node scopes.
/// Marks the network validated only when the report is empty.
ValidityReport check_validity(Spn& spn);

/// Log of the network polynomial at the evidence.
double evaluate(const Spn& spn, const Evidence& evidence, OpCounter* ops = nullptr);

/// Upward pass over arbitrary (soft) log indicator inputs in the flat
/// (var, value) layout. `values` receives the log-value of every node.
/// With `begin` > 0, nodes below `begin` are taken as already set in `values`.
void evaluate_nodes(const Spn& spn, std::span<const double> log_indicators,
                    std::span<double> values, OpCounter* ops = nullptr, NodeId begin = 0);

/// Downward pass. `grad` holds, on entry, d(loss)/d(log-value) seeds at any
/// nodes (typically 1 at the root) and on exit the accumulated gradients with
/// respect to every node's log-value. With `stop` > 0, propagation ends at
/// nodes below `stop` (they still receive their gradients).
void backprop(const Spn& spn, std::span<const double> values, std::span<double> grad,
              OpCounter* ops = nullptr, NodeId stop = 0);

/// Adds scale * d(loss)/d(w_e) for every Sum edge e into `edge_grad`,
/// given values and log-value gradients from evaluate_nodes/backprop.
void accumulate_weight_gradient(const Spn& spn, std::span<const double> values,
                                std::span<const double> grad, double scale,
                                std::span<double> edge_grad);

/// Posterior P(X_v = k | evidence) for every variable.
std::vector<Eigen::VectorXd> marginals(const Spn& spn, const Evidence& evidence,
                                       OpCounter* ops = nullptr);

/// Gradient of the root log-value with respect to each indicator's log input
/// in the flat (var, value) layout, i.e. lambda * df/dlambda / f.
std::vector<double> indicator_gradients(const Spn& spn, std::span<const double> log_indicators);

struct MpeOptions {
    /// When non-empty (one flag per variable), only flagged variables are
    /// decoded: Sum nodes whose scope holds no query variable are summed
    /// rather than maximized, so non-query variables are marginalized out.
    std::vector<std::uint8_t> query;
};

struct MpeResult {
    /// Per variable: decoded value, or -1 when the variable was fully
    /// observed (or not queried).
    std::vector<std::int32_t> assignment;
    double log_score = kNegInf;

    bool has(VarId v) const { return assignment[v] >= 0; }
};

/// Max-product decoding: weighted max at Sum nodes on the way up, argmax
/// child selection on the way down.
MpeResult mpe(const Spn& spn, const Evidence& evidence, const MpeOptions& options = {},
              OpCounter* ops = nullptr);

/// Max-product log score of the network at the given (log) indicator inputs,
/// with the same query semantics as mpe().
double max_product_value(const Spn& spn, std::span<const double> log_indicators,
                         const MpeOptions& options = {});

/// Normalized copy; weights below `floor` are lifted to it.
Spn normalize_weights(const Spn& spn, double floor = 1e-8);

/// Euclidean projection onto {w : sum w = 1, w >= floor}.
void project_to_simplex(std::span<double> w, double floor);

/// Scales nonnegative weights to sum 1, lifting entries below `floor` to it.
void rescale_to_simplex(std::span<double> w, double floor);

/// Marks nodes reachable from the root.
std::vector<std::uint8_t> reachable_from(const Spn& spn, std::span<const NodeId> roots);

}  // namespace toponets
