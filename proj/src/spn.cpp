#include "toponets/spn.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <unordered_map>

namespace toponets {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

int verbosity() {
    static const int level = [] {
        const char* env = std::getenv("TOPONETS_VERBOSE");
        return env ? std::atoi(env) : 1;
    }();
    return level;
}

namespace {

std::vector<std::uint32_t> prefix_offsets(std::span<const std::uint32_t> cards) {
    std::vector<std::uint32_t> off(cards.size() + 1, 0);
    for (std::size_t v = 0; v < cards.size(); ++v) off[v + 1] = off[v] + cards[v];
    return off;
}

double safe_log(double w) { return w > 0.0 ? std::log(w) : kNegInf; }

}  // namespace

// ---------------------------------------------------------------- Spn

void Spn::set_weights(NodeId n, std::span<const double> w) {
    if (kinds_[n] != NodeKind::Sum) throw InputError("set_weights: node " + std::to_string(n) + " is not a Sum");
    const auto b = offsets_[n];
    if (w.size() != offsets_[n + 1] - b)
        throw InputError("set_weights: expected " + std::to_string(offsets_[n + 1] - b) + " weights");
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!(w[i] > 0.0)) throw InputError("set_weights: non-positive weight at node " + std::to_string(n));
        weights_[b + i] = w[i];
        log_weights_[b + i] = std::log(w[i]);
    }
}

void Spn::set_all_weights(std::span<const double> w) {
    if (w.size() != weights_.size()) throw InputError("set_all_weights: size mismatch");
    for (NodeId n = 0; n < num_nodes(); ++n) {
        if (kinds_[n] != NodeKind::Sum) continue;
        set_weights(n, w.subspan(offsets_[n], offsets_[n + 1] - offsets_[n]));
    }
}

std::span<const VarId> Spn::scope(NodeId n) const {
    if (!scopes_) throw InputError("scope(): network has not been validated");
    return scopes_->scopes[scopes_->node_scope[n]];
}

bool Spn::operator==(const Spn& o) const {
    return cards_ == o.cards_ && kinds_ == o.kinds_ && offsets_ == o.offsets_ &&
           children_ == o.children_ && leaf_var_ == o.leaf_var_ && leaf_value_ == o.leaf_value_ &&
           root_ == o.root_ &&
           std::equal(weights_.begin(), weights_.end(), o.weights_.begin(), o.weights_.end(),
                      [](double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; });
}

// ---------------------------------------------------------------- builder

SpnBuilder::SpnBuilder(std::vector<std::uint32_t> cardinalities) {
    for (auto c : cardinalities) add_variable(c);
}

VarId SpnBuilder::add_variable(std::uint32_t cardinality) {
    if (cardinality < 2) throw InputError("variable cardinality must be >= 2");
    cards_.push_back(cardinality);
    indicators_.emplace_back(cardinality, kInvalidNode);
    return static_cast<VarId>(cards_.size() - 1);
}

void SpnBuilder::check_child(NodeId c) const {
    if (c >= kinds_.size()) throw StructuralError("child id " + std::to_string(c) + " does not exist yet");
}

NodeId SpnBuilder::indicator(VarId v, std::uint32_t value) {
    if (v >= cards_.size()) throw InputError("indicator: unknown variable " + std::to_string(v));
    if (value >= cards_[v]) throw InputError("indicator: value out of range for variable " + std::to_string(v));
    auto& slot = indicators_[v][value];
    if (slot != kInvalidNode) return slot;
    slot = static_cast<NodeId>(kinds_.size());
    kinds_.push_back(NodeKind::Indicator);
    offsets_.push_back(static_cast<std::uint32_t>(children_.size()));
    leaf_var_.push_back(v);
    leaf_value_.push_back(value);
    return slot;
}

NodeId SpnBuilder::sum(std::span<const NodeId> children, std::span<const double> weights) {
    if (children.empty()) throw StructuralError("sum node without children");
    if (children.size() != weights.size()) throw StructuralError("sum weight count differs from child count");
    for (std::size_t i = 0; i < children.size(); ++i) {
        check_child(children[i]);
        if (!(weights[i] > 0.0)) throw InputError("sum weights must be positive");
    }
    const auto id = static_cast<NodeId>(kinds_.size());
    kinds_.push_back(NodeKind::Sum);
    children_.insert(children_.end(), children.begin(), children.end());
    weights_.insert(weights_.end(), weights.begin(), weights.end());
    offsets_.push_back(static_cast<std::uint32_t>(children_.size()));
    leaf_var_.push_back(0);
    leaf_value_.push_back(0);
    return id;
}

NodeId SpnBuilder::product(std::span<const NodeId> children) {
    if (children.empty()) throw StructuralError("product node without children");
    for (auto c : children) check_child(c);
    const auto id = static_cast<NodeId>(kinds_.size());
    kinds_.push_back(NodeKind::Product);
    children_.insert(children_.end(), children.begin(), children.end());
    weights_.insert(weights_.end(), children.size(), 0.0);
    offsets_.push_back(static_cast<std::uint32_t>(children_.size()));
    leaf_var_.push_back(0);
    leaf_value_.push_back(0);
    return id;
}

std::vector<NodeId> SpnBuilder::append(const Spn& src, std::span<const NodeId> roots,
                                       std::span<const VarId> var_map) {
    if (var_map.size() != src.num_variables()) throw InputError("append: variable map size mismatch");
    const auto live = reachable_from(src, roots);
    std::vector<NodeId> map(src.num_nodes(), kInvalidNode);
    std::vector<NodeId> kids;
    for (NodeId n = 0; n < src.num_nodes(); ++n) {
        if (!live[n]) continue;
        switch (src.kind(n)) {
            case NodeKind::Indicator:
                map[n] = indicator(var_map[src.indicator_var(n)], src.indicator_value(n));
                break;
            case NodeKind::Sum:
            case NodeKind::Product: {
                kids.clear();
                for (auto c : src.children(n)) kids.push_back(map[c]);
                map[n] = src.kind(n) == NodeKind::Sum ? sum(kids, src.weights(n)) : product(kids);
                break;
            }
        }
    }
    std::vector<NodeId> out;
    out.reserve(roots.size());
    for (auto r : roots) out.push_back(map[r]);
    return out;
}

Spn SpnBuilder::build(NodeId root) && {
    if (root >= kinds_.size()) throw StructuralError("root id out of range");
    Spn s;
    s.cards_ = std::move(cards_);
    s.ind_offsets_ = prefix_offsets(s.cards_);
    s.kinds_ = std::move(kinds_);
    s.offsets_ = std::move(offsets_);
    s.children_ = std::move(children_);
    s.weights_ = std::move(weights_);
    s.log_weights_.resize(s.weights_.size());
    std::transform(s.weights_.begin(), s.weights_.end(), s.log_weights_.begin(), safe_log);
    s.leaf_var_ = std::move(leaf_var_);
    s.leaf_value_ = std::move(leaf_value_);
    s.root_ = root;
    return s;
}

namespace {

// Kahn's algorithm over child -> parent edges; leftover nodes sit on a cycle.
std::vector<NodeId> topological_order(const std::vector<NodeRecord>& nodes) {
    const std::size_t n = nodes.size();
    std::vector<std::uint32_t> pending(n, 0);
    std::vector<std::vector<NodeId>> parents(n);
    for (std::size_t i = 0; i < n; ++i)
        for (auto c : nodes[i].children) {
            ++pending[i];
            parents[c].push_back(static_cast<NodeId>(i));
        }
    std::vector<NodeId> order;
    order.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        if (pending[i] == 0) order.push_back(static_cast<NodeId>(i));
    for (std::size_t head = 0; head < order.size(); ++head)
        for (auto p : parents[order[head]])
            if (--pending[p] == 0) order.push_back(p);
    if (order.size() != n) {
        for (std::size_t i = 0; i < n; ++i)
            if (pending[i] != 0) throw StructuralError("cycle detected through node " + std::to_string(i));
    }
    return order;
}

}  // namespace

Spn spn_from_node_table(std::vector<std::uint32_t> cardinalities, const std::vector<NodeRecord>& nodes,
                        NodeId root) {
    const std::size_t n = nodes.size();
    if (root >= n) throw StructuralError("root id " + std::to_string(root) + " out of range");
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = nodes[i];
        for (auto c : r.children)
            if (c >= n) throw StructuralError("node " + std::to_string(i) + ": dangling child id " + std::to_string(c));
        if (r.kind == NodeKind::Indicator) {
            if (!r.children.empty()) throw StructuralError("node " + std::to_string(i) + ": indicator with children");
            if (r.var >= cardinalities.size() || r.value >= cardinalities[r.var])
                throw StructuralError("node " + std::to_string(i) + ": indicator refers to unknown variable/value");
        } else if (r.children.empty()) {
            throw StructuralError("node " + std::to_string(i) + ": internal node without children");
        }
        if (r.kind == NodeKind::Sum && r.weights.size() != r.children.size())
            throw StructuralError("node " + std::to_string(i) + ": weight count differs from child count");
    }
    bool ordered = true;
    for (std::size_t i = 0; i < n && ordered; ++i)
        for (auto c : nodes[i].children) ordered = ordered && c < i;
    std::vector<NodeId> order;
    order.reserve(n);
    if (ordered) {
        for (std::size_t i = 0; i < n; ++i) order.push_back(static_cast<NodeId>(i));
    } else {
        order = topological_order(nodes);
    }

    SpnBuilder b(std::move(cardinalities));
    std::vector<NodeId> map(n, kInvalidNode);
    std::vector<NodeId> kids;
    for (auto i : order) {
        const auto& r = nodes[i];
        if (r.kind == NodeKind::Indicator) {
            map[i] = b.indicator(r.var, r.value);
            continue;
        }
        kids.clear();
        for (auto c : r.children) kids.push_back(map[c]);
        map[i] = r.kind == NodeKind::Sum ? b.sum(kids, r.weights) : b.product(kids);
    }
    return std::move(b).build(map[root]);
}

// ---------------------------------------------------------------- evidence

Evidence::Evidence(std::span<const std::uint32_t> cardinalities)
    : offsets_(prefix_offsets(cardinalities)), mask_(offsets_.back(), 1) {}

void Evidence::observe(VarId v, std::uint32_t value) {
    if (v >= num_variables() || value >= cardinality(v)) throw InputError("observe: variable/value out of range");
    std::fill(mask_.begin() + offsets_[v], mask_.begin() + offsets_[v + 1], 0);
    mask_[offsets_[v] + value] = 1;
}

void Evidence::marginalize(VarId v) {
    std::fill(mask_.begin() + offsets_[v], mask_.begin() + offsets_[v + 1], 1);
}

bool Evidence::is_observed(VarId v) const {
    return std::count(mask_.begin() + offsets_[v], mask_.begin() + offsets_[v + 1], 1) == 1;
}

std::vector<double> Evidence::log_indicators() const {
    std::vector<double> out(mask_.size());
    std::transform(mask_.begin(), mask_.end(), out.begin(), [](std::uint8_t m) { return m ? 0.0 : kNegInf; });
    return out;
}

namespace {

void check_evidence(const Spn& spn, const Evidence& ev) {
    if (!spn.validated()) throw InputError("network has not passed check_validity");
    if (ev.num_variables() != spn.num_variables())
        throw InputError("evidence covers " + std::to_string(ev.num_variables()) + " variables, network has " +
                         std::to_string(spn.num_variables()));
    for (VarId v = 0; v < spn.num_variables(); ++v) {
        if (ev.cardinality(v) != spn.cardinality(v))
            throw InputError("evidence cardinality mismatch for variable " + std::to_string(v));
        bool any = false;
        for (std::uint32_t k = 0; k < spn.cardinality(v) && !any; ++k) any = ev.allowed(v, k);
        if (!any) throw InputError("evidence for variable " + std::to_string(v) + " excludes every value");
    }
}

void check_indicator_inputs(const Spn& spn, std::span<const double> log_ind) {
    if (log_ind.size() != spn.num_indicator_slots()) throw InputError("indicator input size mismatch");
}

// log(sum_k w_k exp(v_k)) shifted by the largest child value, so that unit
// children under weights summing to exactly 1.0 give exactly 0.
double weighted_lse(const double* w, const NodeId* kids, std::size_t n, std::span<const double> values) {
    double m = kNegInf;
    for (std::size_t k = 0; k < n; ++k) m = std::max(m, values[kids[k]]);
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += w[k] * std::exp(values[kids[k]] - m);
    return m + std::log(s);
}

}  // namespace

// ---------------------------------------------------------------- validity

ValidityReport check_validity(Spn& spn) {
    ValidityReport report;
    auto table = std::make_shared<ScopeTable>();
    const std::size_t n = spn.num_nodes();
    table->node_scope.resize(n);

    std::vector<std::uint64_t> var_hash(spn.num_variables());
    for (VarId v = 0; v < var_hash.size(); ++v) var_hash[v] = splitmix64(v + 1);
    std::vector<std::uint64_t> scope_hash;
    std::unordered_multimap<std::uint64_t, std::uint32_t> by_hash;

    auto intern = [&](std::vector<VarId>&& vars) -> std::uint32_t {
        std::uint64_t h = vars.size();
        for (auto v : vars) h += var_hash[v];
        auto [lo, hi] = by_hash.equal_range(h);
        for (auto it = lo; it != hi; ++it)
            if (table->scopes[it->second] == vars) return it->second;
        const auto id = static_cast<std::uint32_t>(table->scopes.size());
        table->scopes.push_back(std::move(vars));
        by_hash.emplace(h, id);
        return id;
    };

    std::vector<std::uint32_t> single(spn.num_variables(), 0xffffffffu);
    std::vector<VarId> merged;
    // Products over the same child scopes recur in copied sub-networks.
    struct KeyHash {
        std::size_t operator()(const std::vector<std::uint32_t>& k) const {
            std::uint64_t h = k.size();
            for (auto x : k) h = splitmix64(h ^ x);
            return h;
        }
    };
    std::unordered_map<std::vector<std::uint32_t>, std::pair<std::uint32_t, bool>, KeyHash> product_memo;
    std::vector<std::uint32_t> key;
    for (NodeId i = 0; i < n; ++i) {
        const auto kids = spn.children(i);
        for (auto c : kids)
            if (c >= i) throw StructuralError("node " + std::to_string(i) + " references child " + std::to_string(c) +
                                              " that does not precede it");
        switch (spn.kind(i)) {
            case NodeKind::Indicator: {
                const auto v = spn.indicator_var(i);
                if (single[v] == 0xffffffffu) single[v] = intern({v});
                table->node_scope[i] = single[v];
                break;
            }
            case NodeKind::Sum: {
                const auto s0 = table->node_scope[kids[0]];
                bool same = true;
                for (auto c : kids) same = same && table->node_scope[c] == s0;
                if (same) {
                    table->node_scope[i] = s0;
                    break;
                }
                report.incomplete_sums.push_back(i);
                merged.clear();
                for (auto c : kids) {
                    const auto& s = table->scopes[table->node_scope[c]];
                    merged.insert(merged.end(), s.begin(), s.end());
                }
                std::sort(merged.begin(), merged.end());
                merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
                table->node_scope[i] = intern(std::vector<VarId>(merged));
                break;
            }
            case NodeKind::Product: {
                key.clear();
                for (auto c : kids) key.push_back(table->node_scope[c]);
                std::sort(key.begin(), key.end());
                auto it = product_memo.find(key);
                if (it == product_memo.end()) {
                    merged.clear();
                    for (auto c : key) {
                        const auto& s = table->scopes[c];
                        merged.insert(merged.end(), s.begin(), s.end());
                    }
                    const auto total = merged.size();
                    std::sort(merged.begin(), merged.end());
                    merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
                    const bool ok = merged.size() == total;
                    it = product_memo.emplace(key, std::make_pair(intern(std::vector<VarId>(merged)), ok)).first;
                }
                if (!it->second.second) report.non_decomposable_products.push_back(i);
                table->node_scope[i] = it->second.first;
                break;
            }
        }
    }
    if (report.ok())
        spn.scopes_ = std::move(table);
    else
        spn.scopes_.reset();
    return report;
}

// ---------------------------------------------------------------- inference

void evaluate_nodes(const Spn& spn, std::span<const double> log_ind, std::span<double> values, OpCounter* ops,
                    NodeId begin) {
    check_indicator_inputs(spn, log_ind);
    const auto kinds = spn.all_kinds();
    const auto offs = spn.all_offsets();
    const auto kids = spn.all_children();
    const std::size_t n = spn.num_nodes();
    const double* lw = spn.all_log_weights().data();
    const double* w = spn.all_weights().data();
    for (NodeId i = begin; i < n; ++i) {
        const auto b = offs[i], e = offs[i + 1];
        switch (kinds[i]) {
            case NodeKind::Indicator:
                values[i] = log_ind[spn.indicator_offset(spn.indicator_var(i)) + spn.indicator_value(i)];
                break;
            case NodeKind::Product: {
                double s = 0.0;
                for (auto k = b; k < e; ++k) s += values[kids[k]];
                values[i] = s;
                break;
            }
            case NodeKind::Sum: {
                double m = kNegInf;
                std::uint32_t finite = 0;
                for (auto k = b; k < e; ++k) {
                    const double t = lw[k] + values[kids[k]];
                    if (t != kNegInf) {
                        ++finite;
                        if (t > m) m = t;
                    }
                }
                if (finite <= 1) {
                    values[i] = m;
                    break;
                }
                values[i] = weighted_lse(w + b, kids.data() + b, e - b, values);
                break;
            }
        }
    }
    if (ops) ops->edge_ops += spn.num_edges() + n;
}

double evaluate(const Spn& spn, const Evidence& evidence, OpCounter* ops) {
    check_evidence(spn, evidence);
    std::vector<double> values(spn.num_nodes());
    const auto ind = evidence.log_indicators();
    evaluate_nodes(spn, ind, values, ops);
    return values[spn.root()];
}

void backprop(const Spn& spn, std::span<const double> values, std::span<double> grad, OpCounter* ops,
              NodeId stop) {
    const auto kinds = spn.all_kinds();
    const auto offs = spn.all_offsets();
    const auto kids = spn.all_children();
    const double* lw = spn.all_log_weights().data();
    for (std::size_t ii = spn.num_nodes(); ii-- > stop;) {
        const auto i = static_cast<NodeId>(ii);
        const double g = grad[i];
        if (g == 0.0 || kinds[i] == NodeKind::Indicator) continue;
        const auto b = offs[i], e = offs[i + 1];
        if (kinds[i] == NodeKind::Product) {
            for (auto k = b; k < e; ++k) grad[kids[k]] += g;
        } else {
            const double v = values[i];
            if (v == kNegInf) continue;
            for (auto k = b; k < e; ++k) {
                const double t = lw[k] + values[kids[k]];
                if (t != kNegInf) grad[kids[k]] += g * std::exp(t - v);
            }
        }
    }
    if (ops) ops->edge_ops += spn.num_edges() + spn.num_nodes();
}

void accumulate_weight_gradient(const Spn& spn, std::span<const double> values, std::span<const double> grad,
                                double scale, std::span<double> edge_grad) {
    const auto kinds = spn.all_kinds();
    const auto offs = spn.all_offsets();
    const auto kids = spn.all_children();
    for (NodeId i = 0; i < spn.num_nodes(); ++i) {
        if (kinds[i] != NodeKind::Sum || grad[i] == 0.0 || values[i] == kNegInf) continue;
        const double g = scale * grad[i];
        const double v = values[i];
        for (auto k = offs[i]; k < offs[i + 1]; ++k) {
            const double c = values[kids[k]];
            if (c != kNegInf) edge_grad[k] += g * std::exp(c - v);
        }
    }
}

std::vector<double> indicator_gradients(const Spn& spn, std::span<const double> log_ind) {
    std::vector<double> values(spn.num_nodes()), grad(spn.num_nodes(), 0.0);
    evaluate_nodes(spn, log_ind, values);
    std::vector<double> out(spn.num_indicator_slots(), 0.0);
    if (values[spn.root()] == kNegInf) return out;
    grad[spn.root()] = 1.0;
    backprop(spn, values, grad);
    for (NodeId i = 0; i < spn.num_nodes(); ++i)
        if (spn.kind(i) == NodeKind::Indicator)
            out[spn.indicator_offset(spn.indicator_var(i)) + spn.indicator_value(i)] += grad[i];
    return out;
}

std::vector<Eigen::VectorXd> marginals(const Spn& spn, const Evidence& evidence, OpCounter* ops) {
    check_evidence(spn, evidence);
    const auto ind = evidence.log_indicators();
    std::vector<double> values(spn.num_nodes()), grad(spn.num_nodes(), 0.0);
    evaluate_nodes(spn, ind, values, ops);
    if (values[spn.root()] == kNegInf) throw ImpossibleEvidence("marginals: evidence has zero probability");
    grad[spn.root()] = 1.0;
    backprop(spn, values, grad, ops);

    std::vector<Eigen::VectorXd> out(spn.num_variables());
    for (VarId v = 0; v < spn.num_variables(); ++v) out[v] = Eigen::VectorXd::Zero(spn.cardinality(v));
    for (NodeId i = 0; i < spn.num_nodes(); ++i)
        if (spn.kind(i) == NodeKind::Indicator && values[i] != kNegInf)
            out[spn.indicator_var(i)][spn.indicator_value(i)] += grad[i];
    for (VarId v = 0; v < spn.num_variables(); ++v) {
        const double s = out[v].sum();
        if (s > 0.0) {
            out[v] /= s;
        } else {
            // Variable outside the root scope: its posterior is the evidence mask.
            for (std::uint32_t k = 0; k < spn.cardinality(v); ++k) out[v][k] = evidence.allowed(v, k) ? 1.0 : 0.0;
            out[v] /= out[v].sum();
        }
    }
    return out;
}

namespace {

// Flags Sum nodes that must be maximized: all of them without a query set,
// otherwise those whose scope holds a query variable.
std::vector<std::uint8_t> max_nodes(const Spn& spn, const MpeOptions& opt) {
    std::vector<std::uint8_t> flag(spn.num_nodes(), 1);
    if (opt.query.empty()) return flag;
    if (opt.query.size() != spn.num_variables()) throw InputError("mpe: query mask size mismatch");
    for (NodeId i = 0; i < spn.num_nodes(); ++i) {
        if (spn.kind(i) == NodeKind::Indicator) {
            flag[i] = opt.query[spn.indicator_var(i)] ? 1 : 0;
            continue;
        }
        std::uint8_t f = 0;
        for (auto c : spn.children(i)) f |= flag[c];
        flag[i] = f;
    }
    return flag;
}

void max_product_nodes(const Spn& spn, std::span<const double> log_ind, std::span<const std::uint8_t> maximize,
                       std::span<double> values) {
    const auto kinds = spn.all_kinds();
    const auto offs = spn.all_offsets();
    const auto kids = spn.all_children();
    const double* lw = spn.all_log_weights().data();
    const double* w = spn.all_weights().data();
    for (NodeId i = 0; i < spn.num_nodes(); ++i) {
        const auto b = offs[i], e = offs[i + 1];
        switch (kinds[i]) {
            case NodeKind::Indicator:
                values[i] = log_ind[spn.indicator_offset(spn.indicator_var(i)) + spn.indicator_value(i)];
                break;
            case NodeKind::Product: {
                double s = 0.0;
                for (auto k = b; k < e; ++k) s += values[kids[k]];
                values[i] = s;
                break;
            }
            case NodeKind::Sum: {
                double m = kNegInf;
                std::uint32_t finite = 0;
                for (auto k = b; k < e; ++k) {
                    const double t = lw[k] + values[kids[k]];
                    if (t != kNegInf) {
                        ++finite;
                        if (t > m) m = t;
                    }
                }
                if (maximize[i] || finite <= 1) {
                    values[i] = m;
                    break;
                }
                values[i] = weighted_lse(w + b, kids.data() + b, e - b, values);
                break;
            }
        }
    }
}

}  // namespace

double max_product_value(const Spn& spn, std::span<const double> log_ind, const MpeOptions& options) {
    check_indicator_inputs(spn, log_ind);
    const auto maximize = max_nodes(spn, options);
    std::vector<double> values(spn.num_nodes());
    max_product_nodes(spn, log_ind, maximize, values);
    return values[spn.root()];
}

MpeResult mpe(const Spn& spn, const Evidence& evidence, const MpeOptions& options, OpCounter* ops) {
    check_evidence(spn, evidence);
    const auto maximize = max_nodes(spn, options);
    const auto ind = evidence.log_indicators();
    std::vector<double> values(spn.num_nodes());
    max_product_nodes(spn, ind, maximize, values);
    if (ops) ops->edge_ops += 2 * (spn.num_edges() + spn.num_nodes());

    MpeResult res;
    res.log_score = values[spn.root()];
    if (res.log_score == kNegInf) throw ImpossibleEvidence("mpe: evidence has zero probability");
    res.assignment.assign(spn.num_variables(), -1);

    std::vector<std::uint8_t> visit(spn.num_nodes(), 0);
    visit[spn.root()] = 1;
    for (std::size_t ii = spn.num_nodes(); ii-- > 0;) {
        const auto i = static_cast<NodeId>(ii);
        if (!visit[i] || !maximize[i]) continue;
        const auto kids = spn.children(i);
        switch (spn.kind(i)) {
            case NodeKind::Indicator: {
                const auto v = spn.indicator_var(i);
                const bool decode = options.query.empty() ? !evidence.is_observed(v) : options.query[v] != 0;
                if (decode) res.assignment[v] = static_cast<std::int32_t>(spn.indicator_value(i));
                break;
            }
            case NodeKind::Product:
                for (auto c : kids) visit[c] = 1;
                break;
            case NodeKind::Sum: {
                const auto lw = spn.log_weights(i);
                std::size_t best = 0;
                double bv = kNegInf;
                for (std::size_t k = 0; k < kids.size(); ++k) {
                    const double t = lw[k] + values[kids[k]];
                    if (t > bv) {
                        bv = t;
                        best = k;
                    }
                }
                visit[kids[best]] = 1;
                break;
            }
        }
    }
    return res;
}

// ---------------------------------------------------------------- weights

namespace {

// Absorb rounding into the largest entry so the sequential sum is exactly 1.
void exact_unit_sum(std::span<double> w) {
    auto total = [&] { return std::accumulate(w.begin(), w.end(), 0.0); };
    const auto big = static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
    for (int iter = 0; iter < 4 && total() != 1.0; ++iter) w[big] += 1.0 - total();
    // Sequential rounding can make single corrections oscillate; search a few ulps per entry.
    for (std::size_t i = 0; i < w.size() && total() != 1.0; ++i) {
        const double orig = w[i];
        double up = orig, down = orig;
        for (int step = 1; step <= 16; ++step) {
            up = std::nextafter(up, 2.0);
            down = std::nextafter(down, 0.0);
            w[i] = up;
            if (total() == 1.0) break;
            w[i] = down;
            if (total() == 1.0) break;
            w[i] = orig;
        }
    }
}

void check_floor(std::size_t n, double floor) {
    if (floor * static_cast<double>(n) >= 1.0) throw InputError("weight floor too large for fan-in");
}

}  // namespace

void rescale_to_simplex(std::span<double> w, double floor) {
    const std::size_t n = w.size();
    if (n == 0) return;
    check_floor(n, floor);
    std::vector<std::uint8_t> pinned(n, 0);
    for (int iter = 0; iter < 64; ++iter) {
        double free_mass = 0.0;
        std::size_t npinned = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (pinned[i]) {
                ++npinned;
            } else {
                w[i] = std::max(w[i], 0.0);
                free_mass += w[i];
            }
        }
        const double target = 1.0 - floor * static_cast<double>(npinned);
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (pinned[i]) {
                w[i] = floor;
                continue;
            }
            w[i] = free_mass > 0.0 ? w[i] * target / free_mass : target / static_cast<double>(n - npinned);
            if (w[i] < floor) {
                pinned[i] = 1;
                changed = true;
            }
        }
        if (!changed) break;
    }
    exact_unit_sum(w);
}

void project_to_simplex(std::span<double> w, double floor) {
    const std::size_t n = w.size();
    if (n == 0) return;
    check_floor(n, floor);
    // Shift u = w - floor onto the simplex of mass 1 - n*floor (sort-based).
    const double mass = 1.0 - floor * static_cast<double>(n);
    std::vector<double> u(w.begin(), w.end());
    for (auto& x : u) x -= floor;
    std::vector<double> sorted = u;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double cum = 0.0, tau = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        cum += sorted[k];
        const double t = (cum - mass) / static_cast<double>(k + 1);
        if (sorted[k] - t > 0.0) tau = t;
    }
    for (std::size_t i = 0; i < n; ++i) w[i] = std::max(u[i] - tau, 0.0) + floor;
    exact_unit_sum(w);
}

Spn normalize_weights(const Spn& spn, double floor) {
    Spn out = spn;
    std::vector<double> w;
    for (NodeId i = 0; i < spn.num_nodes(); ++i) {
        if (spn.kind(i) != NodeKind::Sum) continue;
        const auto src = spn.weights(i);
        for (double x : src)
            if (!(x > 0.0)) throw InputError("normalize_weights: non-positive weight at node " + std::to_string(i));
        w.assign(src.begin(), src.end());
        const double s = std::accumulate(w.begin(), w.end(), 0.0);
        bool already = s == 1.0;
        for (double x : w) already = already && x >= floor;
        if (already) continue;
        rescale_to_simplex(w, std::min(floor, 0.5 / static_cast<double>(w.size())));
        out.set_weights(i, w);
    }
    return out;
}

std::vector<std::uint8_t> reachable_from(const Spn& spn, std::span<const NodeId> roots) {
    std::vector<std::uint8_t> live(spn.num_nodes(), 0);
    for (auto r : roots) live.at(r) = 1;
    for (std::size_t ii = spn.num_nodes(); ii-- > 0;)
        if (live[ii])
            for (auto c : spn.children(static_cast<NodeId>(ii))) live[c] = 1;
    return live;
}

}  // namespace toponets
