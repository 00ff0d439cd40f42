#pragma once

// Brute-force reference implementations used by the unit tests and the
// acceptance suite. These walk a plain object graph in linear arithmetic and
// enumerate assignments directly; they share nothing with the log-space
// sweeps except the node table they read.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <unordered_map>
#include <vector>

#include "toponets/spn.hpp"

namespace oracle {

using toponets::NodeId;
using toponets::NodeKind;
using toponets::Spn;
using toponets::VarId;

/// Random valid SPN over `nvars` variables of cardinality `card`. Subnetworks
/// are shared across parents with some probability so the result is a DAG.
inline Spn random_spn(std::mt19937_64& rng, std::uint32_t nvars, std::uint32_t card = 3, bool normalized = true) {
    toponets::SpnBuilder b(std::vector<std::uint32_t>(nvars, card));
    std::uniform_real_distribution<double> unif(0.05, 1.0);
    std::map<std::vector<VarId>, std::vector<NodeId>> built;

    std::function<NodeId(std::vector<VarId>, int)> gen = [&](std::vector<VarId> scope, int depth) -> NodeId {
        auto& pool = built[scope];
        if (!pool.empty() && std::bernoulli_distribution(0.3)(rng))
            return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        NodeId out;
        if (scope.size() == 1) {
            const VarId v = scope[0];
            std::vector<NodeId> kids;
            std::vector<double> w;
            for (std::uint32_t k = 0; k < card; ++k) {
                if (std::bernoulli_distribution(0.8)(rng)) {
                    kids.push_back(b.indicator(v, k));
                    w.push_back(unif(rng));
                }
            }
            if (kids.empty()) {
                out = b.indicator(v, std::uniform_int_distribution<std::uint32_t>(0, card - 1)(rng));
            } else {
                out = b.sum(kids, w);
            }
        } else {
            const int nmix = depth > 3 ? 1 : std::uniform_int_distribution<int>(1, 3)(rng);
            std::vector<NodeId> prods;
            std::vector<double> w;
            for (int m = 0; m < nmix; ++m) {
                auto s = scope;
                std::shuffle(s.begin(), s.end(), rng);
                const auto parts = std::uniform_int_distribution<std::size_t>(2, std::min<std::size_t>(3, s.size()))(rng);
                std::vector<std::vector<VarId>> sub(parts);
                for (std::size_t i = 0; i < s.size(); ++i) sub[i < parts ? i : std::uniform_int_distribution<std::size_t>(0, parts - 1)(rng)].push_back(s[i]);
                std::vector<NodeId> kids;
                for (auto& p : sub) {
                    std::sort(p.begin(), p.end());
                    kids.push_back(gen(p, depth + 1));
                }
                prods.push_back(b.product(kids));
                w.push_back(unif(rng));
            }
            out = (nmix == 1 && std::bernoulli_distribution(0.5)(rng)) ? prods[0] : b.sum(prods, w);
        }
        pool.push_back(out);
        return out;
    };

    std::vector<VarId> all(nvars);
    for (VarId v = 0; v < nvars; ++v) all[v] = v;
    Spn spn = std::move(b).build(gen(all, 0));
    if (normalized) spn = toponets::normalize_weights(spn, 1e-12);
    toponets::check_validity(spn);
    return spn;
}

/// Network polynomial in linear arithmetic at indicator values `lambda`
/// (flat (var, value) layout), by memoized recursive expansion.
inline double polynomial(const Spn& spn, const std::vector<double>& lambda, bool max_product = false) {
    std::unordered_map<NodeId, double> memo;
    std::function<double(NodeId)> rec = [&](NodeId n) -> double {
        if (auto it = memo.find(n); it != memo.end()) return it->second;
        double v = 0.0;
        switch (spn.kind(n)) {
            case NodeKind::Indicator:
                v = lambda[spn.indicator_offset(spn.indicator_var(n)) + spn.indicator_value(n)];
                break;
            case NodeKind::Product:
                v = 1.0;
                for (auto c : spn.children(n)) v *= rec(c);
                break;
            case NodeKind::Sum: {
                const auto kids = spn.children(n);
                const auto w = spn.weights(n);
                for (std::size_t i = 0; i < kids.size(); ++i) {
                    const double t = w[i] * rec(kids[i]);
                    v = max_product ? std::max(v, t) : v + t;
                }
                break;
            }
        }
        memo[n] = v;
        return v;
    };
    return rec(spn.root());
}

/// Indicator vector of a complete assignment.
inline std::vector<double> one_hot(const Spn& spn, const std::vector<std::uint32_t>& x) {
    std::vector<double> lambda(spn.num_indicator_slots(), 0.0);
    for (VarId v = 0; v < x.size(); ++v) lambda[spn.indicator_offset(v) + x[v]] = 1.0;
    return lambda;
}

/// Visits every complete assignment consistent with the evidence mask.
inline void for_each_completion(const toponets::Evidence& ev,
                                const std::function<void(const std::vector<std::uint32_t>&)>& fn) {
    const auto n = ev.num_variables();
    std::vector<std::uint32_t> x(n, 0);
    std::function<void(std::size_t)> rec = [&](std::size_t v) {
        if (v == n) {
            fn(x);
            return;
        }
        for (std::uint32_t k = 0; k < ev.cardinality(static_cast<VarId>(v)); ++k) {
            if (!ev.allowed(static_cast<VarId>(v), k)) continue;
            x[v] = k;
            rec(v + 1);
        }
    };
    rec(0);
}

/// Probability of the evidence: sum of the polynomial over all completions.
inline double enumerate_probability(const Spn& spn, const toponets::Evidence& ev) {
    double total = 0.0;
    for_each_completion(ev, [&](const auto& x) { total += polynomial(spn, one_hot(spn, x)); });
    return total;
}

/// Posterior marginals by enumeration.
inline std::vector<std::vector<double>> enumerate_marginals(const Spn& spn, const toponets::Evidence& ev) {
    std::vector<std::vector<double>> m(spn.num_variables());
    for (VarId v = 0; v < spn.num_variables(); ++v) m[v].assign(spn.cardinality(v), 0.0);
    double total = 0.0;
    for_each_completion(ev, [&](const auto& x) {
        const double p = polynomial(spn, one_hot(spn, x));
        total += p;
        for (VarId v = 0; v < x.size(); ++v) m[v][x[v]] += p;
    });
    for (auto& row : m)
        for (auto& p : row) p /= total;
    return m;
}

/// Maximum over completions of the max-product score of a complete assignment.
inline double enumerate_max_product(const Spn& spn, const toponets::Evidence& ev) {
    double best = 0.0;
    for_each_completion(ev, [&](const auto& x) { best = std::max(best, polynomial(spn, one_hot(spn, x), true)); });
    return best;
}

/// Random evidence: each variable observed, marginalized, or restricted to a subset.
inline toponets::Evidence random_evidence(std::mt19937_64& rng, const Spn& spn, double p_observe = 0.4,
                                          double p_subset = 0.2) {
    toponets::Evidence ev(spn);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (VarId v = 0; v < spn.num_variables(); ++v) {
        const double r = u(rng);
        const auto card = spn.cardinality(v);
        if (r < p_observe) {
            ev.observe(v, std::uniform_int_distribution<std::uint32_t>(0, card - 1)(rng));
        } else if (r < p_observe + p_subset) {
            const auto drop = std::uniform_int_distribution<std::uint32_t>(0, card - 1)(rng);
            ev.set(v, drop, false);
        }
    }
    return ev;
}

/// Relative error with an absolute floor for values near zero.
inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle

namespace oracle {

struct NaiveBayes {
    std::vector<double> prior;                 // per component
    std::vector<std::vector<double>> px1, px2; // per component, per value
};

inline NaiveBayes naive_bayes_params() {
    return {{0.5, 0.2, 0.3}, {{0.6, 0.4}, {0.9, 0.1}, {0.3, 0.7}}, {{0.3, 0.7}, {0.2, 0.8}, {0.1, 0.9}}};
}

/// Three-component naive-Bayes mixture over two binary variables.
inline Spn naive_bayes_spn() {
    const auto p = naive_bayes_params();
    toponets::SpnBuilder b({2, 2});
    std::vector<NodeId> comps;
    for (int c = 0; c < 3; ++c) {
        const NodeId i1[] = {b.indicator(0, 0), b.indicator(0, 1)};
        const NodeId i2[] = {b.indicator(1, 0), b.indicator(1, 1)};
        const NodeId s[] = {b.sum(i1, p.px1[c]), b.sum(i2, p.px2[c])};
        comps.push_back(b.product(s));
    }
    return std::move(b).build(b.sum(comps, p.prior));
}

}  // namespace oracle
