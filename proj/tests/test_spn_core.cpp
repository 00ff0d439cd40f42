#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <random>

#include "support/oracles.hpp"
#include "toponets/spn.hpp"
#include "toponets/spn_io.hpp"

using namespace toponets;

namespace {

Spn validated(Spn s) {
    REQUIRE(check_validity(s).ok());
    return s;
}

}  // namespace

TEST_CASE("naive Bayes mixture is valid") {
    Spn s = oracle::naive_bayes_spn();
    auto r = check_validity(s);
    CHECK(r.ok());
    CHECK(s.validated());
    CHECK(s.scope(s.root()).size() == 2);
}

TEST_CASE("validity violations are reported per node") {
    SUBCASE("non-decomposable product") {
        SpnBuilder b({2, 2});
        const NodeId a[] = {b.indicator(0, 0), b.indicator(0, 1)};
        const NodeId p = b.product(a);
        Spn s = std::move(b).build(p);
        auto r = check_validity(s);
        CHECK(r.non_decomposable_products == std::vector<NodeId>{p});
        CHECK(r.incomplete_sums.empty());
        CHECK_FALSE(s.validated());
        CHECK_THROWS_AS(evaluate(s, Evidence(s)), InputError);
    }
    SUBCASE("incomplete sum") {
        SpnBuilder b({2, 2});
        const NodeId x1 = b.indicator(0, 0);
        const NodeId pair[] = {b.indicator(0, 1), b.indicator(1, 0)};
        const NodeId p = b.product(pair);
        const NodeId kids[] = {x1, p};
        const double w[] = {0.5, 0.5};
        const NodeId s0 = b.sum(kids, w);
        Spn s = std::move(b).build(s0);
        auto r = check_validity(s);
        CHECK(r.incomplete_sums == std::vector<NodeId>{s0});
        CHECK(r.non_decomposable_products.empty());
    }
}

TEST_CASE("node table errors") {
    std::vector<NodeRecord> cyc(2);
    cyc[0].kind = NodeKind::Product;
    cyc[0].children = {1};
    cyc[1].kind = NodeKind::Product;
    cyc[1].children = {0};
    CHECK_THROWS_AS(spn_from_node_table({2}, cyc, 0), StructuralError);

    std::vector<NodeRecord> dangling(1);
    dangling[0].kind = NodeKind::Product;
    dangling[0].children = {7};
    CHECK_THROWS_AS(spn_from_node_table({2}, dangling, 0), StructuralError);

    // Out-of-order but acyclic tables are re-sorted.
    std::vector<NodeRecord> rev(3);
    rev[0].kind = NodeKind::Sum;
    rev[0].children = {1, 2};
    rev[0].weights = {0.25, 0.75};
    rev[1].kind = NodeKind::Indicator;
    rev[1].var = 0;
    rev[1].value = 0;
    rev[2].kind = NodeKind::Indicator;
    rev[2].var = 0;
    rev[2].value = 1;
    Spn s = validated(spn_from_node_table({2}, rev, 0));
    Evidence e(s);
    e.observe(0, 1);
    CHECK(evaluate(s, e) == doctest::Approx(std::log(0.75)).epsilon(1e-15));
}

TEST_CASE("evaluate: indicator semantics and full marginalization") {
    SpnBuilder b({2});
    Spn ind = validated(std::move(b).build(b.indicator(0, 1)));
    Evidence e(ind);
    e.observe(0, 1);
    CHECK(evaluate(ind, e) == 0.0);
    e.observe(0, 0);
    CHECK(evaluate(ind, e) == kNegInf);

    Spn nb = validated(oracle::naive_bayes_spn());
    CHECK(evaluate(nb, Evidence(nb)) == 0.0);
}

TEST_CASE("evaluate matches brute-force polynomial expansion") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 40; ++t) {
        Spn s = oracle::random_spn(rng, 8, 3, t % 2 == 0);
        REQUIRE(s.validated());
        std::vector<std::uint32_t> x(8);
        for (auto& v : x) v = std::uniform_int_distribution<std::uint32_t>(0, 2)(rng);
        Evidence e(s);
        for (VarId v = 0; v < 8; ++v) e.observe(v, x[v]);
        const double expect = std::log(oracle::polynomial(s, oracle::one_hot(s, x)));
        const double got = evaluate(s, e);
        if (expect == kNegInf)
            CHECK(got == kNegInf);
        else
            CHECK(std::abs(got - expect) <= 1e-9);
    }
}

TEST_CASE("evidence that misses variables is rejected") {
    Spn s = validated(oracle::naive_bayes_spn());
    Evidence wrong(std::vector<std::uint32_t>{2});
    CHECK_THROWS_AS(evaluate(s, wrong), InputError);
    Evidence empty(s);
    empty.set(0, 0, false);
    empty.set(0, 1, false);
    CHECK_THROWS_AS(evaluate(s, empty), InputError);
}

TEST_CASE("marginals on the naive Bayes mixture") {
    Spn s = validated(oracle::naive_bayes_spn());
    const auto p = oracle::naive_bayes_params();
    Evidence e(s);
    e.observe(0, 1);
    const auto m = marginals(s, e);
    CHECK(m[0][0] == 0.0);
    CHECK(m[0][1] == doctest::Approx(1.0).epsilon(1e-12));
    double joint[2] = {0, 0};
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 2; ++k) joint[k] += p.prior[c] * p.px1[c][1] * p.px2[c][k];
    const double z = joint[0] + joint[1];
    CHECK(std::abs(m[1][0] - joint[0] / z) <= 1e-12);
    CHECK(std::abs(m[1][1] - joint[1] / z) <= 1e-12);
}

TEST_CASE("marginals match enumeration and rows are normalized") {
    std::mt19937_64 rng(12);
    int checked = 0;
    for (int t = 0; t < 60; ++t) {
        const auto n = std::uniform_int_distribution<std::uint32_t>(1, 9)(rng);
        Spn s = oracle::random_spn(rng, n);
        Evidence e = oracle::random_evidence(rng, s);
        if (oracle::enumerate_probability(s, e) == 0.0) {
            CHECK_THROWS_AS(marginals(s, e), ImpossibleEvidence);
            continue;
        }
        const auto got = marginals(s, e);
        const auto expect = oracle::enumerate_marginals(s, e);
        for (VarId v = 0; v < n; ++v) {
            CHECK(std::abs(got[v].sum() - 1.0) <= 1e-9);
            for (std::uint32_t k = 0; k < 3; ++k) CHECK(std::abs(got[v][k] - expect[v][k]) <= 1e-6);
        }
        ++checked;
    }
    CHECK(checked > 30);
}

TEST_CASE("indicator gradients match central finite differences") {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 20; ++t) {
        Spn s = oracle::random_spn(rng, 6);
        std::vector<double> li(s.num_indicator_slots());
        for (auto& x : li) x = std::log(std::uniform_real_distribution<double>(0.2, 1.0)(rng));
        const auto g = indicator_gradients(s, li);
        std::vector<double> values(s.num_nodes());
        for (std::size_t i = 0; i < li.size(); ++i) {
            const double h = 1e-5;
            auto lp = li, lm = li;
            lp[i] += h;
            lm[i] -= h;
            evaluate_nodes(s, lp, values);
            const double fp = values[s.root()];
            evaluate_nodes(s, lm, values);
            const double fd = (fp - values[s.root()]) / (2 * h);
            CHECK(oracle::rel_err(g[i], fd) <= 1e-4);
        }
    }
}

TEST_CASE("mpe: max-product decoding semantics") {
    std::mt19937_64 rng(14);
    for (int t = 0; t < 60; ++t) {
        const auto n = std::uniform_int_distribution<std::uint32_t>(1, 8)(rng);
        Spn s = oracle::random_spn(rng, n);
        Evidence e = oracle::random_evidence(rng, s);
        const double best = oracle::enumerate_max_product(s, e);
        if (best == 0.0) {
            CHECK_THROWS_AS(mpe(s, e), ImpossibleEvidence);
            continue;
        }
        const auto r = mpe(s, e);
        CHECK(std::abs(r.log_score - std::log(best)) <= 1e-9);
        std::vector<std::uint32_t> x(n);
        for (VarId v = 0; v < n; ++v) {
            if (e.is_observed(v)) {
                CHECK_FALSE(r.has(v));
                for (std::uint32_t k = 0; k < 3; ++k)
                    if (e.allowed(v, k)) x[v] = k;
            } else {
                REQUIRE(r.has(v));
                CHECK(e.allowed(v, static_cast<std::uint32_t>(r.assignment[v])));
                x[v] = static_cast<std::uint32_t>(r.assignment[v]);
            }
        }
        const double attained = oracle::polynomial(s, oracle::one_hot(s, x), true);
        CHECK(std::abs(std::log(attained) - std::log(best)) <= 1e-9);
    }
}

TEST_CASE("mpe on full evidence and degenerate mixtures") {
    Spn nb = validated(oracle::naive_bayes_spn());
    Evidence full(nb);
    full.observe(0, 0);
    full.observe(1, 1);
    const auto r = mpe(nb, full);
    CHECK_FALSE(r.has(0));
    CHECK_FALSE(r.has(1));
    CHECK(r.log_score <= evaluate(nb, full));

    // One component carries (almost) all the mass.
    SpnBuilder b({3, 3});
    std::vector<NodeId> comps;
    const double w0[] = {0.1, 0.7, 0.2}, w1[] = {0.6, 0.3, 0.1};
    for (int c = 0; c < 2; ++c) {
        const NodeId i1[] = {b.indicator(0, 0), b.indicator(0, 1), b.indicator(0, 2)};
        const NodeId i2[] = {b.indicator(1, 0), b.indicator(1, 1), b.indicator(1, 2)};
        const NodeId kids[] = {b.sum(i1, c == 0 ? w0 : w1), b.sum(i2, c == 0 ? w1 : w0)};
        comps.push_back(b.product(kids));
    }
    const double top[] = {1.0 - 1e-9, 1e-9};
    Spn s = validated(std::move(b).build(b.sum(comps, top)));
    const auto m = mpe(s, Evidence(s));
    CHECK(m.assignment[0] == 1);
    CHECK(m.assignment[1] == 0);
}

TEST_CASE("hybrid mpe marginalizes non-query variables") {
    std::mt19937_64 rng(15);
    for (int t = 0; t < 30; ++t) {
        const std::uint32_t n = 6;
        Spn s = oracle::random_spn(rng, n);
        MpeOptions opt;
        opt.query.assign(n, 0);
        opt.query[0] = opt.query[1] = 1;
        Evidence e(s);
        const auto r = mpe(s, e, opt);
        for (VarId v = 2; v < n; ++v) CHECK_FALSE(r.has(v));
        // The max over query values of the hybrid score equals the returned score.
        double best = kNegInf;
        for (std::uint32_t a = 0; a < 3; ++a)
            for (std::uint32_t c = 0; c < 3; ++c) {
                Evidence q(s);
                q.observe(0, a);
                q.observe(1, c);
                best = std::max(best, max_product_value(s, q.log_indicators(), opt));
            }
        CHECK(std::abs(best - r.log_score) <= 1e-12);
        Evidence q(s);
        q.observe(0, static_cast<std::uint32_t>(r.assignment[0]));
        q.observe(1, static_cast<std::uint32_t>(r.assignment[1]));
        CHECK(std::abs(max_product_value(s, q.log_indicators(), opt) - best) <= 1e-12);
    }
}

TEST_CASE("normalize_weights") {
    SpnBuilder b({2});
    const NodeId kids[] = {b.indicator(0, 0), b.indicator(0, 1)};
    const double w[] = {2.0, 2.0};
    Spn s = std::move(b).build(b.sum(kids, w));
    Spn n = normalize_weights(s);
    CHECK(n.weights(n.root())[0] == 0.5);
    CHECK(n.weights(n.root())[1] == 0.5);
    Spn again = normalize_weights(n);
    CHECK(again == n);

    std::mt19937_64 rng(16);
    for (int t = 0; t < 20; ++t) {
        Spn r = oracle::random_spn(rng, 7, 3, false);
        Spn rn = validated(normalize_weights(r));
        CHECK(std::abs(evaluate(rn, Evidence(rn))) <= 1e-9);
    }
}

TEST_CASE("normalized networks: probabilities bounded, marginalizing never decreases") {
    std::mt19937_64 rng(17);
    for (int t = 0; t < 30; ++t) {
        Spn s = oracle::random_spn(rng, 7);
        Evidence e = oracle::random_evidence(rng, s, 0.8, 0.1);
        const double lp = evaluate(s, e);
        CHECK(lp <= 1e-12);
        for (VarId v = 0; v < 7; ++v) {
            Evidence m = e;
            m.marginalize(v);
            CHECK(evaluate(s, m) >= lp - 1e-12);
        }
    }
}

TEST_CASE("inference is linear in the edge count") {
    std::mt19937_64 rng(18);
    Spn s = oracle::random_spn(rng, 12);
    OpCounter ops;
    Evidence e(s);
    evaluate(s, e, &ops);
    CHECK(ops.edge_ops == s.num_edges() + s.num_nodes());
    ops = {};
    marginals(s, e, &ops);
    CHECK(ops.edge_ops == 2 * (s.num_edges() + s.num_nodes()));
    ops = {};
    mpe(s, e, {}, &ops);
    CHECK(ops.edge_ops == 2 * (s.num_edges() + s.num_nodes()));
}

TEST_CASE("repeated calls are bit-identical") {
    std::mt19937_64 rng(19);
    Spn s = oracle::random_spn(rng, 10);
    Evidence e = oracle::random_evidence(rng, s, 0.3, 0.0);
    const double a = evaluate(s, e), b2 = evaluate(s, e);
    CHECK(std::memcmp(&a, &b2, sizeof a) == 0);
    const auto m1 = marginals(s, e), m2 = marginals(s, e);
    for (std::size_t v = 0; v < m1.size(); ++v) CHECK((m1[v].array() == m2[v].array()).all());
}

TEST_CASE("serialization round trips") {
    Spn nb = validated(oracle::naive_bayes_spn());
    CHECK(deserialize(serialize(nb)) == nb);
    CHECK(spn_from_json(spn_to_json(nb)) == nb);

    std::mt19937_64 rng(20);
    SpnBuilder b(std::vector<std::uint32_t>(400, 3));
    std::vector<NodeId> tops;
    std::uniform_real_distribution<double> u(1e-3, 1.0);
    for (VarId v = 0; v < 400; ++v) {
        std::vector<NodeId> sums;
        for (int m = 0; m < 250; ++m) {
            const NodeId kids[] = {b.indicator(v, 0), b.indicator(v, 1), b.indicator(v, 2)};
            const double w[] = {u(rng), u(rng), u(rng)};
            sums.push_back(b.sum(kids, w));
        }
        std::vector<double> w(sums.size());
        for (auto& x : w) x = u(rng);
        tops.push_back(b.sum(sums, w));
    }
    Spn big = std::move(b).build(b.product(tops));
    REQUIRE(big.num_nodes() >= 100000);
    const auto bytes = serialize(big);
    CHECK(deserialize(bytes) == big);

    auto cut = bytes;
    cut.resize(cut.size() / 2);
    CHECK_THROWS_AS(deserialize(cut), ParseError);
    try {
        deserialize(cut);
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("node ") != std::string::npos);
    }
    auto bad = serialize(nb);
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize(bad), ParseError);
}

TEST_CASE("model files on disk") {
    const auto dir = std::filesystem::temp_directory_path() / "toponets_spn_io";
    std::filesystem::create_directories(dir);
    Spn nb = validated(oracle::naive_bayes_spn());
    save_spn(dir / "nb.tspn", nb);
    save_spn(dir / "nb.json", nb);
    CHECK(load_spn(dir / "nb.tspn") == nb);
    CHECK(load_spn(dir / "nb.json") == nb);
    CHECK(load_spn(dir / "nb.json").validated());
}

TEST_CASE("simplex maps produce weights summing to exactly one") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(1e-6, 1.0);
    for (int t = 0; t < 2000; ++t) {
        const auto n = static_cast<std::size_t>(2 + t % 19);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) a[i] = b[i] = u(rng) * (t % 3 == 0 ? 1e3 : 1.0);
        rescale_to_simplex(a, 1e-8);
        project_to_simplex(b, 1e-8);
        CHECK(std::accumulate(a.begin(), a.end(), 0.0) == 1.0);
        CHECK(std::accumulate(b.begin(), b.end(), 0.0) == 1.0);
    }
}
