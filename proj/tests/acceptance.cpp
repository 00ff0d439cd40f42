// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [criterion ...]
//
// With no criteria listed every criterion runs. Exit status is 0 only when
// every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "support/oracles.hpp"
#include "toponets/cli.hpp"
#include "toponets/spn_io.hpp"
#include "toponets/spn_learn.hpp"

using namespace toponets;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and sizes.
constexpr int kOracleNetworks = 200;
constexpr std::uint32_t kOracleMaxVars = 12;
constexpr double kEvaluateTol = 1e-9;
constexpr double kMarginalTol = 1e-6;
constexpr double kMpeTol = 1e-9;
constexpr double kOracleSeconds = 120.0;
constexpr int kValidityMaps = 100;
constexpr int kGradientNetworks = 50;
constexpr double kGradientTol = 1e-4;
constexpr int kMixtureMaps = 50;
constexpr double kMixtureTol = 1e-9;
constexpr int kJointMpeMaps = 20;
constexpr double kJointMpeTol = 1e-9;
constexpr double kJointMpeSeconds = 600.0;
constexpr double kClassifyMargin = 0.01;
constexpr double kPlaceholderMargin = 0.15;
constexpr double kNoveltyAuc = 0.90;
constexpr std::size_t kNoveltyPairs = 50;
constexpr double kTreeTol = 1e-8;
constexpr double kLoopyTv = 0.05;
constexpr double kBenchBudget = 10.0;
constexpr double kBenchBudget8 = 3.0;

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[1024];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double log_mean_exp(const std::vector<double>& xs) {
    return log_sum_exp(xs) - std::log(static_cast<double>(xs.size()));
}

SemanticMap submap(const SemanticMap& m, PlaceId start, std::size_t k) {
    const auto adj = m.adjacency();
    std::vector<PlaceId> order{start};
    std::vector<std::uint8_t> seen(m.size(), 0);
    seen[start] = 1;
    for (std::size_t h = 0; h < order.size() && order.size() < k; ++h)
        for (auto v : adj[order[h]])
            if (!seen[v] && order.size() < k) {
                seen[v] = 1;
                order.push_back(v);
            }
    std::map<PlaceId, PlaceId> id;
    SemanticMap s;
    s.name = m.name + "_sub" + std::to_string(start) + "_" + std::to_string(k);
    s.class_set = m.class_set;
    s.num_classes = m.num_classes;
    for (auto v : order) {
        id[v] = static_cast<PlaceId>(s.nodes.size());
        s.nodes.push_back(m.nodes[v]);
    }
    for (auto [a, b] : m.edges)
        if (id.count(a) && id.count(b)) s.edges.emplace_back(id[a], id[b]);
    canonicalize_edges(s);
    return s;
}

// Shared experiment pipeline: corpus, four splits trained and evaluated
// through the command layer.
struct SplitRun {
    std::string split;
    fs::path train_dir;
    std::map<std::string, nlohmann::json> reports;  // engine -> report.json
};

struct Pipeline {
    fs::path work;
    fs::path corpus;
    std::uint64_t manifest_hash = 0;
    std::vector<SplitRun> splits;
};

std::optional<Pipeline> g_pipeline;
fs::path g_work;

const Pipeline& pipeline() {
    if (g_pipeline) return *g_pipeline;
    Pipeline p;
    p.work = g_work;
    p.corpus = p.work / "corpus";
    GenOptions gen;
    gen.out = p.corpus;
    gen.force = true;
    p.manifest_hash = cmd_gen(gen).manifest_hash;
    const auto manifest = load_manifest(p.corpus);
    for (const auto& tag : manifest.splits) {
        SplitRun run;
        run.split = tag;
        run.train_dir = p.work / ("train_" + tag);
        TrainOptions t;
        t.corpus = p.corpus;
        t.out = run.train_dir;
        t.config.split = tag;
        t.force = true;
        cmd_train(t);
        for (auto engine : {Engine::Toponet, Engine::Mrf, Engine::Local}) {
            EvalOptions e;
            e.corpus = p.corpus;
            e.models = run.train_dir;
            e.out = p.work / ("eval_" + tag + "_" + to_string(engine));
            e.engine = engine;
            e.force = true;
            if (engine == Engine::Local) e.tasks = {Task::Classify, Task::Novelty};
            run.reports[to_string(engine)] = cmd_eval(e).report;
        }
        p.splits.push_back(std::move(run));
    }
    g_pipeline = std::move(p);
    return *g_pipeline;
}

const Models& split_models() {
    static std::optional<Models> m;
    if (!m) m = load_models(pipeline().splits.back().train_dir / "models");
    return *m;
}

const std::vector<SemanticMap>& corpus_maps() {
    static std::vector<SemanticMap> maps;
    if (maps.empty()) {
        const auto& p = pipeline();
        const auto manifest = load_manifest(p.corpus);
        for (const auto& e : manifest.maps) maps.push_back(load_map(p.corpus / e.file));
    }
    return maps;
}

std::vector<MapAccuracy> accuracy_maps(const std::string& engine, const std::string& task) {
    std::vector<MapAccuracy> out;
    for (const auto& run : pipeline().splits) {
        const auto& r = run.reports.at(engine);
        if (!r["tasks"].contains(task)) continue;
        for (const auto& m : r["tasks"][task]["maps"]) {
            MapAccuracy a;
            a.map = m["map"];
            a.correct = m["correct"];
            a.total = m["total"];
            a.truth_counts = m["truth_counts"].get<std::vector<std::size_t>>();
            out.push_back(a);
        }
    }
    return out;
}

std::vector<MapNovelty> novelty_maps(const std::string& engine) {
    std::vector<MapNovelty> out;
    for (const auto& run : pipeline().splits)
        for (const auto& m : run.reports.at(engine)["tasks"]["novelty"]["maps"]) {
            MapNovelty n;
            n.map = m["map"];
            n.known = m["known"];
            for (const auto& s : m["novel"]) n.novel.push_back({s["swap"][0], s["swap"][1], s["score"]});
            out.push_back(n);
        }
    return out;
}

// 1. SPN oracle equivalence.
Outcome spn_oracle() {
    std::mt19937_64 rng(101);
    double worst_eval = 0.0, worst_marg = 0.0, worst_mpe = 0.0, spn_time = 0.0;
    int mpe_ok = 0, mpe_total = 0, impossible = 0, max_vars = 0;
    const auto t0 = Clock::now();
    for (int t = 0; t < kOracleNetworks; ++t) {
        const auto n = t < 20 ? kOracleMaxVars : std::uniform_int_distribution<std::uint32_t>(1, kOracleMaxVars)(rng);
        max_vars = std::max<int>(max_vars, n);
        Spn s = oracle::random_spn(rng, n, 3, t % 4 != 0);
        const auto ev = oracle::random_evidence(rng, s, t < 20 ? 0.5 : 0.3, 0.2);
        const double p = oracle::enumerate_probability(s, ev);
        const auto t1 = Clock::now();
        const double lp = evaluate(s, ev);
        spn_time += since(t1);
        if (p == 0.0) {
            ++impossible;
            if (lp != kNegInf) worst_eval = INFINITY;
            continue;
        }
        worst_eval = std::max(worst_eval, std::abs(lp - std::log(p)));

        const auto t2 = Clock::now();
        const auto got = marginals(s, ev);
        const auto r = mpe(s, ev);
        spn_time += since(t2);
        const auto expect = oracle::enumerate_marginals(s, ev);
        for (VarId v = 0; v < n; ++v)
            for (std::uint32_t k = 0; k < 3; ++k)
                if (expect[v][k] > 0.0) worst_marg = std::max(worst_marg, std::abs(std::log(got[v][k]) - std::log(expect[v][k])));
                else if (got[v][k] != 0.0) worst_marg = INFINITY;

        const double best = std::log(oracle::enumerate_max_product(s, ev));
        std::vector<std::uint32_t> x(n);
        for (VarId v = 0; v < n; ++v) {
            if (r.has(v)) {
                x[v] = static_cast<std::uint32_t>(r.assignment[v]);
            } else {
                for (std::uint32_t k = 0; k < 3; ++k)
                    if (ev.allowed(v, k)) x[v] = k;
            }
        }
        bool ok = true;
        for (VarId v = 0; v < n; ++v) ok = ok && ev.allowed(v, x[v]);
        const double attained = std::log(oracle::polynomial(s, oracle::one_hot(s, x), true));
        ok = ok && std::abs(attained - best) <= kMpeTol && std::abs(r.log_score - best) <= kMpeTol;
        worst_mpe = std::max(worst_mpe, std::abs(attained - best));
        mpe_ok += ok;
        ++mpe_total;
    }
    const double total = since(t0);
    const bool pass = worst_eval <= kEvaluateTol && worst_marg <= kMarginalTol && mpe_ok == mpe_total && total < kOracleSeconds;
    return {pass, fmt("%d networks (<= %d ternary vars, %d impossible evidence), max log err evaluate %.2e (tol %.0e), "
                      "marginals %.2e (tol %.0e), mpe optimal %d/%d (max gap %.2e); %.1f s total, %.2f s in SPN calls",
                      kOracleNetworks, max_vars, impossible, worst_eval, kEvaluateTol, worst_marg, kMarginalTol, mpe_ok,
                      mpe_total, worst_mpe, total, spn_time)};
}

// 2. Validity suite.
Outcome validity() {
    std::size_t dense = 0, dense_bad = 0, pm_bad = 0, inst_bad = 0, inst = 0;
    for (std::uint32_t n : {1u, 2u, 3u, 7u, 16u, 49u, 1176u})
        for (std::uint32_t d = 1; d <= 3; ++d)
            for (std::uint32_t depth : {0u, 1u, 2u}) {
                if (n == 1176 && depth == 0) continue;
                StructureConfig cfg{d, 2, 2, depth, 3 + n};
                std::vector<VarId> vars(n);
                for (VarId v = 0; v < n; ++v) vars[v] = v;
                Spn s = generate_dense_structure(vars, std::vector<std::uint32_t>(n, 3), cfg);
                Spn copy = s;
                dense_bad += !check_validity(copy).ok();
                ++dense;
            }
    for (std::uint32_t k : {6u, 10u}) {
        Spn s = build_place_model(k).spn();
        pm_bad += !check_validity(s).ok();
    }
    const auto& model = split_models().toponet;
    const auto& maps = corpus_maps();
    std::mt19937_64 rng(102);
    std::uint32_t max_n = 0;
    std::size_t max_nodes = 0, with_placeholders = 0;
    for (int t = 0; t < kValidityMaps; ++t) {
        const auto& f = maps[std::uniform_int_distribution<std::size_t>(0, maps.size() - 1)(rng)];
        SemanticMap m;
        if (t % 3 == 0) {
            const auto states = simulate_exploration(f, f.size() - 1, 200 + t);
            m = states[std::uniform_int_distribution<std::size_t>(0, states.size() - 1)(rng)];
            with_placeholders += m.num_placeholders() > 0;
        } else {
            const auto k = std::uniform_int_distribution<std::size_t>(1, f.size())(rng);
            m = submap(f, std::uniform_int_distribution<PlaceId>(0, f.size() - 1)(rng), k);
        }
        const auto n = t < 10 ? 40u : std::uniform_int_distribution<std::uint32_t>(1, 40)(rng);
        auto i = instantiate(model, m, n, 300 + t, false);
        const auto rep = check_validity(i.spn);
        inst_bad += rep.incomplete_sums.size() + rep.non_decomposable_products.size();
        ++inst;
        max_n = std::max(max_n, n);
        max_nodes = std::max(max_nodes, m.size());
    }
    return {dense_bad == 0 && pm_bad == 0 && inst_bad == 0,
            fmt("dense structures %zu (invalid %zu), place models 6/10 classes (invalid %zu), instantiated %zu maps "
                "(%zu with placeholders, up to %zu nodes, N up to %u): %zu violations",
                dense, dense_bad, pm_bad, inst, with_placeholders, max_nodes, max_n, inst_bad)};
}

// 3. Gradient checks.
Outcome gradients() {
    std::mt19937_64 rng(103);
    double worst_ind = 0.0, worst_w = 0.0;
    int nets = 0, w_checks = 0, ind_checks = 0;
    while (nets < kGradientNetworks) {
        Spn s = oracle::random_spn(rng, std::uniform_int_distribution<std::uint32_t>(2, 6)(rng));
        if (s.kind(s.root()) != NodeKind::Sum || s.children(s.root()).size() < 2) continue;
        ++nets;
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
            worst_ind = std::max(worst_ind, oracle::rel_err(g[i], fd));
            ++ind_checks;
        }

        const auto ncls = static_cast<std::uint32_t>(s.children(s.root()).size());
        std::vector<LabeledSample> data;
        for (int i = 0; i < 5; ++i) {
            LabeledSample x{oracle::random_evidence(rng, s, 0.6, 0.2), static_cast<std::uint32_t>(i) % ncls, 1.0 + i};
            if (evaluate(s, x.evidence) == kNegInf) continue;
            data.push_back(std::move(x));
        }
        if (data.empty()) continue;
        for (Loss loss : {Loss::Generative, Loss::Discriminative}) {
            if (!std::isfinite(mean_loss(s, data, loss))) continue;
            const auto wg = weight_gradient(s, data, loss);
            for (NodeId n = 0; n < s.num_nodes(); ++n) {
                if (s.kind(n) != NodeKind::Sum) continue;
                const std::vector<double> w0(s.weights(n).begin(), s.weights(n).end());
                for (std::size_t k = 0; k < w0.size(); ++k) {
                    const double h = 1e-6 * w0[k];
                    Spn p = s, m = s;
                    auto wp = w0, wm = w0;
                    wp[k] += h;
                    wm[k] -= h;
                    p.set_weights(n, wp);
                    m.set_weights(n, wm);
                    check_validity(p);
                    check_validity(m);
                    const double fd = (mean_loss(m, data, loss) - mean_loss(p, data, loss)) / (2 * h);
                    worst_w = std::max(worst_w, oracle::rel_err(wg[s.edge_begin(n) + k], fd, 1e-3));
                    ++w_checks;
                }
            }
        }
    }
    return {worst_ind <= kGradientTol && worst_w <= kGradientTol,
            fmt("%d networks: indicator gradients %d checks max rel err %.2e, weight gradients %d checks max rel err %.2e "
                "(tol %.0e)",
                nets, ind_checks, worst_ind, w_checks, worst_w, kGradientTol)};
}

// 4. Mixture identity.
Outcome mixture_identity() {
    const auto& model = split_models().toponet;
    const auto& maps = corpus_maps();
    std::mt19937_64 rng(104);
    double worst = 0.0;
    for (int t = 0; t < kMixtureMaps; ++t) {
        const auto& f = maps[std::uniform_int_distribution<std::size_t>(0, maps.size() - 1)(rng)];
        const auto m = submap(f, std::uniform_int_distribution<PlaceId>(0, f.size() - 1)(rng),
                              std::uniform_int_distribution<std::size_t>(1, 40)(rng));
        const auto n = std::uniform_int_distribution<std::uint32_t>(1, 40)(rng);
        const auto inst = instantiate(model, m, n, 400 + t);
        const auto li = map_evidence(inst, m).log_indicators();
        std::vector<double> values(inst.spn.num_nodes());
        evaluate_nodes(inst.spn, li, values);
        std::vector<double> kids;
        for (auto r : inst.decomposition_roots) kids.push_back(values[r]);
        worst = std::max(worst, std::abs(values[inst.spn.root()] - log_mean_exp(kids)));
        worst = std::max(worst, std::abs(evaluate(inst.spn, map_evidence(inst, m)) - log_mean_exp(kids)));
    }
    return {worst <= kMixtureTol, fmt("%d maps: max |root - log-mean-exp(children)| %.2e (tol %.0e)", kMixtureMaps, worst,
                                      kMixtureTol)};
}

// 5. Joint-MPE oracle.
Outcome joint_mpe() {
    const auto& model = split_models().toponet;
    const auto& maps = corpus_maps();
    const auto t0 = Clock::now();
    std::mt19937_64 rng(105);
    int matched = 0, consistent = 0;
    double worst_gap = 0.0;
    for (int t = 0; t < kJointMpeMaps; ++t) {
        const auto& f = maps[t % maps.size()];
        const std::size_t places = t < 10 ? 8 : std::uniform_int_distribution<std::size_t>(2, 8)(rng);
        const auto m = submap(f, std::uniform_int_distribution<PlaceId>(0, f.size() - 1)(rng), places);
        const auto n = std::uniform_int_distribution<std::uint32_t>(1, 40)(rng);
        const auto inst = instantiate(model, m, n, 500 + t);
        const auto k = m.size();

        // Per part, the max-product score of its template network for every class tuple.
        std::map<std::pair<std::uint32_t, std::vector<PlaceId>>, std::vector<double>> table;
        std::vector<std::vector<std::pair<const std::vector<double>*, const std::vector<PlaceId>*>>> parts;
        for (const auto& d : inst.decompositions) {
            auto& row = parts.emplace_back();
            for (const auto& p : d.parts) {
                auto& cells = table[{p.template_index, p.nodes}];
                if (cells.empty()) {
                    const auto& tpl = model.template_spns[p.template_index];
                    MpeOptions opt;
                    opt.query.assign(tpl.spn.num_variables(), 0);
                    for (std::uint32_t s = 0; s < tpl.shape.slots; ++s) opt.query[tpl.class_var(s)] = 1;
                    std::size_t count = 1;
                    for (std::uint32_t s = 0; s < tpl.shape.slots; ++s) count *= 6;
                    for (std::size_t code = 0; code < count; ++code) {
                        auto ev = part_evidence(tpl, m, p, false);
                        std::size_t c = code;
                        for (std::uint32_t s = 0; s < tpl.shape.slots; ++s, c /= 6)
                            ev.observe(tpl.class_var(s), static_cast<std::uint32_t>(c % 6));
                        cells.push_back(max_product_value(tpl.spn, ev.log_indicators(), opt));
                    }
                }
                row.push_back({&cells, &p.nodes});
            }
        }
        const double log_n = std::log(static_cast<double>(inst.decompositions.size()));
        auto score = [&](const std::vector<std::uint32_t>& y) {
            double best = kNegInf;
            for (const auto& row : parts) {
                double s = 0.0;
                for (const auto& [cells, nodes] : row) {
                    std::size_t code = 0;
                    for (std::size_t q = nodes->size(); q-- > 0;) code = code * 6 + y[(*nodes)[q]];
                    s += (*cells)[code];
                }
                best = std::max(best, s);
            }
            return best - log_n;
        };

        // The part-table score must agree with the instantiated network itself.
        MpeOptions query;
        query.query.assign(inst.spn.num_variables(), 0);
        for (PlaceId i = 0; i < k; ++i) query.query[inst.class_var(i)] = 1;
        std::vector<std::uint32_t> y(k, 0);
        bool agree = true;
        for (int probe = 0; probe < 3; ++probe) {
            for (auto& c : y) c = std::uniform_int_distribution<std::uint32_t>(0, 5)(rng);
            auto ev = map_evidence(inst, m);
            for (PlaceId i = 0; i < k; ++i) ev.observe(inst.class_var(i), y[i]);
            agree = agree && std::abs(max_product_value(inst.spn, ev.log_indicators(), query) - score(y)) < kJointMpeTol;
        }
        consistent += agree;

        std::size_t total = 1;
        for (std::size_t i = 0; i < k; ++i) total *= 6;
        double best = kNegInf;
        for (std::size_t code = 0; code < total; ++code) {
            std::size_t c = code;
            for (std::size_t i = 0; i < k; ++i, c /= 6) y[i] = static_cast<std::uint32_t>(c % 6);
            best = std::max(best, score(y));
        }
        for (const auto& p : classify_places(inst, m)) y[p.id] = p.mpe_class;
        const double gap = best - score(y);
        worst_gap = std::max(worst_gap, gap);
        matched += agree && gap <= kJointMpeTol;
    }
    const double secs = since(t0);
    return {matched == kJointMpeMaps && secs < kJointMpeSeconds,
            fmt("%d/%d maps attain the exhaustive 6^k max-product optimum (k <= 8, N in [1,40]); part tables agree with "
                "the network on %d/%d; max gap %.2e; %.1f s",
                matched, kJointMpeMaps, consistent, kJointMpeMaps, worst_gap, secs)};
}

std::string per_split(const std::string& engine, const std::string& task) {
    std::string s;
    for (const auto& run : pipeline().splits) {
        const auto& r = run.reports.at(engine)["tasks"];
        if (!r.contains(task)) continue;
        s += fmt(" %s:%.3f", run.split.c_str(), r[task]["summary"]["pooled"].get<double>());
    }
    return s;
}

// 6. Classification under corrupted geometry.
Outcome corrupted_classification() {
    const auto topo = summarize_accuracy(accuracy_maps("toponet", "classify"));
    const auto local = summarize_accuracy(accuracy_maps("local", "classify"));
    const auto mrf = summarize_accuracy(accuracy_maps("mrf", "classify"));
    return {topo.pooled >= local.pooled + kClassifyMargin,
            fmt("4 splits, %zu places: TopoNet %.2f%% (%.2f +- %.2f per map) vs local %.2f%% (%.2f +- %.2f), margin %.2f "
                "pts (need >= %.0f); MRF %.2f%%; TopoNet per split%s",
                topo.total, 100 * topo.pooled, 100 * topo.per_map.mean, 100 * topo.per_map.std, 100 * local.pooled,
                100 * local.per_map.mean, 100 * local.per_map.std, 100 * (topo.pooled - local.pooled),
                100 * kClassifyMargin, 100 * mrf.pooled, per_split("toponet", "classify").c_str())};
}

// 7. Placeholder inference.
Outcome placeholders() {
    const auto topo = summarize_accuracy(accuracy_maps("toponet", "placeholders"));
    const auto mrf = summarize_accuracy(accuracy_maps("mrf", "placeholders"));
    return {topo.pooled >= topo.majority + kPlaceholderMargin && topo.pooled > mrf.pooled,
            fmt("4 splits, %zu placeholders: TopoNet %.2f%% (%.2f +- %.2f per map), majority %.2f%% (+%.2f pts, need >= "
                "%.0f), MRF %.2f%%; TopoNet per split%s; MRF per split%s",
                topo.total, 100 * topo.pooled, 100 * topo.per_map.mean, 100 * topo.per_map.std, 100 * topo.majority,
                100 * (topo.pooled - topo.majority), 100 * kPlaceholderMargin, 100 * mrf.pooled,
                per_split("toponet", "placeholders").c_str(), per_split("mrf", "placeholders").c_str())};
}

// 8. Novelty ROC.
Outcome novelty() {
    const auto topo = summarize_novelty(novelty_maps("toponet"));
    const auto mrf = summarize_novelty(novelty_maps("mrf"));
    return {topo.pairs >= kNoveltyPairs && topo.auc >= kNoveltyAuc,
            fmt("%zu known/novel pairs over 4 splits: TopoNet pooled AUC %.3f (need >= %.2f); paired rate %.3f, per-map "
                "AUC %.3f; MRF pooled AUC %.3f, paired rate %.3f",
                topo.pairs, topo.auc, kNoveltyAuc, topo.paired_rate, topo.mean_map_auc, mrf.auc, mrf.paired_rate)};
}

// Exact tree marginals by eliminating leaves toward each node in turn.
std::vector<Eigen::VectorXd> tree_marginals(const MrfInstance& m) {
    const auto n = m.size();
    const auto k = m.num_classes;
    std::vector<std::vector<PlaceId>> adj(n);
    for (auto [a, b] : m.edges) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    const Eigen::MatrixXd psi = m.log_pairwise.array().exp();
    std::function<Eigen::VectorXd(PlaceId, PlaceId)> eliminate = [&](PlaceId v, PlaceId parent) {
        Eigen::VectorXd f = m.log_unary[v].array().exp();
        for (auto c : adj[v])
            if (c != parent) f = f.cwiseProduct(eliminate(c, v));
        Eigen::VectorXd out = psi.transpose() * f;  // sum over x_v of f(x_v) psi(x_v, x_parent)
        return Eigen::VectorXd(out / out.sum());
    };
    std::vector<Eigen::VectorXd> marg;
    for (PlaceId r = 0; r < n; ++r) {
        Eigen::VectorXd f = m.log_unary[r].array().exp();
        for (auto c : adj[r]) f = f.cwiseProduct(eliminate(c, r));
        marg.push_back(f / f.sum());
        (void)k;
    }
    return marg;
}

std::vector<Eigen::VectorXd> enumerate_marginals(const MrfInstance& m) {
    const auto n = m.size();
    const auto k = m.num_classes;
    std::vector<std::uint32_t> y(n, 0);
    std::vector<Eigen::VectorXd> marg(n, Eigen::VectorXd::Zero(k));
    std::vector<double> scores;
    std::vector<std::vector<std::uint32_t>> all;
    double top = kNegInf;
    while (true) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += m.log_unary[i][y[i]];
        for (auto [a, b] : m.edges) s += m.log_pairwise(y[a], y[b]);
        scores.push_back(s);
        all.push_back(y);
        top = std::max(top, s);
        std::size_t i = 0;
        while (i < n && ++y[i] == k) y[i++] = 0;
        if (i == n) break;
    }
    double z = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        const double w = std::exp(scores[j] - top);
        z += w;
        for (std::size_t i = 0; i < n; ++i) marg[i][all[j][i]] += w;
    }
    for (auto& v : marg) v /= z;
    return marg;
}

// Map with 30% corrupted places and every stride-th node turned into a placeholder.
SemanticMap bp_map(const SemanticMap& f, PlaceId start, std::size_t k, std::uint64_t seed, PlaceId stride) {
    auto m = corrupt_geometry(submap(f, start, k), 0.3, 1.0, seed);
    for (PlaceId i = 1; i < m.size(); i += stride) {
        m.nodes[i].kind = PlaceKind::Placeholder;
        m.nodes[i].geometry.reset();
    }
    return m;
}

// 9. BP correctness on map-derived MRFs.
Outcome bp() {
    const auto& models = split_models();
    const auto& maps = corpus_maps();
    std::mt19937_64 rng(109);
    double worst_tree = 0.0, worst_loopy = 0.0;
    int trees = 0, loopy = 0, unconverged = 0;
    for (int t = 0; t < 20; ++t) {
        const auto& f = maps[t % maps.size()];
        const auto size = t < 10 ? 8 : std::uniform_int_distribution<std::size_t>(10, 60)(rng);
        const auto m = bp_map(f, std::uniform_int_distribution<PlaceId>(0, f.size() - 1)(rng), size, 600 + t, 4);
        auto mrf = build_mrf(m, models.toponet.place_model, models.pairwise);
        // Keep a spanning tree of the map graph.
        std::vector<std::pair<PlaceId, PlaceId>> tree;
        std::vector<PlaceId> root(mrf.size());
        std::iota(root.begin(), root.end(), 0);
        std::function<PlaceId(PlaceId)> find = [&](PlaceId v) { return root[v] == v ? v : root[v] = find(root[v]); };
        for (auto [a, b] : mrf.edges)
            if (find(a) != find(b)) {
                root[find(a)] = find(b);
                tree.emplace_back(a, b);
            }
        mrf.edges = tree;
        BpOptions opt;
        opt.tol = 1e-13;
        opt.damping = 0.0;
        const auto r = loopy_bp(mrf, opt);
        unconverged += !r.converged;
        const auto exact = mrf.size() <= 8 ? enumerate_marginals(mrf) : tree_marginals(mrf);
        for (std::size_t i = 0; i < mrf.size(); ++i)
            worst_tree = std::max(worst_tree, (r.beliefs[i] - exact[i]).cwiseAbs().maxCoeff());
        ++trees;
    }
    // Loopy maps: half the nodes are placeholders, so beliefs there come from the
    // learned pairwise potentials alone. The second half of the runs swaps in
    // random potentials and is reported for information only.
    double worst_random = 0.0;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int t = 0; t < 40; ++t) {
        const auto& f = maps[(t + 3) % maps.size()];
        const auto m = bp_map(f, std::uniform_int_distribution<PlaceId>(0, f.size() - 1)(rng), 8, 700 + t, 2);
        auto mrf = build_mrf(m, models.toponet.place_model, models.pairwise);
        const bool random = t >= 20;
        if (random) {
            for (auto& u : mrf.log_unary)
                for (auto& x : u) x = normal(rng);
            for (std::uint32_t a = 0; a < mrf.num_classes; ++a)
                for (std::uint32_t b = a; b < mrf.num_classes; ++b)
                    mrf.log_pairwise(a, b) = mrf.log_pairwise(b, a) = 0.5 * normal(rng);
        }
        std::set<std::pair<PlaceId, PlaceId>> have(mrf.edges.begin(), mrf.edges.end());
        std::uniform_int_distribution<PlaceId> pick(0, static_cast<PlaceId>(mrf.size() - 1));
        const std::size_t target = mrf.edges.size() + 2 + t % 3;
        while (mrf.edges.size() < target) {
            PlaceId a = pick(rng), b = pick(rng);
            if (a > b) std::swap(a, b);
            if (a == b || have.count({a, b})) continue;
            have.insert({a, b});
            mrf.edges.emplace_back(a, b);
        }
        const auto r = loopy_bp(mrf, BpOptions{});
        unconverged += !r.converged;
        const auto exact = enumerate_marginals(mrf);
        for (std::size_t i = 0; i < mrf.size(); ++i)
            (random ? worst_random : worst_loopy) =
                std::max(random ? worst_random : worst_loopy, 0.5 * (r.beliefs[i] - exact[i]).cwiseAbs().sum());
        ++loopy;
    }
    return {worst_tree <= kTreeTol && worst_loopy <= kLoopyTv && unconverged == 0,
            fmt("%d tree maps (8-60 nodes): max belief error %.2e (tol %.0e); %d loopy 8-node maps, 10-12 edges: max TV "
                "%.2e (tol %.2f); unconverged runs %d; info: the same graphs with random potentials reach TV %.2e",
                trees, worst_tree, kTreeTol, loopy / 2, worst_loopy, kLoopyTv, unconverged, worst_random)};
}

// 10. Performance budget.
Outcome performance() {
    BenchOptions opt;
    opt.models = pipeline().splits.back().train_dir;
    opt.budget_seconds = kBenchBudget;
    opt.out = g_work / "bench.json";
    const auto sizes = cmd_bench(opt);
    bool pass = true;
    std::string detail;
    for (const auto& s : sizes) {
        pass = pass && s.median <= kBenchBudget && s.median <= kBenchBudget8;
        detail += fmt("%zu nodes median %.3f s; ", s.size, s.median);
    }
    return {pass, detail + fmt("N=40, %u runs, one thread (budget %.0f s; the single-thread median is also within the "
                               "%.0f s multi-core budget); GPU reference 0.36 s / 0.49 s",
                               opt.repetitions, kBenchBudget, kBenchBudget8)};
}

// 11. Determinism.
Outcome determinism() {
    const auto& p = pipeline();
    GenOptions gen;
    gen.out = g_work / "corpus_rerun";
    gen.force = true;
    const bool corpus_same = cmd_gen(gen).manifest_hash == p.manifest_hash;

    const auto& first = p.splits.back();
    TrainOptions t;
    t.corpus = p.corpus;
    t.out = g_work / "train_rerun";
    t.config.split = first.split;
    t.force = true;
    const auto again = cmd_train(t);
    const bool models_same = again.model_hash == directory_hash(first.train_dir / "models");

    EvalOptions e;
    e.corpus = p.corpus;
    e.models = t.out;
    e.out = g_work / "eval_rerun";
    e.force = true;
    cmd_eval(e);
    const auto original = g_work / ("eval_" + first.split + "_toponet");
    std::size_t files = 0, differ = 0;
    for (const char* name : {"report.json", "report.csv", "per_map.csv", "roc.csv", "novelty_scores.csv"}) {
        ++files;
        differ += read_file(original / name) != read_file(e.out / name);
    }
    return {corpus_same && models_same && differ == 0,
            fmt("gen rerun manifest hash %s; train rerun model hash %s (%s); eval rerun: %zu/%zu report files "
                "byte-identical",
                corpus_same ? "identical" : "DIFFERS", hex64(again.model_hash).c_str(),
                models_same ? "identical" : "DIFFERS", files - differ, files)};
}

struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "SPN oracle equivalence", spn_oracle},
        {2, "validity suite", validity},
        {3, "gradient checks", gradients},
        {4, "mixture identity", mixture_identity},
        {5, "joint-MPE oracle", joint_mpe},
        {6, "classification with corrupted geometry", corrupted_classification},
        {7, "placeholder inference", placeholders},
        {8, "novelty ROC", novelty},
        {9, "BP correctness", bp},
        {10, "performance budget", performance},
        {11, "determinism", determinism},
    };
    std::set<int> selected;
    g_work = fs::temp_directory_path() / "toponets_acceptance";
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--work") == 0 && i + 1 < argc) {
            g_work = argv[++i];
        } else {
            selected.insert(std::atoi(argv[i]));
        }
    }
    fs::create_directories(g_work);

    int failed = 0;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), since(t0));
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
