#include "toponets/spn_learn.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

namespace toponets {

// ---------------------------------------------------------------- configs

void StructureConfig::check() const {
    if (num_decompositions_per_level < 1 || num_subsets_per_decomposition < 1 || num_mixtures_per_scope < 1)
        throw InputError("structure config: counts must be >= 1");
}

nlohmann::json to_json(const StructureConfig& c) {
    return {{"num_decompositions_per_level", c.num_decompositions_per_level},
            {"num_subsets_per_decomposition", c.num_subsets_per_decomposition},
            {"num_mixtures_per_scope", c.num_mixtures_per_scope},
            {"max_depth", c.max_depth},
            {"rng_seed", c.rng_seed}};
}

StructureConfig structure_config_from_json(const nlohmann::json& j) {
    StructureConfig c;
    c.num_decompositions_per_level = j.value("num_decompositions_per_level", c.num_decompositions_per_level);
    c.num_subsets_per_decomposition = j.value("num_subsets_per_decomposition", c.num_subsets_per_decomposition);
    c.num_mixtures_per_scope = j.value("num_mixtures_per_scope", c.num_mixtures_per_scope);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.check();
    return c;
}

std::string to_string(Loss l) {
    switch (l) {
        case Loss::Generative: return "generative";
        case Loss::Discriminative: return "discriminative";
        case Loss::ClassConditional: return "class_conditional";
    }
    return "?";
}

Loss loss_from_string(const std::string& s) {
    if (s == "generative") return Loss::Generative;
    if (s == "discriminative") return Loss::Discriminative;
    if (s == "class_conditional") return Loss::ClassConditional;
    throw InputError("unknown loss '" + s + "'");
}

void TrainConfig::check() const {
    if (!(learning_rate >= 0.0)) throw InputError("train config: learning_rate must be >= 0");
    if (batch_size < 1) throw InputError("train config: batch_size must be >= 1");
    if (!(weight_floor > 0.0)) throw InputError("train config: weight_floor must be positive");
    if (!(em_smoothing >= 0.0)) throw InputError("train config: em_smoothing must be >= 0");
    if (!(prune_threshold >= 0.0 && prune_threshold < 1.0)) throw InputError("train config: prune_threshold in [0,1)");
    if (chunk_size < 1 || threads < 1) throw InputError("train config: chunk_size and threads must be >= 1");
    if (optimizer == Optimizer::EM && loss == Loss::Discriminative)
        throw InputError("train config: EM applies to generative losses only");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"loss", to_string(c.loss)},
            {"optimizer", c.optimizer == Optimizer::EM ? "em" : "gd"},
            {"learning_rate", c.learning_rate},
            {"scale_by_weight", c.scale_by_weight},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"weight_floor", c.weight_floor},
            {"em_smoothing", c.em_smoothing},
            {"prune_threshold", c.prune_threshold},
            {"shuffle_seed", c.shuffle_seed},
            {"chunk_size", c.chunk_size}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("loss")) c.loss = loss_from_string(j["loss"].get<std::string>());
    if (j.contains("optimizer")) {
        const auto o = j["optimizer"].get<std::string>();
        if (o == "em")
            c.optimizer = Optimizer::EM;
        else if (o == "gd")
            c.optimizer = Optimizer::GradientDescent;
        else
            throw InputError("unknown optimizer '" + o + "'");
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.scale_by_weight = j.value("scale_by_weight", c.scale_by_weight);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_floor = j.value("weight_floor", c.weight_floor);
    c.em_smoothing = j.value("em_smoothing", c.em_smoothing);
    c.prune_threshold = j.value("prune_threshold", c.prune_threshold);
    c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
    c.chunk_size = j.value("chunk_size", c.chunk_size);
    c.threads = j.value("threads", c.threads);
    c.check();
    return c;
}

// ---------------------------------------------------------------- structure

namespace {

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::vector<double> w(n);
    for (auto& x : w) x = u(rng);
    rescale_to_simplex(w, 0.0);
    return w;
}

class DenseGenerator {
public:
    DenseGenerator(SpnBuilder& b, const std::vector<DenseUnit>& units, const StructureConfig& cfg, std::mt19937_64& rng)
        : b_(b), units_(units), cfg_(cfg), rng_(rng) {}

    std::vector<NodeId> region(const std::vector<std::uint32_t>& ids, std::uint32_t depth, std::uint32_t count,
                               bool memoize) {
        if (memoize) {
            if (auto it = memo_.find(ids); it != memo_.end()) return it->second;
        }
        std::vector<NodeId> out;
        if (ids.size() == 1) {
            const auto& in = units_[ids[0]].inputs;
            if (in.size() == 1) {
                out = in;
            } else {
                for (std::uint32_t k = 0; k < count; ++k) out.push_back(b_.sum(in, random_simplex(rng_, in.size())));
            }
        } else if (cfg_.max_depth > 0 && depth >= cfg_.max_depth) {
            std::vector<std::vector<NodeId>> per_unit;
            for (auto u : ids) per_unit.push_back(region({u}, depth + 1, cfg_.num_mixtures_per_scope, true));
            std::vector<NodeId> kids(ids.size());
            for (std::uint32_t k = 0; k < count; ++k) {
                for (std::size_t i = 0; i < ids.size(); ++i) kids[i] = per_unit[i][k % per_unit[i].size()];
                out.push_back(b_.product(kids));
            }
        } else {
            std::vector<NodeId> prods;
            const auto s = std::min<std::size_t>(std::max<std::uint32_t>(cfg_.num_subsets_per_decomposition, 2), ids.size());
            for (std::uint32_t d = 0; d < cfg_.num_decompositions_per_level; ++d) {
                auto order = ids;
                std::shuffle(order.begin(), order.end(), rng_);
                std::vector<std::vector<NodeId>> parts;
                const auto n = order.size();
                for (std::size_t p = 0; p < s; ++p) {
                    std::vector<std::uint32_t> sub(order.begin() + static_cast<std::ptrdiff_t>(p * n / s),
                                                   order.begin() + static_cast<std::ptrdiff_t>((p + 1) * n / s));
                    std::sort(sub.begin(), sub.end());
                    parts.push_back(region(sub, depth + 1, cfg_.num_mixtures_per_scope, true));
                }
                std::vector<std::size_t> idx(parts.size(), 0);
                std::vector<NodeId> kids(parts.size());
                while (true) {
                    for (std::size_t p = 0; p < parts.size(); ++p) kids[p] = parts[p][idx[p]];
                    prods.push_back(b_.product(kids));
                    std::size_t p = 0;
                    while (p < parts.size() && ++idx[p] == parts[p].size()) idx[p++] = 0;
                    if (p == parts.size()) break;
                }
            }
            for (std::uint32_t k = 0; k < count; ++k) out.push_back(b_.sum(prods, random_simplex(rng_, prods.size())));
        }
        if (memoize) memo_[ids] = out;
        return out;
    }

private:
    SpnBuilder& b_;
    const std::vector<DenseUnit>& units_;
    const StructureConfig& cfg_;
    std::mt19937_64& rng_;
    std::map<std::vector<std::uint32_t>, std::vector<NodeId>> memo_;
};

}  // namespace

std::vector<NodeId> build_dense(SpnBuilder& b, const std::vector<DenseUnit>& units, const StructureConfig& cfg,
                                std::mt19937_64& rng, std::uint32_t num_roots) {
    cfg.check();
    if (units.empty()) throw InputError("dense structure: empty scope");
    for (const auto& u : units)
        if (u.inputs.empty()) throw InputError("dense structure: unit without inputs");
    std::vector<std::uint32_t> ids(units.size());
    std::iota(ids.begin(), ids.end(), 0u);
    DenseGenerator g(b, units, cfg, rng);
    auto roots = g.region(ids, 0, num_roots, false);
    if (roots.size() == 1 && num_roots > 1) roots.assign(num_roots, roots[0]);
    return roots;
}

std::vector<DenseUnit> indicator_units(SpnBuilder& b, std::span<const VarId> vars) {
    std::vector<DenseUnit> units;
    units.reserve(vars.size());
    for (auto v : vars) {
        DenseUnit u;
        for (std::uint32_t k = 0; k < b.cardinality(v); ++k) u.inputs.push_back(b.indicator(v, k));
        units.push_back(std::move(u));
    }
    return units;
}

Spn generate_dense_structure(std::span<const VarId> vars, std::span<const std::uint32_t> cardinalities,
                             const StructureConfig& cfg) {
    if (vars.empty()) throw InputError("generate_dense_structure: empty scope");
    SpnBuilder b(std::vector<std::uint32_t>(cardinalities.begin(), cardinalities.end()));
    std::mt19937_64 rng(cfg.rng_seed);
    for (auto v : vars)
        if (v >= cardinalities.size()) throw InputError("generate_dense_structure: unknown variable");
    const auto units = indicator_units(b, vars);
    const auto roots = build_dense(b, units, cfg, rng, 1);
    Spn spn = std::move(b).build(roots[0]);
    const auto report = check_validity(spn);
    if (!report.ok()) throw StructuralError("generated structure failed validation");
    return spn;
}

// ---------------------------------------------------------------- training

namespace {

struct Frame {
    NodeId begin = 0, end = 0;       // trainable Sum range
    std::uint32_t edge_begin = 0, edge_end = 0;
    std::vector<NodeId> class_nodes;
    std::vector<NodeId> frontier;    // frozen nodes read by the trainable part
};

Frame make_frame(const Spn& spn, const TrainScope& scope, Loss loss) {
    Frame f;
    f.begin = scope.begin;
    f.end = std::min<NodeId>(scope.end, static_cast<NodeId>(spn.num_nodes()));
    if (f.begin > f.end) throw InputError("train scope: begin after end");
    f.edge_begin = spn.edge_begin(f.begin);
    f.edge_end = spn.edge_begin(f.end);
    f.class_nodes = scope.class_nodes;
    if (f.class_nodes.empty() && loss != Loss::Generative) {
        if (spn.kind(spn.root()) != NodeKind::Sum) throw InputError("train: class nodes needed (root is not a Sum)");
        const auto kids = spn.children(spn.root());
        f.class_nodes.assign(kids.begin(), kids.end());
    }
    for (auto c : f.class_nodes)
        if (c >= spn.num_nodes()) throw InputError("train scope: class node out of range");
    if (f.begin > 0) {
        std::vector<std::uint8_t> mark(f.begin, 0);
        for (NodeId n = f.begin; n < spn.num_nodes(); ++n)
            for (auto c : spn.children(n))
                if (c < f.begin) mark[c] = 1;
        for (auto c : f.class_nodes)
            if (c < f.begin) mark[c] = 1;
        for (NodeId n = 0; n < f.begin; ++n)
            if (mark[n]) f.frontier.push_back(n);
    }
    return f;
}

struct SampleCache {
    std::vector<std::vector<double>> log_ind;
    std::vector<std::vector<double>> frontier_values;
};

SampleCache make_cache(const Spn& spn, const std::vector<LabeledSample>& data, const Frame& f) {
    SampleCache c;
    c.log_ind.reserve(data.size());
    std::vector<double> values(f.begin > 0 ? spn.num_nodes() : 0);
    for (const auto& s : data) {
        if (s.evidence.num_variables() != spn.num_variables()) throw InputError("train: evidence size mismatch");
        c.log_ind.push_back(s.evidence.log_indicators());
        if (f.begin > 0) {
            evaluate_nodes(spn, c.log_ind.back(), values);
            std::vector<double> fv(f.frontier.size());
            for (std::size_t i = 0; i < f.frontier.size(); ++i) fv[i] = values[f.frontier[i]];
            c.frontier_values.push_back(std::move(fv));
        }
    }
    return c;
}

struct Accum {
    std::vector<double> edge_grad;  // indexed by edge - frame.edge_begin
    double loss = 0.0;
    double weight = 0.0;
    double correct = 0.0;
    std::vector<double> values, grad;
};

// Forward/backward for one sample; returns false on a non-finite loss.
bool process(const Spn& spn, const Frame& f, const SampleCache& cache, std::size_t idx, const LabeledSample& s,
             Loss loss, bool want_grad, Accum& acc) {
    auto& values = acc.values;
    auto& grad = acc.grad;
    if (f.begin > 0) {
        const auto& fv = cache.frontier_values[idx];
        for (std::size_t i = 0; i < f.frontier.size(); ++i) values[f.frontier[i]] = fv[i];
    }
    evaluate_nodes(spn, cache.log_ind[idx], values, nullptr, f.begin);

    double l = 0.0;
    std::fill(grad.begin() + f.begin, grad.end(), 0.0);
    if (f.begin > 0)
        for (auto n : f.frontier) grad[n] = 0.0;
    if (!f.class_nodes.empty()) {
        if (s.label >= f.class_nodes.size()) throw InputError("train: label out of range");
        std::size_t best = 0;
        for (std::size_t c = 1; c < f.class_nodes.size(); ++c)
            if (values[f.class_nodes[c]] > values[f.class_nodes[best]]) best = c;
        if (best == s.label) acc.correct += s.weight;
    }
    switch (loss) {
        case Loss::Generative:
            l = -values[spn.root()];
            grad[spn.root()] = s.weight;
            break;
        case Loss::ClassConditional:
            l = -values[f.class_nodes[s.label]];
            grad[f.class_nodes[s.label]] = s.weight;
            break;
        case Loss::Discriminative: {
            std::vector<double> sc(f.class_nodes.size());
            for (std::size_t c = 0; c < sc.size(); ++c) sc[c] = values[f.class_nodes[c]];
            const double lse = log_sum_exp(sc);
            l = lse - sc[s.label];
            for (std::size_t c = 0; c < sc.size(); ++c)
                grad[f.class_nodes[c]] += s.weight * ((c == s.label ? 1.0 : 0.0) - std::exp(sc[c] - lse));
            break;
        }
    }
    if (!std::isfinite(l)) return false;
    acc.loss += s.weight * l;
    acc.weight += s.weight;
    if (!want_grad) return true;

    backprop(spn, values, grad, nullptr, f.begin);
    const auto offs = spn.all_offsets();
    const auto kids = spn.all_children();
    for (NodeId n = f.begin; n < f.end; ++n) {
        if (spn.kind(n) != NodeKind::Sum || grad[n] == 0.0 || values[n] == kNegInf) continue;
        const double g = grad[n], v = values[n];
        for (auto k = offs[n]; k < offs[n + 1]; ++k) {
            const double c = values[kids[k]];
            if (c != kNegInf) acc.edge_grad[k - f.edge_begin] += g * std::exp(c - v);
        }
    }
    return true;
}

struct BatchResult {
    std::vector<double> edge_grad;
    double loss = 0.0, weight = 0.0, correct = 0.0;
    std::size_t bad = static_cast<std::size_t>(-1);  // first sample with a non-finite loss
};

BatchResult run_batch(const Spn& spn, const Frame& f, const SampleCache& cache, const std::vector<LabeledSample>& data,
                      std::span<const std::size_t> batch, Loss loss, bool want_grad, std::uint32_t chunk_size,
                      std::uint32_t threads) {
    const std::size_t nchunks = (batch.size() + chunk_size - 1) / chunk_size;
    std::vector<Accum> accs(nchunks);
    std::vector<std::size_t> bad(nchunks, static_cast<std::size_t>(-1));
    auto work = [&](std::size_t first) {
        std::vector<double> values(spn.num_nodes()), grad(spn.num_nodes());
        for (std::size_t c = first; c < nchunks; c += threads) {
            auto& a = accs[c];
            a.edge_grad.assign(want_grad ? f.edge_end - f.edge_begin : 0, 0.0);
            a.values.swap(values);
            a.grad.swap(grad);
            const auto lo = c * chunk_size, hi = std::min(batch.size(), lo + chunk_size);
            for (auto i = lo; i < hi && bad[c] == static_cast<std::size_t>(-1); ++i)
                if (!process(spn, f, cache, batch[i], data[batch[i]], loss, want_grad, a)) bad[c] = batch[i];
            a.values.swap(values);
            a.grad.swap(grad);
        }
    };
    if (threads <= 1 || nchunks <= 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::uint32_t t = 0; t < std::min<std::size_t>(threads, nchunks); ++t) pool.emplace_back(work, t);
        for (auto& t : pool) t.join();
    }
    BatchResult r;
    r.edge_grad.assign(want_grad ? f.edge_end - f.edge_begin : 0, 0.0);
    for (std::size_t c = 0; c < nchunks; ++c) {
        if (bad[c] != static_cast<std::size_t>(-1) && r.bad == static_cast<std::size_t>(-1)) r.bad = bad[c];
        r.loss += accs[c].loss;
        r.weight += accs[c].weight;
        r.correct += accs[c].correct;
        for (std::size_t e = 0; e < r.edge_grad.size(); ++e) r.edge_grad[e] += accs[c].edge_grad[e];
    }
    return r;
}

void apply_update(Spn& spn, const Frame& f, const BatchResult& r, const TrainConfig& cfg) {
    const auto offs = spn.all_offsets();
    std::vector<double> w;
    for (NodeId n = f.begin; n < f.end; ++n) {
        if (spn.kind(n) != NodeKind::Sum) continue;
        const auto cur = spn.weights(n);
        const auto b = offs[n] - f.edge_begin;
        w.assign(cur.begin(), cur.end());
        const double floor = std::min(cfg.weight_floor, 0.5 / static_cast<double>(w.size()));
        if (cfg.optimizer == Optimizer::EM) {
            double total = 0.0;
            for (std::size_t k = 0; k < w.size(); ++k) total += w[k] * r.edge_grad[b + k];
            if (!(total > 0.0) && cfg.em_smoothing == 0.0) continue;
            total += cfg.em_smoothing * static_cast<double>(w.size());
            for (std::size_t k = 0; k < w.size(); ++k)
                w[k] = (w[k] * r.edge_grad[b + k] + cfg.em_smoothing) / total;
            rescale_to_simplex(w, floor);
            spn.set_weights(n, w);
            continue;
        } else {
            bool any = false;
            for (std::size_t k = 0; k < w.size(); ++k) {
                double g = r.edge_grad[b + k] / r.weight;
                if (cfg.scale_by_weight) g *= w[k];
                any = any || g != 0.0;
                w[k] += cfg.learning_rate * g;
            }
            if (!any) continue;
        }
        if (cfg.scale_by_weight)
            rescale_to_simplex(w, floor);
        else
            project_to_simplex(w, floor);
        spn.set_weights(n, w);
    }
}

void shuffle_indices(std::vector<std::size_t>& idx, std::uint64_t seed) {
    std::uint64_t state = seed;
    for (std::size_t i = idx.size(); i > 1; --i) {
        state = splitmix64(state);
        std::swap(idx[i - 1], idx[state % i]);
    }
}

}  // namespace

TrainResult train(const Spn& spn, const std::vector<LabeledSample>& data, const TrainConfig& cfg,
                  const TrainScope& scope) {
    cfg.check();
    if (!spn.validated()) throw InputError("train: network has not passed check_validity");
    if (data.empty()) throw InputError("train: empty dataset");
    TrainResult res{spn, {}};
    Spn& net = res.spn;
    const Frame f = make_frame(net, scope, cfg.loss);
    if (cfg.optimizer == Optimizer::EM && f.class_nodes.empty() && cfg.loss != Loss::Generative)
        throw InputError("train: EM needs class nodes");

    // Start from projected weights so the floor holds from step 0.
    for (NodeId n = f.begin; n < f.end; ++n) {
        if (net.kind(n) != NodeKind::Sum) continue;
        std::vector<double> w(net.weights(n).begin(), net.weights(n).end());
        project_to_simplex(w, std::min(cfg.weight_floor, 0.5 / static_cast<double>(w.size())));
        net.set_weights(n, w);
    }

    const auto cache = make_cache(net, data, f);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const bool full_batch = cfg.optimizer == Optimizer::EM;
    for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(order, splitmix64(cfg.shuffle_seed) + epoch);
        double loss = 0.0, weight = 0.0, correct = 0.0;
        const std::size_t bs = full_batch ? order.size() : cfg.batch_size;
        for (std::size_t start = 0, batch_no = 0; start < order.size(); start += bs, ++batch_no) {
            const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
            const auto r = run_batch(net, f, cache, data, batch, cfg.loss, true, cfg.chunk_size, cfg.threads);
            if (r.bad != static_cast<std::size_t>(-1))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no) + " (sample " + std::to_string(r.bad) + ")");
            loss += r.loss;
            weight += r.weight;
            correct += r.correct;
            apply_update(net, f, r, cfg);
        }
        TraceRow row{epoch, loss / weight, f.class_nodes.empty() ? -1.0 : correct / weight};
        if (verbosity() >= 2)
            std::fprintf(stderr, "[train %s] epoch %u loss %.6f acc %.4f\n", to_string(cfg.loss).c_str(), epoch,
                         row.loss, row.accuracy);
        res.trace.push_back(row);
    }
    return res;
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,loss,accuracy\n";
    for (const auto& r : trace) {
        os << r.epoch << ',' << r.loss << ',';
        if (r.accuracy >= 0.0) os << r.accuracy;
        os << '\n';
    }
    return os.str();
}

double mean_loss(const Spn& spn, const std::vector<LabeledSample>& data, Loss loss, const TrainScope& scope) {
    const Frame f = make_frame(spn, scope, loss);
    const auto cache = make_cache(spn, data, f);
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto r = run_batch(spn, f, cache, data, idx, loss, false, 64, 1);
    if (r.bad != static_cast<std::size_t>(-1)) return std::numeric_limits<double>::infinity();
    return r.loss / r.weight;
}

double class_accuracy(const Spn& spn, const std::vector<LabeledSample>& data, const TrainScope& scope) {
    const Frame f = make_frame(spn, scope, Loss::Discriminative);
    const auto cache = make_cache(spn, data, f);
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto r = run_batch(spn, f, cache, data, idx, Loss::Discriminative, false, 64, 1);
    double total = 0.0;
    for (const auto& s : data) total += s.weight;
    return r.correct / total;
}

std::vector<double> weight_gradient(const Spn& spn, const std::vector<LabeledSample>& data, Loss loss,
                                    const TrainScope& scope) {
    const Frame f = make_frame(spn, scope, loss);
    const auto cache = make_cache(spn, data, f);
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto r = run_batch(spn, f, cache, data, idx, loss, true, 8, 1);
    std::vector<double> out(spn.num_edges(), 0.0);
    for (std::size_t e = 0; e < r.edge_grad.size(); ++e) out[f.edge_begin + e] = r.edge_grad[e] / r.weight;
    return out;
}

// ---------------------------------------------------------------- pruning

PruneResult prune(const Spn& spn, double threshold, const std::vector<Evidence>& reference) {
    if (!(threshold >= 0.0 && threshold < 1.0)) throw InputError("prune: threshold must be in [0,1)");
    const std::size_t n = spn.num_nodes();
    std::vector<std::vector<std::uint32_t>> keep(n);  // kept child positions per Sum
    for (NodeId i = 0; i < n; ++i) {
        if (spn.kind(i) != NodeKind::Sum) continue;
        const auto w = spn.weights(i);
        for (std::uint32_t k = 0; k < w.size(); ++k)
            if (w[k] >= threshold) keep[i].push_back(k);
        if (keep[i].empty())
            throw StructuralError("prune: node " + std::to_string(i) + " would lose every child at threshold " +
                                  std::to_string(threshold));
    }
    std::vector<std::uint8_t> live(n, 0);
    live[spn.root()] = 1;
    for (std::size_t ii = n; ii-- > 0;) {
        if (!live[ii]) continue;
        const auto i = static_cast<NodeId>(ii);
        const auto kids = spn.children(i);
        if (spn.kind(i) == NodeKind::Sum) {
            for (auto k : keep[i]) live[kids[k]] = 1;
        } else {
            for (auto c : kids) live[c] = 1;
        }
    }

    SpnBuilder b(std::vector<std::uint32_t>(spn.cardinalities().begin(), spn.cardinalities().end()));
    PruneResult res;
    res.node_map.assign(n, kInvalidNode);
    std::vector<NodeId> kids;
    std::vector<double> w;
    for (NodeId i = 0; i < n; ++i) {
        if (!live[i]) continue;
        switch (spn.kind(i)) {
            case NodeKind::Indicator:
                res.node_map[i] = b.indicator(spn.indicator_var(i), spn.indicator_value(i));
                break;
            case NodeKind::Product:
                kids.clear();
                for (auto c : spn.children(i)) kids.push_back(res.node_map[c]);
                res.node_map[i] = b.product(kids);
                break;
            case NodeKind::Sum: {
                const auto src_kids = spn.children(i);
                const auto src_w = spn.weights(i);
                if (keep[i].size() == 1) {
                    res.node_map[i] = res.node_map[src_kids[keep[i][0]]];
                    break;
                }
                kids.clear();
                w.clear();
                for (auto k : keep[i]) {
                    kids.push_back(res.node_map[src_kids[k]]);
                    w.push_back(src_w[k]);
                }
                if (keep[i].size() != src_kids.size()) rescale_to_simplex(w, 0.0);
                res.node_map[i] = b.sum(kids, w);
                break;
            }
        }
    }
    res.spn = std::move(b).build(res.node_map[spn.root()]);
    if (!check_validity(res.spn).ok()) throw StructuralError("prune: result failed validation");
    res.removed_edges = spn.num_edges() - res.spn.num_edges();
    res.removed_nodes = n - res.spn.num_nodes();
    if (!reference.empty()) {
        for (const auto& e : reference) {
            res.reference_ll_before += evaluate(spn, e);
            res.reference_ll_after += evaluate(res.spn, e);
        }
        res.reference_ll_before /= static_cast<double>(reference.size());
        res.reference_ll_after /= static_cast<double>(reference.size());
    }
    return res;
}

// ---------------------------------------------------------------- hybrid

HybridResult hybrid_train(const LayeredSpn& model, const std::vector<LabeledSample>& data, const HybridConfig& cfg) {
    if (model.boundary == kInvalidNode || model.boundary == 0 || model.boundary > model.spn.num_nodes())
        throw InputError("hybrid_train: layer boundary not annotated");
    if (model.class_nodes.empty()) throw InputError("hybrid_train: class nodes not annotated");
    for (auto c : model.class_nodes)
        if (c >= model.boundary) throw InputError("hybrid_train: class node above the layer boundary");

    HybridResult res{model, {}, {}, {}};
    TrainScope bottom{0, model.boundary, model.class_nodes};
    if (cfg.warm_start.epochs > 0) {
        auto r = train(res.model.spn, data, cfg.warm_start, bottom);
        res.model.spn = std::move(r.spn);
        res.warm_trace = std::move(r.trace);
    }
    if (cfg.discriminative.epochs > 0) {
        auto r = train(res.model.spn, data, cfg.discriminative, bottom);
        res.model.spn = std::move(r.spn);
        res.discriminative_trace = std::move(r.trace);
    }
    if (cfg.generative.epochs > 0) {
        TrainScope top{model.boundary, kInvalidNode, {}};
        auto r = train(res.model.spn, data, cfg.generative, top);
        res.model.spn = std::move(r.spn);
        res.generative_trace = std::move(r.trace);
    }
    return res;
}

// ---------------------------------------------------------------- samples I/O

std::string samples_to_jsonl(const std::vector<LabeledSample>& data) {
    std::string out;
    for (const auto& s : data) {
        const auto& ev = s.evidence;
        nlohmann::json cards = nlohmann::json::array(), values = nlohmann::json::array();
        bool uniform = true;
        for (VarId v = 0; v < ev.num_variables(); ++v) uniform = uniform && ev.cardinality(v) == ev.cardinality(0);
        for (VarId v = 0; v < ev.num_variables(); ++v) {
            if (!uniform) cards.push_back(ev.cardinality(v));
            std::vector<std::uint32_t> allowed;
            for (std::uint32_t k = 0; k < ev.cardinality(v); ++k)
                if (ev.allowed(v, k)) allowed.push_back(k);
            if (allowed.size() == ev.cardinality(v))
                values.push_back(-1);
            else if (allowed.size() == 1)
                values.push_back(allowed[0]);
            else
                values.push_back(allowed);
        }
        nlohmann::json j = {{"label", s.label}, {"weight", s.weight}, {"values", values}};
        if (uniform)
            j["cardinality"] = ev.num_variables() ? ev.cardinality(0) : 2;
        else
            j["cardinalities"] = cards;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<LabeledSample> samples_from_jsonl(const std::string& text) {
    std::vector<LabeledSample> out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto& values = j.at("values");
            std::vector<std::uint32_t> cards;
            if (j.contains("cardinalities"))
                cards = j["cardinalities"].get<std::vector<std::uint32_t>>();
            else
                cards.assign(values.size(), j.at("cardinality").get<std::uint32_t>());
            if (cards.size() != values.size()) throw ParseError("cardinality/value count mismatch");
            LabeledSample s{Evidence(cards), j.at("label").get<std::uint32_t>(), j.value("weight", 1.0)};
            for (VarId v = 0; v < values.size(); ++v) {
                const auto& x = values[v];
                if (x.is_array()) {
                    for (std::uint32_t k = 0; k < cards[v]; ++k) s.evidence.set(v, k, false);
                    for (auto k : x.get<std::vector<std::uint32_t>>()) s.evidence.set(v, k, true);
                } else if (x.get<std::int64_t>() >= 0) {
                    s.evidence.observe(v, x.get<std::uint32_t>());
                }
            }
            out.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw ParseError("samples line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace toponets
