#include "toponets/toponet.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "toponets/spn_io.hpp"

namespace toponets {

// ---------------------------------------------------------------- templates

std::vector<SubMapTemplate> default_templates() {
    return {{"SingleNode", 1, {}}, {"Edge", 2, {{0, 1}}}, {"Chain3", 3, {{0, 1}, {1, 2}}}};
}

void check_template(const SubMapTemplate& t) {
    if (t.name.empty()) throw InputError("template without a name");
    if (t.slots == 0) throw InputError("template '" + t.name + "' has no slots");
    for (auto [a, b] : t.edges)
        if (a >= t.slots || b >= t.slots || a == b) throw InputError("template '" + t.name + "' has an invalid edge");
    std::vector<std::uint32_t> comp(t.slots);
    std::iota(comp.begin(), comp.end(), 0u);
    for (bool changed = true; changed;) {
        changed = false;
        for (auto [a, b] : t.edges) {
            const auto m = std::min(comp[a], comp[b]);
            if (comp[a] != m || comp[b] != m) {
                comp[a] = comp[b] = m;
                changed = true;
            }
        }
    }
    if (std::any_of(comp.begin(), comp.end(), [](std::uint32_t c) { return c != 0; }))
        throw InputError("template '" + t.name + "' is not connected");
}

std::vector<std::vector<std::uint32_t>> automorphisms(const SubMapTemplate& t) {
    std::set<std::pair<std::uint32_t, std::uint32_t>> es;
    for (auto [a, b] : t.edges) es.insert({std::min(a, b), std::max(a, b)});
    std::vector<std::uint32_t> p(t.slots);
    std::iota(p.begin(), p.end(), 0u);
    std::vector<std::vector<std::uint32_t>> out;
    do {
        bool ok = true;
        for (auto [a, b] : es) ok = ok && es.count({std::min(p[a], p[b]), std::max(p[a], p[b])});
        if (ok) out.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return out;
}

nlohmann::json to_json(const SubMapTemplate& t) {
    nlohmann::json edges = nlohmann::json::array();
    for (auto [a, b] : t.edges) edges.push_back({a, b});
    return {{"name", t.name}, {"slots", t.slots}, {"edges", edges}};
}

SubMapTemplate template_from_json(const nlohmann::json& j) {
    SubMapTemplate t;
    try {
        t.name = j.at("name").get<std::string>();
        t.slots = j.at("slots").get<std::uint32_t>();
        for (const auto& e : j.at("edges")) t.edges.emplace_back(e.at(0).get<std::uint32_t>(), e.at(1).get<std::uint32_t>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed template: ") + e.what());
    }
    check_template(t);
    return t;
}

// ---------------------------------------------------------------- decomposition

std::uint64_t Decomposition::hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](std::uint64_t v) { h = splitmix64(h ^ v); };
    for (const auto& p : parts) {
        mix(0xfeedULL + p.template_index);
        for (auto n : p.nodes) mix(n);
    }
    return h;
}

namespace {

// Every embedding of t into the vertices not yet covered, canonical under automorphisms.
std::vector<std::vector<PlaceId>> embeddings(const SubMapTemplate& t, const std::vector<std::set<PlaceId>>& adj,
                                             const std::vector<std::uint8_t>& covered,
                                             const std::vector<std::vector<std::uint32_t>>& autos) {
    // Slot order where each slot after the first touches an earlier one.
    std::vector<std::uint32_t> order{0};
    std::vector<std::int64_t> anchor(t.slots, -1);
    std::vector<std::uint8_t> placed(t.slots, 0);
    placed[0] = 1;
    while (order.size() < t.slots) {
        for (auto [a, b] : t.edges) {
            if (placed[a] && !placed[b]) std::swap(a, b);
            if (!placed[a] && placed[b]) {
                placed[a] = 1;
                anchor[a] = b;
                order.push_back(a);
                break;
            }
        }
    }
    std::set<std::vector<PlaceId>> found;
    std::vector<PlaceId> slot(t.slots);
    std::vector<std::uint8_t> used(adj.size(), 0);
    auto fits = [&](std::size_t depth) {
        const auto s = order[depth];
        for (auto [a, b] : t.edges) {
            const auto other = a == s ? b : b == s ? a : t.slots;
            if (other == t.slots) continue;
            const auto pos = std::find(order.begin(), order.begin() + depth, other);
            if (pos == order.begin() + depth) continue;
            if (!adj[slot[s]].count(slot[other])) return false;
        }
        return true;
    };
    auto rec = [&](auto&& self, std::size_t depth) -> void {
        if (depth == t.slots) {
            std::vector<PlaceId> best;
            for (const auto& p : autos) {
                std::vector<PlaceId> cand(t.slots);
                for (std::uint32_t s = 0; s < t.slots; ++s) cand[s] = slot[p[s]];
                if (best.empty() || cand < best) best = cand;
            }
            found.insert(best);
            return;
        }
        const auto s = order[depth];
        std::vector<PlaceId> cands;
        if (depth == 0) {
            for (PlaceId v = 0; v < adj.size(); ++v) cands.push_back(v);
        } else {
            cands.assign(adj[slot[anchor[s]]].begin(), adj[slot[anchor[s]]].end());
        }
        for (auto v : cands) {
            if (covered[v] || used[v]) continue;
            slot[s] = v;
            if (!fits(depth)) continue;
            used[v] = 1;
            self(self, depth + 1);
            used[v] = 0;
        }
    };
    rec(rec, 0);
    return {found.begin(), found.end()};
}

}  // namespace

Decomposition decompose(const SemanticMap& map, const std::vector<SubMapTemplate>& templates, std::uint64_t seed) {
    std::int64_t single = -1;
    for (std::size_t i = 0; i < templates.size(); ++i) {
        check_template(templates[i]);
        if (templates[i].slots == 1 && single < 0) single = static_cast<std::int64_t>(i);
    }
    if (single < 0) throw InputError("decompose: the template set needs a single-node template");

    std::vector<std::set<PlaceId>> adj(map.size());
    for (auto [a, b] : map.edges) {
        adj[a].insert(b);
        adj[b].insert(a);
    }
    std::vector<std::uint32_t> by_size(templates.size());
    std::iota(by_size.begin(), by_size.end(), 0u);
    std::stable_sort(by_size.begin(), by_size.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return templates[a].slots > templates[b].slots; });

    std::mt19937_64 rng(splitmix64(seed));
    std::vector<std::uint8_t> covered(map.size(), 0);
    Decomposition d;
    for (auto ti : by_size) {
        const auto& t = templates[ti];
        if (t.slots == 1) continue;
        auto cands = embeddings(t, adj, covered, automorphisms(t));
        std::shuffle(cands.begin(), cands.end(), rng);
        for (auto& c : cands) {
            if (std::any_of(c.begin(), c.end(), [&](PlaceId v) { return covered[v] != 0; })) continue;
            for (auto v : c) covered[v] = 1;
            d.parts.push_back({ti, std::move(c)});
        }
    }
    for (PlaceId v = 0; v < map.size(); ++v)
        if (!covered[v]) d.parts.push_back({static_cast<std::uint32_t>(single), {v}});
    std::sort(d.parts.begin(), d.parts.end(), [](const Part& a, const Part& b) {
        return a.nodes != b.nodes ? a.nodes < b.nodes : a.template_index < b.template_index;
    });
    return d;
}

std::string decomposition_violation(const SemanticMap& map, const std::vector<SubMapTemplate>& templates,
                                    const Decomposition& d) {
    std::vector<int> hits(map.size(), 0);
    std::set<std::pair<PlaceId, PlaceId>> es(map.edges.begin(), map.edges.end());
    for (std::size_t k = 0; k < d.parts.size(); ++k) {
        const auto& p = d.parts[k];
        if (p.template_index >= templates.size()) return "part " + std::to_string(k) + " uses an unknown template";
        const auto& t = templates[p.template_index];
        if (p.nodes.size() != t.slots) return "part " + std::to_string(k) + " has the wrong slot count";
        for (auto v : p.nodes) {
            if (v >= map.size()) return "part " + std::to_string(k) + " names an unknown node";
            ++hits[v];
        }
        for (auto [a, b] : t.edges) {
            const auto u = p.nodes[a], v = p.nodes[b];
            if (!es.count({std::min(u, v), std::max(u, v)}))
                return "part " + std::to_string(k) + " misses template edge (" + std::to_string(a) + ", " +
                       std::to_string(b) + ")";
        }
    }
    for (std::size_t v = 0; v < map.size(); ++v)
        if (hits[v] != 1) return "node " + std::to_string(v) + " is covered " + std::to_string(hits[v]) + " times";
    return {};
}

// ---------------------------------------------------------------- model

nlohmann::json to_json(const ToponetConfig& c) {
    return {{"top", to_json(c.top)},
            {"train_decompositions", c.train_decompositions},
            {"train", to_json(c.train)},
            {"seed", c.seed}};
}

ToponetConfig toponet_config_from_json(const nlohmann::json& j) {
    ToponetConfig c;
    if (j.contains("top")) {
        auto top = j["top"];
        const bool per_class = top.value("num_mixtures_per_scope", 1) == 0;
        if (per_class) top["num_mixtures_per_scope"] = 1;
        c.top = structure_config_from_json(top);
        if (per_class) c.top.num_mixtures_per_scope = 0;
    }
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    c.train_decompositions = j.value("train_decompositions", c.train_decompositions);
    c.seed = j.value("seed", c.seed);
    if (c.train_decompositions < 1) throw InputError("toponet config: train_decompositions must be >= 1");
    return c;
}

bool ToponetModel::trained() const {
    return place_model.trained && !template_spns.empty() &&
           std::all_of(template_spns.begin(), template_spns.end(), [](const TemplateSpn& t) { return t.trained; });
}

TemplateSpn build_template_spn(const PlaceModel& pm, const SubMapTemplate& shape, const StructureConfig& top) {
    check_template(shape);
    const auto k = shape.slots, nc = pm.num_classes;
    std::vector<std::uint32_t> cards(static_cast<std::size_t>(k) * kGridCells, kCellStates);
    cards.insert(cards.end(), k, nc);
    SpnBuilder b(cards);
    TemplateSpn t;
    t.shape = shape;
    std::vector<VarId> var_map(kGridCells);
    std::vector<NodeId> roots(nc);
    for (std::uint32_t c = 0; c < nc; ++c) roots[c] = pm.class_root(c);
    for (std::uint32_t s = 0; s < k; ++s) {
        std::iota(var_map.begin(), var_map.end(), s * kGridCells);
        const auto copy = b.append(pm.spn(), roots, var_map);
        std::vector<NodeId> row(nc);
        for (std::uint32_t c = 0; c < nc; ++c) {
            const NodeId kids[2] = {b.indicator(t.class_var(s), c), copy[c]};
            row[c] = b.product(kids);
        }
        t.slot_class_nodes.push_back(std::move(row));
    }
    t.boundary = static_cast<NodeId>(b.num_nodes());
    auto cfg = top;
    if (cfg.num_mixtures_per_scope == 0) cfg.num_mixtures_per_scope = nc;
    std::vector<DenseUnit> units(k);
    for (std::uint32_t s = 0; s < k; ++s) units[s].inputs = t.slot_class_nodes[s];
    std::mt19937_64 rng(splitmix64(cfg.rng_seed ^ fnv1a(shape.name)));
    const auto root = build_dense(b, units, cfg, rng, 1)[0];
    t.spn = std::move(b).build(root);
    if (!check_validity(t.spn).ok()) throw StructuralError("template '" + shape.name + "' failed validation");
    return t;
}

ToponetModel build_toponet(const PlaceModel& pm, const std::string& class_set, std::vector<SubMapTemplate> templates,
                           const ToponetConfig& cfg) {
    if (!pm.trained) throw InputError("toponet: place model is untrained");
    if (std::none_of(templates.begin(), templates.end(), [](const SubMapTemplate& t) { return t.slots == 1; }))
        throw InputError("toponet: the template set needs a single-node template");
    ToponetModel m;
    m.class_set = class_set;
    m.num_classes = pm.num_classes;
    m.place_model = pm;
    m.config = cfg;
    for (const auto& t : templates) m.template_spns.push_back(build_template_spn(pm, t, cfg.top));
    m.templates = std::move(templates);
    return m;
}

Evidence part_evidence(const TemplateSpn& t, const SemanticMap& map, const Part& part, bool with_labels) {
    if (part.nodes.size() != t.shape.slots) throw InputError("part does not match template '" + t.shape.name + "'");
    Evidence ev(t.spn);
    for (std::uint32_t s = 0; s < t.shape.slots; ++s) {
        const auto& node = map.nodes.at(part.nodes[s]);
        if (node.kind == PlaceKind::Place) {
            if (!node.geometry) throw InputError("place " + std::to_string(part.nodes[s]) + " has no geometry");
            add_grid_evidence(ev, *node.geometry, s * kGridCells);
        }
        if (with_labels) {
            if (node.label == kLatent) throw InputError("node " + std::to_string(part.nodes[s]) + " is unlabeled");
            ev.observe(t.class_var(s), static_cast<std::uint32_t>(node.label));
        }
    }
    return ev;
}

ToponetTrainResult train_toponet(const ToponetModel& model, const std::vector<SemanticMap>& corpus) {
    if (!model.place_model.trained) throw InputError("train_toponet: place model is untrained");
    if (corpus.empty()) throw InputError("train_toponet: empty corpus");
    for (const auto& m : corpus) {
        if (m.num_classes != model.num_classes)
            throw InputError("train_toponet: map '" + m.name + "' uses a different class set");
        if (auto v = map_violation(m); !v.empty()) throw InputError("train_toponet: map '" + m.name + "': " + v);
    }
    std::vector<std::vector<LabeledSample>> data(model.templates.size());
    for (std::size_t mi = 0; mi < corpus.size(); ++mi) {
        for (std::uint32_t r = 0; r < model.config.train_decompositions; ++r) {
            const auto d = decompose(corpus[mi], model.templates, splitmix64(model.config.seed * 7919 + mi * 131 + r));
            for (const auto& p : d.parts)
                data[p.template_index].push_back(
                    {part_evidence(model.template_spns[p.template_index], corpus[mi], p, true), 0, 1.0});
        }
    }
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data[i].empty())
            throw InputError("train_toponet: template '" + model.templates[i].name + "' has no matching parts");

    ToponetTrainResult res{model, {}};
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto& t = res.model.template_spns[i];
        LayeredSpn layered{t.spn, t.boundary, t.slot_class_nodes[0]};
        HybridConfig hc;
        hc.warm_start.epochs = 0;
        hc.discriminative.epochs = 0;
        hc.generative = model.config.train;
        hc.generative.loss = Loss::Generative;
        auto r = hybrid_train(layered, data[i], hc);
        t.spn = std::move(r.model.spn);
        check_validity(t.spn);
        t.trained = true;
        t.num_samples = data[i].size();
        res.reports.push_back({t.shape.name, data[i].size(), std::move(r.generative_trace)});
    }
    return res;
}

void save_toponet(const std::filesystem::path& dir, const ToponetModel& model) {
    std::filesystem::create_directories(dir);
    save_place_model(dir / "place_model", model.place_model);
    nlohmann::json ts = nlohmann::json::array();
    for (const auto& t : model.template_spns) {
        const std::string file = "template_" + t.shape.name + ".tspn";
        save_spn(dir / file, t.spn);
        ts.push_back({{"shape", to_json(t.shape)},
                      {"file", file},
                      {"boundary", t.boundary},
                      {"slot_class_nodes", t.slot_class_nodes},
                      {"trained", t.trained},
                      {"samples", t.num_samples}});
    }
    const nlohmann::json j = {{"format", "toponets-model"}, {"version", 1},     {"class_set", model.class_set},
                              {"num_classes", model.num_classes}, {"config", to_json(model.config)},
                              {"templates", ts}};
    write_text(dir / "toponet.json", j.dump(2) + "\n");
}

ToponetModel load_toponet(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(dir / "toponet.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("toponet.json: " + std::string(e.what()));
    }
    if (j.value("format", "") != "toponets-model") throw ParseError("not a toponet model directory");
    if (j.value("version", 0) != 1) throw ParseError("unsupported toponet model version");
    ToponetModel m;
    m.place_model = load_place_model(dir / "place_model");
    try {
        m.class_set = j.at("class_set").get<std::string>();
        m.num_classes = j.at("num_classes").get<std::uint32_t>();
        m.config = toponet_config_from_json(j.at("config"));
        for (const auto& tj : j.at("templates")) {
            TemplateSpn t;
            t.shape = template_from_json(tj.at("shape"));
            t.spn = load_spn(dir / tj.at("file").get<std::string>());
            t.boundary = tj.at("boundary").get<NodeId>();
            t.slot_class_nodes = tj.at("slot_class_nodes").get<std::vector<std::vector<NodeId>>>();
            t.trained = tj.at("trained").get<bool>();
            t.num_samples = tj.at("samples").get<std::size_t>();
            if (t.slot_class_nodes.size() != t.shape.slots || t.boundary > t.spn.num_nodes())
                throw ParseError("template '" + t.shape.name + "' annotations do not match its network");
            m.templates.push_back(t.shape);
            m.template_spns.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed toponet.json: ") + e.what());
    }
    if (m.num_classes != m.place_model.num_classes) throw ParseError("toponet and place model class counts differ");
    return m;
}

// ---------------------------------------------------------------- instantiation

InstantiatedToponet instantiate(const ToponetModel& model, const SemanticMap& map, std::uint32_t n_decompositions,
                                std::uint64_t seed, bool validate) {
    if (n_decompositions < 1) throw InputError("instantiate: N must be >= 1");
    for (const auto& t : model.template_spns)
        if (!t.trained) throw InputError("instantiate: template '" + t.shape.name + "' is untrained");
    if (map.size() == 0) throw InputError("instantiate: empty map");
    if (map.num_classes != model.num_classes) throw InputError("instantiate: map uses a different class set");

    InstantiatedToponet inst;
    inst.num_map_nodes = static_cast<std::uint32_t>(map.size());
    inst.num_classes = model.num_classes;

    std::set<std::uint64_t> seen;
    std::uint64_t attempt = 0;
    for (std::uint32_t k = 0; k < n_decompositions; ++k) {
        Decomposition d;
        bool fresh = false;
        for (int retry = 0; retry < 10 && !fresh; ++retry) {
            d = decompose(map, model.templates, splitmix64(seed) + attempt++);
            fresh = !seen.count(d.hash());
        }
        if (!fresh) ++inst.duplicate_decompositions;
        seen.insert(d.hash());
        inst.decompositions.push_back(std::move(d));
    }
    if (inst.duplicate_decompositions > 0 && verbosity() >= 1)
        std::fprintf(stderr, "instantiate: only %zu distinct decompositions of %s; %zu duplicates used\n", seen.size(),
                     map.name.c_str(), inst.duplicate_decompositions);

    const auto nc = model.num_classes;
    const auto n = inst.num_map_nodes;
    std::vector<std::uint32_t> cards(static_cast<std::size_t>(n) * kGridCells, kCellStates);
    cards.insert(cards.end(), n, nc);
    SpnBuilder b(cards);

    // Per-node bottoms, shared by every decomposition.
    std::vector<std::vector<NodeId>> bottom(n, std::vector<NodeId>(nc));
    std::vector<NodeId> roots(nc);
    for (std::uint32_t c = 0; c < nc; ++c) roots[c] = model.place_model.class_root(c);
    std::vector<VarId> var_map(kGridCells);
    for (PlaceId i = 0; i < n; ++i) {
        std::iota(var_map.begin(), var_map.end(), i * kGridCells);
        const auto copy = b.append(model.place_model.spn(), roots, var_map);
        for (std::uint32_t c = 0; c < nc; ++c) {
            const NodeId kids[2] = {b.indicator(inst.class_var(i), c), copy[c]};
            bottom[i][c] = b.product(kids);
        }
    }

    std::vector<NodeId> remap, kids;
    for (const auto& d : inst.decompositions) {
        std::vector<NodeId> part_roots;
        for (const auto& p : d.parts) {
            const auto& t = model.template_spns[p.template_index];
            const Spn& ts = t.spn;
            remap.assign(ts.num_nodes(), kInvalidNode);
            for (std::uint32_t s = 0; s < t.shape.slots; ++s)
                for (std::uint32_t c = 0; c < nc; ++c) remap[t.slot_class_nodes[s][c]] = bottom[p.nodes[s]][c];
            for (NodeId x = t.boundary; x < ts.num_nodes(); ++x) {
                kids.clear();
                for (auto c : ts.children(x)) {
                    if (remap[c] == kInvalidNode)
                        throw StructuralError("template '" + t.shape.name + "' top layer reads below its boundary");
                    kids.push_back(remap[c]);
                }
                remap[x] = ts.kind(x) == NodeKind::Sum ? b.sum(kids, ts.weights(x)) : b.product(kids);
            }
            part_roots.push_back(remap[ts.root()]);
        }
        inst.decomposition_roots.push_back(b.product(part_roots));
    }
    std::vector<double> w(n_decompositions, 1.0 / n_decompositions);
    const NodeId root = b.sum(inst.decomposition_roots, w);
    inst.spn = std::move(b).build(root);
    if (validate) {
        const auto report = check_validity(inst.spn);
        if (!report.ok()) throw StructuralError("instantiated network failed validation");
    }
    return inst;
}

// ---------------------------------------------------------------- inference

Evidence map_evidence(const InstantiatedToponet& inst, const SemanticMap& map) {
    if (map.size() != inst.num_map_nodes) throw InputError("map does not match the instantiated network");
    Evidence ev(inst.spn);
    for (PlaceId i = 0; i < map.size(); ++i) {
        if (!map.is_place(i)) continue;
        if (!map.nodes[i].geometry) throw InputError("place " + std::to_string(i) + " has no geometry");
        add_grid_evidence(ev, *map.nodes[i].geometry, i * kGridCells);
    }
    return ev;
}

namespace {

constexpr double kProbeLogIndicator = -60.0;
constexpr int kMaxRefineRounds = 200;
constexpr std::size_t kSingleFlipTries = 4;

// Coordinate ascent on the exact joint log score, starting from the
// max-product assignment. Single-variable flips are ranked with one gradient
// pass (the network is multilinear in the indicators) and checked exactly.
void refine_assignment(const Spn& spn, const Evidence& ev, const std::vector<VarId>& vars,
                       std::vector<std::uint32_t>& y) {
    auto score = [&] {
        Evidence e = ev;
        for (std::size_t k = 0; k < vars.size(); ++k) e.observe(vars[k], y[k]);
        return evaluate(spn, e);
    };
    double current = score();
    struct Flip {
        std::size_t k;
        std::uint32_t value;
        double gain;
    };
    auto try_flips = [&](std::span<const Flip> flips) {
        const auto saved = y;
        for (const auto& f : flips) y[f.k] = f.value;
        const double s = score();
        if (s > current + 1e-12) {
            current = s;
            return true;
        }
        y = saved;
        return false;
    };
    for (int round = 0; round < kMaxRefineRounds; ++round) {
        auto li = ev.log_indicators();
        for (std::size_t k = 0; k < vars.size(); ++k)
            for (std::uint32_t c = 0; c < spn.cardinality(vars[k]); ++c)
                li[spn.indicator_offset(vars[k]) + c] = c == y[k] ? 0.0 : kProbeLogIndicator;
        const auto g = indicator_gradients(spn, li);
        std::vector<Flip> flips;
        for (std::size_t k = 0; k < vars.size(); ++k) {
            const auto off = spn.indicator_offset(vars[k]);
            if (!(g[off + y[k]] > 0.0)) continue;
            Flip best{k, y[k], 1e-9};
            for (std::uint32_t c = 0; c < spn.cardinality(vars[k]); ++c) {
                if (c == y[k] || !(g[off + c] > 0.0)) continue;
                const double gain = std::log(g[off + c]) - kProbeLogIndicator - std::log(g[off + y[k]]);
                if (gain > best.gain) best = {k, c, gain};
            }
            if (best.value != y[k]) flips.push_back(best);
        }
        if (flips.empty()) break;
        std::sort(flips.begin(), flips.end(), [](const Flip& a, const Flip& b) { return a.gain > b.gain; });
        if (flips.size() > 1 && try_flips(flips)) continue;
        bool moved = false;
        for (std::size_t i = 0; i < std::min(flips.size(), kSingleFlipTries) && !moved; ++i)
            moved = try_flips(std::span<const Flip>(&flips[i], 1));
        if (!moved) break;
    }
}

std::vector<PlacePrediction> predict(const InstantiatedToponet& inst, const SemanticMap& map, bool placeholders,
                                     Decoding decoding) {
    const auto ev = map_evidence(inst, map);
    MpeOptions opt;
    opt.query.assign(inst.spn.num_variables(), 0);
    for (PlaceId i = 0; i < map.size(); ++i)
        if (placeholders || map.is_place(i)) opt.query[inst.class_var(i)] = 1;
    const auto res = mpe(inst.spn, ev, opt);
    std::vector<VarId> vars;
    std::vector<std::uint32_t> y;
    for (VarId v = 0; v < opt.query.size(); ++v)
        if (opt.query[v]) {
            vars.push_back(v);
            y.push_back(static_cast<std::uint32_t>(res.assignment[v]));
        }
    if (decoding == Decoding::Refined) refine_assignment(inst.spn, ev, vars, y);
    const auto marg = marginals(inst.spn, ev);
    std::vector<PlacePrediction> out;
    for (PlaceId i = 0; i < map.size(); ++i) {
        if (map.is_place(i) == placeholders) continue;
        PlacePrediction p;
        p.id = i;
        p.posterior = marg[inst.class_var(i)];
        p.mpe_class = y[std::lower_bound(vars.begin(), vars.end(), inst.class_var(i)) - vars.begin()];
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

std::vector<PlacePrediction> classify_places(const InstantiatedToponet& inst, const SemanticMap& map,
                                             Decoding decoding) {
    return predict(inst, map, false, decoding);
}

std::vector<PlacePrediction> infer_placeholders(const InstantiatedToponet& inst, const SemanticMap& map,
                                                Decoding decoding) {
    if (map.num_placeholders() == 0) {
        map_evidence(inst, map);
        return {};
    }
    return predict(inst, map, true, decoding);
}

NoveltyScore novelty_score(const InstantiatedToponet& inst, const SemanticMap& map, double threshold) {
    NoveltyScore s;
    s.total_ll = evaluate(inst.spn, map_evidence(inst, map));
    s.per_place_ll = s.total_ll / static_cast<double>(std::max<std::size_t>(1, map.num_places()));
    s.threshold = threshold;
    s.decision = s.per_place_ll < threshold ? NoveltyDecision::Novel : NoveltyDecision::Known;
    return s;
}

nlohmann::json to_json(const std::vector<PlacePrediction>& preds) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : preds)
        out.push_back({{"place_id", p.id},
                       {"posterior", std::vector<double>(p.posterior.data(), p.posterior.data() + p.posterior.size())},
                       {"mpe_class", p.mpe_class}});
    return out;
}

nlohmann::json to_json(const NoveltyScore& s) {
    return {{"total_ll", s.total_ll},
            {"per_place_ll", s.per_place_ll},
            {"threshold", s.threshold},
            {"decision", s.decision == NoveltyDecision::Novel ? "novel" : "known"}};
}

std::vector<RocPoint> roc_curve(std::span<const double> known, std::span<const double> novel) {
    if (known.empty() || novel.empty()) throw InputError("roc: need known and novel scores");
    std::vector<double> all(known.begin(), known.end());
    all.insert(all.end(), novel.begin(), novel.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    std::vector<double> k(known.begin(), known.end()), v(novel.begin(), novel.end());
    std::sort(k.begin(), k.end());
    std::sort(v.begin(), v.end());
    auto below = [](const std::vector<double>& xs, double t) {
        return static_cast<double>(std::lower_bound(xs.begin(), xs.end(), t) - xs.begin()) / xs.size();
    };
    std::vector<RocPoint> out{{all.front(), 0.0, 0.0}};
    for (double s : all) {
        const double t = std::nextafter(s, std::numeric_limits<double>::infinity());
        out.push_back({t, below(v, t), below(k, t)});
    }
    return out;
}

double roc_auc(std::span<const RocPoint> roc) {
    double a = 0.0;
    for (std::size_t i = 1; i < roc.size(); ++i)
        a += (roc[i].false_positive_rate - roc[i - 1].false_positive_rate) *
             (roc[i].true_positive_rate + roc[i - 1].true_positive_rate) / 2;
    return a;
}

}  // namespace toponets
