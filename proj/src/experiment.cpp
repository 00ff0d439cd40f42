#include "toponets/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <atomic>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "toponets/spn_io.hpp"

namespace toponets {

namespace {

std::uint64_t map_seed(const ExperimentConfig& cfg, const SemanticMap& map, std::uint64_t salt) {
    return splitmix64(cfg.seed ^ fnv1a(map.name) ^ (salt * 0x9e3779b97f4a7c15ULL));
}

nlohmann::json to_json(const HybridConfig& h) {
    return {{"warm_start", to_json(h.warm_start)},
            {"discriminative", to_json(h.discriminative)},
            {"generative", to_json(h.generative)}};
}

HybridConfig hybrid_from_json(const nlohmann::json& j, HybridConfig h) {
    if (j.contains("warm_start")) h.warm_start = train_config_from_json(j["warm_start"]);
    if (j.contains("discriminative")) h.discriminative = train_config_from_json(j["discriminative"]);
    if (j.contains("generative")) h.generative = train_config_from_json(j["generative"]);
    return h;
}

nlohmann::json to_json(const BpOptions& b) {
    return {{"max_iters", b.max_iters}, {"damping", b.damping}, {"tol", b.tol}};
}

}  // namespace

std::uint32_t ExperimentConfig::resolved_swaps() const {
    if (novelty_swaps > 0) return novelty_swaps;
    return class_setup == 10 ? 30 : 10;
}

void ExperimentConfig::check() const {
    parse_split(split);
    if (class_setup != 6 && class_setup != 10) throw InputError("experiment: class setup must be 6 or 10");
    if (decompositions < 1) throw InputError("experiment: decompositions must be >= 1");
    if (!(corrupt_fraction >= 0.0 && corrupt_fraction <= 1.0))
        throw InputError("experiment: corrupt_fraction must be in [0, 1]");
    if (!(corrupt_radius >= 0.0)) throw InputError("experiment: corrupt_radius must be >= 0");
    if (placeholder_stride < 1) throw InputError("experiment: placeholder_stride must be >= 1");
    if (!(pairwise_smoothing > 0.0)) throw InputError("experiment: pairwise_smoothing must be > 0");
    if (!(bp.damping >= 0.0 && bp.damping < 1.0)) throw InputError("experiment: bp damping must be in [0, 1)");
}

nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"split", c.split},
            {"class_setup", c.class_setup},
            {"decompositions", c.decompositions},
            {"seed", c.seed},
            {"place_model", to_json(c.place_model)},
            {"place_training", to_json(c.place_training)},
            {"toponet", to_json(c.toponet)},
            {"pairwise_smoothing", c.pairwise_smoothing},
            {"bp", to_json(c.bp)},
            {"corrupt_fraction", c.corrupt_fraction},
            {"corrupt_radius", c.corrupt_radius},
            {"placeholder_stride", c.placeholder_stride},
            {"novelty_swaps", c.resolved_swaps()}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        c.split = j.value("split", c.split);
        c.class_setup = j.value("class_setup", c.class_setup);
        c.decompositions = j.value("decompositions", c.decompositions);
        c.seed = j.value("seed", c.seed);
        if (j.contains("place_model")) c.place_model = place_model_config_from_json(j["place_model"]);
        if (j.contains("place_training")) c.place_training = hybrid_from_json(j["place_training"], c.place_training);
        if (j.contains("toponet")) c.toponet = toponet_config_from_json(j["toponet"]);
        c.pairwise_smoothing = j.value("pairwise_smoothing", c.pairwise_smoothing);
        if (j.contains("bp")) {
            const auto& b = j["bp"];
            c.bp.max_iters = b.value("max_iters", c.bp.max_iters);
            c.bp.damping = b.value("damping", c.bp.damping);
            c.bp.tol = b.value("tol", c.bp.tol);
        }
        c.corrupt_fraction = j.value("corrupt_fraction", c.corrupt_fraction);
        c.corrupt_radius = j.value("corrupt_radius", c.corrupt_radius);
        c.placeholder_stride = j.value("placeholder_stride", c.placeholder_stride);
        c.novelty_swaps = j.value("novelty_swaps", c.novelty_swaps);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed experiment config: ") + e.what());
    }
    c.check();
    return c;
}

SemanticMap corrupt_geometry(const SemanticMap& map, double fraction, double radius, std::uint64_t seed) {
    SemanticMap out = map;
    std::vector<PlaceId> places;
    for (PlaceId i = 0; i < map.size(); ++i)
        if (map.is_place(i)) places.push_back(i);
    std::mt19937_64 rng(splitmix64(seed));
    std::shuffle(places.begin(), places.end(), rng);
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(places.size())));
    const auto& edges = radial_edges();
    for (std::size_t k = 0; k < count; ++k) {
        auto& grid = *out.nodes[places[k]].geometry;
        for (int a = 0; a < kAngularCells; ++a)
            for (int r = 0; r < kRadialCells; ++r)
                if (edges[r + 1] > radius) grid.set(a, r, Cell::Missing);
    }
    return out;
}

Models train_models(const std::vector<SemanticMap>& train_maps, const ExperimentConfig& cfg, TrainLog* log) {
    cfg.check();
    if (train_maps.empty()) throw InputError("train_models: no training maps");
    std::vector<PolarGrid> grids;
    std::vector<std::uint32_t> labels;
    for (const auto& m : train_maps) {
        if (m.num_classes != cfg.class_setup)
            throw InputError("train_models: map '" + m.name + "' does not use the " + std::to_string(cfg.class_setup) +
                             "-class setup");
        for (const auto& n : m.nodes) {
            if (n.kind != PlaceKind::Place) continue;
            if (!n.geometry || n.label == kLatent) throw InputError("train_models: map '" + m.name + "' has an unlabeled place");
            grids.push_back(*n.geometry);
            labels.push_back(static_cast<std::uint32_t>(n.label));
        }
    }
    auto pm = build_place_model(cfg.class_setup, cfg.place_model);
    auto pr = train_place_model(pm, place_samples(grids, labels), cfg.place_training);
    auto tr = train_toponet(build_toponet(pm, std::to_string(cfg.class_setup), default_templates(), cfg.toponet), train_maps);
    if (log) {
        log->place_model = pr.warm_trace;
        log->place_model.insert(log->place_model.end(), pr.discriminative_trace.begin(), pr.discriminative_trace.end());
        log->place_model.insert(log->place_model.end(), pr.generative_trace.begin(), pr.generative_trace.end());
        log->templates = tr.reports;
    }
    return {std::move(tr.model), learn_pairwise(train_maps, cfg.class_setup, cfg.pairwise_smoothing)};
}

void save_models(const std::filesystem::path& dir, const Models& m) {
    save_toponet(dir / "toponet", m.toponet);
    write_text(dir / "pairwise.json", to_json(m.pairwise).dump(2) + "\n");
}

Models load_models(const std::filesystem::path& dir) {
    Models m;
    m.toponet = load_toponet(dir / "toponet");
    try {
        m.pairwise = pairwise_from_json(nlohmann::json::parse(read_text(dir / "pairwise.json")));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("pairwise.json: ") + e.what());
    }
    if (m.pairwise.phi.rows() != m.toponet.num_classes)
        throw ParseError("pairwise potential and toponet disagree on the class count");
    return m;
}

std::uint64_t directory_hash(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& f : files) {
        const auto name = f.generic_string();
        h = fnv1a(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()), h);
        const auto bytes = read_file(dir / f);
        h = fnv1a(bytes, h);
    }
    return h;
}

std::string to_string(Engine e) {
    switch (e) {
        case Engine::Toponet: return "toponet";
        case Engine::Mrf: return "mrf";
        case Engine::Local: return "local";
    }
    return "?";
}

Engine engine_from_string(const std::string& s) {
    if (s == "toponet") return Engine::Toponet;
    if (s == "mrf") return Engine::Mrf;
    if (s == "local") return Engine::Local;
    throw InputError("unknown engine '" + s + "'");
}

std::string to_string(Task t) {
    switch (t) {
        case Task::Classify: return "classify";
        case Task::Placeholders: return "placeholders";
        case Task::Novelty: return "novelty";
    }
    return "?";
}

Task task_from_string(const std::string& s) {
    if (s == "classify") return Task::Classify;
    if (s == "placeholders") return Task::Placeholders;
    if (s == "novelty") return Task::Novelty;
    throw InputError("unknown task '" + s + "'");
}

namespace {

void check_map(const Models& m, const SemanticMap& map) {
    if (map.num_classes != m.toponet.num_classes)
        throw InputError("map '" + map.name + "' does not match the model's class setup");
}

MapAccuracy start(const SemanticMap& map, std::uint32_t nc) {
    MapAccuracy a;
    a.map = map.name;
    a.truth_counts.assign(nc, 0);
    return a;
}

void score(MapAccuracy& a, std::int32_t truth, std::uint32_t predicted) {
    if (truth == kLatent) return;
    ++a.truth_counts[static_cast<std::size_t>(truth)];
    a.correct += predicted == static_cast<std::uint32_t>(truth);
    ++a.total;
}

}  // namespace

MapAccuracy eval_classify(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg) {
    check_map(m, map);
    const auto corrupted =
        cfg.corrupt_fraction > 0.0 ? corrupt_geometry(map, cfg.corrupt_fraction, cfg.corrupt_radius, map_seed(cfg, map, 1))
                                   : map;
    auto acc = start(map, m.toponet.num_classes);
    switch (engine) {
        case Engine::Local:
            for (PlaceId i = 0; i < corrupted.size(); ++i)
                if (corrupted.is_place(i))
                    score(acc, corrupted.nodes[i].label,
                          classify_local(m.toponet.place_model, *corrupted.nodes[i].geometry).argmax());
            break;
        case Engine::Toponet: {
            const auto inst = instantiate(m.toponet, corrupted, cfg.decompositions, map_seed(cfg, map, 2));
            for (const auto& p : classify_places(inst, corrupted)) score(acc, corrupted.nodes[p.id].label, p.mpe_class);
            break;
        }
        case Engine::Mrf: {
            const auto out = mrf_tasks(build_mrf(corrupted, m.toponet.place_model, m.pairwise), cfg.bp);
            for (const auto& p : out.places) score(acc, corrupted.nodes[p.id].label, p.mpe_class);
            break;
        }
    }
    return acc;
}

MapAccuracy eval_placeholders(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg) {
    check_map(m, map);
    if (engine == Engine::Local) throw InputError("the local engine has no placeholder inference");
    auto acc = start(map, m.toponet.num_classes);
    const auto states = simulate_exploration(map, map.size() - 1, map_seed(cfg, map, 3));
    for (std::size_t k = cfg.placeholder_stride; k < states.size(); k += cfg.placeholder_stride) {
        const auto& s = states[k];
        if (s.num_placeholders() == 0) continue;
        if (engine == Engine::Toponet) {
            const auto inst = instantiate(m.toponet, s, cfg.decompositions, map_seed(cfg, map, 4) + k);
            for (const auto& p : infer_placeholders(inst, s)) score(acc, s.nodes[p.id].label, p.mpe_class);
        } else {
            const auto out = mrf_tasks(build_mrf(s, m.toponet.place_model, m.pairwise), cfg.bp);
            for (const auto& p : out.placeholders) score(acc, s.nodes[p.id].label, p.mpe_class);
        }
    }
    return acc;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> swap_pairs(const SemanticMap& map, std::uint32_t count,
                                                                std::uint64_t seed) {
    std::vector<std::uint8_t> present(map.num_classes, 0);
    for (const auto& n : map.nodes)
        if (n.kind == PlaceKind::Place && n.label != kLatent) present[static_cast<std::size_t>(n.label)] = 1;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (std::uint32_t a = 0; a < map.num_classes; ++a)
        for (std::uint32_t b = a + 1; b < map.num_classes; ++b)
            if (present[a] && present[b]) pairs.emplace_back(a, b);
    std::mt19937_64 rng(splitmix64(seed));
    std::shuffle(pairs.begin(), pairs.end(), rng);
    if (pairs.size() > count) pairs.resize(count);
    return pairs;
}

double engine_novelty_score(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg) {
    check_map(m, map);
    switch (engine) {
        case Engine::Toponet: {
            const auto inst = instantiate(m.toponet, map, cfg.decompositions, map_seed(cfg, map, 5));
            return novelty_score(inst, map, 0.0).per_place_ll;
        }
        case Engine::Mrf:
            return mrf_tasks(build_mrf(map, m.toponet.place_model, m.pairwise), cfg.bp).novelty.per_place_ll;
        case Engine::Local: {
            double total = 0.0;
            std::size_t places = 0;
            const double log_k = std::log(static_cast<double>(m.toponet.num_classes));
            for (const auto& n : map.nodes) {
                if (n.kind != PlaceKind::Place) continue;
                const auto ll = classify_local(m.toponet.place_model, *n.geometry).log_likelihood;
                std::vector<double> v(ll.data(), ll.data() + ll.size());
                total += log_sum_exp(v) - log_k;
                ++places;
            }
            return total / static_cast<double>(std::max<std::size_t>(1, places));
        }
    }
    return 0.0;
}

MapNovelty eval_novelty(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg) {
    MapNovelty out;
    out.map = map.name;
    out.known = engine_novelty_score(m, map, engine, cfg);
    for (auto [a, b] : swap_pairs(map, cfg.resolved_swaps(), map_seed(cfg, map, 6))) {
        auto swapped = swap_classes(map, a, b);
        swapped.name = map.name;  // same instantiation seed as the known map
        out.novel.push_back({a, b, engine_novelty_score(m, swapped, engine, cfg)});
    }
    return out;
}

NoveltySummary summarize_novelty(const std::vector<MapNovelty>& maps) {
    NoveltySummary s;
    std::vector<double> known, novel;
    double wins = 0.0, map_auc = 0.0;
    std::size_t maps_with_swaps = 0;
    for (const auto& m : maps) {
        known.push_back(m.known);
        for (const auto& n : m.novel) {
            novel.push_back(n.score);
            wins += n.score < m.known ? 1.0 : n.score == m.known ? 0.5 : 0.0;
            ++s.pairs;
        }
        if (!m.novel.empty()) {
            std::vector<double> k{m.known}, v;
            for (const auto& n : m.novel) v.push_back(n.score);
            map_auc += roc_auc(roc_curve(k, v));
            ++maps_with_swaps;
        }
    }
    if (!known.empty() && !novel.empty()) {
        s.roc = roc_curve(known, novel);
        s.auc = roc_auc(s.roc);
    }
    s.paired_rate = s.pairs ? wins / static_cast<double>(s.pairs) : 0.0;
    s.mean_map_auc = maps_with_swaps ? map_auc / static_cast<double>(maps_with_swaps) : 0.0;
    return s;
}

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    if (xs.empty()) return r;
    r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size()));
    return r;
}

AccuracySummary summarize_accuracy(const std::vector<MapAccuracy>& maps) {
    AccuracySummary s;
    std::vector<double> per;
    std::vector<std::size_t> counts;
    for (const auto& m : maps) {
        s.correct += m.correct;
        s.total += m.total;
        if (m.total) per.push_back(m.accuracy());
        if (counts.size() < m.truth_counts.size()) counts.resize(m.truth_counts.size(), 0);
        for (std::size_t c = 0; c < m.truth_counts.size(); ++c) counts[c] += m.truth_counts[c];
    }
    s.pooled = s.total ? static_cast<double>(s.correct) / static_cast<double>(s.total) : 0.0;
    s.per_map = mean_std(per);
    if (s.total && !counts.empty())
        s.majority = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(s.total);
    return s;
}

SemanticMap bench_map(const GeneratorConfig& base, const ClassCatalogue& cat, std::size_t size, std::uint64_t seed) {
    if (size < 1) throw InputError("bench_map: size must be >= 1");
    auto cfg = base;
    cfg.rng_seed = seed;
    const int rooms = static_cast<int>(size);  // at least one place per room
    cfg.rooms_per_floor = {rooms, rooms};
    const auto full = generate_environment(cfg, cat, cfg.first_floor);
    if (full.size() < size) throw InputError("bench_map: generated floor is smaller than " + std::to_string(size));

    const auto adj = full.adjacency();
    std::vector<PlaceId> order{0};
    std::vector<std::uint8_t> seen(full.size(), 0);
    seen[0] = 1;
    for (std::size_t h = 0; h < order.size() && order.size() < size; ++h)
        for (auto v : adj[order[h]])
            if (!seen[v] && order.size() < size) {
                seen[v] = 1;
                order.push_back(v);
            }
    if (order.size() < size) throw InputError("bench_map: generated floor is not connected");
    std::vector<std::int64_t> id(full.size(), -1);
    SemanticMap s;
    s.name = "bench_" + std::to_string(size);
    s.class_set = full.class_set;
    s.num_classes = full.num_classes;
    for (auto v : order) {
        id[v] = static_cast<std::int64_t>(s.nodes.size());
        s.nodes.push_back(full.nodes[v]);
    }
    for (auto [a, b] : full.edges)
        if (id[a] >= 0 && id[b] >= 0) s.edges.emplace_back(static_cast<PlaceId>(id[a]), static_cast<PlaceId>(id[b]));
    canonicalize_edges(s);
    return s;
}

void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(1, n))));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex lock;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard g(lock);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

nlohmann::json to_json(const MapAccuracy& a) {
    return {{"map", a.map}, {"correct", a.correct}, {"total", a.total}, {"accuracy", a.accuracy()},
            {"truth_counts", a.truth_counts}};
}

nlohmann::json to_json(const AccuracySummary& s) {
    return {{"pooled", s.pooled},         {"mean", s.per_map.mean}, {"std", s.per_map.std},
            {"correct", s.correct},       {"total", s.total},       {"majority_baseline", s.majority}};
}

nlohmann::json to_json(const MapNovelty& n) {
    nlohmann::json novel = nlohmann::json::array();
    for (const auto& s : n.novel) novel.push_back({{"swap", {s.class_a, s.class_b}}, {"score", s.score}});
    return {{"map", n.map}, {"known", n.known}, {"novel", novel}};
}

nlohmann::json to_json(const NoveltySummary& s) {
    nlohmann::json roc = nlohmann::json::array();
    for (const auto& p : s.roc)
        roc.push_back({{"threshold", p.threshold}, {"tpr", p.true_positive_rate}, {"fpr", p.false_positive_rate}});
    return {{"auc", s.auc}, {"paired_rate", s.paired_rate}, {"mean_map_auc", s.mean_map_auc}, {"pairs", s.pairs},
            {"roc", roc}};
}

}  // namespace toponets
