#include "toponets/place_model.hpp"

#include "toponets/spn_io.hpp"

namespace toponets {

nlohmann::json to_json(const PlaceModelConfig& c) {
    return {{"view", to_json(c.view)}, {"view_roots", c.view_roots}, {"place", to_json(c.place)}, {"seed", c.seed}};
}

PlaceModelConfig place_model_config_from_json(const nlohmann::json& j) {
    PlaceModelConfig c;
    if (j.contains("view")) c.view = structure_config_from_json(j["view"]);
    if (j.contains("place")) c.place = structure_config_from_json(j["place"]);
    c.view_roots = j.value("view_roots", c.view_roots);
    c.seed = j.value("seed", c.seed);
    if (c.view_roots < 1) throw InputError("place model config: view_roots must be >= 1");
    return c;
}

PlaceModel build_place_model(std::uint32_t num_classes, const PlaceModelConfig& cfg) {
    if (num_classes != 6 && num_classes != 10) throw InputError("place model: class setup must be 6 or 10");
    PlaceModel m;
    m.num_classes = num_classes;
    m.config = cfg;
    SpnBuilder b(std::vector<std::uint32_t>(kGridCells, kCellStates));
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        std::mt19937_64 rng(splitmix64(cfg.seed * 1000003ULL + c));
        std::vector<DenseUnit> view_units(kViews);
        std::array<NodeId, kViews> roots{};
        for (int v = 0; v < kViews; ++v) {
            std::vector<VarId> vars(kViewCells);
            for (int i = 0; i < kViewCells; ++i) vars[i] = static_cast<VarId>(v * kViewCells + i);
            const auto units = indicator_units(b, vars);
            view_units[v].inputs = build_dense(b, units, cfg.view, rng, cfg.view_roots);
            // Duplicate roots (single-output regions) would add parallel edges.
            auto& in = view_units[v].inputs;
            std::sort(in.begin(), in.end());
            in.erase(std::unique(in.begin(), in.end()), in.end());
            roots[v] = in[0];
        }
        m.view_roots.push_back(roots);
        m.net.class_nodes.push_back(build_dense(b, view_units, cfg.place, rng, 1)[0]);
    }
    m.net.boundary = static_cast<NodeId>(b.num_nodes());
    std::vector<double> prior(num_classes, 1.0 / num_classes);
    rescale_to_simplex(prior, 0.0);
    const NodeId root = b.sum(m.net.class_nodes, prior);
    m.net.spn = std::move(b).build(root);
    if (!check_validity(m.net.spn).ok()) throw StructuralError("place model failed validation");
    return m;
}

std::uint32_t LocalPosterior::argmax() const {
    Eigen::Index i = 0;
    posterior.maxCoeff(&i);
    return static_cast<std::uint32_t>(i);
}

LocalPosterior local_posterior(const Eigen::VectorXd& ll) {
    LocalPosterior p;
    p.log_likelihood = ll;
    const double m = ll.maxCoeff();
    if (m == kNegInf) throw ImpossibleEvidence("local posterior: every class has zero likelihood");
    p.posterior = ll.unaryExpr([m](double x) { return x == kNegInf ? 0.0 : std::exp(x - m); });
    p.posterior /= p.posterior.sum();
    return p;
}

LocalPosterior classify_local(const PlaceModel& model, const PolarGrid& grid) {
    if (!model.trained) throw InputError("classify_local: place model is untrained");
    const auto ind = grid_evidence(grid).log_indicators();
    std::vector<double> values(model.spn().num_nodes());
    evaluate_nodes(model.spn(), ind, values, nullptr);
    Eigen::VectorXd ll(model.num_classes);
    for (std::uint32_t c = 0; c < model.num_classes; ++c) ll[c] = values[model.class_root(c)];
    return local_posterior(ll);
}

std::vector<LabeledSample> place_samples(const std::vector<PolarGrid>& grids, const std::vector<std::uint32_t>& labels) {
    if (grids.size() != labels.size()) throw InputError("place_samples: grid/label count mismatch");
    std::vector<LabeledSample> out;
    out.reserve(grids.size());
    for (std::size_t i = 0; i < grids.size(); ++i) out.push_back({grid_evidence(grids[i]), labels[i], 1.0});
    return out;
}

HybridResult train_place_model(PlaceModel& model, const std::vector<LabeledSample>& data, const HybridConfig& cfg) {
    for (const auto& s : data)
        if (s.label >= model.num_classes) throw InputError("train_place_model: label out of range");
    auto r = hybrid_train(model.net, data, cfg);
    model.net = r.model;
    model.trained = true;
    return r;
}

void save_place_model(const std::filesystem::path& dir, const PlaceModel& model) {
    std::filesystem::create_directories(dir);
    save_spn(dir / "place_model.tspn", model.spn());
    nlohmann::json views = nlohmann::json::array();
    for (const auto& r : model.view_roots) views.push_back(std::vector<NodeId>(r.begin(), r.end()));
    const nlohmann::json meta = {{"format", "toponets-place-model"},
                                 {"version", 1},
                                 {"num_classes", model.num_classes},
                                 {"trained", model.trained},
                                 {"boundary", model.net.boundary},
                                 {"class_nodes", model.net.class_nodes},
                                 {"view_roots", views},
                                 {"config", to_json(model.config)},
                                 {"network", "place_model.tspn"}};
    write_text(dir / "place_model.json", meta.dump(2) + "\n");
}

PlaceModel load_place_model(const std::filesystem::path& dir) {
    const auto meta = nlohmann::json::parse(read_text(dir / "place_model.json"));
    if (meta.value("format", "") != "toponets-place-model") throw ParseError("not a place model");
    if (meta.at("version").get<int>() != 1) throw ParseError("unsupported place model version");
    PlaceModel m;
    m.num_classes = meta.at("num_classes").get<std::uint32_t>();
    m.trained = meta.at("trained").get<bool>();
    m.config = place_model_config_from_json(meta.at("config"));
    m.net.boundary = meta.at("boundary").get<NodeId>();
    m.net.class_nodes = meta.at("class_nodes").get<std::vector<NodeId>>();
    for (const auto& v : meta.at("view_roots")) {
        const auto ids = v.get<std::vector<NodeId>>();
        if (ids.size() != kViews) throw ParseError("place model: view root list must have 8 entries");
        std::array<NodeId, kViews> a{};
        std::copy(ids.begin(), ids.end(), a.begin());
        m.view_roots.push_back(a);
    }
    m.net.spn = load_spn(dir / meta.at("network").get<std::string>());
    if (m.net.class_nodes.size() != m.num_classes) throw ParseError("place model: class node count mismatch");
    return m;
}

}  // namespace toponets
