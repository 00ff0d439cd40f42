#pragma once

// Layered per-place model: for every class, 8 view sub-networks joined by a
// place-level sub-network; a root Sum over the class roots forms the top
// layer (class prior).

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "toponets/polar_grid.hpp"
#include "toponets/spn_learn.hpp"

namespace toponets {

struct PlaceModelConfig {
    StructureConfig view{2, 2, 2, 1, 1};
    /// Mixtures exposed by each view sub-network to the place level.
    std::uint32_t view_roots = 2;
    StructureConfig place{2, 2, 2, 0, 1};
    std::uint64_t seed = 1;
};

nlohmann::json to_json(const PlaceModelConfig& c);
PlaceModelConfig place_model_config_from_json(const nlohmann::json& j);

struct PlaceModel {
    LayeredSpn net;  // class_nodes = per-class roots; boundary = root Sum
    std::uint32_t num_classes = 0;
    bool trained = false;
    PlaceModelConfig config;

    const Spn& spn() const { return net.spn; }
    NodeId class_root(std::uint32_t c) const { return net.class_nodes.at(c); }
    /// Root of each view sub-network, per class.
    std::vector<std::array<NodeId, kViews>> view_roots;
};

PlaceModel build_place_model(std::uint32_t num_classes, const PlaceModelConfig& cfg = {});

struct LocalPosterior {
    Eigen::VectorXd log_likelihood;  // log P(X | Y = c)
    Eigen::VectorXd posterior;       // uniform class prior

    std::uint32_t argmax() const;
};

/// Posterior from per-class log-likelihoods with a uniform prior.
LocalPosterior local_posterior(const Eigen::VectorXd& log_likelihood);

LocalPosterior classify_local(const PlaceModel& model, const PolarGrid& grid);

/// Training samples from labeled grids.
std::vector<LabeledSample> place_samples(const std::vector<PolarGrid>& grids, const std::vector<std::uint32_t>& labels);

HybridResult train_place_model(PlaceModel& model, const std::vector<LabeledSample>& data, const HybridConfig& cfg);

/// Directory layout: place_model.json (metadata) + place_model.tspn.
void save_place_model(const std::filesystem::path& dir, const PlaceModel& model);
PlaceModel load_place_model(const std::filesystem::path& dir);

}  // namespace toponets
