#pragma once

// Pairwise MRF baseline over the topological graph: local place-model
// evidence as unaries, class co-occurrence as a shared pairwise potential,
// sum-product loopy belief propagation in log space.

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "toponets/place_model.hpp"
#include "toponets/semmap.hpp"
#include "toponets/toponet.hpp"

namespace toponets {

inline constexpr double kUnaryFloor = -50.0;

/// Symmetric positive class co-occurrence table, normalized to sum 1.
struct PairwisePotential {
    Eigen::MatrixXd phi;
    Eigen::MatrixXd counts;  // raw edge counts, both orientations
    double smoothing = 1.0;
};

/// Counts class pairs over edges between labeled nodes (both orientations)
/// and adds `smoothing` to every entry.
PairwisePotential learn_pairwise(const std::vector<SemanticMap>& corpus, std::uint32_t num_classes, double smoothing = 1.0);

nlohmann::json to_json(const PairwisePotential& p);
PairwisePotential pairwise_from_json(const nlohmann::json& j);

struct MrfInstance {
    std::uint32_t num_classes = 0;
    std::vector<std::pair<PlaceId, PlaceId>> edges;
    /// Per node log unary; places use local log-likelihoods shifted so the
    /// best class is 0 and floored at kUnaryFloor; placeholders are 0.
    std::vector<Eigen::VectorXd> log_unary;
    /// Per node shift removed from the local log-likelihoods.
    std::vector<double> unary_shift;
    Eigen::MatrixXd log_pairwise;
    std::vector<std::uint8_t> is_place;

    std::size_t size() const { return log_unary.size(); }
};

MrfInstance build_mrf(const SemanticMap& map, const PlaceModel& place_model, const PairwisePotential& pairwise);

struct BpOptions {
    std::uint32_t max_iters = 1000;
    /// Weight of the previous message in each update (0 = undamped).
    double damping = 0.5;
    double tol = 1e-6;
};

struct BpResult {
    std::vector<Eigen::VectorXd> beliefs;
    /// Log messages per directed edge: 2k is edges[k].first -> second, 2k+1 the reverse.
    std::vector<Eigen::VectorXd> log_messages;
    bool converged = false;
    std::uint32_t iterations = 0;
    double residual = 0.0;  // max change of a normalized message in the last sweep
};

/// Synchronous damped sum-product BP. Non-convergence is reported, not thrown.
BpResult loopy_bp(const MrfInstance& mrf, const BpOptions& options = {});

/// Bethe approximation of log Z at the BP fixed point, including the unary shifts.
double bethe_log_z(const MrfInstance& mrf, const BpResult& bp);

struct MrfOutputs {
    std::vector<PlacePrediction> places;
    std::vector<PlacePrediction> placeholders;
    NoveltyScore novelty;
    BpResult bp;
};

/// Belief argmax for places and placeholders; novelty from the Bethe log Z
/// divided by the place count.
MrfOutputs mrf_tasks(const MrfInstance& mrf, const BpOptions& options = {}, double threshold = 0.0);

nlohmann::json bp_diagnostics(const BpResult& bp);

}  // namespace toponets
