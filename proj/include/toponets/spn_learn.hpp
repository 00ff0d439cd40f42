#pragma once

// Random dense structure generation, pruning, and parameter learning.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "toponets/spn.hpp"

namespace toponets {

struct StructureConfig {
    std::uint32_t num_decompositions_per_level = 2;
    std::uint32_t num_subsets_per_decomposition = 2;
    std::uint32_t num_mixtures_per_scope = 2;
    /// Decomposition levels before a region is factorized into independent
    /// per-unit mixtures; 0 recurses all the way to singletons.
    std::uint32_t max_depth = 2;
    std::uint64_t rng_seed = 1;

    void check() const;
};

nlohmann::json to_json(const StructureConfig& c);
StructureConfig structure_config_from_json(const nlohmann::json& j);

/// A group of variables with prebuilt input nodes that all share one scope.
/// Plain variables use their indicators as inputs; higher layers pass whole
/// sub-networks (views, slots) as units.
struct DenseUnit {
    std::vector<NodeId> inputs;
};

/// Appends a random dense region graph over `units` and returns `num_roots`
/// Sum nodes whose scope is the union of all units.
std::vector<NodeId> build_dense(SpnBuilder& b, const std::vector<DenseUnit>& units, const StructureConfig& cfg,
                                std::mt19937_64& rng, std::uint32_t num_roots = 1);

/// Units for the given variables, one per variable, inputs = its indicators.
std::vector<DenseUnit> indicator_units(SpnBuilder& b, std::span<const VarId> vars);

/// Dense structure over the listed variables (cardinalities indexed by VarId).
Spn generate_dense_structure(std::span<const VarId> vars, std::span<const std::uint32_t> cardinalities,
                             const StructureConfig& cfg);

enum class Loss { Generative, Discriminative, ClassConditional };
enum class Optimizer { GradientDescent, EM };

std::string to_string(Loss l);
Loss loss_from_string(const std::string& s);

struct TrainConfig {
    Loss loss = Loss::Generative;
    Optimizer optimizer = Optimizer::GradientDescent;
    double learning_rate = 0.05;
    /// Scale each step by the current weight (gradient in log-weight
    /// coordinates), then clip at the floor and renormalize. False gives the
    /// plain step followed by the Euclidean projection onto the simplex.
    bool scale_by_weight = true;
    std::uint32_t epochs = 10;
    std::uint32_t batch_size = 32;
    double weight_floor = 1e-8;
    /// EM only: pseudo-count added to every edge's expected count.
    double em_smoothing = 0.0;
    double prune_threshold = 0.0;
    std::uint64_t shuffle_seed = 1;
    /// Samples per reduction chunk; fixes the summation order.
    std::uint32_t chunk_size = 8;
    std::uint32_t threads = 1;

    void check() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LabeledSample {
    Evidence evidence;
    std::uint32_t label = 0;
    double weight = 1.0;
};

/// Which part of the network is trained and where class scores are read.
struct TrainScope {
    /// Only Sum nodes in [begin, end) are updated. Nodes below `begin` are
    /// frozen, so their values are cached per sample.
    NodeId begin = 0;
    NodeId end = kInvalidNode;
    /// Per-class nodes for Discriminative / ClassConditional losses. Empty
    /// means the children of the root Sum.
    std::vector<NodeId> class_nodes;
};

struct TraceRow {
    std::uint32_t epoch = 0;
    double loss = 0.0;
    double accuracy = -1.0;  // negative when not applicable
};

struct TrainResult {
    Spn spn;
    std::vector<TraceRow> trace;
};

/// Loss per sample: Generative = -log f(x); ClassConditional = -log f_c(x)
/// at the sample's class node; Discriminative = cross-entropy of the softmax
/// over class-node log-values. Weights are projected onto the simplex with a
/// floor after every step.
TrainResult train(const Spn& spn, const std::vector<LabeledSample>& data, const TrainConfig& cfg,
                  const TrainScope& scope = {});

std::string trace_csv(const std::vector<TraceRow>& trace);

/// Mean weighted loss of the given kind over `data` (no update).
double mean_loss(const Spn& spn, const std::vector<LabeledSample>& data, Loss loss, const TrainScope& scope = {});
/// Fraction of samples whose argmax class node matches the label.
double class_accuracy(const Spn& spn, const std::vector<LabeledSample>& data, const TrainScope& scope = {});

/// Analytic d(mean objective)/d(w) for every edge (objective = -loss), as used
/// by the optimizer. Exposed for gradient checks.
std::vector<double> weight_gradient(const Spn& spn, const std::vector<LabeledSample>& data, Loss loss,
                                    const TrainScope& scope = {});

struct PruneResult {
    Spn spn;
    std::vector<NodeId> node_map;  // old id -> new id, kInvalidNode when removed
    std::size_t removed_edges = 0;
    std::size_t removed_nodes = 0;
    /// Mean log-likelihood on the reference set before and after pruning.
    double reference_ll_before = 0.0;
    double reference_ll_after = 0.0;
};

/// Drops Sum children with weight < threshold, removes unreachable nodes and
/// renormalizes. Refuses with StructuralError naming the node if a Sum
/// would lose every child.
PruneResult prune(const Spn& spn, double threshold, const std::vector<Evidence>& reference = {});

/// Network with a marked boundary between bottom layers (discriminative,
/// frozen after phase 1) and top layers (generative).
struct LayeredSpn {
    Spn spn;
    NodeId boundary = kInvalidNode;  // first top-layer node
    std::vector<NodeId> class_nodes; // per-class bottom roots
};

struct HybridConfig {
    /// Optional class-conditional warm start of the bottom layers.
    TrainConfig warm_start{Loss::ClassConditional, Optimizer::EM, 0.0, 0};
    TrainConfig discriminative{Loss::Discriminative};
    TrainConfig generative{Loss::Generative};
};

struct HybridResult {
    LayeredSpn model;
    std::vector<TraceRow> warm_trace;
    std::vector<TraceRow> discriminative_trace;
    std::vector<TraceRow> generative_trace;
};

HybridResult hybrid_train(const LayeredSpn& model, const std::vector<LabeledSample>& data, const HybridConfig& cfg);

/// JSON-lines I/O for labeled samples: {"label", "weight", "cardinality" or "cardinalities",
/// "values": [k, -1 (marginalized) or [allowed values], ...]}
std::string samples_to_jsonl(const std::vector<LabeledSample>& data);
std::vector<LabeledSample> samples_from_jsonl(const std::string& text);

}  // namespace toponets
