#pragma once

// Template-based SPNs over topological semantic maps.
//
// A map is decomposed into vertex-disjoint parts, each isomorphic to a small
// sub-map template. Every template has an SPN over its slots' class and
// geometry variables; the bottom of each slot is a copy of the shared place
// model and the top layers model class co-occurrence. A map-specific network
// is a uniform mixture over N decompositions, each a product of template
// instances bound to the part's places.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "toponets/place_model.hpp"
#include "toponets/semmap.hpp"
#include "toponets/spn_learn.hpp"

namespace toponets {

/// Connected graph over ordered slots.
struct SubMapTemplate {
    std::string name;
    std::uint32_t slots = 1;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;

    bool operator==(const SubMapTemplate&) const = default;
};

/// SingleNode, Edge and Chain3 (a path 0-1-2).
std::vector<SubMapTemplate> default_templates();
/// Slot permutations that map the template's edge set onto itself.
std::vector<std::vector<std::uint32_t>> automorphisms(const SubMapTemplate& t);
/// Throws InputError unless the template is connected with valid slot edges.
void check_template(const SubMapTemplate& t);

nlohmann::json to_json(const SubMapTemplate& t);
SubMapTemplate template_from_json(const nlohmann::json& j);

struct Part {
    std::uint32_t template_index = 0;
    std::vector<PlaceId> nodes;  // node of each slot

    bool operator==(const Part&) const = default;
};

struct Decomposition {
    std::vector<Part> parts;  // sorted by node tuple

    /// Hash of the partition (template ids and slot bindings).
    std::uint64_t hash() const;
    bool operator==(const Decomposition&) const = default;
};

/// Greedy randomized matching, largest templates first; leftover vertices
/// become single-node parts. Parts are canonical under template
/// automorphisms (lexicographically smallest node tuple).
Decomposition decompose(const SemanticMap& map, const std::vector<SubMapTemplate>& templates, std::uint64_t seed);

/// Empty when the decomposition is a valid partition with embedded parts.
std::string decomposition_violation(const SemanticMap& map, const std::vector<SubMapTemplate>& templates,
                                    const Decomposition& d);

/// SPN over one template. Slot s uses geometry variables
/// [1176 s, 1176 s + 1176) and class variable 1176 * slots + s.
struct TemplateSpn {
    SubMapTemplate shape;
    Spn spn;
    NodeId boundary = kInvalidNode;                    // first top-layer node
    std::vector<std::vector<NodeId>> slot_class_nodes;  // [slot][class]: [Y_s = c] x place model root c
    bool trained = false;
    std::size_t num_samples = 0;

    VarId geometry_var(std::uint32_t slot, std::uint32_t cell) const { return slot * kGridCells + cell; }
    VarId class_var(std::uint32_t slot) const { return shape.slots * kGridCells + slot; }
};

struct ToponetConfig {
    /// Top-layer structure; num_mixtures_per_scope 0 means one per class.
    StructureConfig top{2, 2, 0, 0, 1};
    /// Decompositions drawn per training map.
    std::uint32_t train_decompositions = 4;
    TrainConfig train{Loss::Generative, Optimizer::EM, 0.05, true, 100, 32, 1e-8, 0.01};
    std::uint64_t seed = 1;
};

nlohmann::json to_json(const ToponetConfig& c);
ToponetConfig toponet_config_from_json(const nlohmann::json& j);

struct ToponetModel {
    std::string class_set;
    std::uint32_t num_classes = 0;
    PlaceModel place_model;
    std::vector<SubMapTemplate> templates;
    std::vector<TemplateSpn> template_spns;
    ToponetConfig config;

    bool trained() const;
};

TemplateSpn build_template_spn(const PlaceModel& place_model, const SubMapTemplate& shape, const StructureConfig& top);

/// Untrained model over a trained place model. Templates must include a
/// single-slot template.
ToponetModel build_toponet(const PlaceModel& place_model, const std::string& class_set,
                           std::vector<SubMapTemplate> templates = default_templates(), const ToponetConfig& cfg = {});

/// Evidence for one part: geometry of places, and class labels when asked.
Evidence part_evidence(const TemplateSpn& t, const SemanticMap& map, const Part& part, bool with_labels);

struct TemplateReport {
    std::string name;
    std::size_t samples = 0;
    std::vector<TraceRow> trace;
};

struct ToponetTrainResult {
    ToponetModel model;
    std::vector<TemplateReport> reports;
};

/// Trains the top layers of every template on parts drawn from the corpus;
/// bottom layers stay equal to the place model. Throws InputError naming
/// any template that receives no parts.
ToponetTrainResult train_toponet(const ToponetModel& model, const std::vector<SemanticMap>& corpus);

/// Directory layout: toponet.json, template_<name>.tspn, place_model/.
void save_toponet(const std::filesystem::path& dir, const ToponetModel& model);
ToponetModel load_toponet(const std::filesystem::path& dir);

/// Map-specific network. Node i of the map uses geometry variables
/// [1176 i, 1176 i + 1176) and class variable 1176 * n + i.
struct InstantiatedToponet {
    Spn spn;
    std::uint32_t num_map_nodes = 0;
    std::uint32_t num_classes = 0;
    std::vector<Decomposition> decompositions;
    std::vector<NodeId> decomposition_roots;  // children of the root Sum
    std::size_t duplicate_decompositions = 0;

    VarId geometry_var(PlaceId i, std::uint32_t cell) const { return i * kGridCells + cell; }
    VarId class_var(PlaceId i) const { return num_map_nodes * kGridCells + i; }
};

/// Draws N distinct decompositions (10 reseeds per slot before accepting a
/// duplicate) and combines their template instances under a uniform root Sum.
InstantiatedToponet instantiate(const ToponetModel& model, const SemanticMap& map, std::uint32_t n_decompositions,
                                std::uint64_t seed, bool validate = true);

/// Geometry clamped at places, placeholder geometry and all classes marginalized.
Evidence map_evidence(const InstantiatedToponet& inst, const SemanticMap& map);

struct PlacePrediction {
    PlaceId id = 0;
    Eigen::VectorXd posterior;
    std::uint32_t mpe_class = 0;
};

enum class Decoding {
    MaxProduct,  // plain max-product decoding
    Refined,     // max-product, then single-variable coordinate ascent on the exact joint score
};

/// Joint MPE over the class variables of places (placeholder classes summed
/// out) plus per-place marginal posteriors.
std::vector<PlacePrediction> classify_places(const InstantiatedToponet& inst, const SemanticMap& map,
                                             Decoding decoding = Decoding::MaxProduct);
/// Joint MPE over all class variables; returns the placeholders only.
std::vector<PlacePrediction> infer_placeholders(const InstantiatedToponet& inst, const SemanticMap& map,
                                                Decoding decoding = Decoding::Refined);

enum class NoveltyDecision { Known, Novel };

struct NoveltyScore {
    double total_ll = 0.0;
    double per_place_ll = 0.0;
    double threshold = 0.0;
    NoveltyDecision decision = NoveltyDecision::Known;
};

NoveltyScore novelty_score(const InstantiatedToponet& inst, const SemanticMap& map, double threshold);

nlohmann::json to_json(const std::vector<PlacePrediction>& p);
nlohmann::json to_json(const NoveltyScore& s);

struct RocPoint {
    double threshold = 0.0;
    double true_positive_rate = 0.0;   // novel maps flagged
    double false_positive_rate = 0.0;  // known maps flagged
};

/// Sweep over every distinct score; a map is flagged when its score is below
/// the threshold. Starts at (0, 0) and ends at (1, 1).
std::vector<RocPoint> roc_curve(std::span<const double> known, std::span<const double> novel);
/// Trapezoid area under roc_curve.
double roc_auc(std::span<const RocPoint> roc);

}  // namespace toponets
