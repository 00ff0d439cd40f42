#pragma once

// Experiment pipeline shared by the command-line tool and the acceptance
// harness: model training per split, the three inference tasks for each
// engine, and report aggregation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "toponets/mrf.hpp"
#include "toponets/place_model.hpp"
#include "toponets/semmap.hpp"
#include "toponets/toponet.hpp"

namespace toponets {

struct ExperimentConfig {
    std::string split = "456-7";
    std::uint32_t class_setup = 6;
    std::uint32_t decompositions = 40;  // N for instantiation
    std::uint64_t seed = 1;

    PlaceModelConfig place_model;
    HybridConfig place_training{TrainConfig{Loss::ClassConditional, Optimizer::EM, 0.0, true, 6, 32, 1e-8, 0.1},
                                TrainConfig{Loss::Discriminative, Optimizer::GradientDescent, 0.05, true, 0},
                                TrainConfig{Loss::Generative, Optimizer::EM, 0.0, true, 0}};
    ToponetConfig toponet;
    double pairwise_smoothing = 1.0;
    BpOptions bp;

    /// Fraction of places whose cells beyond corrupt_radius are set Missing
    /// before classification; 0 disables.
    double corrupt_fraction = 0.3;
    double corrupt_radius = 1.0;
    /// Every k-th exploration state of each test map is scored for placeholders.
    std::uint32_t placeholder_stride = 10;
    /// Swapped maps per test map; 0 picks 10 for 6 classes and 30 for 10.
    std::uint32_t novelty_swaps = 0;

    std::uint32_t resolved_swaps() const;
    void check() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Ambiguous geometry: for a seeded `fraction` of places, every cell whose
/// outer radial edge lies beyond `radius` becomes Missing.
SemanticMap corrupt_geometry(const SemanticMap& map, double fraction, double radius, std::uint64_t seed);

struct Models {
    ToponetModel toponet;
    PairwisePotential pairwise;
};

struct TrainLog {
    std::vector<TraceRow> place_model;
    std::vector<TemplateReport> templates;
};

Models train_models(const std::vector<SemanticMap>& train_maps, const ExperimentConfig& cfg, TrainLog* log = nullptr);
void save_models(const std::filesystem::path& dir, const Models& m);
Models load_models(const std::filesystem::path& dir);
/// FNV-1a over the relative paths and bytes of every file under dir, in path order.
std::uint64_t directory_hash(const std::filesystem::path& dir);

enum class Engine { Toponet, Mrf, Local };
enum class Task { Classify, Placeholders, Novelty };

std::string to_string(Engine e);
Engine engine_from_string(const std::string& s);
std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// Accuracy of one engine on one map.
struct MapAccuracy {
    std::string map;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::vector<std::size_t> truth_counts;  // per class over the scored nodes

    double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Places of the corrupted map, scored against their labels.
MapAccuracy eval_classify(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg);
/// Placeholders of every stride-th exploration state of the map.
MapAccuracy eval_placeholders(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg);

struct SwapScore {
    std::uint32_t class_a = 0, class_b = 0;
    double score = 0.0;
};

struct MapNovelty {
    std::string map;
    double known = 0.0;
    std::vector<SwapScore> novel;
};

/// Random class pairs (both present), seeded per map.
std::vector<std::pair<std::uint32_t, std::uint32_t>> swap_pairs(const SemanticMap& map, std::uint32_t count,
                                                                std::uint64_t seed);
MapNovelty eval_novelty(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg);

/// Per-place average log-likelihood of a map for the given engine.
double engine_novelty_score(const Models& m, const SemanticMap& map, Engine engine, const ExperimentConfig& cfg);

struct NoveltySummary {
    std::vector<RocPoint> roc;
    double auc = 0.0;             // pooled over every known and novel map
    double paired_rate = 0.0;     // fraction of pairs with novel < known (ties count half)
    double mean_map_auc = 0.0;    // per-map AUC (known vs its swaps), averaged
    std::size_t pairs = 0;
};

NoveltySummary summarize_novelty(const std::vector<MapNovelty>& maps);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation over maps
};
MeanStd mean_std(const std::vector<double>& xs);

/// Pooled accuracy and per-map mean/std.
struct AccuracySummary {
    double pooled = 0.0;
    MeanStd per_map;
    std::size_t correct = 0, total = 0;
    /// Best constant prediction over the scored nodes.
    double majority = 0.0;
};
AccuracySummary summarize_accuracy(const std::vector<MapAccuracy>& maps);

/// Connected map of exactly `size` nodes: a floor generated with enough rooms,
/// cropped breadth-first from its first node.
SemanticMap bench_map(const GeneratorConfig& base, const ClassCatalogue& cat, std::size_t size, std::uint64_t seed);

/// Runs fn(0..n-1) on up to `jobs` threads; the first exception is rethrown.
void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn);

nlohmann::json to_json(const MapAccuracy& a);
nlohmann::json to_json(const AccuracySummary& s);
nlohmann::json to_json(const MapNovelty& n);
nlohmann::json to_json(const NoveltySummary& s);

}  // namespace toponets
