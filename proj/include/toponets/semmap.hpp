#pragma once

// Topological semantic maps and a synthetic office-floor generator.
//
// A map is an undirected graph of Places (with polar-grid geometry) and
// Placeholders (frontier nodes without geometry). Node ids are dense indices.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "toponets/polar_grid.hpp"

namespace toponets {

using PlaceId = std::uint32_t;

inline constexpr std::int32_t kLatent = -1;

/// Geometry archetype of one fine-grained class, read from the catalogue file.
struct ClassArchetype {
    std::string name;
    std::string kind;  // "corridor", "doorway" or "room"
    std::array<double, 2> width{0, 0};
    std::array<double, 2> depth{0, 0};
    std::string furniture = "none";
    std::string opening = "door";  // "door" or "open"
    std::array<int, 2> places{1, 1};
};

/// Fine archetypes plus the class setup used for labels (6 or 10 classes).
struct ClassCatalogue {
    std::string setup;                  // "6" or "10"
    std::vector<std::string> names;     // setup class names in index order
    std::vector<ClassArchetype> archetypes;
    std::vector<std::uint32_t> label_of;  // archetype index -> setup class index

    std::uint32_t num_classes() const { return static_cast<std::uint32_t>(names.size()); }
    /// Setup class index by name; throws InputError when unknown.
    std::uint32_t index(const std::string& name) const;
    std::uint32_t archetype_index(const std::string& name) const;
};

/// Catalogue directory baked in at build time (the repo's config/).
std::filesystem::path default_config_dir();
ClassCatalogue load_catalogue(const std::filesystem::path& path, const std::string& setup);
ClassCatalogue load_catalogue(std::uint32_t num_classes);

enum class PlaceKind : std::uint8_t { Place = 0, Placeholder = 1 };

struct MapNode {
    PlaceKind kind = PlaceKind::Place;
    std::int32_t label = kLatent;
    std::optional<PolarGrid> geometry;
    double x = 0.0, y = 0.0;       // metric position, informational
    std::uint32_t origin = 0;      // id in the map this one was derived from

    bool operator==(const MapNode&) const = default;
};

struct SemanticMap {
    std::string name;
    std::string class_set;  // "6" or "10"
    std::uint32_t num_classes = 0;
    std::vector<MapNode> nodes;
    std::vector<std::pair<PlaceId, PlaceId>> edges;  // a < b, sorted, unique

    std::size_t size() const { return nodes.size(); }
    std::size_t num_places() const;
    std::size_t num_placeholders() const { return size() - num_places(); }
    bool is_place(PlaceId i) const { return nodes[i].kind == PlaceKind::Place; }
    std::vector<std::vector<PlaceId>> adjacency() const;
    bool operator==(const SemanticMap&) const = default;
};

/// Sorts and deduplicates edges (each stored as a < b); rejects self-loops.
void canonicalize_edges(SemanticMap& map);

/// Checks the map invariants; returns an empty string when they hold.
std::string map_violation(const SemanticMap& map);
bool is_connected(const SemanticMap& map);

struct GeneratorConfig {
    int floors = 4;
    /// Explorations per floor: same layout, new place poses and noise.
    int sequences = 4;
    int first_floor = 4;
    std::array<int, 2> rooms_per_floor{22, 32};
    std::array<int, 2> places_per_room{1, 4};
    std::string corridor_topology = "chain";  // "chain" or "loop"
    std::map<std::string, double> class_mix;  // room archetype -> frequency; empty = uniform
    double geometry_noise = 0.02;
    std::uint64_t rng_seed = 1;
    std::uint32_t class_setup = 6;

    void check(const ClassCatalogue& cat) const;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

/// Room archetype frequencies resolved against the catalogue (indexed by archetype).
std::vector<double> resolved_class_mix(const GeneratorConfig& cfg, const ClassCatalogue& cat);

/// Fully labeled map of one exploration sequence of a floor; deterministic
/// per (config, floor, sequence).
SemanticMap generate_environment(const GeneratorConfig& cfg, const ClassCatalogue& cat, int floor, int sequence = 0);

/// Applies per-cell flip noise: each cell moves to a uniformly drawn other
/// state with probability p. Missing cells are left alone.
void flip_noise(PolarGrid& grid, double p, std::mt19937_64& rng);

/// Prefix states of a breadth-biased exploration of `map`, starting at a
/// random Place. State k holds k + 1 Places and their unexplored neighbours
/// as Placeholders. Node ids are renumbered; MapNode::origin maps back.
std::vector<SemanticMap> simulate_exploration(const SemanticMap& map, std::size_t steps, std::uint64_t seed);

/// Exchanges geometry between the places labeled a and b. Places are
/// paired in id order; when the counts differ the surplus places of the
/// larger class keep their geometry, which keeps the operation an involution.
SemanticMap swap_classes(const SemanticMap& map, std::uint32_t a, std::uint32_t b);

/// Map JSON: {"format":"toponets-map","version":1,"name","class_set","num_classes",
/// "nodes":[{"id","kind","label"?,"x","y","origin","grid"?}],"edges":[[a,b],...]}.
/// "grid" is a 1176-character string of cell codes in variable order.
nlohmann::json map_to_json(const SemanticMap& map);
SemanticMap map_from_json(const nlohmann::json& j);
void save_map(const std::filesystem::path& path, const SemanticMap& map);
SemanticMap load_map(const std::filesystem::path& path);

std::string grid_to_string(const PolarGrid& grid);
PolarGrid grid_from_string(const std::string& s);

/// One generated floor in a corpus manifest.
struct ManifestEntry {
    int floor = 0;
    int sequence = 0;
    std::string file;  // relative to the manifest
    std::uint64_t hash = 0;
};

struct Manifest {
    GeneratorConfig config;
    std::vector<ManifestEntry> maps;
    std::vector<std::string> splits;  // e.g. "456-7": train on 4,5,6, test on 7
};

/// Leave-one-floor-out split tags for the given floors.
std::vector<std::string> leave_one_out_splits(const std::vector<int>& floors);

struct SplitFloors {
    std::vector<int> train;
    int test = 0;
};
/// Parses "456-7"; throws InputError on malformed tags or overlapping floors.
SplitFloors parse_split(const std::string& tag);

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

/// Generates every floor and sequence, writing floor_<f>_s<q>.json and
/// manifest.json into dir.
Manifest generate_corpus(const GeneratorConfig& cfg, const ClassCatalogue& cat, const std::filesystem::path& dir);
Manifest load_manifest(const std::filesystem::path& dir);
/// Maps of every sequence of one floor; throws InputError naming the floor if absent.
std::vector<SemanticMap> load_floor(const std::filesystem::path& dir, const Manifest& m, int floor);

}  // namespace toponets
