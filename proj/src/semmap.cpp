#include "toponets/semmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numbers>
#include <numeric>
#include <set>

#include "toponets/spn_io.hpp"

#ifndef TOPONETS_CONFIG_DIR
#define TOPONETS_CONFIG_DIR "config"
#endif

namespace toponets {

// ---------------------------------------------------------------- catalogue

std::uint32_t ClassCatalogue::index(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw InputError("unknown class '" + name + "' in the " + setup + "-class setup");
    return static_cast<std::uint32_t>(it - names.begin());
}

std::uint32_t ClassCatalogue::archetype_index(const std::string& name) const {
    for (std::size_t i = 0; i < archetypes.size(); ++i)
        if (archetypes[i].name == name) return static_cast<std::uint32_t>(i);
    throw InputError("unknown class archetype '" + name + "'");
}

std::filesystem::path default_config_dir() { return TOPONETS_CONFIG_DIR; }

namespace {

template <class T>
std::array<T, 2> pair_of(const nlohmann::json& j, const char* key, std::array<T, 2> fallback) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 2) throw ParseError(std::string("catalogue: '") + key + "' must be a pair");
    return {a[0].get<T>(), a[1].get<T>()};
}

}  // namespace

ClassCatalogue load_catalogue(const std::filesystem::path& path, const std::string& setup) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("catalogue " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "toponets-classes") throw ParseError("catalogue: not a class catalogue file");
    if (j.value("version", 0) != 1) throw ParseError("catalogue: unsupported version");
    ClassCatalogue cat;
    cat.setup = setup;
    for (const auto& c : j.at("classes")) {
        ClassArchetype a;
        a.name = c.at("name").get<std::string>();
        a.kind = c.at("kind").get<std::string>();
        if (a.kind != "corridor" && a.kind != "doorway" && a.kind != "room")
            throw ParseError("catalogue: class '" + a.name + "' has unknown kind '" + a.kind + "'");
        a.width = pair_of(c, "width", a.width);
        a.depth = pair_of(c, "depth", a.depth);
        a.places = pair_of(c, "places", a.places);
        a.furniture = c.value("furniture", a.furniture);
        a.opening = c.value("opening", a.opening);
        cat.archetypes.push_back(a);
    }
    if (!j.at("setups").contains(setup)) throw InputError("catalogue has no '" + setup + "' class setup");
    const auto& s = j.at("setups").at(setup);
    cat.names = s.at("names").get<std::vector<std::string>>();
    for (const auto& a : cat.archetypes) {
        std::string target = a.name;
        if (s.contains("merge") && s["merge"].contains(a.name)) target = s["merge"][a.name].get<std::string>();
        cat.label_of.push_back(cat.index(target));
    }
    for (const char* kind : {"corridor", "doorway"})
        if (std::none_of(cat.archetypes.begin(), cat.archetypes.end(), [&](const auto& a) { return a.kind == kind; }))
            throw ParseError(std::string("catalogue: no class of kind '") + kind + "'");
    return cat;
}

ClassCatalogue load_catalogue(std::uint32_t num_classes) {
    if (num_classes != 6 && num_classes != 10) throw InputError("class setup must be 6 or 10");
    return load_catalogue(default_config_dir() / "classes.json", std::to_string(num_classes));
}

// ---------------------------------------------------------------- maps

std::size_t SemanticMap::num_places() const {
    return static_cast<std::size_t>(
        std::count_if(nodes.begin(), nodes.end(), [](const MapNode& n) { return n.kind == PlaceKind::Place; }));
}

std::vector<std::vector<PlaceId>> SemanticMap::adjacency() const {
    std::vector<std::vector<PlaceId>> adj(nodes.size());
    for (auto [a, b] : edges) {
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    for (auto& v : adj) std::sort(v.begin(), v.end());
    return adj;
}

void canonicalize_edges(SemanticMap& map) {
    for (auto& [a, b] : map.edges) {
        if (a == b) throw InputError("self-loop at node " + std::to_string(a));
        if (a > b) std::swap(a, b);
    }
    std::sort(map.edges.begin(), map.edges.end());
    map.edges.erase(std::unique(map.edges.begin(), map.edges.end()), map.edges.end());
}

bool is_connected(const SemanticMap& map) {
    if (map.nodes.empty()) return true;
    const auto adj = map.adjacency();
    std::vector<std::uint8_t> seen(map.size(), 0);
    std::vector<PlaceId> stack{0};
    seen[0] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
        const auto u = stack.back();
        stack.pop_back();
        for (auto v : adj[u])
            if (!seen[v]) {
                seen[v] = 1;
                ++count;
                stack.push_back(v);
            }
    }
    return count == map.size();
}

std::string map_violation(const SemanticMap& map) {
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto& n = map.nodes[i];
        if (n.kind == PlaceKind::Place && !n.geometry) return "place " + std::to_string(i) + " has no geometry";
        if (n.kind == PlaceKind::Placeholder && n.geometry)
            return "placeholder " + std::to_string(i) + " carries geometry";
        if (n.label != kLatent && (n.label < 0 || static_cast<std::uint32_t>(n.label) >= map.num_classes))
            return "node " + std::to_string(i) + " has label " + std::to_string(n.label) + " outside the class set";
    }
    for (auto [a, b] : map.edges)
        if (a >= map.size() || b >= map.size() || a == b)
            return "edge (" + std::to_string(a) + ", " + std::to_string(b) + ") is invalid";
    if (!is_connected(map)) return "graph is not connected";
    const auto adj = map.adjacency();
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (map.nodes[i].kind != PlaceKind::Placeholder) continue;
        if (std::none_of(adj[i].begin(), adj[i].end(), [&](PlaceId j) { return map.is_place(j); }))
            return "placeholder " + std::to_string(i) + " has no place neighbour";
    }
    return {};
}

// ---------------------------------------------------------------- config

void GeneratorConfig::check(const ClassCatalogue& cat) const {
    if (floors < 1) throw InputError("generator: floors must be >= 1");
    if (sequences < 1) throw InputError("generator: sequences must be >= 1");
    if (first_floor < 0 || first_floor + floors - 1 > 9)
        throw InputError("generator: floor numbers must be single digits (split tags use one digit per floor)");
    if (rooms_per_floor[0] < 1 || rooms_per_floor[1] < rooms_per_floor[0])
        throw InputError("generator: rooms_per_floor must be a range with at least one room");
    if (places_per_room[0] < 1 || places_per_room[1] < places_per_room[0] || places_per_room[1] > 4)
        throw InputError("generator: places_per_room must be a range within [1, 4]");
    if (corridor_topology != "chain" && corridor_topology != "loop")
        throw InputError("generator: corridor_topology must be 'chain' or 'loop'");
    if (!(geometry_noise >= 0.0 && geometry_noise < 0.5)) throw InputError("generator: flip probability must be in [0, 0.5)");
    if (class_setup != cat.num_classes()) throw InputError("generator: class setup does not match the catalogue");
    if (!class_mix.empty()) {
        double total = 0.0;
        for (const auto& [name, f] : class_mix) {
            const auto& a = cat.archetypes[cat.archetype_index(name)];
            if (a.kind != "room") throw InputError("generator: class_mix entry '" + name + "' is not a room class");
            if (!(f >= 0.0)) throw InputError("generator: class_mix frequencies must be nonnegative");
            total += f;
        }
        if (std::abs(total - 1.0) > 1e-6) throw InputError("generator: class_mix frequencies must sum to 1");
    }
}

nlohmann::json to_json(const GeneratorConfig& c) {
    return {{"floors", c.floors},
            {"sequences", c.sequences},
            {"first_floor", c.first_floor},
            {"rooms_per_floor", c.rooms_per_floor},
            {"places_per_room", c.places_per_room},
            {"corridor_topology", c.corridor_topology},
            {"class_mix", c.class_mix},
            {"geometry_noise", c.geometry_noise},
            {"rng_seed", c.rng_seed},
            {"class_setup", c.class_setup}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.floors = j.value("floors", c.floors);
    c.sequences = j.value("sequences", c.sequences);
    c.first_floor = j.value("first_floor", c.first_floor);
    c.rooms_per_floor = j.value("rooms_per_floor", c.rooms_per_floor);
    c.places_per_room = j.value("places_per_room", c.places_per_room);
    c.corridor_topology = j.value("corridor_topology", c.corridor_topology);
    c.class_mix = j.value("class_mix", c.class_mix);
    c.geometry_noise = j.value("geometry_noise", c.geometry_noise);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.class_setup = j.value("class_setup", c.class_setup);
    return c;
}

std::vector<double> resolved_class_mix(const GeneratorConfig& cfg, const ClassCatalogue& cat) {
    std::vector<double> mix(cat.archetypes.size(), 0.0);
    if (cfg.class_mix.empty()) {
        double rooms = 0;
        for (const auto& a : cat.archetypes) rooms += a.kind == "room";
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = cat.archetypes[i].kind == "room" ? 1.0 / rooms : 0.0;
    } else {
        for (const auto& [name, f] : cfg.class_mix) mix[cat.archetype_index(name)] = f;
    }
    return mix;
}

// ---------------------------------------------------------------- generator

namespace {

constexpr double kRes = 0.05;
constexpr double kWall = 0.1;
constexpr double kPlaceSpacing = 1.6;

struct Rect {
    double x0, y0, x1, y1;
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
};

/// Floor raster at kRes; cells are solid unless carved.
class Raster {
public:
    Raster(double x0, double y0, double x1, double y1)
        : x0_(x0), y0_(y0), w_(static_cast<int>(std::ceil((x1 - x0) / kRes))),
          h_(static_cast<int>(std::ceil((y1 - y0) / kRes))), solid_(static_cast<std::size_t>(w_) * h_, 1) {}

    bool solid(double x, double y) const {
        const int i = static_cast<int>(std::floor((x - x0_) / kRes));
        const int j = static_cast<int>(std::floor((y - y0_) / kRes));
        if (i < 0 || j < 0 || i >= w_ || j >= h_) return true;
        return solid_[static_cast<std::size_t>(j) * w_ + i] != 0;
    }
    void fill(const Rect& r, bool value) {
        const int i0 = std::max(0, static_cast<int>(std::lround((r.x0 - x0_) / kRes)));
        const int i1 = std::min(w_, static_cast<int>(std::lround((r.x1 - x0_) / kRes)));
        const int j0 = std::max(0, static_cast<int>(std::lround((r.y0 - y0_) / kRes)));
        const int j1 = std::min(h_, static_cast<int>(std::lround((r.y1 - y0_) / kRes)));
        for (int j = j0; j < j1; ++j)
            for (int i = i0; i < i1; ++i) solid_[static_cast<std::size_t>(j) * w_ + i] = value ? 1 : 0;
    }
    bool clear_around(double x, double y, double radius) const {
        for (double dy = -radius; dy <= radius + 1e-9; dy += kRes)
            for (double dx = -radius; dx <= radius + 1e-9; dx += kRes)
                if (solid(x + dx, y + dy)) return false;
        return true;
    }

private:
    double x0_, y0_;
    int w_, h_;
    std::vector<std::uint8_t> solid_;
};

struct Side {
    double start;      // first usable x
    double y_wall;     // corridor edge the rooms attach to
    int dir;           // +1 rooms above, -1 below
    double max_depth;  // 0 = unlimited
    double used = 0.0;
};

struct Room {
    std::uint32_t archetype;
    Rect rect;
    int side;
    double door_x = 0, door_w = 0;
    bool open = false;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}
int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::uint32_t draw_class(std::mt19937_64& rng, const std::vector<double>& mix) {
    return static_cast<std::uint32_t>(std::discrete_distribution<std::uint32_t>(mix.begin(), mix.end())(rng));
}

/// Furniture rectangles in room coordinates: "back" is the wall facing away
/// from the corridor.
void furnish(Raster& raster, const Room& room, const Side& side, const std::string& kind, std::mt19937_64& rng) {
    const Rect& r = room.rect;
    const double w = r.x1 - r.x0, d = r.y1 - r.y0;
    const double door_y = side.dir > 0 ? r.y0 : r.y1;
    auto back_band = [&](double depth) {
        return side.dir > 0 ? Rect{r.x0, r.y1 - depth, r.x1, r.y1} : Rect{r.x0, r.y0, r.x1, r.y0 + depth};
    };
    auto away_from_door = [&](const Rect& f) {
        const double cx = std::clamp(room.door_x, f.x0, f.x1), cy = std::clamp(door_y, f.y0, f.y1);
        return std::hypot(cx - room.door_x, cy - door_y) > 1.2;
    };
    auto put = [&](Rect f) {
        f.x0 = std::max(f.x0, r.x0);
        f.x1 = std::min(f.x1, r.x1);
        f.y0 = std::max(f.y0, r.y0);
        f.y1 = std::min(f.y1, r.y1);
        if (f.x1 > f.x0 && f.y1 > f.y0 && away_from_door(f)) raster.fill(f, true);
    };
    // Box of size (sx, sy) against a random wall other than the door wall.
    auto against_wall = [&](double along, double deep) {
        const int wall = uniform_int(rng, 0, 2);
        if (wall == 0) {
            const double x = uniform(rng, r.x0, std::max(r.x0, r.x1 - along));
            const auto band = back_band(deep);
            put({x, band.y0, x + along, band.y1});
        } else {
            const double y = uniform(rng, r.y0, std::max(r.y0, r.y1 - along));
            if (wall == 1)
                put({r.x0, y, r.x0 + deep, y + along});
            else
                put({r.x1 - deep, y, r.x1, y + along});
        }
    };
    if (kind == "desks") {
        const int n = std::max(1, static_cast<int>(std::lround(w * d / 7.0)) + uniform_int(rng, -1, 1));
        for (int i = 0; i < n; ++i) against_wall(uniform(rng, 1.2, 1.6), 0.7);
    } else if (kind == "table") {
        const double tw = 0.45 * w, td = 0.4 * d;
        const double cx = r.cx() + uniform(rng, -0.2, 0.2), cy = r.cy() + uniform(rng, -0.2, 0.2);
        put({cx - tw / 2, cy - td / 2, cx + tw / 2, cy + td / 2});
    } else if (kind == "counter") {
        const double len = uniform(rng, 0.6, 0.8) * d;
        const auto band = back_band(len);
        put({r.x0, band.y0, r.x0 + 0.6, band.y1});
        put({r.x1 - 0.6, band.y0, r.x1, band.y1});
    } else if (kind == "fixtures") {
        const int n = uniform_int(rng, 2, 3);
        for (int i = 0; i < n; ++i) against_wall(0.5, 0.6);
    } else if (kind == "machines") {
        const int n = uniform_int(rng, 1, 2);
        for (int i = 0; i < n; ++i) {
            const double x = uniform(rng, r.x0, std::max(r.x0, r.x1 - 0.9));
            const auto band = back_band(0.7);
            put({x, band.y0, x + 0.9, band.y1});
        }
    } else if (kind == "clutter") {
        const int n = std::max(2, static_cast<int>(std::lround(w * d / 3.0)));
        for (int i = 0; i < n; ++i) {
            const double sx = uniform(rng, 0.3, 0.9), sy = uniform(rng, 0.3, 0.9);
            const double x = uniform(rng, r.x0, r.x1 - sx), y = uniform(rng, r.y0, r.y1 - sy);
            put({x, y, x + sx, y + sy});
        }
    } else if (kind == "sofa") {
        const double len = uniform(rng, 0.6, 0.8) * w;
        const auto band = back_band(0.8);
        const double x = uniform(rng, r.x0, r.x1 - len);
        put({x, band.y0, x + len, band.y1});
        const double arm = 0.5 * d;
        if (x - r.x0 < r.x1 - (x + len))
            put({r.x0, r.cy() - arm / 2, r.x0 + 0.8, r.cy() + arm / 2});
        else
            put({r.x1 - 0.8, r.cy() - arm / 2, r.x1, r.cy() + arm / 2});
        put({r.cx() - 0.5, r.cy() - 0.3, r.cx() + 0.5, r.cy() + 0.3});
    } else if (kind != "none") {
        throw InputError("generator: unknown furniture kind '" + kind + "'");
    }
}

/// Raytraces the floor from (px, py) with the robot facing `heading` into a
/// robot-centric local grid and converts it.
PolarGrid observe(const Raster& raster, double px, double py, double heading) {
    constexpr int kSize = 200;
    constexpr int kRays = 1440;
    LocalGrid local(kRes, kSize, Cell::Unknown);
    auto cell = [&](double dx, double dy) -> Cell* {
        const int col = static_cast<int>(std::floor(dx / kRes + kSize / 2.0));
        const int row = static_cast<int>(std::floor(dy / kRes + kSize / 2.0));
        if (row < 0 || col < 0 || row >= kSize || col >= kSize) return nullptr;
        return &local.at(row, col);
    };
    for (int k = 0; k < kRays; ++k) {
        const double th = 2.0 * std::numbers::pi * (k + 0.5) / kRays;
        const double c = std::cos(th), s = std::sin(th);
        const double wc = std::cos(th + heading), ws = std::sin(th + heading);
        for (double t = 0.0125; t <= kGridRadius; t += 0.025) {
            Cell* target = cell(t * c, t * s);
            if (!target) break;
            if (raster.solid(px + t * wc, py + t * ws)) {
                *target = Cell::Occupied;
                break;
            }
            if (*target != Cell::Occupied) *target = Cell::Free;
        }
    }
    return cartesian_to_polar(local);
}

struct Builder {
    SemanticMap map;
    std::vector<std::uint32_t> archetype;

    std::vector<double> heading;

    PlaceId add(double x, double y, double h, std::uint32_t arch, const ClassCatalogue& cat) {
        MapNode n;
        n.kind = PlaceKind::Place;
        n.label = static_cast<std::int32_t>(cat.label_of[arch]);
        n.x = x;
        n.y = y;
        n.origin = static_cast<std::uint32_t>(map.nodes.size());
        map.nodes.push_back(std::move(n));
        archetype.push_back(arch);
        heading.push_back(h);
        return static_cast<PlaceId>(map.nodes.size() - 1);
    }
    void link(PlaceId a, PlaceId b) { map.edges.emplace_back(a, b); }
    PlaceId nearest(double x, double y, const std::vector<PlaceId>& among) const {
        PlaceId best = among.front();
        double bd = 1e300;
        for (auto id : among) {
            const double d = std::hypot(map.nodes[id].x - x, map.nodes[id].y - y);
            if (d < bd) {
                bd = d;
                best = id;
            }
        }
        return best;
    }
};

std::uint32_t kind_index(const ClassCatalogue& cat, const char* kind) {
    for (std::size_t i = 0; i < cat.archetypes.size(); ++i)
        if (cat.archetypes[i].kind == kind) return static_cast<std::uint32_t>(i);
    throw InputError(std::string("catalogue has no class of kind ") + kind);
}

}  // namespace

void flip_noise(PolarGrid& grid, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return;
    std::bernoulli_distribution flip(p);
    std::uniform_int_distribution<int> other(1, 2);
    for (int i = 0; i < kGridCells; ++i) {
        if (grid[i] == Cell::Missing || !flip(rng)) continue;
        grid[i] = static_cast<Cell>((static_cast<int>(grid[i]) + other(rng)) % 3);
    }
}

SemanticMap generate_environment(const GeneratorConfig& cfg, const ClassCatalogue& cat, int floor, int sequence) {
    cfg.check(cat);
    if (sequence < 0) throw InputError("generator: sequence must be >= 0");
    // The layout depends on the floor only; place poses and noise also on the sequence.
    const std::uint64_t floor_seed = splitmix64(cfg.rng_seed * 0x100000001b3ULL + static_cast<std::uint64_t>(floor));
    std::mt19937_64 rng(floor_seed);
    std::mt19937_64 prng(splitmix64(floor_seed ^ splitmix64(static_cast<std::uint64_t>(sequence) + 1)));
    const auto mix = resolved_class_mix(cfg, cat);
    const std::uint32_t corridor = kind_index(cat, "corridor"), doorway = kind_index(cat, "doorway");
    const bool loop = cfg.corridor_topology == "loop";

    // Corridors and the walls that host rooms.
    const double cw = uniform(rng, 1.8, 2.4);
    const double mid = uniform(rng, 4.0, 5.5);
    const double upper = cw + kWall + mid + kWall;  // y of the second corridor in a loop
    std::vector<Side> sides;
    if (loop) {
        sides = {{0.6, 0.0, -1, 0.0}, {cw + kWall, cw, +1, mid}, {0.6, upper + cw, +1, 0.0}};
    } else {
        sides = {{0.6, cw, +1, 0.0}, {0.6, 0.0, -1, 0.0}};
    }

    const int n_rooms = uniform_int(rng, cfg.rooms_per_floor[0], cfg.rooms_per_floor[1]);
    std::vector<Room> rooms;
    for (int i = 0; i < n_rooms; ++i) {
        Room room;
        room.archetype = draw_class(rng, mix);
        const auto& a = cat.archetypes[room.archetype];
        const double w = uniform(rng, a.width[0], a.width[1]);
        double d = uniform(rng, a.depth[0], a.depth[1]);
        room.side = static_cast<int>(std::min_element(sides.begin(), sides.end(), [](const Side& x, const Side& y) {
                                         return x.start + x.used < y.start + y.used;
                                     }) - sides.begin());
        Side& s = sides[room.side];
        if (s.max_depth > 0) d = s.max_depth;
        const double x0 = s.start + s.used;
        const double y_in = s.y_wall + s.dir * kWall;
        room.rect = s.dir > 0 ? Rect{x0, y_in, x0 + w, y_in + d} : Rect{x0, y_in - d, x0 + w, y_in};
        s.used += w + kWall;
        room.open = a.opening == "open";
        room.door_w = room.open ? std::max(0.9, w - 0.3) : 0.9;
        room.door_x = room.open ? room.rect.cx()
                                : uniform(rng, room.rect.x0 + 0.55, std::max(room.rect.x0 + 0.55, room.rect.x1 - 0.55));
        rooms.push_back(room);
    }
    double length = 0.0;
    for (std::size_t i = 0; i < sides.size(); ++i) {
        const double tail = loop && i == 1 ? cw + kWall : 0.6;
        length = std::max(length, sides[i].start + sides[i].used + tail);
    }
    length = std::max(length, 6.0);

    const double ymin = std::min(-kWall, std::accumulate(rooms.begin(), rooms.end(), 0.0,
                                                          [](double m, const Room& r) { return std::min(m, r.rect.y0); }));
    double ymax = loop ? upper + cw + kWall : cw + kWall;
    for (const auto& r : rooms) ymax = std::max(ymax, r.rect.y1);
    Raster raster(-1.0, ymin - 1.0, length + 1.0, ymax + 1.0);

    std::vector<Rect> halls{{0.0, 0.0, length, cw}};
    if (loop) {
        halls.push_back({0.0, upper, length, upper + cw});
        halls.push_back({0.0, 0.0, cw, upper + cw});
        halls.push_back({length - cw, 0.0, length, upper + cw});
    }
    for (const auto& h : halls) raster.fill(h, false);
    for (const auto& room : rooms) {
        raster.fill(room.rect, false);
        const Side& s = sides[room.side];
        const double wy0 = s.dir > 0 ? s.y_wall : s.y_wall - kWall;
        raster.fill({room.door_x - room.door_w / 2, wy0, room.door_x + room.door_w / 2, wy0 + kWall}, false);
    }
    for (const auto& room : rooms)
        furnish(raster, room, sides[room.side], cat.archetypes[room.archetype].furniture, rng);

    Builder b;
    b.map.name = "floor" + std::to_string(floor) + "_s" + std::to_string(sequence);
    b.map.class_set = cat.setup;
    b.map.num_classes = cat.num_classes();

    // Corridor places along the centre line (a ring for loops).
    std::vector<std::array<double, 2>> line;
    if (loop) {
        const double c = cw / 2, xl = cw / 2, xr = length - cw / 2, yb = c, yt = upper + c;
        line = {{xl, yb}, {xr, yb}, {xr, yt}, {xl, yt}, {xl, yb}};
    } else {
        line = {{0.8, cw / 2}, {length - 0.8, cw / 2}};
    }
    double perimeter = 0.0;
    for (std::size_t i = 1; i < line.size(); ++i)
        perimeter += std::hypot(line[i][0] - line[i - 1][0], line[i][1] - line[i - 1][1]);
    const int n_corr = std::max(2, static_cast<int>(std::lround(perimeter / kPlaceSpacing)) + (loop ? 0 : 1));
    std::vector<PlaceId> corridor_ids;
    for (int k = 0; k < n_corr; ++k) {
        double t = loop ? perimeter * k / n_corr : perimeter * k / (n_corr - 1);
        std::size_t seg = 1;
        double len = 0;
        while (seg < line.size()) {
            len = std::hypot(line[seg][0] - line[seg - 1][0], line[seg][1] - line[seg - 1][1]);
            if (t <= len || seg + 1 == line.size()) break;
            t -= len;
            ++seg;
        }
        const double f = len > 0 ? std::clamp(t / len, 0.0, 1.0) : 0.0;
        double x = line[seg - 1][0] + f * (line[seg][0] - line[seg - 1][0]) + uniform(prng, -0.2, 0.2);
        double y = line[seg - 1][1] + f * (line[seg][1] - line[seg - 1][1]) + uniform(prng, -0.15, 0.15);
        if (!raster.clear_around(x, y, 0.2)) {
            x = line[seg - 1][0] + f * (line[seg][0] - line[seg - 1][0]);
            y = line[seg - 1][1] + f * (line[seg][1] - line[seg - 1][1]);
        }
        const double along = std::atan2(line[seg][1] - line[seg - 1][1], line[seg][0] - line[seg - 1][0]);
        const double h = along + (uniform_int(prng, 0, 1) ? std::numbers::pi : 0.0) + uniform(prng, -0.15, 0.15);
        corridor_ids.push_back(b.add(x, y, h, corridor, cat));
        if (k > 0) b.link(corridor_ids[k - 1], corridor_ids[k]);
    }
    if (loop && n_corr > 2) b.link(corridor_ids.back(), corridor_ids.front());

    for (const auto& room : rooms) {
        const auto& a = cat.archetypes[room.archetype];
        const Side& s = sides[room.side];
        const double door_y = s.y_wall + s.dir * kWall / 2;
        int lo = std::max(a.places[0], cfg.places_per_room[0]), hi = std::min(a.places[1], cfg.places_per_room[1]);
        if (lo > hi) lo = hi = std::clamp(a.places[0], cfg.places_per_room[0], cfg.places_per_room[1]);
        const int want = uniform_int(prng, lo, hi);

        std::vector<std::array<double, 2>> pts;
        const Rect& r = room.rect;
        for (int attempt = 0; attempt < 400 && static_cast<int>(pts.size()) < want; ++attempt) {
            const double x = uniform(prng, r.x0 + 0.35, std::max(r.x0 + 0.35, r.x1 - 0.35));
            const double y = uniform(prng, r.y0 + 0.35, std::max(r.y0 + 0.35, r.y1 - 0.35));
            if (!raster.clear_around(x, y, 0.3)) continue;
            const double spacing = std::min(1.2, 0.45 * std::max(r.x1 - r.x0, r.y1 - r.y0));
            if (std::any_of(pts.begin(), pts.end(),
                            [&](const auto& p) { return std::hypot(p[0] - x, p[1] - y) < spacing; }))
                continue;
            pts.push_back({x, y});
        }
        if (pts.empty()) pts.push_back({room.door_x, door_y + s.dir * 0.6});
        std::sort(pts.begin(), pts.end(), [&](const auto& p, const auto& q) {
            return std::hypot(p[0] - room.door_x, p[1] - door_y) < std::hypot(q[0] - room.door_x, q[1] - door_y);
        });

        // The robot enters through the door and faces into the room.
        const double inward = s.dir * std::numbers::pi / 2;
        std::vector<PlaceId> ids;
        for (const auto& p : pts) {
            const PlaceId id = b.add(p[0], p[1], inward + uniform(prng, -0.15, 0.15), room.archetype, cat);
            if (!ids.empty()) b.link(b.nearest(p[0], p[1], ids), id);
            for (auto other : ids)
                if (std::hypot(b.map.nodes[other].x - p[0], b.map.nodes[other].y - p[1]) < kPlaceSpacing) b.link(other, id);
            ids.push_back(id);
        }
        if (room.open) {
            b.link(b.nearest(b.map.nodes[ids[0]].x, b.map.nodes[ids[0]].y, corridor_ids), ids[0]);
        } else {
            const PlaceId door = b.add(room.door_x, door_y, inward + uniform(prng, -0.15, 0.15), doorway, cat);
            b.link(door, ids[0]);
            b.link(b.nearest(room.door_x, door_y, corridor_ids), door);
        }
    }
    canonicalize_edges(b.map);

    for (std::size_t i = 0; i < b.map.size(); ++i) {
        auto& node = b.map.nodes[i];
        auto g = observe(raster, node.x, node.y, b.heading[i]);
        flip_noise(g, cfg.geometry_noise, prng);
        node.geometry = g;
    }
    if (const auto v = map_violation(b.map); !v.empty()) throw StructuralError("generator produced an invalid map: " + v);
    return b.map;
}

// ---------------------------------------------------------------- exploration

std::vector<SemanticMap> simulate_exploration(const SemanticMap& map, std::size_t steps, std::uint64_t seed) {
    if (map.nodes.empty()) throw InputError("simulate_exploration: empty map");
    for (std::size_t i = 0; i < map.size(); ++i)
        if (!map.is_place(i) || map.nodes[i].label == kLatent)
            throw InputError("simulate_exploration: map must be fully explored and labeled (node " + std::to_string(i) + ")");
    if (steps + 1 > map.size()) {
        if (verbosity() >= 1)
            std::fprintf(stderr, "simulate_exploration: %zu steps requested, only %zu reachable; truncating\n", steps,
                         map.size() - 1);
        steps = map.size() - 1;
    }
    std::mt19937_64 rng(splitmix64(seed));
    const auto adj = map.adjacency();
    std::vector<std::uint8_t> state(map.size(), 0);  // 0 unseen, 1 frontier, 2 explored
    std::deque<PlaceId> frontier;

    auto explore = [&](PlaceId u) {
        state[u] = 2;
        for (auto v : adj[u])
            if (state[v] == 0) {
                state[v] = 1;
                frontier.push_back(v);
            }
    };
    auto snapshot = [&] {
        SemanticMap out;
        out.name = map.name;
        out.class_set = map.class_set;
        out.num_classes = map.num_classes;
        std::vector<std::int64_t> remap(map.size(), -1);
        for (std::size_t i = 0; i < map.size(); ++i) {
            if (state[i] == 0) continue;
            remap[i] = static_cast<std::int64_t>(out.nodes.size());
            MapNode n = map.nodes[i];
            n.origin = static_cast<std::uint32_t>(i);
            if (state[i] == 1) {
                n.kind = PlaceKind::Placeholder;
                n.geometry.reset();
            }
            out.nodes.push_back(std::move(n));
        }
        for (auto [a, b] : map.edges)
            if (remap[a] >= 0 && remap[b] >= 0)
                out.edges.emplace_back(static_cast<PlaceId>(remap[a]), static_cast<PlaceId>(remap[b]));
        return out;
    };

    explore(static_cast<PlaceId>(std::uniform_int_distribution<std::size_t>(0, map.size() - 1)(rng)));
    std::vector<SemanticMap> states{snapshot()};
    std::bernoulli_distribution oldest(0.75);
    for (std::size_t k = 0; k < steps && !frontier.empty(); ++k) {
        std::size_t pick = 0;
        if (!oldest(rng)) pick = std::uniform_int_distribution<std::size_t>(0, frontier.size() - 1)(rng);
        const PlaceId u = frontier[pick];
        frontier.erase(frontier.begin() + static_cast<std::ptrdiff_t>(pick));
        explore(u);
        states.push_back(snapshot());
    }
    return states;
}

SemanticMap swap_classes(const SemanticMap& map, std::uint32_t a, std::uint32_t b) {
    std::vector<PlaceId> as, bs;
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (!map.is_place(i)) continue;
        if (map.nodes[i].label == static_cast<std::int32_t>(a)) as.push_back(static_cast<PlaceId>(i));
        if (map.nodes[i].label == static_cast<std::int32_t>(b)) bs.push_back(static_cast<PlaceId>(i));
    }
    if (as.empty()) throw InputError("swap_classes: class " + std::to_string(a) + " does not occur in the map");
    if (bs.empty()) throw InputError("swap_classes: class " + std::to_string(b) + " does not occur in the map");
    SemanticMap out = map;
    if (a == b) return out;
    for (std::size_t k = 0; k < std::min(as.size(), bs.size()); ++k)
        std::swap(out.nodes[as[k]].geometry, out.nodes[bs[k]].geometry);
    return out;
}

// ---------------------------------------------------------------- map IO

std::string grid_to_string(const PolarGrid& grid) {
    std::string s(kGridCells, '0');
    for (int i = 0; i < kGridCells; ++i) s[i] = static_cast<char>('0' + static_cast<int>(grid[i]));
    return s;
}

PolarGrid grid_from_string(const std::string& s) {
    if (s.size() != static_cast<std::size_t>(kGridCells))
        throw ParseError("grid string has " + std::to_string(s.size()) + " cells, expected 1176");
    PolarGrid g;
    for (int i = 0; i < kGridCells; ++i) {
        if (s[i] < '0' || s[i] > '3') throw ParseError("grid string has invalid cell code at " + std::to_string(i));
        g[i] = static_cast<Cell>(s[i] - '0');
    }
    return g;
}

nlohmann::json map_to_json(const SemanticMap& map) {
    nlohmann::json nodes = nlohmann::json::array();
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto& n = map.nodes[i];
        nlohmann::json j = {{"id", i},
                            {"kind", n.kind == PlaceKind::Place ? "place" : "placeholder"},
                            {"x", n.x},
                            {"y", n.y},
                            {"origin", n.origin}};
        if (n.label != kLatent) j["label"] = n.label;
        if (n.geometry) j["grid"] = grid_to_string(*n.geometry);
        nodes.push_back(std::move(j));
    }
    nlohmann::json edges = nlohmann::json::array();
    for (auto [a, b] : map.edges) edges.push_back({a, b});
    return {{"format", "toponets-map"}, {"version", 1},        {"name", map.name}, {"class_set", map.class_set},
            {"num_classes", map.num_classes}, {"nodes", nodes}, {"edges", edges}};
}

SemanticMap map_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "toponets-map") throw ParseError("not a toponets map file");
    const int version = j.value("version", 0);
    if (version != 1) throw ParseError("unsupported map schema version " + std::to_string(version) + " (expected 1)");
    SemanticMap map;
    try {
        map.name = j.value("name", "");
        map.class_set = j.at("class_set").get<std::string>();
        map.num_classes = j.at("num_classes").get<std::uint32_t>();
        for (const auto& n : j.at("nodes")) {
            const auto id = n.at("id").get<std::size_t>();
            if (id != map.nodes.size()) throw ParseError("node ids must be 0..n-1 in order (got " + std::to_string(id) + ")");
            MapNode node;
            const auto kind = n.at("kind").get<std::string>();
            if (kind == "place")
                node.kind = PlaceKind::Place;
            else if (kind == "placeholder")
                node.kind = PlaceKind::Placeholder;
            else
                throw ParseError("node " + std::to_string(id) + " has unknown kind '" + kind + "'");
            node.label = n.contains("label") && !n["label"].is_null() ? n["label"].get<std::int32_t>() : kLatent;
            node.x = n.value("x", 0.0);
            node.y = n.value("y", 0.0);
            node.origin = n.value("origin", static_cast<std::uint32_t>(id));
            if (n.contains("grid")) {
                if (node.kind == PlaceKind::Placeholder)
                    throw ParseError("placeholder " + std::to_string(id) + " carries geometry");
                node.geometry = grid_from_string(n["grid"].get<std::string>());
            } else if (node.kind == PlaceKind::Place) {
                throw ParseError("place " + std::to_string(id) + " has no geometry");
            }
            map.nodes.push_back(std::move(node));
        }
        for (const auto& e : j.at("edges")) map.edges.emplace_back(e.at(0).get<PlaceId>(), e.at(1).get<PlaceId>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed map: ") + e.what());
    }
    for (auto [a, b] : map.edges)
        if (a >= map.size() || b >= map.size() || a == b)
            throw ParseError("edge (" + std::to_string(a) + ", " + std::to_string(b) + ") is invalid");
    canonicalize_edges(map);
    if (const auto v = map_violation(map); !v.empty()) throw ParseError("invalid map: " + v);
    return map;
}

void save_map(const std::filesystem::path& path, const SemanticMap& map) { write_text(path, map_to_json(map).dump(1) + "\n"); }

SemanticMap load_map(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return map_from_json(j);
}

// ---------------------------------------------------------------- corpus

std::vector<std::string> leave_one_out_splits(const std::vector<int>& floors) {
    std::vector<std::string> out;
    for (int test : floors) {
        std::string tag;
        for (int f : floors)
            if (f != test) tag += std::to_string(f);
        out.push_back(tag + "-" + std::to_string(test));
    }
    return out;
}

SplitFloors parse_split(const std::string& tag) {
    const auto dash = tag.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 2 != tag.size())
        throw InputError("malformed split '" + tag + "' (expected e.g. 456-7)");
    SplitFloors s;
    for (std::size_t i = 0; i < tag.size(); ++i) {
        if (i == dash) continue;
        if (tag[i] < '0' || tag[i] > '9') throw InputError("malformed split '" + tag + "'");
    }
    for (std::size_t i = 0; i < dash; ++i) s.train.push_back(tag[i] - '0');
    s.test = tag[dash + 1] - '0';
    std::set<int> seen(s.train.begin(), s.train.end());
    if (seen.size() != s.train.size() || seen.count(s.test))
        throw InputError("split '" + tag + "': train and test floors must be distinct");
    return s;
}

nlohmann::json to_json(const Manifest& m) {
    nlohmann::json maps = nlohmann::json::array();
    for (const auto& e : m.maps)
        maps.push_back({{"floor", e.floor}, {"sequence", e.sequence}, {"file", e.file}, {"hash", hex64(e.hash)}});
    return {{"format", "toponets-corpus"}, {"version", 1}, {"config", to_json(m.config)}, {"maps", maps}, {"splits", m.splits}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "toponets-corpus") throw ParseError("not a corpus manifest");
    if (j.value("version", 0) != 1) throw ParseError("unsupported manifest version");
    Manifest m;
    try {
        m.config = generator_config_from_json(j.at("config"));
        for (const auto& e : j.at("maps"))
            m.maps.push_back({e.at("floor").get<int>(), e.value("sequence", 0), e.at("file").get<std::string>(),
                              std::stoull(e.at("hash").get<std::string>(), nullptr, 16)});
        m.splits = j.at("splits").get<std::vector<std::string>>();
    } catch (const std::exception& e) {
        throw ParseError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

Manifest generate_corpus(const GeneratorConfig& cfg, const ClassCatalogue& cat, const std::filesystem::path& dir) {
    cfg.check(cat);
    Manifest m;
    m.config = cfg;
    std::vector<int> floors;
    for (int f = cfg.first_floor; f < cfg.first_floor + cfg.floors; ++f) {
        for (int q = 0; q < cfg.sequences; ++q) {
            const auto map = generate_environment(cfg, cat, f, q);
            const std::string file = "floor_" + std::to_string(f) + "_s" + std::to_string(q) + ".json";
            const std::string text = map_to_json(map).dump(1) + "\n";
            write_text(dir / file, text);
            m.maps.push_back({f, q, file, fnv1a(text)});
        }
        floors.push_back(f);
    }
    if (floors.size() > 1) m.splits = leave_one_out_splits(floors);
    write_text(dir / "manifest.json", to_json(m).dump(2) + "\n");
    return m;
}

Manifest load_manifest(const std::filesystem::path& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest: " + std::string(e.what()));
    }
    return manifest_from_json(j);
}

std::vector<SemanticMap> load_floor(const std::filesystem::path& dir, const Manifest& m, int floor) {
    std::vector<SemanticMap> out;
    for (const auto& e : m.maps)
        if (e.floor == floor) out.push_back(load_map(dir / e.file));
    if (out.empty()) throw InputError("corpus has no map for floor " + std::to_string(floor));
    return out;
}

}  // namespace toponets
