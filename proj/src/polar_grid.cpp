#include "toponets/polar_grid.hpp"

#include <bit>
#include <cmath>
#include <numbers>

namespace toponets {

const std::array<double, kRadialCells + 1>& radial_edges() {
    static const auto edges = [] {
        // Solve 0.12 * (q^21 - 1) / (q - 1) = 5 for the growth ratio q.
        auto total = [](double q) { return kInnermostRing * (std::pow(q, kRadialCells) - 1.0) / (q - 1.0); };
        double lo = 1.0 + 1e-9, hi = 2.0;
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (lo + hi);
            (total(mid) < kGridRadius ? lo : hi) = mid;
        }
        const double q = 0.5 * (lo + hi);
        std::array<double, kRadialCells + 1> e{};
        double depth = kInnermostRing;
        for (int r = 0; r < kRadialCells; ++r) {
            e[r + 1] = e[r] + depth;
            depth *= q;
        }
        e[kRadialCells] = kGridRadius;
        return e;
    }();
    return edges;
}

Cell LocalGrid::lookup(double x, double y) const {
    const double half = 0.5 * size;
    const auto col = static_cast<int>(std::floor(x / resolution + half));
    const auto row = static_cast<int>(std::floor(y / resolution + half));
    if (row < 0 || col < 0 || row >= size || col >= size) return Cell::Missing;
    return at(row, col);
}

PolarGrid cartesian_to_polar(const LocalGrid& local, double radius) {
    if (!(local.resolution > 0.0) || local.size <= 0 ||
        local.cells.size() != static_cast<std::size_t>(local.size) * local.size)
        throw InputError("cartesian_to_polar: degenerate local grid");
    if (!(radius > 0.0)) throw InputError("cartesian_to_polar: radius must be positive");
    const auto& edges = radial_edges();
    const double scale = radius / kGridRadius;
    // Innermost cells are about 0.12 m x 0.013 m at their narrow end; sample
    // densely enough that every source cell a polar cell touches is hit.
    constexpr int kSa = 12, kSr = 12;
    PolarGrid out;
    for (int a = 0; a < kAngularCells; ++a) {
        for (int r = 0; r < kRadialCells; ++r) {
            int votes[3] = {0, 0, 0};
            for (int i = 0; i < kSa; ++i) {
                const double th = (a + (i + 0.5) / kSa) * 2.0 * std::numbers::pi / kAngularCells;
                const double c = std::cos(th), s = std::sin(th);
                for (int k = 0; k < kSr; ++k) {
                    const double rho = scale * (edges[r] + (k + 0.5) / kSr * (edges[r + 1] - edges[r]));
                    const Cell v = local.lookup(rho * c, rho * s);
                    if (v != Cell::Missing) ++votes[static_cast<int>(v)];
                }
            }
            const int f = votes[0], o = votes[1], u = votes[2];
            Cell best;
            if (f + o + u == 0)
                best = Cell::Missing;
            else if (o >= u && o >= f)
                best = Cell::Occupied;
            else if (u >= f)
                best = Cell::Unknown;
            else
                best = Cell::Free;
            out.set(a, r, best);
        }
    }
    return out;
}

std::array<View, kViews> split_views(const PolarGrid& grid) {
    std::array<View, kViews> views;
    for (int v = 0; v < kViews; ++v) {
        views[v].index = v;
        for (int i = 0; i < kViewCells; ++i) views[v].cells[i] = grid[v * kViewCells + i];
    }
    return views;
}

PolarGrid concat_views(const std::array<View, kViews>& views) {
    PolarGrid g;
    for (int v = 0; v < kViews; ++v) {
        if (views[v].index != v) throw InputError("concat_views: views out of order");
        for (int i = 0; i < kViewCells; ++i) g[v * kViewCells + i] = views[v].cells[i];
    }
    return g;
}

void add_grid_evidence(Evidence& ev, const PolarGrid& grid, VarId offset) {
    if (ev.num_variables() < offset + kGridCells) throw InputError("add_grid_evidence: evidence too small");
    for (int i = 0; i < kGridCells; ++i) {
        const auto v = offset + static_cast<VarId>(i);
        if (grid[i] == Cell::Missing)
            ev.marginalize(v);
        else
            ev.observe(v, static_cast<std::uint32_t>(grid[i]));
    }
}

Evidence grid_evidence(const PolarGrid& grid) {
    Evidence ev(std::vector<std::uint32_t>(kGridCells, kCellStates));
    add_grid_evidence(ev, grid, 0);
    return ev;
}

nlohmann::json grid_to_json(const PolarGrid& grid) {
    std::vector<int> codes(kGridCells);
    for (int i = 0; i < kGridCells; ++i) codes[i] = static_cast<int>(grid[i]);
    const auto& e = radial_edges();
    return {{"format", "toponets-polar-grid"},
            {"version", 1},
            {"angular", kAngularCells},
            {"radial", kRadialCells},
            {"radius_m", kGridRadius},
            {"radial_edges", std::vector<double>(e.begin(), e.end())},
            {"cells", codes}};
}

PolarGrid grid_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "toponets-polar-grid") throw ParseError("not a polar grid document");
        if (j.at("version").get<int>() != 1) throw ParseError("unsupported polar grid version");
        if (j.at("angular").get<int>() != kAngularCells || j.at("radial").get<int>() != kRadialCells)
            throw ParseError("polar grid dimensions must be 56 x 21");
        const auto codes = j.at("cells").get<std::vector<int>>();
        if (codes.size() != static_cast<std::size_t>(kGridCells)) throw ParseError("polar grid needs 1176 cells");
        PolarGrid g;
        for (int i = 0; i < kGridCells; ++i) {
            if (codes[i] < 0 || codes[i] > 3) throw ParseError("cell " + std::to_string(i) + ": bad code");
            g[i] = static_cast<Cell>(codes[i]);
        }
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("polar grid json: ") + e.what());
    }
}

std::vector<std::uint8_t> pack_grid(const PolarGrid& grid) {
    std::vector<std::uint8_t> out = {'T', 'P', 'G', 1, kAngularCells & 0xff, 0, kRadialCells & 0xff, 0};
    const auto r = std::bit_cast<std::uint64_t>(kGridRadius);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(r >> (8 * i)));
    std::vector<std::uint8_t> body((kGridCells + 3) / 4, 0);
    for (int i = 0; i < kGridCells; ++i)
        body[i / 4] |= static_cast<std::uint8_t>(static_cast<unsigned>(grid[i]) << (2 * (i % 4)));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

PolarGrid unpack_grid(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t header = 16, body = (kGridCells + 3) / 4;
    if (bytes.size() != header + body) throw ParseError("packed grid: wrong size");
    if (bytes[0] != 'T' || bytes[1] != 'P' || bytes[2] != 'G') throw ParseError("packed grid: bad magic");
    if (bytes[3] != 1) throw ParseError("packed grid: unsupported version");
    if (bytes[4] != kAngularCells || bytes[5] != 0 || bytes[6] != kRadialCells || bytes[7] != 0)
        throw ParseError("packed grid: dimensions must be 56 x 21");
    PolarGrid g;
    for (int i = 0; i < kGridCells; ++i) g[i] = static_cast<Cell>((bytes[header + i / 4] >> (2 * (i % 4))) & 3u);
    return g;
}

}  // namespace toponets
