#pragma once

// Robot-centric polar occupancy grids.
//
// 56 angular columns x 21 radial rings within a 5 m radius. Column a covers
// angles [a, a+1) * 2pi/56 measured counter-clockwise from the robot's +x
// axis. Ring r covers radii [edge[r], edge[r+1]); ring depths grow
// geometrically from 0.12 m so that the 21 rings end exactly at 5 m.
//
// Variable index of cell (a, r) is a * 21 + r. View v holds columns
// 7v .. 7v+6, i.e. variables 147v .. 147v+146.
//
// Cell codes: 0 Free, 1 Occupied, 2 Unknown (observed as unseen), 3 Missing
// (no observation; the variable is marginalized).
//
// JSON: {"format": "toponets-polar-grid", "version": 1, "angular": 56,
//        "radial": 21, "radius_m": 5.0, "radial_edges": [22 numbers],
//        "cells": [1176 codes, index a*21+r]}
// Packed binary: "TPG" | u8 version=1 | u16 angular | u16 radial | f64 radius
//        | 294 bytes; cell i uses bits 2*(i%4)..2*(i%4)+1 of byte i/4.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "toponets/spn.hpp"

namespace toponets {

enum class Cell : std::uint8_t { Free = 0, Occupied = 1, Unknown = 2, Missing = 3 };

inline constexpr int kAngularCells = 56;
inline constexpr int kRadialCells = 21;
inline constexpr int kGridCells = kAngularCells * kRadialCells;
inline constexpr int kViews = 8;
inline constexpr int kViewColumns = kAngularCells / kViews;
inline constexpr int kViewCells = kViewColumns * kRadialCells;
inline constexpr double kGridRadius = 5.0;
inline constexpr double kInnermostRing = 0.12;
/// Cardinality of each geometry variable (Free, Occupied, Unknown).
inline constexpr std::uint32_t kCellStates = 3;

inline constexpr int cell_index(int angular, int radial) { return angular * kRadialCells + radial; }

/// The 22 ring boundaries in meters (0 first, 5 last).
const std::array<double, kRadialCells + 1>& radial_edges();

class PolarGrid {
public:
    PolarGrid() { cells_.fill(Cell::Unknown); }

    Cell at(int angular, int radial) const { return cells_[cell_index(angular, radial)]; }
    void set(int angular, int radial, Cell c) { cells_[cell_index(angular, radial)] = c; }
    Cell operator[](std::size_t i) const { return cells_[i]; }
    Cell& operator[](std::size_t i) { return cells_[i]; }
    std::span<const Cell, kGridCells> cells() const { return cells_; }

    bool operator==(const PolarGrid&) const = default;

private:
    std::array<Cell, kGridCells> cells_;
};

/// Square metric grid centered on the robot; row-major, row 0 at the most
/// negative y. Cell (i, j) covers x in [(j - size/2) res, (j + 1 - size/2) res).
struct LocalGrid {
    double resolution = 0.05;
    int size = 0;
    std::vector<Cell> cells;

    LocalGrid() = default;
    LocalGrid(double res, int n, Cell fill) : resolution(res), size(n), cells(static_cast<std::size_t>(n) * n, fill) {}
    Cell at(int row, int col) const { return cells[static_cast<std::size_t>(row) * size + col]; }
    Cell& at(int row, int col) { return cells[static_cast<std::size_t>(row) * size + col]; }
    /// Cell containing metric point (x, y), or Missing outside the grid.
    Cell lookup(double x, double y) const;
};

/// Majority state per polar cell over a dense set of sample points; ties
/// resolve Occupied > Unknown > Free. Missing source cells do not vote; a
/// polar cell with no voting samples is Missing.
PolarGrid cartesian_to_polar(const LocalGrid& local, double radius = kGridRadius);

struct View {
    int index = 0;
    std::array<Cell, kViewCells> cells{};  // column-major like the grid
};

std::array<View, kViews> split_views(const PolarGrid& grid);
PolarGrid concat_views(const std::array<View, kViews>& views);

/// Evidence over the 1176 ternary geometry variables. Missing cells are
/// marginalized.
Evidence grid_evidence(const PolarGrid& grid);
/// Writes the grid's evidence into variables [offset, offset + 1176).
void add_grid_evidence(Evidence& ev, const PolarGrid& grid, VarId offset);

nlohmann::json grid_to_json(const PolarGrid& grid);
PolarGrid grid_from_json(const nlohmann::json& j);
std::vector<std::uint8_t> pack_grid(const PolarGrid& grid);
PolarGrid unpack_grid(std::span<const std::uint8_t> bytes);

}  // namespace toponets
