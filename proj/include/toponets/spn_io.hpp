#pragma once

// Model file formats for sum-product networks.
//
// Binary (little-endian):
//   "TSPN" | u32 version=1 | u32 num_vars | u32 cardinality[num_vars]
//   | u32 num_nodes | u32 root | node[num_nodes]
//   node := u8 kind (0 sum, 1 product, 2 indicator) followed by
//     sum:       u32 k | u32 child[k] | f64 weight[k]
//     product:   u32 k | u32 child[k]
//     indicator: u32 var | u32 value
// Nodes are written in topological order (children first).
//
// JSON (canonical for fixtures):
//   {"format": "toponets-spn", "version": 1, "variables": [card, ...],
//    "root": id, "nodes": [{"kind": "sum", "children": [...], "weights": [...]},
//                          {"kind": "product", "children": [...]},
//                          {"kind": "indicator", "var": v, "value": k}]}

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "toponets/spn.hpp"

namespace toponets {

inline constexpr std::uint32_t kSpnFormatVersion = 1;

std::vector<std::uint8_t> serialize(const Spn& spn);
/// Throws ParseError naming the offending node; never returns a partial network.
Spn deserialize(std::span<const std::uint8_t> bytes);

nlohmann::json spn_to_json(const Spn& spn);
Spn spn_from_json(const nlohmann::json& j);

/// Writes JSON when the extension is ".json", binary otherwise.
void save_spn(const std::filesystem::path& path, const Spn& spn);
/// Loads and validates; throws StructuralError if the network is invalid.
Spn load_spn(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace toponets
