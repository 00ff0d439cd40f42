#include "toponets/spn_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace toponets {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double d) {
        const auto v = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    void need(std::size_t n, const std::string& what) const {
        if (pos_ + n > b_.size()) throw ParseError("truncated payload while reading " + what);
    }
    std::uint8_t u8(const std::string& what) {
        need(1, what);
        return b_[pos_++];
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    double f64(const std::string& what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
        return std::bit_cast<double>(v);
    }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

const char* kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::Sum: return "sum";
        case NodeKind::Product: return "product";
        case NodeKind::Indicator: return "indicator";
    }
    return "?";
}

}  // namespace

std::vector<std::uint8_t> serialize(const Spn& spn) {
    Writer w;
    for (char c : {'T', 'S', 'P', 'N'}) w.u8(static_cast<std::uint8_t>(c));
    w.u32(kSpnFormatVersion);
    w.u32(static_cast<std::uint32_t>(spn.num_variables()));
    for (auto c : spn.cardinalities()) w.u32(c);
    w.u32(static_cast<std::uint32_t>(spn.num_nodes()));
    w.u32(spn.root());
    for (NodeId n = 0; n < spn.num_nodes(); ++n) {
        w.u8(static_cast<std::uint8_t>(spn.kind(n)));
        switch (spn.kind(n)) {
            case NodeKind::Indicator:
                w.u32(spn.indicator_var(n));
                w.u32(spn.indicator_value(n));
                break;
            case NodeKind::Product:
                w.u32(static_cast<std::uint32_t>(spn.children(n).size()));
                for (auto c : spn.children(n)) w.u32(c);
                break;
            case NodeKind::Sum:
                w.u32(static_cast<std::uint32_t>(spn.children(n).size()));
                for (auto c : spn.children(n)) w.u32(c);
                for (auto x : spn.weights(n)) w.f64(x);
                break;
        }
    }
    return w.take();
}

Spn deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.u8("magic"));
    if (std::memcmp(magic, "TSPN", 4) != 0) throw ParseError("bad magic: not a network file");
    const auto version = r.u32("version");
    if (version != kSpnFormatVersion) throw ParseError("unsupported network format version " + std::to_string(version));
    const auto nvars = r.u32("variable count");
    r.need(std::size_t{4} * nvars, "variable table");
    std::vector<std::uint32_t> cards(nvars);
    for (auto& c : cards) {
        c = r.u32("variable table");
        if (c < 2) throw ParseError("variable cardinality < 2");
    }
    const auto nnodes = r.u32("node count");
    const auto root = r.u32("root id");
    if (nnodes > r.remaining()) throw ParseError("truncated payload: node count exceeds payload size");
    std::vector<NodeRecord> nodes(nnodes);
    for (std::uint32_t i = 0; i < nnodes; ++i) {
        const std::string at = "node " + std::to_string(i);
        auto& rec = nodes[i];
        const auto kind = r.u8(at);
        if (kind > 2) throw ParseError(at + ": unknown node kind " + std::to_string(kind));
        rec.kind = static_cast<NodeKind>(kind);
        if (rec.kind == NodeKind::Indicator) {
            rec.var = r.u32(at);
            rec.value = r.u32(at);
            continue;
        }
        const auto k = r.u32(at);
        r.need(std::size_t{4} * k, at);
        rec.children.resize(k);
        for (auto& c : rec.children) c = r.u32(at);
        if (rec.kind == NodeKind::Sum) {
            r.need(std::size_t{8} * k, at);
            rec.weights.resize(k);
            for (auto& x : rec.weights) x = r.f64(at);
        }
    }
    if (r.remaining() != 0) throw ParseError("trailing bytes after node table");
    try {
        return spn_from_node_table(std::move(cards), nodes, root);
    } catch (const std::exception& e) {
        throw ParseError(std::string("invalid node table: ") + e.what());
    }
}

nlohmann::json spn_to_json(const Spn& spn) {
    nlohmann::json nodes = nlohmann::json::array();
    for (NodeId n = 0; n < spn.num_nodes(); ++n) {
        nlohmann::json rec = {{"kind", kind_name(spn.kind(n))}};
        if (spn.kind(n) == NodeKind::Indicator) {
            rec["var"] = spn.indicator_var(n);
            rec["value"] = spn.indicator_value(n);
        } else {
            auto kids = spn.children(n);
            rec["children"] = std::vector<NodeId>(kids.begin(), kids.end());
            if (spn.kind(n) == NodeKind::Sum) {
                auto w = spn.weights(n);
                rec["weights"] = std::vector<double>(w.begin(), w.end());
            }
        }
        nodes.push_back(std::move(rec));
    }
    auto cards = spn.cardinalities();
    return {{"format", "toponets-spn"},
            {"version", kSpnFormatVersion},
            {"variables", std::vector<std::uint32_t>(cards.begin(), cards.end())},
            {"root", spn.root()},
            {"nodes", std::move(nodes)}};
}

Spn spn_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "toponets-spn") throw ParseError("not a toponets-spn document");
        if (j.at("version").get<std::uint32_t>() != kSpnFormatVersion) throw ParseError("unsupported version");
        auto cards = j.at("variables").get<std::vector<std::uint32_t>>();
        const auto& jn = j.at("nodes");
        std::vector<NodeRecord> nodes(jn.size());
        for (std::size_t i = 0; i < jn.size(); ++i) {
            const auto& r = jn[i];
            const auto kind = r.at("kind").get<std::string>();
            auto& rec = nodes[i];
            try {
                if (kind == "indicator") {
                    rec.kind = NodeKind::Indicator;
                    rec.var = r.at("var").get<VarId>();
                    rec.value = r.at("value").get<std::uint32_t>();
                } else if (kind == "sum" || kind == "product") {
                    rec.kind = kind == "sum" ? NodeKind::Sum : NodeKind::Product;
                    rec.children = r.at("children").get<std::vector<NodeId>>();
                    if (rec.kind == NodeKind::Sum) rec.weights = r.at("weights").get<std::vector<double>>();
                } else {
                    throw ParseError("unknown kind '" + kind + "'");
                }
            } catch (const nlohmann::json::exception& e) {
                throw ParseError("node " + std::to_string(i) + ": " + e.what());
            }
        }
        return spn_from_node_table(std::move(cards), nodes, j.at("root").get<NodeId>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("network json: ") + e.what());
    } catch (const StructuralError& e) {
        throw ParseError(std::string("invalid node table: ") + e.what());
    }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
    auto b = read_file(path);
    return {b.begin(), b.end()};
}

void save_spn(const std::filesystem::path& path, const Spn& spn) {
    if (path.extension() == ".json")
        write_text(path, spn_to_json(spn).dump());
    else
        write_file(path, serialize(spn));
}

Spn load_spn(const std::filesystem::path& path) {
    Spn spn = path.extension() == ".json" ? spn_from_json(nlohmann::json::parse(read_text(path))) : deserialize(read_file(path));
    const auto report = check_validity(spn);
    if (!report.ok()) throw StructuralError("network in " + path.string() + " violates completeness/decomposability");
    return spn;
}

}  // namespace toponets
