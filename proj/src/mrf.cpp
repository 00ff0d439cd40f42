#include "toponets/mrf.hpp"

#include <algorithm>
#include <cmath>

namespace toponets {

PairwisePotential learn_pairwise(const std::vector<SemanticMap>& corpus, std::uint32_t num_classes, double smoothing) {
    if (num_classes == 0) throw InputError("learn_pairwise: no classes");
    if (!(smoothing >= 0.0)) throw InputError("learn_pairwise: smoothing must be >= 0");
    PairwisePotential p;
    p.smoothing = smoothing;
    p.counts = Eigen::MatrixXd::Zero(num_classes, num_classes);
    for (const auto& m : corpus) {
        if (m.num_classes != num_classes) throw InputError("learn_pairwise: map '" + m.name + "' uses a different class set");
        for (auto [a, b] : m.edges) {
            const auto la = m.nodes[a].label, lb = m.nodes[b].label;
            if (la == kLatent || lb == kLatent) continue;
            p.counts(la, lb) += 1.0;
            p.counts(lb, la) += 1.0;
        }
    }
    p.phi = p.counts.array() + smoothing;
    const double total = p.phi.sum();
    if (!(total > 0.0)) throw InputError("learn_pairwise: no edges and zero smoothing");
    p.phi /= total;
    return p;
}

nlohmann::json to_json(const PairwisePotential& p) {
    std::vector<std::vector<double>> counts(p.counts.rows(), std::vector<double>(p.counts.cols()));
    for (Eigen::Index i = 0; i < p.counts.rows(); ++i)
        for (Eigen::Index j = 0; j < p.counts.cols(); ++j) counts[i][j] = p.counts(i, j);
    return {{"format", "toponets-pairwise"}, {"version", 1}, {"smoothing", p.smoothing}, {"counts", counts}};
}

PairwisePotential pairwise_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "toponets-pairwise" || j.value("version", 0) != 1)
        throw ParseError("not a pairwise potential file");
    PairwisePotential p;
    try {
        p.smoothing = j.at("smoothing").get<double>();
        const auto counts = j.at("counts").get<std::vector<std::vector<double>>>();
        const auto n = static_cast<Eigen::Index>(counts.size());
        p.counts.resize(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (static_cast<Eigen::Index>(counts[i].size()) != n) throw ParseError("pairwise counts must be square");
            for (Eigen::Index k = 0; k < n; ++k) p.counts(i, k) = counts[i][k];
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed pairwise file: ") + e.what());
    }
    p.phi = p.counts.array() + p.smoothing;
    p.phi /= p.phi.sum();
    return p;
}

MrfInstance build_mrf(const SemanticMap& map, const PlaceModel& place_model, const PairwisePotential& pairwise) {
    const auto nc = place_model.num_classes;
    if (pairwise.phi.rows() != nc || pairwise.phi.cols() != nc)
        throw InputError("build_mrf: pairwise potential does not match the class count");
    MrfInstance m;
    m.num_classes = nc;
    m.edges = map.edges;
    m.log_pairwise = pairwise.phi.array().log();
    for (PlaceId i = 0; i < map.size(); ++i) {
        const auto& node = map.nodes[i];
        m.is_place.push_back(node.kind == PlaceKind::Place);
        if (node.kind != PlaceKind::Place) {
            m.log_unary.push_back(Eigen::VectorXd::Zero(nc));
            m.unary_shift.push_back(0.0);
            continue;
        }
        if (!node.geometry) throw InputError("build_mrf: place " + std::to_string(i) + " has no geometry");
        const auto local = classify_local(place_model, *node.geometry);
        const double top = local.log_likelihood.maxCoeff();
        m.log_unary.push_back(
            (local.log_likelihood.array() - top).max(kUnaryFloor).matrix());
        m.unary_shift.push_back(top);
    }
    return m;
}

namespace {

double lse(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

BpResult loopy_bp(const MrfInstance& mrf, const BpOptions& opt) {
    if (!(opt.damping >= 0.0 && opt.damping < 1.0)) throw InputError("loopy_bp: damping must be in [0, 1)");
    const auto n = mrf.size();
    const auto nc = static_cast<Eigen::Index>(mrf.num_classes);
    const auto ne = mrf.edges.size();
    // incoming[i]: directed message ids into node i.
    std::vector<std::vector<std::size_t>> incoming(n);
    for (std::size_t k = 0; k < ne; ++k) {
        incoming[mrf.edges[k].second].push_back(2 * k);
        incoming[mrf.edges[k].first].push_back(2 * k + 1);
    }
    auto source = [&](std::size_t id) { return id % 2 == 0 ? mrf.edges[id / 2].first : mrf.edges[id / 2].second; };

    BpResult r;
    const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(nc, -std::log(static_cast<double>(nc)));
    r.log_messages.assign(2 * ne, uniform);
    std::vector<Eigen::VectorXd> next(2 * ne);
    std::vector<Eigen::VectorXd> sum_in(n);
    for (r.iterations = 0; r.iterations < opt.max_iters;) {
        for (std::size_t i = 0; i < n; ++i) {
            sum_in[i] = mrf.log_unary[i];
            for (auto id : incoming[i]) sum_in[i] += r.log_messages[id];
        }
        double residual = 0.0;
        for (std::size_t id = 0; id < 2 * ne; ++id) {
            const auto s = source(id);
            const Eigen::VectorXd h = sum_in[s] - r.log_messages[id ^ 1];  // exclude the target's message
            Eigen::VectorXd out(nc);
            for (Eigen::Index t = 0; t < nc; ++t) out[t] = lse(h + mrf.log_pairwise.col(t));
            out.array() -= lse(out);
            if (opt.damping > 0.0) {
                const Eigen::ArrayXd mixed =
                    (1.0 - opt.damping) * out.array().exp() + opt.damping * r.log_messages[id].array().exp();
                out = (mixed / mixed.sum()).log().matrix();
            }
            residual = std::max(residual, (out.array().exp() - r.log_messages[id].array().exp()).abs().maxCoeff());
            next[id] = std::move(out);
        }
        std::swap(r.log_messages, next);
        ++r.iterations;
        r.residual = residual;
        if (residual < opt.tol) {
            r.converged = true;
            break;
        }
    }
    if (ne == 0) r.converged = true;
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::VectorXd b = mrf.log_unary[i];
        for (auto id : incoming[i]) b += r.log_messages[id];
        b.array() -= lse(b);
        r.beliefs.push_back(b.array().exp().matrix());
    }
    return r;
}

double bethe_log_z(const MrfInstance& mrf, const BpResult& bp) {
    const auto n = mrf.size();
    const auto nc = static_cast<Eigen::Index>(mrf.num_classes);
    std::vector<std::vector<std::size_t>> incoming(n);
    for (std::size_t k = 0; k < mrf.edges.size(); ++k) {
        incoming[mrf.edges[k].second].push_back(2 * k);
        incoming[mrf.edges[k].first].push_back(2 * k + 1);
    }
    auto xlogx = [](double p) { return p > 0.0 ? p * std::log(p) : 0.0; };
    double energy = 0.0, entropy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& b = bp.beliefs[i];
        const double deg = static_cast<double>(incoming[i].size());
        for (Eigen::Index c = 0; c < nc; ++c) {
            if (b[c] > 0.0) energy += b[c] * mrf.log_unary[i][c];
            entropy += (deg - 1.0) * xlogx(b[c]);
        }
        energy += mrf.unary_shift[i];
    }
    for (std::size_t k = 0; k < mrf.edges.size(); ++k) {
        const auto [a, b] = mrf.edges[k];
        Eigen::VectorXd ha = mrf.log_unary[a], hb = mrf.log_unary[b];
        for (auto id : incoming[a])
            if (id != 2 * k + 1) ha += bp.log_messages[id];
        for (auto id : incoming[b])
            if (id != 2 * k) hb += bp.log_messages[id];
        Eigen::MatrixXd lp = mrf.log_pairwise;
        lp.colwise() += ha;
        lp.rowwise() += hb.transpose();
        const double m = lp.maxCoeff();
        Eigen::MatrixXd p = (lp.array() - m).exp();
        p /= p.sum();
        for (Eigen::Index x = 0; x < nc; ++x)
            for (Eigen::Index y = 0; y < nc; ++y) {
                if (p(x, y) > 0.0) energy += p(x, y) * mrf.log_pairwise(x, y);
                entropy -= xlogx(p(x, y));
            }
    }
    return energy + entropy;
}

MrfOutputs mrf_tasks(const MrfInstance& mrf, const BpOptions& options, double threshold) {
    MrfOutputs out;
    out.bp = loopy_bp(mrf, options);
    for (PlaceId i = 0; i < mrf.size(); ++i) {
        PlacePrediction p;
        p.id = i;
        p.posterior = out.bp.beliefs[i];
        Eigen::Index best = 0;
        p.posterior.maxCoeff(&best);
        p.mpe_class = static_cast<std::uint32_t>(best);
        (mrf.is_place[i] ? out.places : out.placeholders).push_back(std::move(p));
    }
    const auto places = std::max<std::size_t>(1, out.places.size());
    out.novelty.total_ll = bethe_log_z(mrf, out.bp);
    out.novelty.per_place_ll = out.novelty.total_ll / static_cast<double>(places);
    out.novelty.threshold = threshold;
    out.novelty.decision = out.novelty.per_place_ll < threshold ? NoveltyDecision::Novel : NoveltyDecision::Known;
    return out;
}

nlohmann::json bp_diagnostics(const BpResult& bp) {
    return {{"converged", bp.converged}, {"iterations", bp.iterations}, {"residual", bp.residual}};
}

}  // namespace toponets
