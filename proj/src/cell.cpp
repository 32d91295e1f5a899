#include "darts/cell.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

namespace darts {

using ordered_json = nlohmann::ordered_json;

AlphaTable::AlphaTable(const CellConfig& config) {
    if (config.k_nodes < 1) throw ShapeError("AlphaTable: K must be >= 1");
    if (config.candidates.empty()) throw ShapeError("AlphaTable: candidate list must be non-empty");
    k_nodes_ = config.k_nodes;
    num_candidates_ = config.candidates.size();
    const std::size_t edges = k_nodes_ * (k_nodes_ + 1) / 2;
    alphas_.reserve(edges);
    masks_.reserve(edges);
    for (std::size_t e = 0; e < edges; ++e) {
        alphas_.push_back(Tensor({num_candidates_}, 0.0, true));
        masks_.emplace_back(num_candidates_, std::uint8_t{1});
    }
}

std::size_t AlphaTable::edge_index(std::size_t i, std::size_t j) const {
    if (i < 1 || i > k_nodes_ || j >= i) {
        throw ShapeError(str("AlphaTable: unknown edge (", i, ",", j, ") for K=", k_nodes_));
    }
    return (i - 1) * i / 2 + j;
}

std::size_t AlphaTable::kept_count(std::size_t e) const {
    std::size_t n = 0;
    for (std::uint8_t m : masks_[e]) n += m ? 1 : 0;
    return n;
}

AlphaTable AlphaTable::deep_clone() const {
    AlphaTable out;
    out.k_nodes_ = k_nodes_;
    out.num_candidates_ = num_candidates_;
    out.masks_ = masks_;
    out.alphas_.reserve(alphas_.size());
    for (const Tensor& a : alphas_) out.alphas_.push_back(a.clone());
    return out;
}

AlphaTable init_alphas(const CellConfig& config) { return AlphaTable(config); }

Tensor edge_weights(const AlphaTable& alphas, std::size_t i, std::size_t j) {
    const std::size_t e = alphas.edge_index(i, j);
    return masked_softmax(alphas.alpha_at(e), alphas.mask_at(e));
}

std::vector<double> alpha_entropy(const AlphaTable& alphas) {
    std::vector<double> out(alphas.edge_count());
    for (std::size_t e = 0; e < alphas.edge_count(); ++e) {
        const Tensor& a = alphas.alpha_at(e);
        const auto& mask = alphas.mask_at(e);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t f = 0; f < a.numel(); ++f) {
            if (mask[f]) mx = std::max(mx, a[f]);
        }
        double denom = 0.0;
        for (std::size_t f = 0; f < a.numel(); ++f) {
            if (mask[f]) denom += std::exp(a[f] - mx);
        }
        double h = 0.0;
        for (std::size_t f = 0; f < a.numel(); ++f) {
            if (!mask[f]) continue;
            const double w = std::exp(a[f] - mx) / denom;
            if (w > 0.0) h -= w * std::log(w);
        }
        out[e] = h;
    }
    return out;
}

AlphaTable prune_top_k(const AlphaTable& alphas, std::size_t k) {
    if (k < 1) throw Error("prune_top_k: k must be >= 1");
    AlphaTable out = alphas.deep_clone();
    for (std::size_t e = 0; e < out.edge_count(); ++e) {
        const Tensor& a = out.alpha_at(e);
        auto& mask = out.mask_at(e);
        std::vector<std::size_t> kept;
        for (std::size_t f = 0; f < mask.size(); ++f) {
            if (mask[f]) kept.push_back(f);
        }
        std::sort(kept.begin(), kept.end(), [&a](std::size_t x, std::size_t y) {
            if (a[x] != a[y]) return a[x] > a[y];
            return x < y;
        });
        const std::size_t keep_n = std::min(k, kept.size());
        std::fill(mask.begin(), mask.end(), std::uint8_t{0});
        for (std::size_t i = 0; i < keep_n; ++i) mask[kept[i]] = 1;
    }
    return out;
}

DerivedArchitecture derive_architecture(const AlphaTable& alphas, const CellConfig& config) {
    DerivedArchitecture arch;
    arch.config = config;
    for (std::size_t e = 0; e < alphas.edge_count(); ++e) {
        arch.alphas.push_back(alphas.alpha_at(e).data());
        arch.mask.push_back(alphas.mask_at(e));
    }
    for (std::size_t i = 1; i <= alphas.k_nodes(); ++i) {
        std::size_t best_j = 0;
        std::size_t best_f = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < i; ++j) {
            const Tensor& a = alphas.alpha(i, j);
            const auto& mask = alphas.mask(i, j);
            // Per-edge dominant kind, ties to the lowest candidate index.
            std::size_t f_best = 0;
            double f_val = -std::numeric_limits<double>::infinity();
            bool any = false;
            for (std::size_t f = 0; f < a.numel(); ++f) {
                if (!mask[f]) continue;
                if (!any || a[f] > f_val) {
                    f_best = f;
                    f_val = a[f];
                    any = true;
                }
            }
            if (!any) throw Error(str("derive_architecture: edge (", i, ",", j, ") fully pruned"));
            if (f_val > best_v) {  // ties keep the lowest source index
                best_v = f_val;
                best_j = j;
                best_f = f_best;
            }
        }
        arch.dominant.push_back({i, best_j, config.candidates[best_f]});
    }
    return arch;
}

ExportFormat export_format_from_name(const std::string& name) {
    if (name == "json") return ExportFormat::Json;
    if (name == "dot") return ExportFormat::Dot;
    throw ConfigError(str("unknown export format: ", name, " (expected json or dot)"));
}

std::string export_architecture(const DerivedArchitecture& arch, ExportFormat format) {
    if (format == ExportFormat::Json) {
        ordered_json j;
        j["k"] = arch.config.k_nodes;
        j["channels"] = arch.config.channels;
        ordered_json cands = ordered_json::array();
        for (TransformationKind k : arch.config.candidates) cands.push_back(kind_name(k));
        j["candidates"] = cands;
        j["alphas"] = arch.alphas;
        ordered_json mask = ordered_json::array();
        for (const auto& edge : arch.mask) {
            ordered_json row = ordered_json::array();
            for (std::uint8_t m : edge) row.push_back(m != 0);
            mask.push_back(row);
        }
        j["mask"] = mask;
        ordered_json dom = ordered_json::array();
        for (const DominantChoice& d : arch.dominant) {
            ordered_json o;
            o["node"] = d.node;
            o["source"] = d.source;
            o["kind"] = kind_name(d.kind);
            dom.push_back(o);
        }
        j["dominant"] = dom;
        return j.dump(2) + "\n";
    }
    if (format == ExportFormat::Dot) {
        std::string out = "digraph cell {\n  rankdir=TB;\n";
        out += "  n0 [label=\"n0 (input)\"];\n";
        for (std::size_t i = 1; i <= arch.config.k_nodes; ++i) {
            out += str("  n", i, " [label=\"n", i, "\"];\n");
        }
        for (const DominantChoice& d : arch.dominant) {
            out += str("  n", d.source, " -> n", d.node, " [label=\"", kind_name(d.kind), "\"];\n");
        }
        out += "}\n";
        return out;
    }
    throw ConfigError("export_architecture: unknown format");
}

DerivedArchitecture parse_architecture_json(const std::string& json_text) {
    ordered_json j;
    try {
        j = ordered_json::parse(json_text);
    } catch (const std::exception& ex) {
        throw IoError(str("architecture json parse error: ", ex.what()));
    }
    DerivedArchitecture arch;
    arch.config.k_nodes = j.at("k").get<std::size_t>();
    arch.config.channels = j.at("channels").get<std::size_t>();
    arch.config.candidates.clear();
    for (const auto& name : j.at("candidates")) {
        arch.config.candidates.push_back(kind_from_name(name.get<std::string>()));
    }
    arch.alphas = j.at("alphas").get<std::vector<std::vector<double>>>();
    for (const auto& row : j.at("mask")) {
        std::vector<std::uint8_t> m;
        for (const auto& v : row) m.push_back(v.get<bool>() ? 1 : 0);
        arch.mask.push_back(std::move(m));
    }
    for (const auto& d : j.at("dominant")) {
        arch.dominant.push_back({d.at("node").get<std::size_t>(), d.at("source").get<std::size_t>(),
                                 kind_from_name(d.at("kind").get<std::string>())});
    }
    return arch;
}

// ---------------------------------------------------------------------------
// SupernetCell
// ---------------------------------------------------------------------------

SupernetCell::SupernetCell(const CellConfig& config, std::uint64_t seed, ConvOrder order)
    : config_(config), alphas_(config) {
    if (config.channels < 1) throw ShapeError("SupernetCell: channels must be >= 1");
    const std::size_t edges = alphas_.edge_count();
    edge_ops_.reserve(edges);
    for (std::size_t e = 0; e < edges; ++e) {
        Rng rng(derive_seed(seed, e));
        std::vector<TransformationInstance> ops;
        ops.reserve(config.candidates.size());
        for (TransformationKind k : config.candidates) {
            ops.emplace_back(k, config.channels, rng, order);
        }
        edge_ops_.push_back(std::move(ops));
    }
}

void SupernetCell::set_alphas(AlphaTable table) {
    if (table.k_nodes() != alphas_.k_nodes() || table.num_candidates() != alphas_.num_candidates()) {
        throw ShapeError("set_alphas: table does not match cell config");
    }
    alphas_ = std::move(table);
}

Tensor SupernetCell::forward(const Tensor& x, Mode mode, const std::vector<std::size_t>* time_lengths) {
    if (x.rank() != 4 || x.dim(1) != config_.channels) {
        throw ShapeError(str("cell_forward: expected ", config_.channels, " input channels, got ",
                             shape_str(x.shape())));
    }
    std::vector<Tensor> nodes;
    nodes.reserve(config_.k_nodes + 1);
    nodes.push_back(x);
    for (std::size_t i = 1; i <= config_.k_nodes; ++i) {
        Tensor acc;
        for (std::size_t j = 0; j < i; ++j) {
            const std::size_t e = alphas_.edge_index(i, j);
            Tensor w = masked_softmax(alphas_.alpha_at(e), alphas_.mask_at(e));
            const auto& mask = alphas_.mask_at(e);
            for (std::size_t f = 0; f < edge_ops_[e].size(); ++f) {
                if (!mask[f]) continue;  // pruned kinds contribute exactly zero
                Tensor out_f = edge_ops_[e][f].forward(nodes[j], mode, time_lengths);
                Tensor weighted = scale_by_index(out_f, w, f);
                acc = acc.defined() ? add(acc, weighted) : weighted;
            }
        }
        nodes.push_back(acc);
    }
    return concat_channels(std::vector<Tensor>(nodes.begin() + 1, nodes.end()));
}

std::vector<NamedTensor> SupernetCell::parameters(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    std::size_t e = 0;
    for (std::size_t i = 1; i <= config_.k_nodes; ++i) {
        for (std::size_t j = 0; j < i; ++j, ++e) {
            for (const auto& op : edge_ops_[e]) {
                auto p = op.parameters(str(prefix, ".e", i, "_", j, ".", kind_name(op.kind())));
                out.insert(out.end(), p.begin(), p.end());
            }
        }
    }
    return out;
}

std::vector<NamedTensor> SupernetCell::buffers(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    std::size_t e = 0;
    for (std::size_t i = 1; i <= config_.k_nodes; ++i) {
        for (std::size_t j = 0; j < i; ++j, ++e) {
            for (const auto& op : edge_ops_[e]) {
                auto b = op.buffers(str(prefix, ".e", i, "_", j, ".", kind_name(op.kind())));
                out.insert(out.end(), b.begin(), b.end());
            }
        }
    }
    return out;
}

Tensor cell_forward(SupernetCell& cell, const Tensor& x, Mode mode,
                    const std::vector<std::size_t>* time_lengths) {
    return cell.forward(x, mode, time_lengths);
}

}  // namespace darts
