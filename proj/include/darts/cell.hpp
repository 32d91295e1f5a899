#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "darts/candidates.hpp"
#include "darts/tensor.hpp"

namespace darts {

struct CellConfig {
    std::size_t k_nodes = 5;
    std::size_t channels = 32;
    std::vector<TransformationKind> candidates = all_transformation_kinds();
};

// Architecture parameters: one alpha vector of length |F| per DAG edge
// (i, j), 1 <= i <= K, 0 <= j < i, plus a keep-mask of the same shape.
// Edges are stored row-major by destination node: (1,0), (2,0), (2,1), ...
class AlphaTable {
public:
    AlphaTable() = default;
    explicit AlphaTable(const CellConfig& config);

    std::size_t k_nodes() const { return k_nodes_; }
    std::size_t num_candidates() const { return num_candidates_; }
    std::size_t edge_count() const { return alphas_.size(); }
    std::size_t edge_index(std::size_t i, std::size_t j) const;

    Tensor& alpha(std::size_t i, std::size_t j) { return alphas_[edge_index(i, j)]; }
    const Tensor& alpha(std::size_t i, std::size_t j) const { return alphas_[edge_index(i, j)]; }
    Tensor& alpha_at(std::size_t e) { return alphas_[e]; }
    const Tensor& alpha_at(std::size_t e) const { return alphas_[e]; }

    std::vector<std::uint8_t>& mask(std::size_t i, std::size_t j) { return masks_[edge_index(i, j)]; }
    const std::vector<std::uint8_t>& mask(std::size_t i, std::size_t j) const {
        return masks_[edge_index(i, j)];
    }
    std::vector<std::uint8_t>& mask_at(std::size_t e) { return masks_[e]; }
    const std::vector<std::uint8_t>& mask_at(std::size_t e) const { return masks_[e]; }

    std::size_t kept_count(std::size_t e) const;

    AlphaTable deep_clone() const;

private:
    std::size_t k_nodes_ = 0;
    std::size_t num_candidates_ = 0;
    std::vector<Tensor> alphas_;
    std::vector<std::vector<std::uint8_t>> masks_;
};

// All-zero alphas, all-true masks: uniform attention over every candidate.
AlphaTable init_alphas(const CellConfig& config);

// Softmax of edge (i, j) over unpruned candidates; pruned weights are
// exactly zero. Differentiable w.r.t. the alphas.
Tensor edge_weights(const AlphaTable& alphas, std::size_t i, std::size_t j);

// Shannon entropy (nats) of each edge's weight distribution.
std::vector<double> alpha_entropy(const AlphaTable& alphas);

// Keeps the top-k alphas per edge among currently unpruned entries (ties to
// the lowest candidate index); surviving values are untouched.
AlphaTable prune_top_k(const AlphaTable& alphas, std::size_t k = 3);

struct DominantChoice {
    std::size_t node;    // 1..K
    std::size_t source;  // j < node
    TransformationKind kind;
};

struct DerivedArchitecture {
    CellConfig config;
    std::vector<std::vector<double>> alphas;      // [edges][|F|] snapshot
    std::vector<std::vector<std::uint8_t>> mask;  // [edges][|F|]
    std::vector<DominantChoice> dominant;         // one per node
};

// Two-level argmax: per edge the best unpruned kind, then per node the
// entering edge whose best kind scores highest. Ties: lowest candidate
// index, then lowest source node.
DerivedArchitecture derive_architecture(const AlphaTable& alphas, const CellConfig& config);

enum class ExportFormat { Json, Dot };
ExportFormat export_format_from_name(const std::string& name);

// Deterministic byte output. JSON round-trips losslessly through
// parse_architecture_json; DOT lists nodes n0..nK and one dominant edge per
// node, labeled with the kind name.
std::string export_architecture(const DerivedArchitecture& arch, ExportFormat format);
DerivedArchitecture parse_architecture_json(const std::string& json_text);

// The searchable cell: per-edge instantiations of every candidate (no
// parameter sharing across edges) mixed by softmaxed alphas.
class SupernetCell {
public:
    SupernetCell(const CellConfig& config, std::uint64_t seed,
                 ConvOrder order = ConvOrder::ConvReluBn);

    // x: [N, C, H, W] -> [N, K*C, H, W]. H_i = sum_{j<i} sum_f w_f f(H_j),
    // output = channel-concat of H_1..H_K.
    Tensor forward(const Tensor& x, Mode mode, const std::vector<std::size_t>* time_lengths = nullptr);

    const CellConfig& config() const { return config_; }
    AlphaTable& alphas() { return alphas_; }
    const AlphaTable& alphas() const { return alphas_; }
    void set_alphas(AlphaTable table);

    std::vector<NamedTensor> parameters(const std::string& prefix) const;
    std::vector<NamedTensor> buffers(const std::string& prefix) const;

private:
    CellConfig config_;
    AlphaTable alphas_;
    std::vector<std::vector<TransformationInstance>> edge_ops_;  // [edge][candidate]
};

Tensor cell_forward(SupernetCell& cell, const Tensor& x, Mode mode,
                    const std::vector<std::size_t>* time_lengths = nullptr);

}  // namespace darts
