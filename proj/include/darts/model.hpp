#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "darts/cell.hpp"

namespace darts {

enum class FrontendKind { DartsCell, Vgg };

struct ModelConfig {
    FrontendKind frontend = FrontendKind::DartsCell;
    CellConfig cell;
    std::size_t vgg_width = 8;
    std::size_t lstm_layers = 1;
    std::size_t lstm_hidden = 32;
    std::size_t feature_dim = 13;
    std::size_t projection_dim = 32;
    ConvOrder conv_order = ConvOrder::ConvReluBn;

    // K=5, C=32, 3 BiLSTM layers of 360 per direction.
    static ModelConfig paper_preset();
    // K=3, C=8, 1 BiLSTM layer of 32 per direction, D=13.
    static ModelConfig desk_preset();
};

// Per-task output head; index 0 of the vocabulary is the CTC blank. Heads of
// different tasks share no parameters.
struct TaskHead {
    std::string task_id;
    std::vector<std::string> vocab;
    Tensor weight;  // [|vocab|, encoder_dim]
    Tensor bias;    // [|vocab|]
};

struct EncodedBatch {
    Tensor outputs;  // [N, T, 2 * lstm_hidden]
    std::vector<std::size_t> lengths;
};

// The recognizer of the searchable-frontend family: stem -> cell (or VGG
// baseline) -> per-frame flatten -> linear projection -> BiLSTM stack ->
// task head with log-softmax.
class SequenceModel {
public:
    SequenceModel(const ModelConfig& config, std::uint64_t seed);

    // [N,1,T,D] -> [N,C,T,D]: 3x3 conv (pad 1) + ReLU + batch-norm.
    Tensor stem_forward(const Tensor& features, Mode mode,
                        const std::vector<std::size_t>* time_lengths = nullptr);

    EncodedBatch encode(const Tensor& features, const std::vector<std::size_t>& lengths, Mode mode);

    // Per-frame log-probabilities [N, T, |vocab|].
    Tensor head_forward(const std::string& task_id, const EncodedBatch& enc);

    TaskHead& add_head(const std::string& task_id, const std::vector<std::string>& vocab,
                       std::uint64_t seed);
    bool has_head(const std::string& task_id) const;
    TaskHead& head(const std::string& task_id);
    void drop_head(const std::string& task_id);

    const ModelConfig& config() const { return config_; }
    std::size_t encoder_dim() const { return 2 * config_.lstm_hidden; }
    // Output length under the frontend (identity for the cell, two ceil-/2
    // stages for VGG).
    std::size_t frontend_length(std::size_t t) const;

    SupernetCell* cell() { return cell_ ? &*cell_ : nullptr; }
    const SupernetCell* cell() const { return cell_ ? &*cell_ : nullptr; }
    AlphaTable* alpha_table() { return cell_ ? &cell_->alphas() : nullptr; }

    // Weight parameters (everything except alphas), deterministic order.
    std::vector<NamedTensor> parameters() const;
    // The alpha vectors, one per edge, deterministic order.
    std::vector<NamedTensor> alpha_parameters() const;
    // Batch-norm running stats.
    std::vector<NamedTensor> buffers() const;

    std::vector<std::string> head_ids() const;

private:
    struct BiLstmLayer {
        LstmParams fwd;
        LstmParams bwd;
    };

    ModelConfig config_;
    // stem (cell frontend only)
    Tensor stem_kernel_, stem_bias_, stem_gamma_, stem_beta_, stem_mean_, stem_var_;
    std::optional<SupernetCell> cell_;
    std::optional<VggBaselineBlock> vgg_;
    Tensor proj_weight_, proj_bias_;
    std::vector<BiLstmLayer> lstm_;
    std::map<std::string, TaskHead> heads_;
};

Tensor stem_forward(SequenceModel& model, const Tensor& features, Mode mode);
EncodedBatch encode(SequenceModel& model, const Tensor& features,
                    const std::vector<std::size_t>& lengths, Mode mode);
Tensor head_forward(SequenceModel& model, const std::string& task_id, const EncodedBatch& enc);

}  // namespace darts
