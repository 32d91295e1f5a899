#include "darts/model.hpp"

#include <cmath>

namespace darts {

ModelConfig ModelConfig::paper_preset() {
    ModelConfig c;
    c.frontend = FrontendKind::DartsCell;
    c.cell.k_nodes = 5;
    c.cell.channels = 32;
    c.vgg_width = 128;
    c.lstm_layers = 3;
    c.lstm_hidden = 360;
    c.feature_dim = 83;
    c.projection_dim = 360;
    return c;
}

ModelConfig ModelConfig::desk_preset() {
    ModelConfig c;
    c.frontend = FrontendKind::DartsCell;
    c.cell.k_nodes = 3;
    c.cell.channels = 8;
    c.vgg_width = 8;
    c.lstm_layers = 1;
    c.lstm_hidden = 32;
    c.feature_dim = 13;
    c.projection_dim = 32;
    return c;
}

namespace {

Tensor init_linear_weight(std::size_t dout, std::size_t din, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    return Tensor::uniform({dout, din}, rng, -bound, bound, true);
}

}  // namespace

SequenceModel::SequenceModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    if (config.lstm_layers < 1 || config.lstm_hidden < 1 || config.feature_dim < 1 ||
        config.projection_dim < 1) {
        throw ConfigError("SequenceModel: all dims must be >= 1");
    }
    std::size_t flat_dim = 0;
    if (config.frontend == FrontendKind::DartsCell) {
        const std::size_t C = config.cell.channels;
        Rng stem_rng(derive_seed(seed, 1));
        const double bound = 1.0 / std::sqrt(9.0);  // fan-in 1*3*3
        stem_kernel_ = Tensor::uniform({C, 1, 3, 3}, stem_rng, -bound, bound, true);
        stem_bias_ = Tensor({C}, 0.0, true);
        stem_gamma_ = Tensor({C}, 1.0, true);
        stem_beta_ = Tensor({C}, 0.0, true);
        stem_mean_ = Tensor({C}, 0.0);
        stem_var_ = Tensor({C}, 1.0);
        cell_.emplace(config.cell, derive_seed(seed, 2), config.conv_order);
        flat_dim = config.cell.k_nodes * C * config.feature_dim;
    } else {
        vgg_.emplace(config.vgg_width, derive_seed(seed, 2));
        const std::size_t d_out = VggBaselineBlock::output_length(config.feature_dim);
        flat_dim = config.vgg_width * d_out;
    }

    Rng proj_rng(derive_seed(seed, 3));
    proj_weight_ = init_linear_weight(config.projection_dim, flat_dim, proj_rng);
    proj_bias_ = Tensor({config.projection_dim}, 0.0, true);

    for (std::size_t l = 0; l < config.lstm_layers; ++l) {
        const std::size_t in_dim = l == 0 ? config.projection_dim : 2 * config.lstm_hidden;
        Rng fwd_rng(derive_seed(seed, 100 + 2 * l));
        Rng bwd_rng(derive_seed(seed, 101 + 2 * l));
        lstm_.push_back({make_lstm_params(in_dim, config.lstm_hidden, fwd_rng),
                         make_lstm_params(in_dim, config.lstm_hidden, bwd_rng)});
    }
}

Tensor SequenceModel::stem_forward(const Tensor& features, Mode mode,
                                   const std::vector<std::size_t>* time_lengths) {
    if (config_.frontend != FrontendKind::DartsCell) {
        throw ConfigError("stem_forward: model has a VGG frontend, no stem");
    }
    Tensor y = conv2d(features, stem_kernel_, stem_bias_, 1, 1);
    y = relu(y);
    y = batch_norm(y, stem_gamma_, stem_beta_, stem_mean_, stem_var_, mode);
    return time_lengths ? mask_time(y, *time_lengths) : y;
}

std::size_t SequenceModel::frontend_length(std::size_t t) const {
    return config_.frontend == FrontendKind::DartsCell ? t : VggBaselineBlock::output_length(t);
}

EncodedBatch SequenceModel::encode(const Tensor& features, const std::vector<std::size_t>& lengths,
                                   Mode mode) {
    if (features.rank() != 4 || features.dim(1) != 1) {
        throw ShapeError(str("encode: features must be [N,1,T,D], got ", shape_str(features.shape())));
    }
    if (features.dim(3) != config_.feature_dim) {
        throw ShapeError(str("encode: feature dim ", features.dim(3), " does not match model dim ",
                             config_.feature_dim));
    }
    const std::size_t N = features.dim(0);
    if (lengths.size() != N) throw ShapeError(str("encode: ", lengths.size(), " lengths for batch ", N));
    for (std::size_t len : lengths) {
        if (len == 0) throw ShapeError("encode: zero-length utterance");
    }

    Tensor front;
    std::vector<std::size_t> out_lengths = lengths;
    if (config_.frontend == FrontendKind::DartsCell) {
        Tensor stem = stem_forward(features, mode, &lengths);
        front = cell_->forward(stem, mode, &lengths);
    } else {
        front = vgg_->forward(features, mode, &lengths);
        for (auto& l : out_lengths) l = VggBaselineBlock::output_length(l);
    }

    Tensor frames = channels_to_features(front);       // [N, T', C*D']
    Tensor proj = linear(frames, proj_weight_, proj_bias_);  // [N, T', P]

    const std::size_t T = proj.dim(1);
    const std::size_t H = config_.lstm_hidden;
    Tensor layer_in = proj;
    for (auto& layer : lstm_) {
        std::vector<Tensor> fwd_h(T), bwd_h(T);
        Tensor h({N, H}), c({N, H});
        for (std::size_t t = 0; t < T; ++t) {
            auto [h2, c2] = lstm_cell(time_slice(layer_in, t), h, c, layer.fwd);
            h = h2;
            c = c2;
            fwd_h[t] = h;
        }
        // Backward direction carries zero state across padded frames so each
        // utterance starts its recurrence at its own last valid frame.
        h = Tensor({N, H});
        c = Tensor({N, H});
        for (std::size_t t = T; t-- > 0;) {
            auto [h2, c2] = lstm_cell(time_slice(layer_in, t), h, c, layer.bwd);
            bool all_valid = true;
            std::vector<double> valid(N);
            for (std::size_t n = 0; n < N; ++n) {
                valid[n] = t < out_lengths[n] ? 1.0 : 0.0;
                all_valid = all_valid && valid[n] == 1.0;
            }
            h = all_valid ? h2 : rowscale(h2, valid);
            c = all_valid ? c2 : rowscale(c2, valid);
            bwd_h[t] = h;
        }
        layer_in = concat_last(stack_time(fwd_h), stack_time(bwd_h));
    }
    return {layer_in, out_lengths};
}

Tensor SequenceModel::head_forward(const std::string& task_id, const EncodedBatch& enc) {
    TaskHead& th = head(task_id);
    if (th.weight.dim(1) != enc.outputs.dim(2)) {
        throw ShapeError(str("head_forward: head dim ", th.weight.dim(1), " vs encoder dim ",
                             enc.outputs.dim(2)));
    }
    Tensor logits = linear(enc.outputs, th.weight, th.bias);
    return log_softmax_last(logits);
}

TaskHead& SequenceModel::add_head(const std::string& task_id, const std::vector<std::string>& vocab,
                                  std::uint64_t seed) {
    if (vocab.size() < 2) throw ConfigError("add_head: vocabulary needs blank plus at least one label");
    Rng rng(seed);
    TaskHead th;
    th.task_id = task_id;
    th.vocab = vocab;
    th.weight = init_linear_weight(vocab.size(), encoder_dim(), rng);
    th.bias = Tensor({vocab.size()}, 0.0, true);
    heads_[task_id] = std::move(th);
    return heads_[task_id];
}

bool SequenceModel::has_head(const std::string& task_id) const { return heads_.count(task_id) > 0; }

TaskHead& SequenceModel::head(const std::string& task_id) {
    auto it = heads_.find(task_id);
    if (it == heads_.end()) throw ConfigError(str("no head for task ", task_id));
    return it->second;
}

void SequenceModel::drop_head(const std::string& task_id) { heads_.erase(task_id); }

std::vector<NamedTensor> SequenceModel::parameters() const {
    std::vector<NamedTensor> out;
    if (config_.frontend == FrontendKind::DartsCell) {
        out.push_back({"stem.kernel", stem_kernel_});
        out.push_back({"stem.bias", stem_bias_});
        out.push_back({"stem.gamma", stem_gamma_});
        out.push_back({"stem.beta", stem_beta_});
        auto cp = cell_->parameters("cell");
        out.insert(out.end(), cp.begin(), cp.end());
    } else {
        auto vp = vgg_->parameters("vgg");
        out.insert(out.end(), vp.begin(), vp.end());
    }
    out.push_back({"proj.weight", proj_weight_});
    out.push_back({"proj.bias", proj_bias_});
    for (std::size_t l = 0; l < lstm_.size(); ++l) {
        const std::string base = str("lstm.l", l);
        out.push_back({base + ".fwd.w_ih", lstm_[l].fwd.w_ih});
        out.push_back({base + ".fwd.w_hh", lstm_[l].fwd.w_hh});
        out.push_back({base + ".fwd.b_ih", lstm_[l].fwd.b_ih});
        out.push_back({base + ".fwd.b_hh", lstm_[l].fwd.b_hh});
        out.push_back({base + ".bwd.w_ih", lstm_[l].bwd.w_ih});
        out.push_back({base + ".bwd.w_hh", lstm_[l].bwd.w_hh});
        out.push_back({base + ".bwd.b_ih", lstm_[l].bwd.b_ih});
        out.push_back({base + ".bwd.b_hh", lstm_[l].bwd.b_hh});
    }
    for (const auto& [id, th] : heads_) {
        out.push_back({str("head.", id, ".weight"), th.weight});
        out.push_back({str("head.", id, ".bias"), th.bias});
    }
    return out;
}

std::vector<NamedTensor> SequenceModel::alpha_parameters() const {
    std::vector<NamedTensor> out;
    if (!cell_) return out;
    const AlphaTable& table = cell_->alphas();
    for (std::size_t i = 1; i <= table.k_nodes(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            out.push_back({str("alpha.e", i, "_", j), table.alpha(i, j)});
        }
    }
    return out;
}

std::vector<NamedTensor> SequenceModel::buffers() const {
    std::vector<NamedTensor> out;
    if (config_.frontend == FrontendKind::DartsCell) {
        out.push_back({"stem.running_mean", stem_mean_});
        out.push_back({"stem.running_var", stem_var_});
        auto cb = cell_->buffers("cell");
        out.insert(out.end(), cb.begin(), cb.end());
    } else {
        auto vb = vgg_->buffers("vgg");
        out.insert(out.end(), vb.begin(), vb.end());
    }
    return out;
}

std::vector<std::string> SequenceModel::head_ids() const {
    std::vector<std::string> out;
    for (const auto& [id, th] : heads_) out.push_back(id);
    return out;
}

Tensor stem_forward(SequenceModel& model, const Tensor& features, Mode mode) {
    return model.stem_forward(features, mode);
}

EncodedBatch encode(SequenceModel& model, const Tensor& features,
                    const std::vector<std::size_t>& lengths, Mode mode) {
    return model.encode(features, lengths, mode);
}

Tensor head_forward(SequenceModel& model, const std::string& task_id, const EncodedBatch& enc) {
    return model.head_forward(task_id, enc);
}

}  // namespace darts
