#include "darts/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

namespace darts {

using ordered_json = nlohmann::ordered_json;

void OptimizerConfig::validate() const {
    if (alpha_lr <= 0.0 || weight_lr <= 0.0) throw ConfigError("optimizer lrs must be > 0");
    if (alpha_decay < 0.0 || weight_decay < 0.0) throw ConfigError("weight decays must be >= 0");
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double lr, double momentum, double decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), decay_(decay) {
    velocity_.reserve(params_.size());
    for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void SgdOptimizer::step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        auto& vel = velocity_[i];
        const auto& g = p.grad();
        const double shrink = 1.0 - lr_ * decay_;
        for (std::size_t k = 0; k < vel.size(); ++k) {
            vel[k] = momentum_ * vel[k] + g[k];
            p[k] = p[k] * shrink - lr_ * vel[k];
        }
    }
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, std::vector<std::vector<std::uint8_t>> masks,
                             double lr, double beta1, double beta2, double decay, double eps)
    : params_(std::move(params)),
      masks_(std::move(masks)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      decay_(decay),
      eps_(eps) {
    if (!masks_.empty() && masks_.size() != params_.size()) {
        throw ConfigError("AdamOptimizer: mask count does not match parameter count");
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamOptimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        const auto& g = p.grad();
        const std::vector<std::uint8_t>* mask =
            masks_.empty() || masks_[i].empty() ? nullptr : &masks_[i];
        for (std::size_t k = 0; k < g.size(); ++k) {
            if (mask && !(*mask)[k]) continue;  // pruned entries: no decay, no update
            const double grad = g[k] + decay_ * p[k];
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * grad;
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * grad * grad;
            const double mhat = m_[i][k] / bc1;
            const double vhat = v_[i][k] / bc2;
            p[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

// ---------------------------------------------------------------------------
// Plateau schedule
// ---------------------------------------------------------------------------

bool PlateauSchedule::update(double val_loss) {
    if (val_loss < best) {
        best = val_loss;
        since_improvement = 0;
        return false;
    }
    ++since_improvement;
    if (since_improvement > patience) {
        since_improvement = 0;
        ++reductions;
        return true;
    }
    return false;
}

void plateau_update(PlateauSchedule& sched, double val_loss, SgdOptimizer& weight_opt,
                    AdamOptimizer& alpha_opt) {
    if (sched.update(val_loss)) {
        weight_opt.set_lr(weight_opt.lr() * sched.factor);
        alpha_opt.set_lr(alpha_opt.lr() * sched.factor);
    }
}

AdaptationMode adaptation_mode_from_name(const std::string& name) {
    if (name == "only-param") return AdaptationMode::OnlyParam;
    if (name == "arch-param") return AdaptationMode::ArchParam;
    if (name == "pruned") return AdaptationMode::PrunedArchParam;
    throw ConfigError(str("unknown adaptation mode: ", name, " (expected only-param|arch-param|pruned)"));
}

std::string adaptation_mode_name(AdaptationMode m) {
    switch (m) {
        case AdaptationMode::OnlyParam: return "only-param";
        case AdaptationMode::ArchParam: return "arch-param";
        case AdaptationMode::PrunedArchParam: return "pruned";
    }
    throw Error("adaptation_mode_name: bad mode");
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

std::vector<Tensor> strip_names(const std::vector<NamedTensor>& named) {
    std::vector<Tensor> out;
    out.reserve(named.size());
    for (const auto& nt : named) out.push_back(nt.tensor);
    return out;
}

std::vector<std::vector<std::uint8_t>> alpha_masks(const SequenceModel& model) {
    std::vector<std::vector<std::uint8_t>> masks;
    const SupernetCell* cell = model.cell();
    if (!cell) return masks;
    const AlphaTable& t = cell->alphas();
    for (std::size_t e = 0; e < t.edge_count(); ++e) masks.push_back(t.mask_at(e));
    return masks;
}

std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

Trainer::Trainer(SequenceModel& model, const OptimizerConfig& opt, const TrainOptions& topt)
    : model_(model),
      opt_(opt),
      topt_(topt),
      weight_params_(strip_names(model.parameters())),
      alpha_params_(strip_names(model.alpha_parameters())),
      weight_opt_(weight_params_, opt.weight_lr, opt.weight_momentum, opt.weight_decay),
      alpha_opt_(alpha_params_, alpha_masks(model), opt.alpha_lr, opt.alpha_beta1, opt.alpha_beta2,
                 opt.alpha_decay, opt.alpha_eps) {
    opt.validate();
}

Tensor Trainer::batch_loss(const Batch& batch, const std::string& task_id, Mode mode) {
    EncodedBatch enc = model_.encode(batch.features, batch.lengths, mode);
    Tensor logp = model_.head_forward(task_id, enc);
    std::vector<Tensor> losses;
    losses.reserve(batch.labels.size());
    for (std::size_t u = 0; u < batch.labels.size(); ++u) {
        Tensor rows = slice_frames(logp, u, enc.lengths[u]);
        losses.push_back(ctc_loss(rows, batch.labels[u]));
    }
    return mean_scalars(losses);
}

void Trainer::zero_all_grads() {
    for (Tensor& p : weight_params_) p.zero_grad();
    for (Tensor& p : alpha_params_) p.zero_grad();
}

double Trainer::train_step(const Batch& batch, const std::string& task_id, bool freeze_alphas) {
    Tape tape;
    Tensor loss = batch_loss(batch, task_id, Mode::Train);
    const double loss_v = loss.value();
    if (!std::isfinite(loss_v)) {
        throw NumericError(str("non-finite training loss ", loss_v, " (first utterance ",
                               batch.ids.empty() ? "?" : batch.ids.front(), ")"));
    }
    backward(loss);

    if (opt_.clip_enabled) {
        double sq = 0.0;
        for (Tensor& p : weight_params_) {
            for (double g : p.grad()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > opt_.clip_norm) {
            const double s = opt_.clip_norm / norm;
            for (Tensor& p : weight_params_) {
                for (double& g : p.grad()) g *= s;
            }
        }
    }

    weight_opt_.step();
    if (!freeze_alphas && !alpha_params_.empty()) alpha_opt_.step();
    zero_all_grads();
    return loss_v;
}

double Trainer::alpha_step(const Batch& batch, const std::string& task_id) {
    if (alpha_params_.empty()) return 0.0;
    Tape tape;
    Tensor loss = batch_loss(batch, task_id, Mode::Train);
    const double loss_v = loss.value();
    if (!std::isfinite(loss_v)) {
        throw NumericError(str("non-finite loss in alpha step (first utterance ",
                               batch.ids.empty() ? "?" : batch.ids.front(), ")"));
    }
    backward(loss);
    alpha_opt_.step();
    zero_all_grads();
    return loss_v;
}

std::vector<EpochMetrics> Trainer::run(const std::vector<TaskSpec>& tasks) {
    if (tasks.empty()) throw ConfigError("training requires at least one task");
    std::vector<EpochMetrics> all_metrics;

    for (std::size_t epoch = 1; epoch <= topt_.epochs; ++epoch) {
        std::vector<std::vector<Batch>> task_batches;
        std::vector<std::vector<Batch>> val_batches;  // bilevel alpha batches
        for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
            const std::uint64_t s = derive_seed(topt_.seed ^ hash_str(tasks[ti].id), epoch);
            task_batches.push_back(
                make_batches(tasks[ti].data.train, topt_.batch_size, s, topt_.sort_by_length));
            if (topt_.bilevel) {
                val_batches.push_back(make_batches(tasks[ti].data.val, topt_.batch_size,
                                                   derive_seed(s, 9), topt_.sort_by_length));
            }
        }

        std::vector<double> task_loss_sum(tasks.size(), 0.0);
        std::vector<std::size_t> task_steps(tasks.size(), 0);
        std::size_t max_batches = 0;
        for (const auto& tb : task_batches) max_batches = std::max(max_batches, tb.size());

        for (std::size_t r = 0; r < max_batches; ++r) {
            for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
                if (r >= task_batches[ti].size()) continue;
                try {
                    if (topt_.bilevel && !val_batches[ti].empty()) {
                        alpha_step(val_batches[ti][r % val_batches[ti].size()], tasks[ti].id);
                    }
                    const bool freeze = topt_.freeze_alphas || topt_.bilevel;
                    task_loss_sum[ti] += train_step(task_batches[ti][r], tasks[ti].id, freeze);
                    ++task_steps[ti];
                } catch (const NumericError& ex) {
                    throw NumericError(str("epoch ", epoch, " task ", tasks[ti].id, " batch ", r, ": ",
                                           ex.what()));
                }
            }
        }

        double val_sum = 0.0;
        for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
            EvalResult ev = evaluate(model_, tasks[ti], tasks[ti].data.val, topt_.eval_batch_size);
            if (!std::isfinite(ev.loss)) {
                throw NumericError(str("non-finite validation loss at epoch ", epoch, " task ",
                                       tasks[ti].id));
            }
            val_sum += ev.loss;
            EpochMetrics m;
            m.epoch = epoch;
            m.task = tasks[ti].id;
            m.train_loss = task_steps[ti] ? task_loss_sum[ti] / static_cast<double>(task_steps[ti]) : 0.0;
            m.val_loss = ev.loss;
            m.lr_w = weight_opt_.lr();
            m.lr_alpha = alpha_opt_.lr();
            m.cer = ev.cer;
            all_metrics.push_back(std::move(m));
        }

        plateau_update(sched_, val_sum / static_cast<double>(tasks.size()), weight_opt_, alpha_opt_);
        if (sched_.reductions >= static_cast<int>(topt_.max_lr_reductions)) break;
    }
    return all_metrics;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate(SequenceModel& model, const TaskSpec& task, const UtteranceSet& split,
                    std::size_t batch_size) {
    if (split.items.empty()) throw Error(str("evaluate: empty split for task ", task.id));
    NoGradGuard guard;
    double loss_sum = 0.0;
    std::size_t edit_sum = 0, ref_sum = 0;
    const auto batches = make_batches(split, batch_size, 0, true);
    for (const Batch& b : batches) {
        EncodedBatch enc = model.encode(b.features, b.lengths, Mode::Eval);
        Tensor logp = model.head_forward(task.id, enc);
        for (std::size_t u = 0; u < b.labels.size(); ++u) {
            Tensor rows = slice_frames(logp, u, enc.lengths[u]);
            loss_sum += ctc_loss(rows, b.labels[u]).value();
            const LabelSequence hyp = greedy_decode(rows);
            edit_sum += edit_distance(hyp, b.labels[u]);
            ref_sum += b.labels[u].size();
        }
    }
    EvalResult out;
    out.loss = loss_sum / static_cast<double>(split.items.size());
    out.cer = ref_sum == 0 ? 0.0 : 100.0 * static_cast<double>(edit_sum) / static_cast<double>(ref_sum);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

std::string frontend_name(FrontendKind f) { return f == FrontendKind::DartsCell ? "darts" : "vgg"; }

FrontendKind frontend_from_name(const std::string& s) {
    if (s == "darts") return FrontendKind::DartsCell;
    if (s == "vgg") return FrontendKind::Vgg;
    throw ConfigError(str("unknown frontend: ", s));
}

}  // namespace

Checkpoint make_checkpoint(const SequenceModel& model) {
    Checkpoint ckpt;
    for (const auto& nt : model.parameters()) ckpt.tensors[nt.name] = nt.tensor;
    for (const auto& nt : model.alpha_parameters()) ckpt.tensors[nt.name] = nt.tensor;
    for (const auto& nt : model.buffers()) ckpt.tensors[nt.name] = nt.tensor;

    const ModelConfig& c = model.config();
    ordered_json meta;
    meta["model"]["frontend"] = frontend_name(c.frontend);
    meta["model"]["k"] = c.cell.k_nodes;
    meta["model"]["channels"] = c.cell.channels;
    ordered_json cands = ordered_json::array();
    for (TransformationKind k : c.cell.candidates) cands.push_back(kind_name(k));
    meta["model"]["candidates"] = cands;
    meta["model"]["vgg_width"] = c.vgg_width;
    meta["model"]["lstm_layers"] = c.lstm_layers;
    meta["model"]["lstm_hidden"] = c.lstm_hidden;
    meta["model"]["feature_dim"] = c.feature_dim;
    meta["model"]["projection_dim"] = c.projection_dim;
    meta["model"]["conv_order"] = c.conv_order == ConvOrder::ConvReluBn ? "conv_relu_bn" : "relu_conv_bn";

    ordered_json masks = ordered_json::array();
    if (const SupernetCell* cell = model.cell()) {
        const AlphaTable& t = cell->alphas();
        for (std::size_t e = 0; e < t.edge_count(); ++e) {
            ordered_json row = ordered_json::array();
            for (std::uint8_t m : t.mask_at(e)) row.push_back(m != 0);
            masks.push_back(row);
        }
    }
    meta["masks"] = masks;

    ordered_json heads = ordered_json::array();
    SequenceModel& mutable_model = const_cast<SequenceModel&>(model);
    for (const std::string& id : model.head_ids()) {
        ordered_json h;
        h["id"] = id;
        h["vocab"] = mutable_model.head(id).vocab;
        heads.push_back(h);
    }
    meta["heads"] = heads;
    ckpt.meta_json = meta.dump();
    return ckpt;
}

SequenceModel model_from_checkpoint(const Checkpoint& ckpt) {
    ordered_json meta;
    try {
        meta = ordered_json::parse(ckpt.meta_json);
    } catch (const std::exception& ex) {
        throw IoError(str("checkpoint trailer parse error: ", ex.what()));
    }
    const auto& jm = meta.at("model");
    ModelConfig cfg;
    cfg.frontend = frontend_from_name(jm.at("frontend").get<std::string>());
    cfg.cell.k_nodes = jm.at("k").get<std::size_t>();
    cfg.cell.channels = jm.at("channels").get<std::size_t>();
    cfg.cell.candidates.clear();
    for (const auto& name : jm.at("candidates")) {
        cfg.cell.candidates.push_back(kind_from_name(name.get<std::string>()));
    }
    cfg.vgg_width = jm.at("vgg_width").get<std::size_t>();
    cfg.lstm_layers = jm.at("lstm_layers").get<std::size_t>();
    cfg.lstm_hidden = jm.at("lstm_hidden").get<std::size_t>();
    cfg.feature_dim = jm.at("feature_dim").get<std::size_t>();
    cfg.projection_dim = jm.at("projection_dim").get<std::size_t>();
    cfg.conv_order = jm.at("conv_order").get<std::string>() == "relu_conv_bn" ? ConvOrder::ReluConvBn
                                                                              : ConvOrder::ConvReluBn;

    SequenceModel model(cfg, 0);
    for (const auto& h : meta.at("heads")) {
        model.add_head(h.at("id").get<std::string>(), h.at("vocab").get<std::vector<std::string>>(), 0);
    }

    auto load_all = [&ckpt](const std::vector<NamedTensor>& targets) {
        for (const auto& nt : targets) {
            auto it = ckpt.tensors.find(nt.name);
            if (it == ckpt.tensors.end()) throw IoError(str("checkpoint missing tensor ", nt.name));
            if (it->second.shape() != nt.tensor.shape()) {
                throw IoError(str("checkpoint tensor ", nt.name, " has shape ",
                                  shape_str(it->second.shape()), ", model expects ",
                                  shape_str(nt.tensor.shape())));
            }
            const_cast<Tensor&>(nt.tensor).data() = it->second.data();
        }
    };
    load_all(model.parameters());
    load_all(model.alpha_parameters());
    load_all(model.buffers());

    if (SupernetCell* cell = model.cell()) {
        const auto& jmask = meta.at("masks");
        AlphaTable table = cell->alphas().deep_clone();
        if (jmask.size() != table.edge_count()) throw IoError("checkpoint mask table has wrong edge count");
        for (std::size_t e = 0; e < table.edge_count(); ++e) {
            auto& m = table.mask_at(e);
            if (jmask[e].size() != m.size()) throw IoError("checkpoint mask row has wrong width");
            for (std::size_t f = 0; f < m.size(); ++f) m[f] = jmask[e][f].get<bool>() ? 1 : 0;
        }
        cell->set_alphas(std::move(table));
        // set_alphas replaced the tensors the records were loaded into; the
        // clone copied the loaded values, so nothing is lost.
    }
    return model;
}

// ---------------------------------------------------------------------------
// Pre-training and adaptation
// ---------------------------------------------------------------------------

TrainResult pretrain_multitask(SequenceModel& model, const std::vector<TaskSpec>& tasks,
                               const OptimizerConfig& opt, const TrainOptions& topt) {
    if (tasks.empty()) throw ConfigError("pretrain_multitask: task list is empty");
    for (const TaskSpec& t : tasks) {
        if (!model.has_head(t.id)) {
            model.add_head(t.id, t.vocab, derive_seed(topt.seed, hash_str(t.id)));
        }
    }
    Trainer trainer(model, opt, topt);
    TrainResult result;
    result.metrics = trainer.run(tasks);
    result.checkpoint = make_checkpoint(model);
    return result;
}

TrainResult adapt(const Checkpoint& ckpt, const TaskSpec& target, AdaptationMode mode,
                  const OptimizerConfig& opt, const TrainOptions& topt) {
    SequenceModel model = model_from_checkpoint(ckpt);

    // The dataset must fit the head it will train against.
    const int max_label = static_cast<int>(target.vocab.size()) - 1;
    for (const UtteranceSet* split : {&target.data.train, &target.data.val, &target.data.test}) {
        for (const Utterance& u : split->items) {
            for (int l : u.labels) {
                if (l < 1 || l > max_label) {
                    throw ConfigError(str("adapt: label ", l, " in utterance ", u.id,
                                          " does not fit the ", target.vocab.size(),
                                          "-entry vocabulary of task ", target.id));
                }
            }
        }
    }

    // Head is always trained from scratch.
    if (model.has_head(target.id)) model.drop_head(target.id);
    model.add_head(target.id, target.vocab, derive_seed(topt.seed, hash_str(target.id) ^ 0xADA97ULL));

    TrainOptions run_opt = topt;
    if (mode == AdaptationMode::OnlyParam) run_opt.freeze_alphas = true;
    if (mode == AdaptationMode::PrunedArchParam) {
        if (SupernetCell* cell = model.cell()) {
            cell->set_alphas(prune_top_k(cell->alphas(), topt.prune_k));
        }
    }

    Trainer trainer(model, opt, run_opt);
    TrainResult result;
    result.metrics = trainer.run({target});
    result.checkpoint = make_checkpoint(model);
    return result;
}

// ---------------------------------------------------------------------------
// Metrics serialization
// ---------------------------------------------------------------------------

std::string metrics_to_jsonl(const std::vector<EpochMetrics>& metrics) {
    std::string out;
    for (const EpochMetrics& m : metrics) {
        ordered_json j;
        j["epoch"] = m.epoch;
        j["task"] = m.task;
        j["train_loss"] = m.train_loss;
        j["val_loss"] = m.val_loss;
        j["lr_w"] = m.lr_w;
        j["lr_alpha"] = m.lr_alpha;
        j["cer"] = m.cer;
        out += j.dump() + "\n";
    }
    return out;
}

std::string metrics_to_csv(const std::vector<EpochMetrics>& metrics) {
    std::string out = "epoch,task,train_loss,val_loss,lr_w,lr_alpha,cer\n";
    for (const EpochMetrics& m : metrics) {
        ordered_json row = {m.train_loss, m.val_loss, m.lr_w, m.lr_alpha, m.cer};
        out += str(m.epoch, ",", m.task, ",", row[0].dump(), ",", row[1].dump(), ",", row[2].dump(), ",",
                   row[3].dump(), ",", row[4].dump(), "\n");
    }
    return out;
}

}  // namespace darts
