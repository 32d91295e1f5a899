#pragma once

#include <string>
#include <vector>

#include "darts/data.hpp"
#include "darts/model.hpp"
#include "darts/serialize.hpp"

namespace darts {

// Dual-optimizer setup: Adam on the architecture parameters, SGD with
// momentum on everything else.
struct OptimizerConfig {
    double alpha_lr = 1e-4;
    double alpha_beta1 = 0.5;
    double alpha_beta2 = 0.999;
    double alpha_decay = 1e-3;  // additive L2 on the gradient
    double alpha_eps = 1e-8;
    double weight_lr = 1e-2;
    double weight_momentum = 0.9;
    double weight_decay = 3e-4;  // decoupled multiplicative shrink
    double clip_norm = 5.0;
    bool clip_enabled = true;

    void validate() const;
};

class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Tensor> params, double lr, double momentum, double decay);
    void step();
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_, momentum_, decay_;
};

class AdamOptimizer {
public:
    // masks: per-parameter keep flags (empty vector = all entries active).
    // Masked entries receive no update and no weight decay.
    AdamOptimizer(std::vector<Tensor> params, std::vector<std::vector<std::uint8_t>> masks, double lr,
                  double beta1, double beta2, double decay, double eps);
    void step();
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<std::uint8_t>> masks_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, decay_, eps_;
    std::int64_t t_ = 0;
};

// Reduce-on-plateau: lr shrinks by `factor` after more than `patience`
// consecutive epochs without strict improvement.
struct PlateauSchedule {
    double factor = 0.2;
    int patience = 3;
    double best = std::numeric_limits<double>::infinity();
    int since_improvement = 0;
    int reductions = 0;

    // Returns true when this epoch triggers a reduction.
    bool update(double val_loss);
};

void plateau_update(PlateauSchedule& sched, double val_loss, SgdOptimizer& weight_opt,
                    AdamOptimizer& alpha_opt);

enum class AdaptationMode { OnlyParam, ArchParam, PrunedArchParam };
AdaptationMode adaptation_mode_from_name(const std::string& name);
std::string adaptation_mode_name(AdaptationMode m);

struct TaskSpec {
    std::string id;
    std::vector<std::string> vocab;
    TaskData data;
};

struct TrainOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::uint64_t seed = 1;
    bool freeze_alphas = false;
    bool bilevel = false;  // DARTS-style alternating alpha/weight batches
    bool sort_by_length = true;
    std::size_t max_lr_reductions = 3;
    std::size_t eval_batch_size = 16;
    std::size_t prune_k = 3;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    std::string task;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr_w = 0.0;
    double lr_alpha = 0.0;
    double cer = 0.0;
};

struct EvalResult {
    double loss = 0.0;
    double cer = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochMetrics> metrics;
};

// One joint step on a single-task minibatch: CTC forward, one backward, SGD
// on weights and Adam on alphas from the same gradients. Throws NumericError
// on a non-finite loss with parameters untouched.
class Trainer {
public:
    Trainer(SequenceModel& model, const OptimizerConfig& opt, const TrainOptions& topt);

    double train_step(const Batch& batch, const std::string& task_id, bool freeze_alphas);
    // Alpha-only step (bilevel alternative path).
    double alpha_step(const Batch& batch, const std::string& task_id);

    std::vector<EpochMetrics> run(const std::vector<TaskSpec>& tasks);

    SgdOptimizer& weight_opt() { return weight_opt_; }
    AdamOptimizer& alpha_opt() { return alpha_opt_; }
    PlateauSchedule& schedule() { return sched_; }

private:
    Tensor batch_loss(const Batch& batch, const std::string& task_id, Mode mode);
    void zero_all_grads();

    SequenceModel& model_;
    OptimizerConfig opt_;
    TrainOptions topt_;
    std::vector<Tensor> weight_params_;
    std::vector<Tensor> alpha_params_;
    SgdOptimizer weight_opt_;
    AdamOptimizer alpha_opt_;
    PlateauSchedule sched_;
};

EvalResult evaluate(SequenceModel& model, const TaskSpec& task, const UtteranceSet& split,
                    std::size_t batch_size = 16);

// Round-robin minibatch interleaving across source tasks; the shared encoder
// and alphas see every task, each head only its own.
TrainResult pretrain_multitask(SequenceModel& model, const std::vector<TaskSpec>& tasks,
                               const OptimizerConfig& opt, const TrainOptions& topt);

// Loads the checkpoint, re-initializes the target head, applies the
// adaptation mode, then trains on the target task.
TrainResult adapt(const Checkpoint& ckpt, const TaskSpec& target, AdaptationMode mode,
                  const OptimizerConfig& opt, const TrainOptions& topt);

Checkpoint make_checkpoint(const SequenceModel& model);
SequenceModel model_from_checkpoint(const Checkpoint& ckpt);

std::string metrics_to_jsonl(const std::vector<EpochMetrics>& metrics);
std::string metrics_to_csv(const std::vector<EpochMetrics>& metrics);

}  // namespace darts
