#pragma once

#include <functional>
#include <iosfwd>

#include "slim/model.hpp"
#include "slim/optim.hpp"
#include "slim/tasks.hpp"

namespace slim {

// Training aborted because the loss went non-finite.
struct DivergenceError : std::runtime_error {
    int64_t step;
    explicit DivergenceError(int64_t s)
        : std::runtime_error("loss diverged (non-finite) at step " + std::to_string(s)), step(s) {}
};

struct TrainConfig {
    int64_t batch = 16;
    int64_t pretrain_steps = 5000;
    double early_stop_acc = 0.97;  // stop pretraining at this held-out accuracy
    int64_t finetune_epochs = 2;
    double lr_pretrain = 3e-4;
    double lr_finetune = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    int64_t eval_every = 50;    // fine-tune eval cadence (steps)
    int64_t eval_subset = 256;  // examples per mid-run eval (0 = full split)
    int64_t log_every = 25;

    void validate() const;
};

// One JSON-lines record per logged step.
struct MetricsSink {
    std::ostream* stream = nullptr;  // owned by caller
    bool quiet = true;
    void log(int64_t step, const std::string& arm, uint64_t seed, double loss, double downstream_acc,
             double general_acc, double ms_per_step);  // pass NaN for absent accuracies
};

struct ExperimentResult {
    std::string arm;
    uint64_t seed = 0;
    int64_t steps = 0;
    double downstream_acc = 0.0;
    double general_acc_before = 0.0;
    double general_acc_after = 0.0;
    double retention = 0.0;  // after / before
    double auc_general = 0.0;  // mean of general accuracy over eval points
    double ms_per_step = 0.0;  // median
    std::string to_json() const;
};

// Exact-match accuracy with argmax restricted to the example's candidate
// answers. Pure inference: clusters frozen, fixed masks, no tape gradients.
double evaluate(TinyModel& model, const SyntheticTask& task, Split split, int64_t subset = 0);

// Trains the base model (no adapters) on the general task; returns final
// held-out accuracy. Early-stops once the held-out accuracy reaches
// cfg.early_stop_acc at an eval point. When rng_state_out is non-null it
// receives the final training RNG state (for the checkpoint manifest).
double pretrain(TinyModel& model, const SyntheticTask& general, const TrainConfig& cfg, uint64_t seed,
                MetricsSink& sink, std::array<uint64_t, 4>* rng_state_out = nullptr);

// Fine-tunes adapters/router/clusters on the downstream task, logging
// downstream and general accuracy during training.
ExperimentResult finetune(TinyModel& model, const SyntheticTask& downstream,
                          const SyntheticTask& general, const TrainConfig& cfg, double l1_coeff,
                          uint64_t seed, const std::string& arm, MetricsSink& sink,
                          std::array<uint64_t, 4>* rng_state_out = nullptr);

}  // namespace slim
