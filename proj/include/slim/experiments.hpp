#pragma once

#include <filesystem>

#include "slim/checkpoint.hpp"

namespace slim {

// One fine-tuning run per (arm, seed); pretrained checkpoints are produced
// once per seed and shared by every arm.

struct ArmSpec {
    std::string name;
    Method method = Method::Slim;
    // Applied on top of the run config for ablation/sweep arms.
    std::function<void(SlimLayerConfig&)> tweak;
};

struct ArmAggregate {
    std::string arm;
    double downstream_mean = 0.0, downstream_std = 0.0;
    double general_mean = 0.0, general_std = 0.0;
    double retention_mean = 0.0, retention_std = 0.0;
    double auc_mean = 0.0;
    std::vector<ExperimentResult> runs;
};

struct ExperimentTable {
    std::vector<ArmAggregate> arms;
    const ArmAggregate& by_name(const std::string& n) const;
};

// Reads SLIM_THREADS (>=1; default 1): experiment arms run on that many
// threads, each owning its model, tape, and RNG streams.
int experiment_threads();

// Pretrains (or reuses) the seed's base checkpoint under cache_dir.
std::filesystem::path ensure_pretrained(const RunConfig& cfg, uint64_t seed,
                                        const std::filesystem::path& cache_dir, bool quiet);

// Fine-tunes every arm for every seed from shared pretrained checkpoints and
// writes metrics_<arm>_seed<N>.jsonl plus result_<arm>_seed<N>.json.
ExperimentTable run_arms(const RunConfig& cfg, const std::vector<ArmSpec>& arms,
                         const std::vector<uint64_t>& seeds, const std::filesystem::path& out_dir,
                         bool quiet);

// The three method arms of the forgetting comparison.
ExperimentTable run_forgetting(const RunConfig& cfg, const std::vector<uint64_t>& seeds,
                               const std::filesystem::path& out_dir, bool quiet);

// Toggle arms: mixlora_equiv, iden, iden_yield, full.
ExperimentTable run_ablation(const RunConfig& cfg, const std::vector<uint64_t>& seeds,
                             const std::filesystem::path& out_dir, bool quiet);

// Mask-rate sweep of the full arm.
ExperimentTable run_sweep(const RunConfig& cfg, const std::vector<double>& rates,
                          const std::vector<uint64_t>& seeds, const std::filesystem::path& out_dir,
                          bool quiet);

void write_runs_csv(const ExperimentTable& table, const std::filesystem::path& path);
void write_summary_csv(const ExperimentTable& table, const std::filesystem::path& path);

}  // namespace slim
