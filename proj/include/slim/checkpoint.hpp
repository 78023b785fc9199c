#pragma once

#include <array>
#include <filesystem>

#include "slim/model.hpp"
#include "slim/tasks.hpp"
#include "slim/train.hpp"

#include <json.hpp>

namespace slim {

// Configuration or file problems that map to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TaskConfig {
    TaskKind kind = TaskKind::KvRecall;
    uint64_t seed = 0;
    int64_t n_train = 4096;
    int64_t n_test = 1024;

    SyntheticTask instantiate(int64_t seq_len) const {
        return SyntheticTask{kind, seed, n_train, n_test, seq_len};
    }
};

// The full experiment configuration, a strict JSON document: unknown keys are
// rejected with the offending path, and schema_version is checked on load.
struct RunConfig {
    static constexpr int kSchemaVersion = 1;

    Method method = Method::Slim;
    TinyModelConfig model;
    TaskConfig general{TaskKind::KvRecall, 101, 8192, 1024};
    TaskConfig downstream{TaskKind::SeqClass, 202, 4096, 1024};
    SlimLayerConfig slim;  // d_in/d_out follow the model width
    int64_t lora_rank = 16;
    MixLoraParams mixlora;
    TrainConfig train;

    static RunConfig defaults() { return RunConfig{}; }
    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    // ConfigError names the path when missing/invalid.
    static RunConfig load_file(const std::filesystem::path& path);
    void validate() const;
};

// FNV-1a over the canonical (sorted-key) JSON dump.
std::string config_hash(const RunConfig& cfg);

// Checkpoint = JSON manifest + one little-endian f64 blob in manifest order.
struct CheckpointPaths {
    std::filesystem::path manifest;
    std::filesystem::path blob;
};
CheckpointPaths checkpoint_paths(const std::filesystem::path& dir_or_manifest);

void save_checkpoint(const std::filesystem::path& dir, TinyModel& model, const RunConfig& cfg,
                     const std::array<uint64_t, 4>& rng_state);

// Rebuilds the model from a manifest (+ blob). When expect_cfg is non-null
// its hash must match the stored config hash.
TinyModel load_checkpoint(const std::filesystem::path& dir_or_manifest, RunConfig* cfg_out,
                          std::array<uint64_t, 4>* rng_state_out = nullptr,
                          const RunConfig* expect_cfg = nullptr);

}  // namespace slim
