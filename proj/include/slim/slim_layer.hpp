#pragma once

#include <optional>
#include <string>
#include <vector>

#include "slim/lora.hpp"
#include "slim/routing.hpp"

namespace slim {

enum class IdentityMode { Residual, Zero };
enum class RouteOverride { None, AllIdentity };
enum class Mode { Train, Infer };

struct SlimLayerConfig {
    int64_t d_in = 64;
    int64_t d_out = 64;
    int64_t n_identity = 2;
    int64_t n_lora = 8;
    int64_t rank = 8;
    int64_t top_k = 2;
    double mask_rate = 0.5;  // element drop rate p
    int64_t n_clusters = 8;
    double momentum = 0.99;
    double l1_coeff = 1e-4;
    IdentityMode identity_mode = IdentityMode::Residual;
    bool paper_masking_formula = false;
    bool yield_enabled = true;
    double yield_offset = 3.0;
    double yield_clamp = 1e-4;
    RouteOverride route_override = RouteOverride::None;

    int64_t n_experts() const { return n_identity + n_lora; }
    void validate() const;
};

// Named parameter handle; layers and models expose their tensors through it.
struct NamedParam {
    std::string name;
    Tensor* value;
};
using ParamRegistry = std::vector<NamedParam>;

// Per-forward context threaded through the model.
struct ForwardCtx {
    Mode mode = Mode::Infer;
    Rng* rng = nullptr;             // Train mode: mask sampling
    int64_t tokens_per_sample = 1;  // rows per sample for pooling
    // Trainable leaves registered during this forward (name -> Var).
    std::vector<std::pair<std::string, Var>>* params_out = nullptr;
    // Adapter (B, A) leaves for the L1 term.
    std::vector<std::pair<Var, Var>>* adapter_vars = nullptr;
    // Fixed masks per LoRA expert (gradient checking); overrides sampling.
    const std::vector<MaskSpec>* mask_override = nullptr;
    bool freeze_clusters = false;  // keep cluster state fixed in Train mode
    // Selection counts per expert, accumulated when non-null.
    std::vector<int64_t>* selection_counts = nullptr;
};

// Base linear y = x*W + b with W frozen or trainable depending on use.
struct Linear {
    Tensor weight;  // [d_in x d_out]
    Tensor bias;    // [d_out]
    static Linear init(int64_t d_in, int64_t d_out, Rng& rng, double std);
};

Var linear_forward(Tape& t, Var w, Var b, Var x);

// Full mixture layer: frozen base linear, identity experts first then LoRA
// experts, router, sliding clusters, per-expert inference masks.
class SlimLayer {
  public:
    SlimLayerConfig cfg;
    std::string name;
    Tensor weight;  // frozen
    Tensor bias;    // frozen
    std::vector<LoraAdapter> adapters;
    Router router;
    SlidingClusters clusters;
    std::vector<MaskSpec> inference_masks;
    std::vector<uint64_t> inference_mask_seeds;

    static SlimLayer attach(const SlimLayerConfig& cfg, std::string name, const Linear& base,
                            uint64_t seed);

    Var forward(Tape& t, Var x, ForwardCtx& ctx);
    void trainable_params(ParamRegistry& out);
    void state_tensors(ParamRegistry& out);  // trainables + cluster state
    void rebuild_inference_masks();
};

// Plain LoRA fine-tuning layer (baseline arm).
class LoraBaselineLayer {
  public:
    std::string name;
    Tensor weight;
    Tensor bias;
    LoraAdapter adapter;

    static LoraBaselineLayer attach(int64_t rank, std::string name, const Linear& base, uint64_t seed);
    Var forward(Tape& t, Var x, ForwardCtx& ctx);
    void trainable_params(ParamRegistry& out);
};

// MixLoRA-style baseline: top-2 gate over LoRA experts, no identity experts,
// no clustering, no masking.
class MixLoraBaselineLayer {
  public:
    std::string name;
    Tensor weight;
    Tensor bias;
    std::vector<LoraAdapter> adapters;
    Router router;

    static MixLoraBaselineLayer attach(int64_t n_experts, int64_t rank, std::string name,
                                       const Linear& base, uint64_t seed);
    Var forward(Tape& t, Var x, ForwardCtx& ctx);
    void trainable_params(ParamRegistry& out);
};

// Free-function forms of the baseline forwards.
Var lora_baseline_forward(Tape& t, Var w, Var b, Var b_down, Var a_up, Var x);
Var mixlora_baseline_forward(Tape& t, Var w, Var b, const std::vector<std::pair<Var, Var>>& adapters,
                             Var gate, Var x);

// task_loss + l1_coeff * l1_penalty(adapters); returns task_loss when the
// coefficient is zero or no adapters are given.
Var training_loss(Tape& t, Var task_loss, const std::vector<std::pair<Var, Var>>& adapters,
                  double l1_coeff);

}  // namespace slim
