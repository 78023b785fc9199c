#pragma once

#include <optional>

#include "slim/slim_layer.hpp"

namespace slim {

enum class Method { None, Slim, Lora, MixLora };

const char* method_name(Method m);
std::optional<Method> parse_method(const std::string& s);

struct TinyModelConfig {
    int64_t vocab = 96;
    int64_t d_model = 64;
    int64_t n_layers = 2;
    int64_t n_heads = 4;
    int64_t seq_len = 32;
    double init_std = 0.08;

    void validate() const;
};

// A feed-forward projection that is a plain linear during pretraining and may
// be replaced by an adapted layer for fine-tuning. The base weights keep
// their names either way.
struct FfnLinear {
    Method method = Method::None;
    std::string name;
    Linear plain;
    std::optional<SlimLayer> slim;
    std::optional<LoraBaselineLayer> lora;
    std::optional<MixLoraBaselineLayer> mixlora;

    Var forward(Tape& t, Var x, ForwardCtx& ctx, bool train_base);
    Tensor& weight();
    Tensor& bias();
    const Tensor& weight() const { return const_cast<FfnLinear*>(this)->weight(); }
    const Tensor& bias() const { return const_cast<FfnLinear*>(this)->bias(); }
};

struct MixLoraParams {
    int64_t n_experts = 8;
    int64_t rank = 8;
};

// Two-layer-style causal transformer: token+position embeddings, pre-norm
// attention and feed-forward blocks (square inner width so the projections
// admit identity experts), RMS norms, linear head.
class TinyModel {
  public:
    TinyModelConfig cfg;
    Tensor tok_emb;  // [V x d]
    Tensor pos_emb;  // [T x d]
    struct Block {
        Tensor ln1_g;
        Tensor wq, wk, wv, wo;  // [d x d]
        Tensor ln2_g;
        FfnLinear ffn1, ffn2;
    };
    std::vector<Block> blocks;
    Tensor lnf_g;
    Tensor head_w;  // [d x V]
    Tensor head_b;  // [V]

    static TinyModel init(const TinyModelConfig& cfg, uint64_t seed);

    // tokens.size() == n_samples * seq_len; returns logits [n*T x V].
    Var forward(Tape& t, const std::vector<int32_t>& tokens, int64_t n_samples, ForwardCtx& ctx);

    Method method() const { return method_; }
    bool finetuning() const { return method_ != Method::None; }

    // Replaces the square FFN projections with the chosen adapted layer;
    // attention projections are left untouched.
    void attach_adapters(Method m, const SlimLayerConfig& slim_cfg, int64_t lora_rank,
                         const MixLoraParams& mix, uint64_t seed);

    // Parameters receiving gradient updates in the current phase.
    void trainable_params(ParamRegistry& out);
    // Every tensor that belongs in a checkpoint, each exactly once.
    void all_tensors(ParamRegistry& out);
    // Base (pretrained) tensors only — frozen during fine-tuning.
    void base_tensors(ParamRegistry& out);

    void set_cluster_updates(bool enabled);
    bool has_cluster_state() const { return method_ == Method::Slim; }
    std::vector<SlimLayer*> slim_layers();

  private:
    Method method_ = Method::None;
};

}  // namespace slim
