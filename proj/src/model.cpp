#include "slim/model.hpp"

namespace slim {

const char* method_name(Method m) {
    switch (m) {
        case Method::None: return "none";
        case Method::Slim: return "slim";
        case Method::Lora: return "lora";
        case Method::MixLora: return "mixlora";
    }
    return "?";
}

std::optional<Method> parse_method(const std::string& s) {
    if (s == "slim") return Method::Slim;
    if (s == "lora") return Method::Lora;
    if (s == "mixlora") return Method::MixLora;
    if (s == "none") return Method::None;
    return std::nullopt;
}

void TinyModelConfig::validate() const {
    if (vocab < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || seq_len < 2) {
        throw std::invalid_argument("model config extents out of range");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("d_model " + std::to_string(d_model) + " not divisible by " +
                                    std::to_string(n_heads) + " heads");
    }
    if (init_std <= 0.0) throw std::invalid_argument("init_std must be positive");
}

Var FfnLinear::forward(Tape& t, Var x, ForwardCtx& ctx, bool train_base) {
    switch (method) {
        case Method::None: {
            Var w = t.leaf(plain.weight, train_base);
            Var b = t.leaf(plain.bias, train_base);
            if (train_base && ctx.params_out) {
                ctx.params_out->emplace_back(name + ".W", w);
                ctx.params_out->emplace_back(name + ".b", b);
            }
            return linear_forward(t, w, b, x);
        }
        case Method::Slim: return slim->forward(t, x, ctx);
        case Method::Lora: return lora->forward(t, x, ctx);
        case Method::MixLora: return mixlora->forward(t, x, ctx);
    }
    throw std::logic_error("unreachable ffn method");
}

Tensor& FfnLinear::weight() {
    switch (method) {
        case Method::None: return plain.weight;
        case Method::Slim: return slim->weight;
        case Method::Lora: return lora->weight;
        case Method::MixLora: return mixlora->weight;
    }
    throw std::logic_error("unreachable ffn method");
}

Tensor& FfnLinear::bias() {
    switch (method) {
        case Method::None: return plain.bias;
        case Method::Slim: return slim->bias;
        case Method::Lora: return lora->bias;
        case Method::MixLora: return mixlora->bias;
    }
    throw std::logic_error("unreachable ffn method");
}

TinyModel TinyModel::init(const TinyModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    TinyModel m;
    m.cfg = cfg;
    const double std = cfg.init_std;
    auto gauss_tensor = [&](std::vector<int64_t> shape, const std::string& tag) {
        Rng rng(derive_seed(seed, tag));
        Tensor t(std::move(shape));
        for (double& v : t.data) v = std * rng.gaussian();
        return t;
    };
    m.tok_emb = gauss_tensor({cfg.vocab, cfg.d_model}, "tok_emb");
    m.pos_emb = gauss_tensor({cfg.seq_len, cfg.d_model}, "pos_emb");
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "block" + std::to_string(l);
        Block blk;
        blk.ln1_g = Tensor::full({cfg.d_model}, 1.0);
        blk.wq = gauss_tensor({cfg.d_model, cfg.d_model}, p + ".wq");
        blk.wk = gauss_tensor({cfg.d_model, cfg.d_model}, p + ".wk");
        blk.wv = gauss_tensor({cfg.d_model, cfg.d_model}, p + ".wv");
        blk.wo = gauss_tensor({cfg.d_model, cfg.d_model}, p + ".wo");
        blk.ln2_g = Tensor::full({cfg.d_model}, 1.0);
        blk.ffn1.name = p + ".ffn1";
        blk.ffn2.name = p + ".ffn2";
        {
            Rng rng(derive_seed(seed, p + ".ffn1.base"));
            blk.ffn1.plain = Linear::init(cfg.d_model, cfg.d_model, rng, std);
        }
        {
            Rng rng(derive_seed(seed, p + ".ffn2.base"));
            blk.ffn2.plain = Linear::init(cfg.d_model, cfg.d_model, rng, std);
        }
        m.blocks.push_back(std::move(blk));
    }
    m.lnf_g = Tensor::full({cfg.d_model}, 1.0);
    m.head_w = gauss_tensor({cfg.d_model, cfg.vocab}, "head.W");
    m.head_b = Tensor::zeros({cfg.vocab});
    return m;
}

Var TinyModel::forward(Tape& t, const std::vector<int32_t>& tokens, int64_t n_samples,
                       ForwardCtx& ctx) {
    const int64_t tt = cfg.seq_len;
    if (static_cast<int64_t>(tokens.size()) != n_samples * tt) {
        throw std::invalid_argument("token stream length does not match sample count");
    }
    ctx.tokens_per_sample = tt;
    const bool train_base = ctx.mode == Mode::Train && !finetuning();

    auto reg = [&](const std::string& nm, Tensor& ten) {
        Var v = t.leaf(ten, train_base);
        if (train_base && ctx.params_out) ctx.params_out->emplace_back(nm, v);
        return v;
    };

    std::vector<int32_t> pos_ids(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) pos_ids[i] = static_cast<int32_t>(i % tt);

    Var h = add(t, embedding(t, reg("tok_emb", tok_emb), tokens),
                embedding(t, reg("pos_emb", pos_emb), pos_ids));
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        Block& blk = blocks[static_cast<size_t>(l)];
        const std::string p = "block" + std::to_string(l);
        Var a = rmsnorm_rows(t, h, reg(p + ".ln1", blk.ln1_g));
        Var q = matmul(t, a, reg(p + ".wq", blk.wq));
        Var k = matmul(t, a, reg(p + ".wk", blk.wk));
        Var v = matmul(t, a, reg(p + ".wv", blk.wv));
        Var att = causal_attention(t, q, k, v, n_samples, tt, cfg.n_heads);
        h = add(t, h, matmul(t, att, reg(p + ".wo", blk.wo)));
        Var f = rmsnorm_rows(t, h, reg(p + ".ln2", blk.ln2_g));
        Var f1 = blk.ffn1.forward(t, f, ctx, train_base);
        Var f2 = blk.ffn2.forward(t, gelu(t, f1), ctx, train_base);
        h = add(t, h, f2);
    }
    Var hf = rmsnorm_rows(t, h, reg("lnf", lnf_g));
    return add_bias_row(t, matmul(t, hf, reg("head.W", head_w)), reg("head.b", head_b));
}

void TinyModel::attach_adapters(Method m, const SlimLayerConfig& slim_cfg, int64_t lora_rank,
                                const MixLoraParams& mix, uint64_t seed) {
    if (method_ != Method::None) throw std::logic_error("adapters already attached");
    if (m == Method::None) return;
    method_ = m;
    for (auto& blk : blocks) {
        for (FfnLinear* ffn : {&blk.ffn1, &blk.ffn2}) {
            switch (m) {
                case Method::Slim: {
                    SlimLayerConfig c = slim_cfg;
                    c.d_in = cfg.d_model;
                    c.d_out = cfg.d_model;
                    ffn->slim = SlimLayer::attach(c, ffn->name, ffn->plain, seed);
                    break;
                }
                case Method::Lora:
                    ffn->lora = LoraBaselineLayer::attach(lora_rank, ffn->name, ffn->plain, seed);
                    break;
                case Method::MixLora:
                    ffn->mixlora =
                        MixLoraBaselineLayer::attach(mix.n_experts, mix.rank, ffn->name, ffn->plain, seed);
                    break;
                case Method::None: break;
            }
            ffn->method = m;
            // the frozen base now lives inside the adapted layer
            ffn->plain = Linear{};
        }
    }
}

void TinyModel::trainable_params(ParamRegistry& out) {
    if (!finetuning()) {
        base_tensors(out);
        return;
    }
    for (auto& blk : blocks) {
        for (FfnLinear* ffn : {&blk.ffn1, &blk.ffn2}) {
            switch (ffn->method) {
                case Method::Slim: ffn->slim->trainable_params(out); break;
                case Method::Lora: ffn->lora->trainable_params(out); break;
                case Method::MixLora: ffn->mixlora->trainable_params(out); break;
                case Method::None: break;
            }
        }
    }
}

void TinyModel::base_tensors(ParamRegistry& out) {
    out.push_back({"tok_emb", &tok_emb});
    out.push_back({"pos_emb", &pos_emb});
    for (size_t l = 0; l < blocks.size(); ++l) {
        Block& blk = blocks[l];
        const std::string p = "block" + std::to_string(l);
        out.push_back({p + ".ln1", &blk.ln1_g});
        out.push_back({p + ".wq", &blk.wq});
        out.push_back({p + ".wk", &blk.wk});
        out.push_back({p + ".wv", &blk.wv});
        out.push_back({p + ".wo", &blk.wo});
        out.push_back({p + ".ln2", &blk.ln2_g});
        out.push_back({p + ".ffn1.W", &blk.ffn1.weight()});
        out.push_back({p + ".ffn1.b", &blk.ffn1.bias()});
        out.push_back({p + ".ffn2.W", &blk.ffn2.weight()});
        out.push_back({p + ".ffn2.b", &blk.ffn2.bias()});
    }
    out.push_back({"lnf", &lnf_g});
    out.push_back({"head.W", &head_w});
    out.push_back({"head.b", &head_b});
}

void TinyModel::all_tensors(ParamRegistry& out) {
    base_tensors(out);
    if (!finetuning()) return;
    for (auto& blk : blocks) {
        for (FfnLinear* ffn : {&blk.ffn1, &blk.ffn2}) {
            switch (ffn->method) {
                case Method::Slim: ffn->slim->state_tensors(out); break;
                case Method::Lora: ffn->lora->trainable_params(out); break;
                case Method::MixLora: ffn->mixlora->trainable_params(out); break;
                case Method::None: break;
            }
        }
    }
}

void TinyModel::set_cluster_updates(bool enabled) {
    for (SlimLayer* l : slim_layers()) l->clusters.update_enabled = enabled;
}

std::vector<SlimLayer*> TinyModel::slim_layers() {
    std::vector<SlimLayer*> out;
    for (auto& blk : blocks) {
        for (FfnLinear* ffn : {&blk.ffn1, &blk.ffn2}) {
            if (ffn->method == Method::Slim) out.push_back(&*ffn->slim);
        }
    }
    return out;
}

}  // namespace slim
