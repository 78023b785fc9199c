#include "slim/checkpoint.hpp"

#include <fstream>

namespace slim {

namespace {

using nlohmann::json;

// Strict object reader: every key must be consumed exactly once.
class StrictObject {
  public:
    StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
    }
    ~StrictObject() = default;

    const json* get(const char* key) {
        seen_.push_back(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    const json& require(const char* key) {
        const json* p = get(key);
        if (!p) throw ConfigError(path_ + "." + key + ": missing required field");
        return *p;
    }

    template <typename T>
    void read(const char* key, T& out) {
        const json* p = get(key);
        if (!p) return;
        try {
            out = p->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    void finish() {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
                throw ConfigError(path_ + "." + it.key() + ": unknown field");
            }
        }
    }

    const std::string& path() const { return path_; }

  private:
    const json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

TaskConfig task_from_json(const json& j, const std::string& path) {
    StrictObject o(j, path);
    TaskConfig t;
    std::string kind = task_kind_name(t.kind);
    o.read("kind", kind);
    if (!parse_task_kind(kind, &t.kind)) throw ConfigError(path + ".kind: unknown task kind " + kind);
    o.read("seed", t.seed);
    o.read("n_train", t.n_train);
    o.read("n_test", t.n_test);
    o.finish();
    if (t.n_train < 1 || t.n_test < 1) throw ConfigError(path + ": split sizes must be positive");
    return t;
}

json task_to_json(const TaskConfig& t) {
    return json{{"kind", task_kind_name(t.kind)}, {"seed", t.seed}, {"n_train", t.n_train},
                {"n_test", t.n_test}};
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex_u64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t parse_hex_u64(const std::string& s) { return std::stoull(s, nullptr, 16); }

void write_f64_le(std::ofstream& os, const double* p, size_t n) {
    std::vector<unsigned char> buf(n * 8);
    for (size_t i = 0; i < n; ++i) {
        uint64_t bits;
        std::memcpy(&bits, &p[i], 8);
        for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<size_t>(b)] = (bits >> (8 * b)) & 0xff;
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_f64_le(std::ifstream& is, double* p, size_t n) {
    std::vector<unsigned char> buf(n * 8);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw ConfigError("checkpoint blob truncated");
    for (size_t i = 0; i < n; ++i) {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<uint64_t>(buf[i * 8 + static_cast<size_t>(b)]) << (8 * b);
        std::memcpy(&p[i], &bits, 8);
    }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
    StrictObject root(j, "config");
    RunConfig c;
    const json& ver = root.require("schema_version");
    if (!ver.is_number_integer() || ver.get<int>() != kSchemaVersion) {
        throw ConfigError("config.schema_version: expected " + std::to_string(kSchemaVersion));
    }
    if (const json* m = root.get("method")) {
        const std::string s = m->is_string() ? m->get<std::string>() : "";
        auto parsed = parse_method(s);
        if (!parsed) throw ConfigError("config.method: unknown method '" + s + "'");
        c.method = *parsed;
    }
    if (const json* m = root.get("model")) {
        StrictObject o(*m, "config.model");
        o.read("vocab", c.model.vocab);
        o.read("d_model", c.model.d_model);
        o.read("n_layers", c.model.n_layers);
        o.read("n_heads", c.model.n_heads);
        o.read("seq_len", c.model.seq_len);
        o.read("init_std", c.model.init_std);
        o.finish();
    }
    if (const json* t = root.get("tasks")) {
        StrictObject o(*t, "config.tasks");
        if (const json* g = o.get("general")) c.general = task_from_json(*g, "config.tasks.general");
        if (const json* d = o.get("downstream")) c.downstream = task_from_json(*d, "config.tasks.downstream");
        o.finish();
    }
    if (const json* s = root.get("slim")) {
        StrictObject o(*s, "config.slim");
        o.read("n_identity", c.slim.n_identity);
        o.read("n_lora", c.slim.n_lora);
        o.read("rank", c.slim.rank);
        o.read("top_k", c.slim.top_k);
        o.read("mask_rate", c.slim.mask_rate);
        o.read("n_clusters", c.slim.n_clusters);
        o.read("momentum", c.slim.momentum);
        o.read("l1_coeff", c.slim.l1_coeff);
        o.read("yield_enabled", c.slim.yield_enabled);
        o.read("yield_offset", c.slim.yield_offset);
        o.read("yield_clamp", c.slim.yield_clamp);
        o.read("paper_masking_formula", c.slim.paper_masking_formula);
        if (const json* im = o.get("identity_mode")) {
            const std::string v = im->is_string() ? im->get<std::string>() : "";
            if (v == "residual") c.slim.identity_mode = IdentityMode::Residual;
            else if (v == "zero") c.slim.identity_mode = IdentityMode::Zero;
            else throw ConfigError("config.slim.identity_mode: expected 'residual' or 'zero'");
        }
        if (const json* ro = o.get("route_override")) {
            const std::string v = ro->is_string() ? ro->get<std::string>() : "";
            if (v == "none") c.slim.route_override = RouteOverride::None;
            else if (v == "all_identity") c.slim.route_override = RouteOverride::AllIdentity;
            else throw ConfigError("config.slim.route_override: expected 'none' or 'all_identity'");
        }
        o.finish();
    }
    if (const json* l = root.get("lora_baseline")) {
        StrictObject o(*l, "config.lora_baseline");
        o.read("rank", c.lora_rank);
        o.finish();
    }
    if (const json* m = root.get("mixlora_baseline")) {
        StrictObject o(*m, "config.mixlora_baseline");
        o.read("n_experts", c.mixlora.n_experts);
        o.read("rank", c.mixlora.rank);
        o.finish();
    }
    if (const json* t = root.get("train")) {
        StrictObject o(*t, "config.train");
        o.read("batch", c.train.batch);
        o.read("pretrain_steps", c.train.pretrain_steps);
        o.read("early_stop_acc", c.train.early_stop_acc);
        o.read("finetune_epochs", c.train.finetune_epochs);
        o.read("lr_pretrain", c.train.lr_pretrain);
        o.read("lr_finetune", c.train.lr_finetune);
        o.read("adam_beta1", c.train.adam_beta1);
        o.read("adam_beta2", c.train.adam_beta2);
        o.read("adam_eps", c.train.adam_eps);
        o.read("grad_clip", c.train.grad_clip);
        o.read("eval_every", c.train.eval_every);
        o.read("eval_subset", c.train.eval_subset);
        o.read("log_every", c.train.log_every);
        o.finish();
    }
    root.finish();
    c.validate();
    return c;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    SlimLayerConfig s = slim;
    s.d_in = model.d_model;
    s.d_out = model.d_model;
    s.validate();
    if (lora_rank < 1 || lora_rank > model.d_model) throw ConfigError("config.lora_baseline.rank out of range");
    if (mixlora.n_experts < 2 || mixlora.rank < 1 || mixlora.rank > model.d_model) {
        throw ConfigError("config.mixlora_baseline out of range");
    }
    if (model.vocab < tok::kVocab) {
        throw ConfigError("config.model.vocab must be at least " + std::to_string(tok::kVocab) +
                          " for the synthetic tasks");
    }
}

json RunConfig::to_json() const {
    json s{{"n_identity", slim.n_identity},
           {"n_lora", slim.n_lora},
           {"rank", slim.rank},
           {"top_k", slim.top_k},
           {"mask_rate", slim.mask_rate},
           {"n_clusters", slim.n_clusters},
           {"momentum", slim.momentum},
           {"l1_coeff", slim.l1_coeff},
           {"yield_enabled", slim.yield_enabled},
           {"yield_offset", slim.yield_offset},
           {"yield_clamp", slim.yield_clamp},
           {"paper_masking_formula", slim.paper_masking_formula},
           {"identity_mode", slim.identity_mode == IdentityMode::Residual ? "residual" : "zero"},
           {"route_override", slim.route_override == RouteOverride::None ? "none" : "all_identity"}};
    return json{
        {"schema_version", kSchemaVersion},
        {"method", method_name(method)},
        {"model",
         json{{"vocab", model.vocab},
              {"d_model", model.d_model},
              {"n_layers", model.n_layers},
              {"n_heads", model.n_heads},
              {"seq_len", model.seq_len},
              {"init_std", model.init_std}}},
        {"tasks", json{{"general", task_to_json(general)}, {"downstream", task_to_json(downstream)}}},
        {"slim", s},
        {"lora_baseline", json{{"rank", lora_rank}}},
        {"mixlora_baseline", json{{"n_experts", mixlora.n_experts}, {"rank", mixlora.rank}}},
        {"train",
         json{{"batch", train.batch},
              {"pretrain_steps", train.pretrain_steps},
              {"early_stop_acc", train.early_stop_acc},
              {"finetune_epochs", train.finetune_epochs},
              {"lr_pretrain", train.lr_pretrain},
              {"lr_finetune", train.lr_finetune},
              {"adam_beta1", train.adam_beta1},
              {"adam_beta2", train.adam_beta2},
              {"adam_eps", train.adam_eps},
              {"grad_clip", train.grad_clip},
              {"eval_every", train.eval_every},
              {"eval_subset", train.eval_subset},
              {"log_every", train.log_every}}}};
}

RunConfig RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config file not found: " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

std::string config_hash(const RunConfig& cfg) { return hex_u64(fnv1a(cfg.to_json().dump())); }

CheckpointPaths checkpoint_paths(const std::filesystem::path& dir_or_manifest) {
    namespace fs = std::filesystem;
    fs::path manifest = dir_or_manifest;
    if (fs::is_directory(dir_or_manifest) || dir_or_manifest.extension() != ".json") {
        manifest = dir_or_manifest / "checkpoint.json";
    }
    fs::path blob = manifest;
    blob.replace_extension(".bin");
    return {manifest, blob};
}

void save_checkpoint(const std::filesystem::path& dir, TinyModel& model, const RunConfig& cfg,
                     const std::array<uint64_t, 4>& rng_state) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::is_directory(dir) || dir.extension() != ".json" ? dir
                                                                               : dir.parent_path());
    CheckpointPaths paths = checkpoint_paths(dir);

    ParamRegistry reg;
    model.all_tensors(reg);
    json tensors = json::array();
    int64_t offset = 0;
    for (const NamedParam& p : reg) {
        tensors.push_back(json{{"name", p.name},
                               {"shape", p.value->shape},
                               {"dtype", "f64"},
                               {"offset", offset}});
        offset += p.value->numel() * 8;
    }
    json rng = json::array();
    for (uint64_t v : rng_state) rng.push_back(hex_u64(v));
    json mask_seeds = json::object();
    for (SlimLayer* l : model.slim_layers()) {
        json seeds = json::array();
        for (uint64_t s : l->inference_mask_seeds) seeds.push_back(hex_u64(s));
        mask_seeds[l->name] = seeds;
    }
    json manifest{{"schema_version", 1},
                  {"config", cfg.to_json()},
                  {"config_hash", config_hash(cfg)},
                  {"method", method_name(model.method())},
                  {"rng_state", rng},
                  {"has_cluster_state", model.has_cluster_state()},
                  {"inference_mask_seeds", mask_seeds},
                  {"tensors", tensors}};

    std::ofstream mo(paths.manifest);
    if (!mo) throw ConfigError("cannot write " + paths.manifest.string());
    mo << manifest.dump(2) << "\n";
    mo.close();

    std::ofstream bo(paths.blob, std::ios::binary);
    if (!bo) throw ConfigError("cannot write " + paths.blob.string());
    for (const NamedParam& p : reg) write_f64_le(bo, p.value->data.data(), p.value->data.size());
}

TinyModel load_checkpoint(const std::filesystem::path& dir_or_manifest, RunConfig* cfg_out,
                          std::array<uint64_t, 4>* rng_state_out, const RunConfig* expect_cfg) {
    CheckpointPaths paths = checkpoint_paths(dir_or_manifest);
    std::ifstream mi(paths.manifest);
    if (!mi) throw ConfigError("checkpoint manifest not found: " + paths.manifest.string());
    json manifest;
    try {
        mi >> manifest;
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }
    if (!manifest.contains("schema_version") || manifest["schema_version"].get<int>() != 1) {
        throw ConfigError("checkpoint schema_version mismatch (expected 1)");
    }
    RunConfig cfg = RunConfig::from_json(manifest.at("config"));
    const std::string stored_hash = manifest.at("config_hash").get<std::string>();
    if (stored_hash != config_hash(cfg)) {
        throw ConfigError("checkpoint config_hash does not match its embedded config");
    }
    if (expect_cfg && config_hash(*expect_cfg) != stored_hash) {
        throw ConfigError("config hash mismatch: expected " + config_hash(*expect_cfg) + ", checkpoint has " +
                          stored_hash);
    }
    auto method = parse_method(manifest.at("method").get<std::string>());
    if (!method) throw ConfigError("checkpoint method field invalid");

    TinyModel model = TinyModel::init(cfg.model, 0);
    if (*method != Method::None) {
        SlimLayerConfig s = cfg.slim;
        s.d_in = cfg.model.d_model;
        s.d_out = cfg.model.d_model;
        model.attach_adapters(*method, s, cfg.lora_rank, cfg.mixlora, 0);
    }
    // Restore per-layer inference mask seeds before filling tensors.
    if (manifest.contains("inference_mask_seeds")) {
        for (SlimLayer* l : model.slim_layers()) {
            const json& seeds = manifest.at("inference_mask_seeds").at(l->name);
            if (seeds.size() != l->inference_mask_seeds.size()) {
                throw ConfigError("checkpoint mask seed count mismatch for " + l->name);
            }
            for (size_t i = 0; i < l->inference_mask_seeds.size(); ++i) {
                l->inference_mask_seeds[i] = parse_hex_u64(seeds[i].get<std::string>());
            }
            l->rebuild_inference_masks();
        }
    }

    ParamRegistry reg;
    model.all_tensors(reg);
    const json& tensors = manifest.at("tensors");
    if (tensors.size() != reg.size()) {
        throw ConfigError("checkpoint tensor count " + std::to_string(tensors.size()) +
                          " does not match model census " + std::to_string(reg.size()));
    }
    std::ifstream bi(paths.blob, std::ios::binary);
    if (!bi) throw ConfigError("checkpoint blob not found: " + paths.blob.string());
    for (size_t i = 0; i < reg.size(); ++i) {
        const json& entry = tensors[i];
        if (entry.at("name").get<std::string>() != reg[i].name) {
            throw ConfigError("checkpoint tensor order mismatch at " + reg[i].name);
        }
        if (entry.at("dtype").get<std::string>() != "f64") {
            throw ConfigError("checkpoint dtype must be f64");
        }
        const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        if (shape != reg[i].value->shape) {
            throw ConfigError("checkpoint shape mismatch for " + reg[i].name);
        }
        bi.seekg(entry.at("offset").get<int64_t>());
        read_f64_le(bi, reg[i].value->data.data(), reg[i].value->data.size());
    }
    if (rng_state_out) {
        const json& rng = manifest.at("rng_state");
        for (size_t i = 0; i < 4; ++i) (*rng_state_out)[i] = parse_hex_u64(rng[i].get<std::string>());
    }
    if (cfg_out) *cfg_out = cfg;
    return model;
}

}  // namespace slim
