#include "slim/experiments.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "slim/kernels.hpp"

namespace slim {

namespace fs = std::filesystem;

const ArmAggregate& ExperimentTable::by_name(const std::string& n) const {
    for (const ArmAggregate& a : arms) {
        if (a.arm == n) return a;
    }
    throw std::invalid_argument("no experiment arm named " + n);
}

int experiment_threads() {
    const char* env = std::getenv("SLIM_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v >= 1 ? v : 1;
}

fs::path ensure_pretrained(const RunConfig& cfg, uint64_t seed, const fs::path& cache_dir, bool quiet) {
    const fs::path dir = cache_dir / ("pretrain_seed" + std::to_string(seed));
    const CheckpointPaths paths = checkpoint_paths(dir);
    if (fs::exists(paths.manifest) && fs::exists(paths.blob)) {
        // Reuse only if it was produced by an identical config.
        try {
            RunConfig stored;
            load_checkpoint(dir, &stored);
            if (config_hash(stored) == config_hash(cfg)) return dir;
        } catch (const std::exception&) {
        }
    }
    fs::create_directories(dir);
    TinyModel model = TinyModel::init(cfg.model, derive_seed(seed, "model"));
    SyntheticTask general = cfg.general.instantiate(cfg.model.seq_len);
    std::ofstream metrics(dir / "metrics.jsonl");
    MetricsSink sink{&metrics, quiet};
    std::array<uint64_t, 4> rng_state{};
    pretrain(model, general, cfg.train, seed, sink, &rng_state);
    save_checkpoint(dir, model, cfg, rng_state);
    return dir;
}

namespace {

struct Job {
    ArmSpec arm;
    uint64_t seed;
    size_t slot;
};

ExperimentResult run_one(const RunConfig& cfg, const ArmSpec& arm, uint64_t seed,
                         const fs::path& ckpt_dir, const fs::path& out_dir, bool quiet) {
    TinyModel model = load_checkpoint(ckpt_dir, nullptr);
    if (model.finetuning()) throw ConfigError("pretrained checkpoint already carries adapters");
    SlimLayerConfig slim_cfg = cfg.slim;
    slim_cfg.d_in = cfg.model.d_model;
    slim_cfg.d_out = cfg.model.d_model;
    if (arm.tweak) arm.tweak(slim_cfg);
    model.attach_adapters(arm.method, slim_cfg, cfg.lora_rank, cfg.mixlora, derive_seed(seed, "attach"));

    SyntheticTask downstream = cfg.downstream.instantiate(cfg.model.seq_len);
    SyntheticTask general = cfg.general.instantiate(cfg.model.seq_len);
    const std::string tag = arm.name + "_seed" + std::to_string(seed);
    std::ofstream metrics(out_dir / ("metrics_" + tag + ".jsonl"));
    MetricsSink sink{&metrics, quiet};
    ExperimentResult res = finetune(model, downstream, general, cfg.train, slim_cfg.l1_coeff, seed,
                                    arm.name, sink);
    std::ofstream rj(out_dir / ("result_" + tag + ".json"));
    rj << res.to_json() << "\n";
    return res;
}

ArmAggregate aggregate(const std::string& arm, std::vector<ExperimentResult> runs) {
    ArmAggregate agg;
    agg.arm = arm;
    agg.runs = std::move(runs);
    const double n = static_cast<double>(agg.runs.size());
    auto mean_of = [&](auto get) {
        double s = 0.0;
        for (const auto& r : agg.runs) s += get(r);
        return s / n;
    };
    auto std_of = [&](auto get, double mean) {
        if (agg.runs.size() < 2) return 0.0;
        double s = 0.0;
        for (const auto& r : agg.runs) s += (get(r) - mean) * (get(r) - mean);
        return std::sqrt(s / (n - 1.0));
    };
    auto down = [](const ExperimentResult& r) { return r.downstream_acc; };
    auto gen = [](const ExperimentResult& r) { return r.general_acc_after; };
    auto ret = [](const ExperimentResult& r) { return r.retention; };
    agg.downstream_mean = mean_of(down);
    agg.downstream_std = std_of(down, agg.downstream_mean);
    agg.general_mean = mean_of(gen);
    agg.general_std = std_of(gen, agg.general_mean);
    agg.retention_mean = mean_of(ret);
    agg.retention_std = std_of(ret, agg.retention_mean);
    agg.auc_mean = mean_of([](const ExperimentResult& r) { return r.auc_general; });
    return agg;
}

}  // namespace

ExperimentTable run_arms(const RunConfig& cfg, const std::vector<ArmSpec>& arms,
                         const std::vector<uint64_t>& seeds, const fs::path& out_dir, bool quiet) {
    fs::create_directories(out_dir);
    for (uint64_t seed : seeds) ensure_pretrained(cfg, seed, out_dir, quiet);

    std::vector<Job> jobs;
    for (const ArmSpec& arm : arms) {
        for (uint64_t seed : seeds) jobs.push_back({arm, seed, jobs.size()});
    }
    std::vector<ExperimentResult> results(jobs.size());
    const int workers = std::min<int>(experiment_threads(), static_cast<int>(jobs.size()));
    if (workers <= 1) {
        for (const Job& job : jobs) {
            results[job.slot] = run_one(cfg, job.arm, job.seed,
                                        out_dir / ("pretrain_seed" + std::to_string(job.seed)),
                                        out_dir, quiet);
        }
    } else {
        // Arms in parallel: each job owns its model and RNGs; kernels drop to
        // the serial path to avoid oversubscription.
        const bool was_parallel = kern::parallel_enabled();
        kern::set_parallel(false);
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    while (true) {
                        const size_t i = next.fetch_add(1);
                        if (i >= jobs.size()) break;
                        results[jobs[i].slot] =
                            run_one(cfg, jobs[i].arm, jobs[i].seed,
                                    out_dir / ("pretrain_seed" + std::to_string(jobs[i].seed)),
                                    out_dir, true);
                    }
                } catch (...) {
                    errors[static_cast<size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        kern::set_parallel(was_parallel);
        for (const auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    ExperimentTable table;
    size_t cursor = 0;
    for (const ArmSpec& arm : arms) {
        std::vector<ExperimentResult> runs;
        for (size_t s = 0; s < seeds.size(); ++s) runs.push_back(results[cursor++]);
        table.arms.push_back(aggregate(arm.name, std::move(runs)));
    }
    return table;
}

ExperimentTable run_forgetting(const RunConfig& cfg, const std::vector<uint64_t>& seeds,
                               const fs::path& out_dir, bool quiet) {
    std::vector<ArmSpec> arms{{"slim", Method::Slim, nullptr},
                              {"lora", Method::Lora, nullptr},
                              {"mixlora", Method::MixLora, nullptr}};
    return run_arms(cfg, arms, seeds, out_dir, quiet);
}

ExperimentTable run_ablation(const RunConfig& cfg, const std::vector<uint64_t>& seeds,
                             const fs::path& out_dir, bool quiet) {
    auto no_identity = [](SlimLayerConfig& c) {
        c.n_identity = 0;
        c.yield_enabled = false;
        c.mask_rate = 0.0;
    };
    auto iden_only = [](SlimLayerConfig& c) {
        c.yield_enabled = false;
        c.mask_rate = 0.0;
    };
    auto iden_yield = [](SlimLayerConfig& c) { c.mask_rate = 0.0; };
    std::vector<ArmSpec> arms{{"mixlora_equiv", Method::Slim, no_identity},
                              {"iden", Method::Slim, iden_only},
                              {"iden_yield", Method::Slim, iden_yield},
                              {"full", Method::Slim, nullptr}};
    return run_arms(cfg, arms, seeds, out_dir, quiet);
}

ExperimentTable run_sweep(const RunConfig& cfg, const std::vector<double>& rates,
                          const std::vector<uint64_t>& seeds, const fs::path& out_dir, bool quiet) {
    std::vector<ArmSpec> arms;
    for (double p : rates) {
        if (!(p >= 0.0 && p <= 0.95)) throw ConfigError("sweep mask rate outside [0, 0.95]");
        char name[32];
        std::snprintf(name, sizeof name, "p%.2f", p);
        arms.push_back({name, Method::Slim, [p](SlimLayerConfig& c) { c.mask_rate = p; }});
    }
    return run_arms(cfg, arms, seeds, out_dir, quiet);
}

void write_runs_csv(const ExperimentTable& table, const fs::path& path) {
    std::ofstream os(path);
    os << "arm,seed,steps,downstream_acc,general_acc_before,general_acc_after,retention,auc_general\n";
    os.precision(10);
    for (const ArmAggregate& a : table.arms) {
        for (const ExperimentResult& r : a.runs) {
            os << r.arm << "," << r.seed << "," << r.steps << "," << r.downstream_acc << ","
               << r.general_acc_before << "," << r.general_acc_after << "," << r.retention << ","
               << r.auc_general << "\n";
        }
    }
}

void write_summary_csv(const ExperimentTable& table, const fs::path& path) {
    std::ofstream os(path);
    os << "arm,downstream_mean,downstream_std,general_mean,general_std,retention_mean,retention_std,"
          "auc_general_mean\n";
    os.precision(10);
    for (const ArmAggregate& a : table.arms) {
        os << a.arm << "," << a.downstream_mean << "," << a.downstream_std << "," << a.general_mean
           << "," << a.general_std << "," << a.retention_mean << "," << a.retention_std << ","
           << a.auc_mean << "\n";
    }
}

}  // namespace slim
