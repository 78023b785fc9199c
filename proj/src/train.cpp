#include "slim/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace slim {

void TrainConfig::validate() const {
    if (batch < 1 || pretrain_steps < 0 || finetune_epochs < 0) {
        throw std::invalid_argument("train config counts out of range");
    }
    if (lr_pretrain <= 0.0 || lr_finetune <= 0.0 || adam_eps <= 0.0) {
        throw std::invalid_argument("train config rates must be positive");
    }
    if (eval_every < 1 || log_every < 1 || eval_subset < 0) {
        throw std::invalid_argument("train config cadence out of range");
    }
    if (!(early_stop_acc > 0.0 && early_stop_acc <= 1.0)) {
        throw std::invalid_argument("early_stop_acc outside (0, 1]");
    }
}

namespace {

std::string json_number(double v) {
    if (std::isnan(v)) return "null";
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct Batch {
    std::vector<int32_t> tokens;
    std::vector<std::pair<int32_t, int32_t>> targets;  // (logit row, class)
    std::vector<Example> examples;
};

Batch gather(const SyntheticTask& task, Split split, const std::vector<int64_t>& idx, int64_t seq_len) {
    Batch b;
    b.tokens.reserve(idx.size() * static_cast<size_t>(seq_len));
    for (size_t s = 0; s < idx.size(); ++s) {
        Example ex = task.make(split, idx[s]);
        // The logits at the position before the answer predict it.
        b.targets.emplace_back(static_cast<int32_t>(s * static_cast<size_t>(seq_len)) + ex.answer_pos - 1,
                               ex.answer);
        b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
        b.examples.push_back(std::move(ex));
    }
    return b;
}

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// One optimisation step; returns the batch loss.
double train_step(TinyModel& model, Adam& adam, const ParamRegistry& registry, const Batch& batch,
                  int64_t n_samples, double l1_coeff, Rng& train_rng, int64_t step) {
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = Mode::Train;
    ctx.rng = &train_rng;
    std::vector<std::pair<std::string, Var>> param_vars;
    std::vector<std::pair<Var, Var>> adapter_vars;
    ctx.params_out = &param_vars;
    ctx.adapter_vars = &adapter_vars;
    double loss_value = 0.0;
    try {
        Var logits = model.forward(tape, batch.tokens, n_samples, ctx);
        Var task_loss = cross_entropy_mean(tape, logits, batch.targets);
        Var loss = training_loss(tape, task_loss, adapter_vars, model.finetuning() ? l1_coeff : 0.0);
        loss_value = tape.val(loss).data[0];
        if (!std::isfinite(loss_value)) throw DivergenceError(step);
        std::vector<Tensor> grads = tape.backward(loss);
        std::map<std::string, Tensor> named;
        for (const auto& [name, var] : param_vars) {
            Tensor g = grads[static_cast<size_t>(var)];
            if (!g.empty()) named.emplace(name, std::move(g));
        }
        adam.step(registry, named);
    } catch (const NumericError&) {
        throw DivergenceError(step);
    }
    return loss_value;
}

}  // namespace

void MetricsSink::log(int64_t step, const std::string& arm, uint64_t seed, double loss,
                      double downstream_acc, double general_acc, double ms_per_step) {
    std::ostringstream line;
    line << "{\"step\":" << step << ",\"arm\":\"" << arm << "\",\"seed\":" << seed
         << ",\"loss\":" << json_number(loss) << ",\"downstream_acc\":" << json_number(downstream_acc)
         << ",\"general_acc\":" << json_number(general_acc)
         << ",\"ms_per_step\":" << json_number(ms_per_step) << "}";
    if (stream) *stream << line.str() << "\n";
    if (!quiet) std::printf("%s\n", line.str().c_str());
}

double evaluate(TinyModel& model, const SyntheticTask& task, Split split, int64_t subset) {
    const int64_t total = task.size(split);
    const int64_t n = subset > 0 ? std::min(subset, total) : total;
    if (n < 1) throw std::invalid_argument("evaluate needs at least one example");
    const int64_t chunk = 32;
    int64_t correct = 0;
    const bool saved_updates = [&] {
        bool any = false;
        for (SlimLayer* l : model.slim_layers()) any = any || l->clusters.update_enabled;
        return any;
    }();
    model.set_cluster_updates(false);
    for (int64_t lo = 0; lo < n; lo += chunk) {
        const int64_t hi = std::min(lo + chunk, n);
        std::vector<int64_t> idx(static_cast<size_t>(hi - lo));
        std::iota(idx.begin(), idx.end(), lo);
        Batch batch = gather(task, split, idx, model.cfg.seq_len);
        Tape tape;
        tape.grad_enabled = false;
        ForwardCtx ctx;
        ctx.mode = Mode::Infer;
        Var logits = model.forward(tape, batch.tokens, hi - lo, ctx);
        const Tensor& lv = tape.val(logits);
        for (size_t s = 0; s < batch.examples.size(); ++s) {
            const Example& ex = batch.examples[s];
            const double* row = lv.data.data() + static_cast<int64_t>(batch.targets[s].first) * lv.shape[1];
            const std::vector<int32_t> cand = task.candidates(ex.kind);
            int32_t best = cand[0];
            double best_v = row[cand[0]];
            for (int32_t c : cand) {
                if (row[c] > best_v) {
                    best_v = row[c];
                    best = c;
                }
            }
            if (best == ex.answer) ++correct;
        }
    }
    model.set_cluster_updates(saved_updates);
    return static_cast<double>(correct) / static_cast<double>(n);
}

double pretrain(TinyModel& model, const SyntheticTask& general, const TrainConfig& cfg, uint64_t seed,
                MetricsSink& sink, std::array<uint64_t, 4>* rng_state_out) {
    cfg.validate();
    if (model.finetuning()) throw std::logic_error("pretrain requires a model without adapters");
    ParamRegistry registry;
    model.trainable_params(registry);
    Adam adam({cfg.lr_pretrain, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.grad_clip});
    Rng data_rng(derive_seed(seed, "pretrain.data"));
    Rng train_rng(derive_seed(seed, "pretrain.step"));

    std::vector<int64_t> order(static_cast<size_t>(general.n_train));
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();

    double acc = 0.0;
    if (cfg.pretrain_steps == 0) {
        if (rng_state_out) *rng_state_out = train_rng.state();
        return evaluate(model, general, Split::Test, cfg.eval_subset);
    }
    for (int64_t step = 1; step <= cfg.pretrain_steps; ++step) {
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < cfg.batch; ++i) {
            if (cursor == order.size()) {
                for (size_t j = order.size() - 1; j > 0; --j) {
                    std::swap(order[j], order[static_cast<size_t>(data_rng.uniform_int(
                                            static_cast<int64_t>(j) + 1))]);
                }
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        Batch batch = gather(general, Split::Train, idx, model.cfg.seq_len);
        const double t0 = now_ms();
        const double loss = train_step(model, adam, registry, batch, cfg.batch, 0.0, train_rng, step);
        const double ms = now_ms() - t0;
        const bool eval_now = step % cfg.eval_every == 0 || step == cfg.pretrain_steps;
        if (eval_now) acc = evaluate(model, general, Split::Test, cfg.eval_subset);
        if (step % cfg.log_every == 0 || eval_now) {
            sink.log(step, "pretrain", seed, loss, std::nan(""), eval_now ? acc : std::nan(""), ms);
        }
        if (eval_now && acc >= cfg.early_stop_acc) break;
    }
    if (rng_state_out) *rng_state_out = train_rng.state();
    return evaluate(model, general, Split::Test, cfg.eval_subset);
}

ExperimentResult finetune(TinyModel& model, const SyntheticTask& downstream,
                          const SyntheticTask& general, const TrainConfig& cfg, double l1_coeff,
                          uint64_t seed, const std::string& arm, MetricsSink& sink,
                          std::array<uint64_t, 4>* rng_state_out) {
    cfg.validate();
    if (!model.finetuning()) throw std::logic_error("finetune requires attached adapters");
    ParamRegistry registry;
    model.trainable_params(registry);
    Adam adam({cfg.lr_finetune, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.grad_clip});
    // The data stream depends only on the seed, so every method arm consumes
    // identical shuffled batches.
    Rng data_rng(derive_seed(seed, "finetune.data"));
    Rng train_rng(derive_seed(seed, "finetune.step"));

    ExperimentResult res;
    res.arm = arm;
    res.seed = seed;
    res.general_acc_before = evaluate(model, general, Split::Test, cfg.eval_subset);

    std::vector<double> general_curve;
    std::vector<double> step_times;
    const int64_t steps_per_epoch = downstream.n_train / cfg.batch;
    const int64_t total_steps = steps_per_epoch * cfg.finetune_epochs;
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        std::vector<int64_t> order(static_cast<size_t>(downstream.n_train));
        std::iota(order.begin(), order.end(), 0);
        for (size_t j = order.size() - 1; j > 0; --j) {
            std::swap(order[j],
                      order[static_cast<size_t>(data_rng.uniform_int(static_cast<int64_t>(j) + 1))]);
        }
        for (int64_t bi = 0; bi + cfg.batch <= downstream.n_train; bi += cfg.batch) {
            ++step;
            std::vector<int64_t> idx(order.begin() + bi, order.begin() + bi + cfg.batch);
            Batch batch = gather(downstream, Split::Train, idx, model.cfg.seq_len);
            const double t0 = now_ms();
            const double loss =
                train_step(model, adam, registry, batch, cfg.batch, l1_coeff, train_rng, step);
            const double ms = now_ms() - t0;
            step_times.push_back(ms);
            const bool eval_now = step % cfg.eval_every == 0 || step == total_steps;
            double dacc = std::nan(""), gacc = std::nan("");
            if (eval_now) {
                dacc = evaluate(model, downstream, Split::Test, cfg.eval_subset);
                gacc = evaluate(model, general, Split::Test, cfg.eval_subset);
                general_curve.push_back(gacc);
            }
            if (step % cfg.log_every == 0 || eval_now) {
                sink.log(step, arm, seed, loss, dacc, gacc, ms);
            }
        }
    }
    if (rng_state_out) *rng_state_out = train_rng.state();
    res.steps = step;
    res.downstream_acc = evaluate(model, downstream, Split::Test, 0);
    res.general_acc_after = evaluate(model, general, Split::Test, 0);
    res.retention = res.general_acc_before > 0.0 ? res.general_acc_after / res.general_acc_before : 0.0;
    if (!general_curve.empty()) {
        res.auc_general = std::accumulate(general_curve.begin(), general_curve.end(), 0.0) /
                          static_cast<double>(general_curve.size());
    } else {
        res.auc_general = res.general_acc_after;
    }
    if (!step_times.empty()) {
        std::sort(step_times.begin(), step_times.end());
        res.ms_per_step = step_times[step_times.size() / 2];
    }
    return res;
}

std::string ExperimentResult::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"arm\":\"" << arm << "\",\"seed\":" << seed << ",\"steps\":" << steps
       << ",\"downstream_acc\":" << downstream_acc << ",\"general_acc_before\":" << general_acc_before
       << ",\"general_acc_after\":" << general_acc_after << ",\"retention\":" << retention
       << ",\"auc_general\":" << auc_general << ",\"ms_per_step\":" << ms_per_step << "}";
    return os.str();
}

}  // namespace slim
