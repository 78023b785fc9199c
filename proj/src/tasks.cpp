#include "slim/tasks.hpp"

#include <algorithm>
#include <stdexcept>

namespace slim {

const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::KvRecall: return "kv_recall";
        case TaskKind::SeqClass: return "seq_class";
        case TaskKind::ModularAdd: return "modular_add";
        case TaskKind::Mixture: return "mixture";
    }
    return "?";
}

bool parse_task_kind(const std::string& s, TaskKind* out) {
    if (s == "kv_recall") *out = TaskKind::KvRecall;
    else if (s == "seq_class") *out = TaskKind::SeqClass;
    else if (s == "modular_add") *out = TaskKind::ModularAdd;
    else if (s == "mixture") *out = TaskKind::Mixture;
    else return false;
    return true;
}

namespace {

Example make_kv(uint64_t rng_seed, int64_t seq_len) {
    Rng rng(rng_seed);
    Example ex;
    ex.kind = TaskKind::KvRecall;
    ex.tokens.assign(static_cast<size_t>(seq_len), tok::kPad);
    ex.tokens[0] = tok::kBos;
    // Distinct keys for this example's pairs.
    std::array<int32_t, tok::kKvKeys> keys;
    for (int i = 0; i < tok::kKvKeys; ++i) keys[static_cast<size_t>(i)] = i;
    for (int i = tok::kKvKeys - 1; i > 0; --i) {
        std::swap(keys[static_cast<size_t>(i)], keys[static_cast<size_t>(rng.uniform_int(i + 1))]);
    }
    std::array<int32_t, tok::kKvPairs> vals;
    int p = 1;
    for (int i = 0; i < tok::kKvPairs; ++i) {
        vals[static_cast<size_t>(i)] = static_cast<int32_t>(rng.uniform_int(tok::kKvVals));
        ex.tokens[static_cast<size_t>(p++)] = tok::kKvKeyBase + keys[static_cast<size_t>(i)];
        ex.tokens[static_cast<size_t>(p++)] = tok::kKvValBase + vals[static_cast<size_t>(i)];
    }
    const int q = static_cast<int>(rng.uniform_int(tok::kKvPairs));
    ex.tokens[static_cast<size_t>(p++)] = tok::kQry;
    ex.tokens[static_cast<size_t>(p++)] = tok::kKvKeyBase + keys[static_cast<size_t>(q)];
    ex.answer_pos = p;
    ex.answer = tok::kKvValBase + vals[static_cast<size_t>(q)];
    ex.tokens[static_cast<size_t>(p)] = ex.answer;
    return ex;
}

Example make_cls(uint64_t rng_seed, int64_t index, int64_t seq_len) {
    Rng rng(rng_seed);
    Example ex;
    ex.kind = TaskKind::SeqClass;
    ex.tokens.assign(static_cast<size_t>(seq_len), tok::kPad);
    ex.tokens[0] = tok::kBos;
    const int cls = static_cast<int>(index % tok::kClsClasses);  // balanced
    const int content = static_cast<int>(seq_len) - 4;
    for (int i = 0; i < content; ++i) {
        int32_t t;
        if (rng.uniform() < 0.75) {
            // Four tokens of the class's own signature range.
            t = tok::kClsTokBase + 4 * cls + static_cast<int32_t>(rng.uniform_int(4));
        } else {
            t = tok::kClsTokBase + static_cast<int32_t>(rng.uniform_int(16));
        }
        ex.tokens[static_cast<size_t>(1 + i)] = t;
    }
    ex.tokens[static_cast<size_t>(1 + content)] = tok::kEq;
    ex.answer_pos = 2 + content;
    ex.answer = tok::kClsAnsBase + cls;
    ex.tokens[static_cast<size_t>(ex.answer_pos)] = ex.answer;
    return ex;
}

Example make_mod(uint64_t rng_seed, Split split, int64_t seq_len) {
    // Operand pairs are partitioned 80/20 between train and test so the test
    // split contains unseen combinations only.
    Rng rng(rng_seed);
    Example ex;
    ex.kind = TaskKind::ModularAdd;
    ex.tokens.assign(static_cast<size_t>(seq_len), tok::kPad);
    const int m = tok::kModulus;
    int a = 0, b = 0;
    while (true) {
        a = static_cast<int>(rng.uniform_int(m));
        b = static_cast<int>(rng.uniform_int(m));
        const bool test_combo = (a * m + b) % 5 == 0;
        if (test_combo == (split == Split::Test)) break;
    }
    ex.tokens[0] = tok::kBos;
    ex.tokens[1] = tok::kModBase + a;
    ex.tokens[2] = tok::kPlus;
    ex.tokens[3] = tok::kModBase + b;
    ex.tokens[4] = tok::kEq;
    ex.answer_pos = 5;
    ex.answer = tok::kModBase + (a + b) % m;
    ex.tokens[5] = ex.answer;
    return ex;
}

}  // namespace

Example SyntheticTask::make(Split split, int64_t index) const {
    if (index < 0 || index >= size(split)) {
        throw std::invalid_argument("task example index out of range");
    }
    if (seq_len < 24) throw std::invalid_argument("seq_len too short for the task layouts");
    // Disjoint per-split streams.
    const uint64_t base = derive_seed(seed, split == Split::Train ? "train" : "test");
    const uint64_t ex_seed = derive_seed(base, static_cast<uint64_t>(index));
    switch (kind) {
        case TaskKind::KvRecall: return make_kv(ex_seed, seq_len);
        case TaskKind::SeqClass: return make_cls(ex_seed, index, seq_len);
        case TaskKind::ModularAdd: return make_mod(ex_seed, split, seq_len);
        case TaskKind::Mixture: {
            // Even indices: modular arithmetic; odd: classification.
            if (index % 2 == 0) return make_mod(ex_seed, split, seq_len);
            Example ex = make_cls(ex_seed, index / 2, seq_len);
            return ex;
        }
    }
    throw std::logic_error("unreachable task kind");
}

std::vector<int32_t> SyntheticTask::candidates(TaskKind k) const {
    std::vector<int32_t> out;
    switch (k) {
        case TaskKind::KvRecall:
            for (int i = 0; i < tok::kKvVals; ++i) out.push_back(tok::kKvValBase + i);
            break;
        case TaskKind::SeqClass:
            for (int i = 0; i < tok::kClsClasses; ++i) out.push_back(tok::kClsAnsBase + i);
            break;
        case TaskKind::ModularAdd:
            for (int i = 0; i < tok::kModulus; ++i) out.push_back(tok::kModBase + i);
            break;
        case TaskKind::Mixture:
            throw std::invalid_argument("mixture candidates are per-example; query with the example kind");
    }
    return out;
}

}  // namespace slim
