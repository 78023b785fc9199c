#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slim/rng.hpp"

namespace slim {

// Fixed token map shared by all synthetic tasks. Each task draws its content
// from a disjoint range so task inputs are separable in pooled-feature space.
namespace tok {
constexpr int32_t kPad = 0;
constexpr int32_t kBos = 1;
constexpr int32_t kQry = 2;
constexpr int32_t kEq = 3;
constexpr int32_t kPlus = 4;
constexpr int32_t kKvKeyBase = 8;     // 16 keys
constexpr int32_t kKvValBase = 24;    // 16 values
constexpr int32_t kClsTokBase = 40;   // 16 content tokens
constexpr int32_t kClsAnsBase = 56;   // 4 class tokens
constexpr int32_t kModBase = 60;      // 16 digits (operands and answers)
constexpr int32_t kVocab = 96;
constexpr int kKvKeys = 16;
constexpr int kKvVals = 16;
constexpr int kKvPairs = 8;
constexpr int kClsClasses = 4;
constexpr int kModulus = 16;
}  // namespace tok

enum class TaskKind { KvRecall, SeqClass, ModularAdd, Mixture };

const char* task_kind_name(TaskKind k);
bool parse_task_kind(const std::string& s, TaskKind* out);

enum class Split { Train, Test };

struct Example {
    std::vector<int32_t> tokens;  // length seq_len; answer token included
    int32_t answer_pos = 0;       // index of the answer token
    int32_t answer = 0;
    TaskKind kind = TaskKind::KvRecall;
};

// Deterministic generator: example i of a split is a pure function of
// (seed, kind, split, i). Train and test index spaces are disjoint; the
// modular task additionally partitions the operand pairs between splits.
struct SyntheticTask {
    TaskKind kind = TaskKind::KvRecall;
    uint64_t seed = 0;
    int64_t n_train = 4096;
    int64_t n_test = 1024;
    int64_t seq_len = 32;

    Example make(Split split, int64_t index) const;
    // Answer candidates for restricted exact-match scoring.
    std::vector<int32_t> candidates(TaskKind k) const;
    int64_t size(Split s) const { return s == Split::Train ? n_train : n_test; }
};

}  // namespace slim
