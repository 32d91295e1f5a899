#pragma once

#include <string>
#include <vector>

#include "darts/ctc.hpp"
#include "darts/tensor.hpp"

namespace darts {

struct Utterance {
    std::string id;
    Tensor features;  // [T, D]
    LabelSequence labels;
};

struct UtteranceSet {
    std::vector<Utterance> items;
    std::size_t feature_dim = 0;
};

// Desk-scale stand-in for a language: label prototypes are shared across
// related tasks (prototype_seed) while each task applies its own mixing
// matrix, so source and target tasks share structure without being equal.
struct SyntheticTaskConfig {
    std::string task_id = "task";
    std::size_t vocab_size = 11;  // blank + 10 labels
    std::size_t feature_dim = 13;
    std::uint64_t prototype_seed = 7;
    std::size_t seg_min = 4;
    std::size_t seg_max = 9;
    double noise = 0.4;
    std::size_t n_train = 600;
    std::size_t n_val = 100;
    std::size_t n_test = 100;
    std::size_t max_label_len = 8;
    // Every utterance stays CTC-feasible after this much time downsampling
    // (the VGG frontend divides the time axis by 4).
    std::size_t downsample_guard = 4;
    std::uint64_t seed = 1;
};

struct TaskData {
    UtteranceSet train;
    UtteranceSet val;
    UtteranceSet test;
};

TaskData generate_synthetic_task(const SyntheticTaskConfig& cfg);

// Directory layout: manifest.json (ids, dims, counts, CRC32 checksums), one
// DFTN feature file per utterance, labels.jsonl.
void write_dataset(const UtteranceSet& set, const std::string& dir);
UtteranceSet read_dataset(const std::string& dir);

struct Batch {
    Tensor features;  // [B, 1, Tmax, D], zero padded
    std::vector<std::size_t> lengths;
    std::vector<LabelSequence> labels;
    std::vector<std::string> ids;
};

// Deterministic shuffle by seed; sort_by_length buckets utterances by frame
// count before slicing batches (batch order is shuffled either way).
std::vector<Batch> make_batches(const UtteranceSet& set, std::size_t batch_size, std::uint64_t seed,
                                bool sort_by_length);

// Vocabulary for a synthetic task: "<blank>", "l1", ..., "l{V-1}".
std::vector<std::string> synthetic_vocab(std::size_t vocab_size);

}  // namespace darts
