#pragma once

#include <vector>

#include "darts/tensor.hpp"

namespace darts {

// Target labels, blank (index 0) excluded.
using LabelSequence = std::vector<int>;

constexpr int kCtcBlank = 0;

// -log P(target | logprobs) summed over all monotone alignments, computed by
// the log-domain forward algorithm over the blank-interleaved lattice.
// logprobs is [T, V] of per-frame log-probabilities; gradient flows to it.
// Throws NumericError when the target cannot fit in T frames.
Tensor ctc_loss(const Tensor& logprobs, const LabelSequence& target);

// Test oracle: enumerates every length-T label string, keeps those collapsing
// to the target, and sums their probabilities. Only for V^T enumerable sizes.
double ctc_bruteforce(const Tensor& logprobs, const LabelSequence& target);

// Collapse adjacent repeats, then delete blanks.
LabelSequence collapse_ctc(const std::vector<int>& frame_labels);

// Per-frame argmax (ties to the lowest index), then collapse.
LabelSequence greedy_decode(const Tensor& logprobs);

// Levenshtein distance with unit costs.
std::size_t edit_distance(const LabelSequence& a, const LabelSequence& b);

// 100 * edit_distance / |ref|. Errors on an empty reference.
double cer(const LabelSequence& hyp, const LabelSequence& ref);

// Minimum number of frames that can emit the target: length plus one
// separating blank per adjacent repeat.
std::size_t ctc_min_frames(const LabelSequence& target);

}  // namespace darts
