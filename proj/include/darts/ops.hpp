#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "darts/tensor.hpp"

namespace darts {

// ---------------------------------------------------------------------------
// Elementwise / structural primitives. Every op validates shapes, computes
// the forward value, and records its backward rule on the active tape.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// y = x * w[index]; gradient flows to both x and w.
Tensor scale_by_index(const Tensor& x, const Tensor& w, std::size_t index);
// y[n, ...] = x[n, ...] * row_factors[n]; factors are constants.
Tensor rowscale(const Tensor& x, const std::vector<double>& row_factors);
Tensor sum_all(const Tensor& x);
Tensor mean_scalars(const std::vector<Tensor>& xs);

// Last-axis slice [lo, hi).
Tensor slice_last(const Tensor& x, std::size_t lo, std::size_t hi);
// x: [N, T, F] -> [N, F] at time t.
Tensor time_slice(const Tensor& x, std::size_t t);
// x: [N, T, F] -> [t_len, F], utterance n, frames [0, t_len).
Tensor slice_frames(const Tensor& x, std::size_t n, std::size_t t_len);
// frames: T tensors of [N, F] -> [N, T, F].
Tensor stack_time(const std::vector<Tensor>& frames);
// [N, T, F1] ++ [N, T, F2] -> [N, T, F1+F2].
Tensor concat_last(const Tensor& a, const Tensor& b);
// [N, C, T, D] -> [N, T, C*D]: per-frame flatten, channel-major.
Tensor channels_to_features(const Tensor& x);
// Channel-axis concatenation; blocks appear in argument order.
Tensor concat_channels(const std::vector<Tensor>& xs);
// Zeroes frames with t >= lengths[n] along the H (time) axis of [N, C, T, D].
Tensor mask_time(const Tensor& x, const std::vector<std::size_t>& lengths);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { Relu, Sigmoid, Tanh };

Tensor activation(Act kind, const Tensor& x);
inline Tensor relu(const Tensor& x) { return activation(Act::Relu, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Act::Sigmoid, x); }
inline Tensor tanh_act(const Tensor& x) { return activation(Act::Tanh, x); }

Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
// 1-d softmax over unmasked entries only; masked entries get weight exactly 0.
Tensor masked_softmax(const Tensor& alpha, const std::vector<std::uint8_t>& keep);

// ---------------------------------------------------------------------------
// NN primitives
// ---------------------------------------------------------------------------

enum class ConvBackend { Naive, Im2col };
ConvBackend conv_backend();
void set_conv_backend(ConvBackend b);

// Stride-one 2-d convolution with zero padding. Requires odd kernels and
// padding == dilation * (k - 1) / 2 so spatial dims are preserved.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int dilation, int padding);

enum class PoolKind { Max, Avg };

// 3x3 window, stride 1, padding 1; spatial dims preserved. Max pads with
// -inf; avg divides by the in-bounds element count. Optional per-utterance
// time lengths treat frames at or beyond the length as out of bounds.
Tensor pool2d(const Tensor& x, PoolKind kind, const std::vector<std::size_t>* time_lengths = nullptr);

// 2x2 max pool, stride 2, ceil mode (the VGG stage pool). Output time axis
// is ceil(T/2).
Tensor pool2d_vgg(const Tensor& x, const std::vector<std::size_t>* time_lengths = nullptr);

// Batch normalization over (N, H, W) per channel. Train mode normalizes with
// batch statistics and updates running_mean/running_var in place; eval mode
// reads them. running_var holds the unbiased estimate.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, Mode mode, double momentum = 0.1, double eps = 1e-5);

// Affine map over the last axis: y = x W^T + b, weight is [Dout, Din].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct LstmParams {
    Tensor w_ih;  // [4H, Din], gate order i, f, g, o
    Tensor w_hh;  // [4H, H]
    Tensor b_ih;  // [4H]
    Tensor b_hh;  // [4H]
};

LstmParams make_lstm_params(std::size_t input_dim, std::size_t hidden, Rng& rng);

// One step of the standard LSTM recurrence; differentiable through time via
// the tape. Returns {h', c'}.
std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                                    const LstmParams& p);

}  // namespace darts
