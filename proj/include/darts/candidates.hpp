#pragma once

#include <string>
#include <vector>

#include "darts/ops.hpp"
#include "darts/tensor.hpp"

namespace darts {

// The seven candidate transformations, in fixed serialization order.
enum class TransformationKind {
    Conv3x3 = 0,
    Conv5x5,
    DilConv3x3,
    DilConv5x5,
    AvgPool3x3,
    MaxPool3x3,
    SkipConnect,
};

constexpr std::size_t kNumTransformationKinds = 7;

const std::vector<TransformationKind>& all_transformation_kinds();
std::string kind_name(TransformationKind k);
TransformationKind kind_from_name(const std::string& name);

// Composite ordering for convolutional candidates. Default follows the
// conv -> ReLU -> batch-norm reading; the DARTS-conventional ReLU -> conv ->
// batch-norm ordering is selectable for comparison runs.
enum class ConvOrder { ConvReluBn, ReluConvBn };

// One candidate transformation at a fixed channel width. Convolutional kinds
// carry kernel/bias plus batch-norm affine and running stats; pooling and
// skip carry nothing. All kinds map [N,C,H,W] -> [N,C,H,W].
class TransformationInstance {
public:
    TransformationInstance(TransformationKind kind, std::size_t channels, Rng& rng,
                           ConvOrder order = ConvOrder::ConvReluBn);

    Tensor forward(const Tensor& x, Mode mode, const std::vector<std::size_t>* time_lengths = nullptr);

    TransformationKind kind() const { return kind_; }
    std::size_t channels() const { return channels_; }
    bool has_params() const;

    std::vector<NamedTensor> parameters(const std::string& prefix) const;
    std::vector<NamedTensor> buffers(const std::string& prefix) const;

private:
    TransformationKind kind_;
    std::size_t channels_;
    ConvOrder order_;
    std::size_t ksize_ = 0;
    int dilation_ = 1;
    int padding_ = 0;
    Tensor kernel_, bias_, gamma_, beta_;
    Tensor run_mean_, run_var_;
};

Tensor apply_transformation(TransformationInstance& t, const Tensor& x, Mode mode,
                            const std::vector<std::size_t>* time_lengths = nullptr);

// All |F| candidates at the given width, in TransformationKind order, with
// deterministic seeded initialization.
std::vector<TransformationInstance> build_candidate_set(std::size_t channels, std::uint64_t seed,
                                                        ConvOrder order = ConvOrder::ConvReluBn);

std::size_t count_parameters(const std::vector<NamedTensor>& params);

// Fixed-topology comparison baseline: two stages of three 3x3 conv layers
// (each conv -> ReLU -> batch-norm), a 2x2 stride-2 max pool after each
// stage. Maps [N,1,T,D] -> [N,width,ceil(T/4),ceil(D/4)] (ceil per stage).
class VggBaselineBlock {
public:
    VggBaselineBlock(std::size_t width, std::uint64_t seed);

    Tensor forward(const Tensor& x, Mode mode, const std::vector<std::size_t>* time_lengths = nullptr);

    std::size_t width() const { return width_; }
    static std::size_t output_length(std::size_t t);  // ceil(ceil(T/2)/2)

    std::vector<NamedTensor> parameters(const std::string& prefix) const;
    std::vector<NamedTensor> buffers(const std::string& prefix) const;

private:
    struct ConvLayer {
        Tensor kernel, bias, gamma, beta, run_mean, run_var;
    };
    Tensor layer_forward(ConvLayer& l, const Tensor& x, Mode mode,
                         const std::vector<std::size_t>* time_lengths);
    std::size_t width_;
    std::vector<ConvLayer> layers_;  // six, pool after index 2 and 5
};

}  // namespace darts
