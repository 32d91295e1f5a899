#include "darts/candidates.hpp"

#include <cmath>

namespace darts {

const std::vector<TransformationKind>& all_transformation_kinds() {
    static const std::vector<TransformationKind> kinds = {
        TransformationKind::Conv3x3,    TransformationKind::Conv5x5,    TransformationKind::DilConv3x3,
        TransformationKind::DilConv5x5, TransformationKind::AvgPool3x3, TransformationKind::MaxPool3x3,
        TransformationKind::SkipConnect,
    };
    return kinds;
}

std::string kind_name(TransformationKind k) {
    switch (k) {
        case TransformationKind::Conv3x3: return "conv3x3";
        case TransformationKind::Conv5x5: return "conv5x5";
        case TransformationKind::DilConv3x3: return "dil_conv3x3";
        case TransformationKind::DilConv5x5: return "dil_conv5x5";
        case TransformationKind::AvgPool3x3: return "avg_pool3x3";
        case TransformationKind::MaxPool3x3: return "max_pool3x3";
        case TransformationKind::SkipConnect: return "skip_connect";
    }
    throw Error("kind_name: unknown transformation kind");
}

TransformationKind kind_from_name(const std::string& name) {
    for (TransformationKind k : all_transformation_kinds()) {
        if (kind_name(k) == name) return k;
    }
    throw ConfigError(str("unknown transformation kind: ", name));
}

namespace {

struct ConvSpec {
    std::size_t k;
    int dilation;
};

bool conv_kind(TransformationKind kind, ConvSpec* spec) {
    switch (kind) {
        case TransformationKind::Conv3x3: *spec = {3, 1}; return true;
        case TransformationKind::Conv5x5: *spec = {5, 1}; return true;
        case TransformationKind::DilConv3x3: *spec = {3, 2}; return true;
        case TransformationKind::DilConv5x5: *spec = {5, 2}; return true;
        default: return false;
    }
}

Tensor init_conv_kernel(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    return Tensor::uniform({cout, cin, k, k}, rng, -bound, bound, true);
}

}  // namespace

TransformationInstance::TransformationInstance(TransformationKind kind, std::size_t channels, Rng& rng,
                                               ConvOrder order)
    : kind_(kind), channels_(channels), order_(order) {
    if (channels == 0) throw ShapeError("TransformationInstance: channels must be >= 1");
    ConvSpec spec;
    if (conv_kind(kind, &spec)) {
        ksize_ = spec.k;
        dilation_ = spec.dilation;
        padding_ = spec.dilation * static_cast<int>(spec.k - 1) / 2;
        kernel_ = init_conv_kernel(channels, channels, spec.k, rng);
        bias_ = Tensor({channels}, 0.0, true);
        gamma_ = Tensor({channels}, 1.0, true);
        beta_ = Tensor({channels}, 0.0, true);
        run_mean_ = Tensor({channels}, 0.0);
        run_var_ = Tensor({channels}, 1.0);
    }
}

bool TransformationInstance::has_params() const { return kernel_.defined(); }

Tensor TransformationInstance::forward(const Tensor& x, Mode mode,
                                       const std::vector<std::size_t>* time_lengths) {
    if (x.rank() != 4 || x.dim(1) != channels_) {
        throw ShapeError(str(kind_name(kind_), ": expected ", channels_, " channels, got input ",
                             shape_str(x.shape())));
    }
    switch (kind_) {
        case TransformationKind::AvgPool3x3: {
            Tensor y = pool2d(x, PoolKind::Avg, time_lengths);
            return time_lengths ? mask_time(y, *time_lengths) : y;
        }
        case TransformationKind::MaxPool3x3: {
            Tensor y = pool2d(x, PoolKind::Max, time_lengths);
            return time_lengths ? mask_time(y, *time_lengths) : y;
        }
        case TransformationKind::SkipConnect:
            return x;
        default: {
            Tensor y;
            if (order_ == ConvOrder::ConvReluBn) {
                y = conv2d(x, kernel_, bias_, dilation_, padding_);
                y = relu(y);
                y = batch_norm(y, gamma_, beta_, run_mean_, run_var_, mode);
            } else {
                y = relu(x);
                y = conv2d(y, kernel_, bias_, dilation_, padding_);
                y = batch_norm(y, gamma_, beta_, run_mean_, run_var_, mode);
            }
            return time_lengths ? mask_time(y, *time_lengths) : y;
        }
    }
}

std::vector<NamedTensor> TransformationInstance::parameters(const std::string& prefix) const {
    if (!has_params()) return {};
    return {{prefix + ".kernel", kernel_},
            {prefix + ".bias", bias_},
            {prefix + ".gamma", gamma_},
            {prefix + ".beta", beta_}};
}

std::vector<NamedTensor> TransformationInstance::buffers(const std::string& prefix) const {
    if (!has_params()) return {};
    return {{prefix + ".running_mean", run_mean_}, {prefix + ".running_var", run_var_}};
}

Tensor apply_transformation(TransformationInstance& t, const Tensor& x, Mode mode,
                            const std::vector<std::size_t>* time_lengths) {
    return t.forward(x, mode, time_lengths);
}

std::vector<TransformationInstance> build_candidate_set(std::size_t channels, std::uint64_t seed,
                                                        ConvOrder order) {
    if (channels == 0) throw ShapeError("build_candidate_set: channels must be >= 1");
    Rng rng(seed);
    std::vector<TransformationInstance> out;
    out.reserve(kNumTransformationKinds);
    for (TransformationKind k : all_transformation_kinds()) {
        out.emplace_back(k, channels, rng, order);
    }
    return out;
}

std::size_t count_parameters(const std::vector<NamedTensor>& params) {
    std::size_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();
    return total;
}

// ---------------------------------------------------------------------------
// VGG baseline
// ---------------------------------------------------------------------------

VggBaselineBlock::VggBaselineBlock(std::size_t width, std::uint64_t seed) : width_(width) {
    if (width == 0) throw ShapeError("VggBaselineBlock: width must be >= 1");
    Rng rng(seed);
    layers_.resize(6);
    for (std::size_t i = 0; i < 6; ++i) {
        const std::size_t cin = i == 0 ? 1 : width;
        layers_[i].kernel = init_conv_kernel(width, cin, 3, rng);
        layers_[i].bias = Tensor({width}, 0.0, true);
        layers_[i].gamma = Tensor({width}, 1.0, true);
        layers_[i].beta = Tensor({width}, 0.0, true);
        layers_[i].run_mean = Tensor({width}, 0.0);
        layers_[i].run_var = Tensor({width}, 1.0);
    }
}

std::size_t VggBaselineBlock::output_length(std::size_t t) {
    const std::size_t half = (t + 1) / 2;
    return (half + 1) / 2;
}

Tensor VggBaselineBlock::layer_forward(ConvLayer& l, const Tensor& x, Mode mode,
                                       const std::vector<std::size_t>* time_lengths) {
    Tensor y = conv2d(x, l.kernel, l.bias, 1, 1);
    y = relu(y);
    y = batch_norm(y, l.gamma, l.beta, l.run_mean, l.run_var, mode);
    return time_lengths ? mask_time(y, *time_lengths) : y;
}

Tensor VggBaselineBlock::forward(const Tensor& x, Mode mode,
                                 const std::vector<std::size_t>* time_lengths) {
    std::vector<std::size_t> lens;
    const std::vector<std::size_t>* cur = time_lengths;
    if (time_lengths) lens = *time_lengths;

    Tensor y = x;
    for (std::size_t i = 0; i < 6; ++i) {
        y = layer_forward(layers_[i], y, mode, cur);
        if (i == 2 || i == 5) {
            y = pool2d_vgg(y, cur);
            if (cur) {
                for (auto& l : lens) l = (l + 1) / 2;
                cur = &lens;
                y = mask_time(y, lens);
            }
        }
    }
    return y;
}

std::vector<NamedTensor> VggBaselineBlock::parameters(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string base = str(prefix, ".l", i);
        out.push_back({base + ".kernel", layers_[i].kernel});
        out.push_back({base + ".bias", layers_[i].bias});
        out.push_back({base + ".gamma", layers_[i].gamma});
        out.push_back({base + ".beta", layers_[i].beta});
    }
    return out;
}

std::vector<NamedTensor> VggBaselineBlock::buffers(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string base = str(prefix, ".l", i);
        out.push_back({base + ".running_mean", layers_[i].run_mean});
        out.push_back({base + ".running_var", layers_[i].run_var});
    }
    return out;
}

}  // namespace darts
