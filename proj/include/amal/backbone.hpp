#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amal/dataset.hpp"

namespace amal {

/// 3x3 convolution, stride 1, zero padding 1. Weights are laid out
/// [out][in][ky][kx], the same order torchvision uses.
struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    std::vector<float> weight;
    std::vector<float> bias;

    bool operator==(const ConvLayer&) const = default;
};

/// Convolutions per block; every block ends in 2x2 max pooling.
inline constexpr std::array<int, 5> kVgg16BlockDepths{2, 2, 3, 3, 3};
inline constexpr std::array<int, 5> kVgg16Widths{64, 128, 256, 512, 512};
inline constexpr int kVgg16ConvLayers = 13;

/// The VGG16 convolutional feature extractor (13 conv+ReLU layers, five
/// max-pool stages). Channel widths come from the weights file, so a
/// narrow variant with the same topology runs at desk scale.
class Backbone {
public:
    Backbone() = default;

    /// He-normal initialized backbone with the given per-block widths.
    static Backbone initialized(std::array<int, 5> block_widths, std::uint64_t seed);

    /// Throws BackboneUnavailableError when the file is missing or unreadable.
    static Backbone load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::string serialize() const;
    /// Throws std::runtime_error on malformed input.
    static Backbone deserialize(std::string_view bytes);

    const std::vector<ConvLayer>& layers() const { return layers_; }
    std::vector<ConvLayer>& layers() { return layers_; }
    std::array<int, 5> block_widths() const;

    std::size_t parameter_count() const;
    /// Flattened length of the final pooled map for a square input.
    std::size_t feature_size(int side) const;

    /// Intermediate state retained for backpropagation.
    struct Trace {
        std::vector<std::vector<float>> conv_inputs;   // CHW, one per conv layer
        std::vector<std::vector<float>> conv_outputs;  // post-ReLU, CHW
        std::vector<std::array<int, 2>> conv_dims;     // (H, W) per conv layer
        std::vector<std::vector<std::uint32_t>> pool_argmax;
        std::vector<std::array<int, 3>> pool_in_dims;  // (C, H, W)
    };

    std::vector<float> extract(const ImageTensor& image) const;
    std::vector<float> extract(const ImageTensor& image, Trace* trace) const;

    /// Accumulates dLoss/dparam into `grads` (same shapes as layers()).
    void backward(const Trace& trace, std::span<const float> grad_features,
                  std::vector<ConvLayer>& grads) const;

    /// Zero-valued gradient buffers shaped like layers().
    std::vector<ConvLayer> zero_like() const;

    bool operator==(const Backbone&) const = default;

private:
    std::vector<ConvLayer> layers_;
};

}  // namespace amal
