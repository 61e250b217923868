#include "amal/backbone.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "amal/errors.hpp"
#include "amal/util.hpp"
#include "binary_io.hpp"

namespace amal {

namespace {

constexpr std::string_view kMagic = "AMALVGG1";

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// cols[(c*9 + ky*3 + kx), y*W + x] = in[c, y+ky-1, x+kx-1] (zero outside).
void im2col(const float* in, int channels, int h, int w, float* cols) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < channels; ++c) {
        const float* plane = in + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    float* dst = row + static_cast<std::size_t>(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst, dst + w, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(sy) * w;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - 1;
                        dst[x] = (sx < 0 || sx >= w) ? 0.0f : src[sx];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into the image gradient.
void col2im(const float* cols, int channels, int h, int w, float* grad_in) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::fill(grad_in, grad_in + static_cast<std::size_t>(channels) * hw, 0.0f);
    for (int c = 0; c < channels; ++c) {
        float* plane = grad_in + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    const float* src = row + static_cast<std::size_t>(y) * w;
                    float* dst = plane + static_cast<std::size_t>(sy) * w;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - 1;
                        if (sx >= 0 && sx < w) dst[sx] += src[x];
                    }
                }
            }
        }
    }
}

std::vector<float> conv_relu(const ConvLayer& layer, const std::vector<float>& in, int h, int w) {
    const auto hw = static_cast<Eigen::Index>(h) * w;
    const Eigen::Index k = static_cast<Eigen::Index>(layer.in_channels) * 9;
    std::vector<float> cols(static_cast<std::size_t>(k * hw));
    im2col(in.data(), layer.in_channels, h, w, cols.data());
    std::vector<float> out(static_cast<std::size_t>(layer.out_channels) * static_cast<std::size_t>(hw));
    MapMat o(out.data(), layer.out_channels, hw);
    o.noalias() = ConstMapMat(layer.weight.data(), layer.out_channels, k) * ConstMapMat(cols.data(), k, hw);
    for (int c = 0; c < layer.out_channels; ++c) {
        o.row(c).array() += layer.bias[static_cast<std::size_t>(c)];
    }
    o = o.cwiseMax(0.0f);
    return out;
}

std::vector<float> max_pool(const std::vector<float>& in, int channels, int h, int w,
                            std::vector<std::uint32_t>* argmax) {
    const int oh = h / 2;
    const int ow = w / 2;
    std::vector<float> out(static_cast<std::size_t>(channels) * oh * ow);
    if (argmax) argmax->assign(out.size(), 0);
    for (int c = 0; c < channels; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                float best = -std::numeric_limits<float>::infinity();
                std::uint32_t best_at = 0;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const auto at = static_cast<std::uint32_t>(base + static_cast<std::size_t>(2 * y + dy) * w + (2 * x + dx));
                        if (in[at] > best) {
                            best = in[at];
                            best_at = at;
                        }
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(c) * oh + y) * ow + x;
                out[o] = best;
                if (argmax) (*argmax)[o] = best_at;
            }
        }
    }
    return out;
}

}  // namespace

Backbone Backbone::initialized(std::array<int, 5> block_widths, std::uint64_t seed) {
    Backbone b;
    Rng rng(seed);
    int in_c = 3;
    for (std::size_t block = 0; block < 5; ++block) {
        if (block_widths[block] <= 0) throw RangeError("backbone widths must be positive");
        for (int d = 0; d < kVgg16BlockDepths[block]; ++d) {
            ConvLayer layer;
            layer.in_channels = in_c;
            layer.out_channels = block_widths[block];
            const double stddev = std::sqrt(2.0 / (9.0 * in_c));
            layer.weight.resize(static_cast<std::size_t>(layer.out_channels) * in_c * 9);
            for (auto& v : layer.weight) v = static_cast<float>(rng.normal() * stddev);
            layer.bias.assign(static_cast<std::size_t>(layer.out_channels), 0.0f);
            b.layers_.push_back(std::move(layer));
            in_c = block_widths[block];
        }
    }
    return b;
}

std::array<int, 5> Backbone::block_widths() const {
    std::array<int, 5> widths{};
    std::size_t l = 0;
    for (std::size_t block = 0; block < 5; ++block) {
        l += static_cast<std::size_t>(kVgg16BlockDepths[block]);
        widths[block] = layers_.at(l - 1).out_channels;
    }
    return widths;
}

std::size_t Backbone::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

std::size_t Backbone::feature_size(int side) const {
    int s = side;
    for (int block = 0; block < 5; ++block) s /= 2;
    if (s <= 0) throw RangeError("input side " + std::to_string(side) + " is too small for five pooling stages");
    return static_cast<std::size_t>(layers_.back().out_channels) * s * s;
}

std::string Backbone::serialize() const {
    detail::ByteWriter w;
    w.raw(kMagic.data(), kMagic.size());
    w.u32(static_cast<std::uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
        w.u32(static_cast<std::uint32_t>(l.in_channels));
        w.u32(static_cast<std::uint32_t>(l.out_channels));
        w.array<float>(l.weight);
        w.array<float>(l.bias);
    }
    return w.take();
}

Backbone Backbone::deserialize(std::string_view bytes) {
    detail::ByteReader r(bytes);
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::string_view(magic, 8) != kMagic) throw std::runtime_error("not a backbone weights blob");
    const std::uint32_t n = r.u32();
    if (n != kVgg16ConvLayers) {
        throw std::runtime_error("expected 13 convolutional layers, found " + std::to_string(n));
    }
    Backbone b;
    int expected_in = 3;
    for (std::uint32_t i = 0; i < n; ++i) {
        ConvLayer l;
        l.in_channels = static_cast<int>(r.u32());
        l.out_channels = static_cast<int>(r.u32());
        l.weight = r.array<float>();
        l.bias = r.array<float>();
        if (l.in_channels != expected_in || l.out_channels <= 0 ||
            l.weight.size() != static_cast<std::size_t>(l.in_channels) * l.out_channels * 9 ||
            l.bias.size() != static_cast<std::size_t>(l.out_channels)) {
            throw std::runtime_error("inconsistent shape in conv layer " + std::to_string(i));
        }
        expected_in = l.out_channels;
        b.layers_.push_back(std::move(l));
    }
    if (!r.done()) throw std::runtime_error("trailing bytes after backbone weights");
    return b;
}

Backbone Backbone::load(const std::filesystem::path& path) {
    if (path.empty()) throw BackboneUnavailableError("no pretrained backbone weights configured");
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const Error& e) {
        throw BackboneUnavailableError("pretrained backbone weights unavailable: " + std::string(e.what()));
    }
    try {
        return deserialize(bytes);
    } catch (const std::runtime_error& e) {
        throw BackboneUnavailableError(path.string() + ": " + e.what());
    }
}

void Backbone::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

std::vector<float> Backbone::extract(const ImageTensor& image) const { return extract(image, nullptr); }

std::vector<float> Backbone::extract(const ImageTensor& image, Trace* trace) const {
    if (image.channels != 3 || layers_.empty()) throw RangeError("backbone expects a 3-channel image");
    int h = image.height;
    int w = image.width;
    // HWC -> CHW
    std::vector<float> x(image.data.size());
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < 3; ++c) x[c * hw + p] = image.data[p * 3 + c];

    std::size_t l = 0;
    for (std::size_t block = 0; block < 5; ++block) {
        for (int d = 0; d < kVgg16BlockDepths[block]; ++d, ++l) {
            std::vector<float> y = conv_relu(layers_[l], x, h, w);
            if (trace) {
                trace->conv_inputs.push_back(std::move(x));
                trace->conv_outputs.push_back(y);
                trace->conv_dims.push_back({h, w});
            }
            x = std::move(y);
        }
        const int c = layers_[l - 1].out_channels;
        std::vector<std::uint32_t> argmax;
        std::vector<float> pooled = max_pool(x, c, h, w, trace ? &argmax : nullptr);
        if (trace) {
            trace->pool_argmax.push_back(std::move(argmax));
            trace->pool_in_dims.push_back({c, h, w});
        }
        x = std::move(pooled);
        h /= 2;
        w /= 2;
    }
    return x;
}

std::vector<ConvLayer> Backbone::zero_like() const {
    std::vector<ConvLayer> g;
    g.reserve(layers_.size());
    for (const auto& l : layers_) {
        ConvLayer z;
        z.in_channels = l.in_channels;
        z.out_channels = l.out_channels;
        z.weight.assign(l.weight.size(), 0.0f);
        z.bias.assign(l.bias.size(), 0.0f);
        g.push_back(std::move(z));
    }
    return g;
}

void Backbone::backward(const Trace& trace, std::span<const float> grad_features,
                        std::vector<ConvLayer>& grads) const {
    std::vector<float> g(grad_features.begin(), grad_features.end());
    std::size_t l = layers_.size();
    for (std::size_t block = 5; block-- > 0;) {
        // un-pool
        const auto [pc, ph, pw] = trace.pool_in_dims[block];
        std::vector<float> gin(static_cast<std::size_t>(pc) * ph * pw, 0.0f);
        const auto& argmax = trace.pool_argmax[block];
        for (std::size_t o = 0; o < argmax.size(); ++o) gin[argmax[o]] += g[o];
        g = std::move(gin);

        for (int d = kVgg16BlockDepths[block]; d-- > 0;) {
            --l;
            const ConvLayer& layer = layers_[l];
            const auto [h, w] = trace.conv_dims[l];
            const auto hw = static_cast<Eigen::Index>(h) * w;
            const Eigen::Index k = static_cast<Eigen::Index>(layer.in_channels) * 9;
            const auto& out = trace.conv_outputs[l];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (out[i] <= 0.0f) g[i] = 0.0f;

            std::vector<float> cols(static_cast<std::size_t>(k * hw));
            im2col(trace.conv_inputs[l].data(), layer.in_channels, h, w, cols.data());
            ConstMapMat gout(g.data(), layer.out_channels, hw);
            MapMat(grads[l].weight.data(), layer.out_channels, k).noalias() +=
                gout * ConstMapMat(cols.data(), k, hw).transpose();
            Eigen::Map<Eigen::VectorXf>(grads[l].bias.data(), layer.out_channels) += gout.rowwise().sum();

            if (l == 0) break;
            MapMat(cols.data(), k, hw).noalias() =
                ConstMapMat(layer.weight.data(), layer.out_channels, k).transpose() * gout;
            std::vector<float> gprev(static_cast<std::size_t>(layer.in_channels) * static_cast<std::size_t>(hw));
            col2im(cols.data(), layer.in_channels, h, w, gprev.data());
            g = std::move(gprev);
        }
    }
}

}  // namespace amal
