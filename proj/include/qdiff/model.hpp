#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qdiff/patch.hpp"

namespace qdiff {

enum class LayerKind {
    dense,
    softmax_head,   // logit head; same math as dense, marks the output layer
    conv3d,
    conv2d_per_band,
    relu,
    flatten,
};

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

// One layer of the minimal inference engine. Weight payloads are binary32 on
// disk; in memory they are held as double (values stay exactly
// binary32-representable, so serialization round-trips bit-exactly).
//
// Convolutions use valid padding and a single integer stride. A layer with K
// kernels stacks each kernel's output volume along the band axis:
//   conv3d:          (d1,d2,d3) -> (oh, ow, K*od)
//   conv2d_per_band: (d1,d2,d3) -> (oh, ow, K*d3)   (stride is spatial only)
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    // dense / softmax_head
    std::uint32_t out = 0;
    std::uint32_t in = 0;
    // conv3d / conv2d_per_band
    std::uint32_t kernels = 0;
    std::uint32_t kh = 0, kw = 0, kd = 0;
    std::uint32_t stride = 1;
    std::vector<double> weights;  // dense: out*in row-major; conv: K*kh*kw(*kd)
    std::vector<double> bias;     // dense: out; conv: K
};

struct Dims3 {
    std::uint32_t d1 = 0, d2 = 0, d3 = 0;
    std::size_t count() const {
        return static_cast<std::size_t>(d1) * d2 * d3;
    }
    bool operator==(const Dims3&) const = default;
};

struct ModelSpec {
    std::uint32_t version = 1;
    Dims3 input_dims;
    std::uint32_t class_count = 0;
    std::vector<LayerSpec> layers;

    // Walks shapes through every layer; throws ShapeError naming the first
    // offending layer. Returns the per-layer output dims.
    std::vector<Dims3> validate() const;
};

// Post-activation outputs of each relu layer, in layer order. These scalars
// are the neuron universe for KMNC signatures.
struct ActivationTrace {
    struct LayerTrace {
        std::string name;
        std::vector<double> values;
    };
    std::vector<LayerTrace> layers;

    std::size_t total_neurons() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.values.size();
        return n;
    }
};

// Per-neuron [low, high] activation ranges observed over a profiling set,
// divided into k equal sections at signature time. Neurons with low == high
// are degenerate and excluded from signatures.
struct NeuronIntervals {
    struct Interval {
        double low = 0.0;
        double high = 0.0;
        bool degenerate() const { return low == high; }
    };
    std::vector<Interval> neurons;  // flat, trace order
    std::vector<std::pair<std::string, std::size_t>> layer_sizes;
    std::uint32_t k = 10;
    std::string model_hash;
};

struct ForwardResult {
    std::vector<double> logits;
    ActivationTrace trace;
};

// Hook invoked after every layer (full-PTQ activation fake-quant plugs in
// here). Receives the layer index and the mutable flat output buffer.
using LayerBoundaryHook =
    std::function<void(std::size_t layer_index, std::vector<double>& values)>;

// Deterministic full-precision inference. Pure; safe to call concurrently.
ForwardResult forward(const ModelSpec& model, const Patch3D& input);

// Engine entry shared with the quantized path: per-layer effective weights
// override the model's own (same shapes), and the boundary hook, when set,
// rewrites each layer output before it feeds the next layer.
ForwardResult forward_with(const ModelSpec& model,
                           const std::vector<const LayerSpec*>& effective_layers,
                           const Patch3D& input,
                           const LayerBoundaryHook* boundary_hook);

// Index of the maximum logit; ties break to the lowest index.
std::size_t predict_label(const std::vector<double>& logits);

NeuronIntervals profile_intervals(const ModelSpec& model,
                                  const PatchSet& profiling_set,
                                  std::uint32_t k);

// Structured text (JSON) model file with base64 binary32 payloads.
ModelSpec load_model(const std::string& path);
void save_model(const ModelSpec& model, const std::string& path);
std::string serialize_model(const ModelSpec& model);   // canonical bytes
ModelSpec parse_model(const std::string& text, const std::string& origin);
std::string model_hash(const ModelSpec& model);        // fnv1a over canonical bytes

NeuronIntervals load_intervals(const std::string& path);
void save_intervals(const NeuronIntervals& intervals, const std::string& path);

}  // namespace qdiff
