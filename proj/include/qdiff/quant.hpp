#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qdiff/model.hpp"
#include "qdiff/patch.hpp"

namespace qdiff {

// Ties round to the nearest even integer (banker's rounding), the one
// rounding rule used everywhere in the quantization path.
double round_half_even(double v);

enum class QuantMode {
    weights_only,  // int8 weights, float activations
    full,          // int8 weights + activation fake-quant at every layer boundary
};

const char* quant_mode_name(QuantMode mode);
QuantMode quant_mode_from_name(const std::string& name);

struct QuantParams {
    double scale = 1.0;
    std::int32_t zero_point = 0;
};

// Per-tensor symmetric: scale = max|w| / 127, zero point 0. An all-zero
// tensor gets scale 1 so dequantization stays well defined.
QuantParams symmetric_params(const std::vector<double>& values);

// Asymmetric affine over an observed range: scale = (high - low) / 255,
// zero point = round_half_even(-128 - low/scale) clamped to int8. A
// degenerate range (high == low) gets scale 1, zero point 0.
QuantParams affine_params(double low, double high);

std::int8_t quantize_value(double v, const QuantParams& p);
double dequantize_value(std::int8_t q, const QuantParams& p);
double fake_quant(double v, const QuantParams& p);

struct QuantTensor {
    QuantParams params;
    std::vector<std::int8_t> q;

    std::vector<double> dequantize() const;
};

// Mirrors one source layer: shape metadata verbatim, weight payloads as
// int8, plus the calibrated activation quantizer in full mode.
struct QuantLayer {
    LayerSpec shape;  // weights/bias left empty; kind, name, dims, stride kept
    bool has_weights = false;
    QuantTensor weights;
    QuantTensor bias;
    bool has_activation = false;
    QuantParams activation;
};

struct QuantizedModel {
    std::uint32_t version = 1;
    QuantMode mode = QuantMode::weights_only;
    std::string source_model_hash;
    Dims3 input_dims;
    std::uint32_t class_count = 0;
    std::vector<QuantLayer> layers;

    // Dequantized float-weight model; validates shapes.
    ModelSpec effective() const;
};

// Per-layer activation ranges observed over a calibration set, as affine
// QuantParams (one per layer boundary).
std::vector<QuantParams> calibrate(const ModelSpec& model,
                                   const PatchSet& calibration_set);

// Post-training quantization of every weight-bearing layer (weights and
// biases both per-tensor symmetric int8). Full mode additionally embeds the
// calibrated activation params; weights_only ignores `calibration` (may be
// null).
QuantizedModel quantize_model(const ModelSpec& source, QuantMode mode,
                              const PatchSet* calibration);

// Precomputes the dequantized effective model once so repeated forwards stay
// cheap. quantized_forward() is the one-shot convenience wrapper.
class QuantRuntime {
  public:
    explicit QuantRuntime(const QuantizedModel& quantized);

    ForwardResult forward(const Patch3D& input) const;
    const ModelSpec& effective_model() const { return effective_; }

  private:
    QuantMode mode_;
    ModelSpec effective_;
    std::vector<QuantParams> activation_;
    std::vector<bool> has_activation_;
};

ForwardResult quantized_forward(const QuantizedModel& quantized,
                                const Patch3D& input);

QuantizedModel load_quantized_model(const std::string& path);
void save_quantized_model(const QuantizedModel& model, const std::string& path);

}  // namespace qdiff
