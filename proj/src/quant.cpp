#include "qdiff/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"

namespace qdiff {

namespace {
using nlohmann::json;

std::int32_t clamp_i8(double v) {
    if (v < -128.0) return -128;
    if (v > 127.0) return 127;
    return static_cast<std::int32_t>(v);
}

bool layer_has_weights(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense:
        case LayerKind::softmax_head:
        case LayerKind::conv3d:
        case LayerKind::conv2d_per_band:
            return true;
        case LayerKind::relu:
        case LayerKind::flatten:
            return false;
    }
    return false;
}

QuantTensor quantize_tensor(const std::vector<double>& values) {
    QuantTensor t;
    t.params = symmetric_params(values);
    t.q.reserve(values.size());
    for (double v : values) t.q.push_back(quantize_value(v, t.params));
    return t;
}

LayerSpec strip_weights(const LayerSpec& l) {
    LayerSpec s = l;
    s.weights.clear();
    s.bias.clear();
    return s;
}

}  // namespace

double round_half_even(double v) {
    double fl = std::floor(v);
    double diff = v - fl;
    if (diff > 0.5) return fl + 1.0;
    if (diff < 0.5) return fl;
    return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

const char* quant_mode_name(QuantMode mode) {
    return mode == QuantMode::weights_only ? "weights_only" : "full";
}

QuantMode quant_mode_from_name(const std::string& name) {
    if (name == "weights_only") return QuantMode::weights_only;
    if (name == "full") return QuantMode::full;
    throw FormatError("unknown quantization mode '" + name + "'");
}

QuantParams symmetric_params(const std::vector<double>& values) {
    double max_abs = 0.0;
    for (double v : values) max_abs = std::max(max_abs, std::abs(v));
    QuantParams p;
    p.scale = max_abs == 0.0 ? 1.0 : max_abs / 127.0;
    p.zero_point = 0;
    return p;
}

QuantParams affine_params(double low, double high) {
    if (high < low) throw ConfigError("activation range has high < low");
    QuantParams p;
    if (high == low) return p;  // degenerate: scale 1, zero point 0
    p.scale = (high - low) / 255.0;
    p.zero_point = clamp_i8(round_half_even(-128.0 - low / p.scale));
    return p;
}

std::int8_t quantize_value(double v, const QuantParams& p) {
    double q = round_half_even(v / p.scale) + p.zero_point;
    return static_cast<std::int8_t>(clamp_i8(q));
}

double dequantize_value(std::int8_t q, const QuantParams& p) {
    return p.scale * (static_cast<double>(q) - p.zero_point);
}

double fake_quant(double v, const QuantParams& p) {
    return dequantize_value(quantize_value(v, p), p);
}

std::vector<double> QuantTensor::dequantize() const {
    std::vector<double> out;
    out.reserve(q.size());
    for (std::int8_t qi : q) out.push_back(dequantize_value(qi, params));
    return out;
}

ModelSpec QuantizedModel::effective() const {
    ModelSpec m;
    m.input_dims = input_dims;
    m.class_count = class_count;
    for (const QuantLayer& ql : layers) {
        LayerSpec l = ql.shape;
        if (ql.has_weights) {
            l.weights = ql.weights.dequantize();
            l.bias = ql.bias.dequantize();
        }
        m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
}

std::vector<QuantParams> calibrate(const ModelSpec& model,
                                   const PatchSet& calibration_set) {
    model.validate();
    if (calibration_set.patches.empty())
        throw ConfigError("calibration set is empty");
    std::vector<double> lo(model.layers.size(),
                           std::numeric_limits<double>::infinity());
    std::vector<double> hi(model.layers.size(),
                           -std::numeric_limits<double>::infinity());
    LayerBoundaryHook observe = [&](std::size_t li, std::vector<double>& values) {
        for (double v : values) {
            lo[li] = std::min(lo[li], v);
            hi[li] = std::max(hi[li], v);
        }
    };
    for (const Patch3D& p : calibration_set.patches)
        forward_with(model, {}, p, &observe);
    std::vector<QuantParams> out;
    out.reserve(model.layers.size());
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        out.push_back(affine_params(lo[i], hi[i]));
    return out;
}

QuantizedModel quantize_model(const ModelSpec& source, QuantMode mode,
                              const PatchSet* calibration) {
    source.validate();
    QuantizedModel qm;
    qm.mode = mode;
    qm.source_model_hash = model_hash(source);
    qm.input_dims = source.input_dims;
    qm.class_count = source.class_count;

    for (const LayerSpec& l : source.layers) {
        QuantLayer ql;
        ql.shape = strip_weights(l);
        if (layer_has_weights(l.kind)) {
            ql.has_weights = true;
            ql.weights = quantize_tensor(l.weights);
            ql.bias = quantize_tensor(l.bias);
        }
        qm.layers.push_back(std::move(ql));
    }

    if (mode == QuantMode::full) {
        if (!calibration || calibration->patches.empty())
            throw ConfigError(
                "full quantization needs a non-empty calibration set");
        std::vector<QuantParams> act = calibrate(source, *calibration);
        for (std::size_t i = 0; i < qm.layers.size(); ++i) {
            qm.layers[i].has_activation = true;
            qm.layers[i].activation = act[i];
        }
    }
    return qm;
}

QuantRuntime::QuantRuntime(const QuantizedModel& quantized)
    : mode_(quantized.mode), effective_(quantized.effective()) {
    activation_.resize(quantized.layers.size());
    has_activation_.assign(quantized.layers.size(), false);
    for (std::size_t i = 0; i < quantized.layers.size(); ++i) {
        const QuantLayer& ql = quantized.layers[i];
        if (mode_ == QuantMode::full && !ql.has_activation)
            throw ShapeError("full-mode quantized model is missing activation "
                             "params for layer " +
                             std::to_string(i));
        activation_[i] = ql.activation;
        has_activation_[i] = ql.has_activation;
    }
}

ForwardResult QuantRuntime::forward(const Patch3D& input) const {
    if (mode_ == QuantMode::weights_only) return qdiff::forward(effective_, input);
    LayerBoundaryHook hook = [this](std::size_t li, std::vector<double>& values) {
        if (!has_activation_[li]) return;
        const QuantParams& p = activation_[li];
        for (double& v : values) v = fake_quant(v, p);
    };
    return forward_with(effective_, {}, input, &hook);
}

ForwardResult quantized_forward(const QuantizedModel& quantized,
                                const Patch3D& input) {
    return QuantRuntime(quantized).forward(input);
}

namespace {

json tensor_to_json(const QuantTensor& t) {
    json j;
    j["scale"] = t.params.scale;
    j["zero_point"] = t.params.zero_point;
    j["q"] = encode_i8_payload(t.q);
    return j;
}

QuantTensor tensor_from_json(const json& j) {
    QuantTensor t;
    t.params.scale = j.at("scale").get<double>();
    t.params.zero_point = j.at("zero_point").get<std::int32_t>();
    t.q = decode_i8_payload(j.at("q").get<std::string>());
    return t;
}

json shape_to_json(const LayerSpec& l) {
    json j;
    j["kind"] = layer_kind_name(l.kind);
    j["name"] = l.name;
    switch (l.kind) {
        case LayerKind::dense:
        case LayerKind::softmax_head:
            j["out"] = l.out;
            j["in"] = l.in;
            break;
        case LayerKind::conv3d:
            j["kernels"] = l.kernels;
            j["kernel_dims"] = {l.kh, l.kw, l.kd};
            j["stride"] = l.stride;
            break;
        case LayerKind::conv2d_per_band:
            j["kernels"] = l.kernels;
            j["kernel_dims"] = {l.kh, l.kw};
            j["stride"] = l.stride;
            break;
        case LayerKind::relu:
        case LayerKind::flatten:
            break;
    }
    return j;
}

LayerSpec shape_from_json(const json& j) {
    LayerSpec l;
    l.kind = layer_kind_from_name(j.at("kind").get<std::string>());
    l.name = j.at("name").get<std::string>();
    switch (l.kind) {
        case LayerKind::dense:
        case LayerKind::softmax_head:
            l.out = j.at("out").get<std::uint32_t>();
            l.in = j.at("in").get<std::uint32_t>();
            break;
        case LayerKind::conv3d: {
            l.kernels = j.at("kernels").get<std::uint32_t>();
            auto kd = j.at("kernel_dims");
            if (!kd.is_array() || kd.size() != 3)
                throw FormatError("conv3d kernel_dims must have 3 entries");
            l.kh = kd[0].get<std::uint32_t>();
            l.kw = kd[1].get<std::uint32_t>();
            l.kd = kd[2].get<std::uint32_t>();
            l.stride = j.at("stride").get<std::uint32_t>();
            break;
        }
        case LayerKind::conv2d_per_band: {
            l.kernels = j.at("kernels").get<std::uint32_t>();
            auto kd = j.at("kernel_dims");
            if (!kd.is_array() || kd.size() != 2)
                throw FormatError(
                    "conv2d_per_band kernel_dims must have 2 entries");
            l.kh = kd[0].get<std::uint32_t>();
            l.kw = kd[1].get<std::uint32_t>();
            l.stride = j.at("stride").get<std::uint32_t>();
            break;
        }
        case LayerKind::relu:
        case LayerKind::flatten:
            break;
    }
    return l;
}

}  // namespace

void save_quantized_model(const QuantizedModel& model,
                          const std::string& path) {
    json j;
    j["format"] = "qdiff-quant";
    j["version"] = model.version;
    j["mode"] = quant_mode_name(model.mode);
    j["source_model_hash"] = model.source_model_hash;
    j["input_dims"] = {model.input_dims.d1, model.input_dims.d2,
                       model.input_dims.d3};
    j["class_count"] = model.class_count;
    j["layers"] = json::array();
    for (const QuantLayer& ql : model.layers) {
        json lj = shape_to_json(ql.shape);
        if (ql.has_weights) {
            lj["weights"] = tensor_to_json(ql.weights);
            lj["bias"] = tensor_to_json(ql.bias);
        }
        if (ql.has_activation)
            lj["activation"] = {{"scale", ql.activation.scale},
                                {"zero_point", ql.activation.zero_point}};
        j["layers"].push_back(std::move(lj));
    }
    std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

QuantizedModel load_quantized_model(const std::string& path) {
    auto bytes = read_file_bytes(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(path + ": not valid JSON: " + e.what());
    }
    QuantizedModel m;
    try {
        if (j.at("format").get<std::string>() != "qdiff-quant")
            throw FormatError(path + ": not a quantized model file");
        m.version = j.at("version").get<std::uint32_t>();
        if (m.version != 1)
            throw FormatError(path + ": unsupported version " +
                              std::to_string(m.version));
        m.mode = quant_mode_from_name(j.at("mode").get<std::string>());
        m.source_model_hash = j.at("source_model_hash").get<std::string>();
        auto dims = j.at("input_dims");
        if (!dims.is_array() || dims.size() != 3)
            throw FormatError(path + ": input_dims must have 3 entries");
        m.input_dims = {dims[0].get<std::uint32_t>(),
                        dims[1].get<std::uint32_t>(),
                        dims[2].get<std::uint32_t>()};
        m.class_count = j.at("class_count").get<std::uint32_t>();
        for (const auto& lj : j.at("layers")) {
            QuantLayer ql;
            ql.shape = shape_from_json(lj);
            if (lj.contains("weights")) {
                ql.has_weights = true;
                ql.weights = tensor_from_json(lj.at("weights"));
                ql.bias = tensor_from_json(lj.at("bias"));
            }
            if (lj.contains("activation")) {
                ql.has_activation = true;
                ql.activation.scale = lj["activation"].at("scale").get<double>();
                ql.activation.zero_point =
                    lj["activation"].at("zero_point").get<std::int32_t>();
            }
            m.layers.push_back(std::move(ql));
        }
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    if (m.mode == QuantMode::full)
        for (std::size_t i = 0; i < m.layers.size(); ++i)
            if (!m.layers[i].has_activation)
                throw FormatError(path +
                                  ": full-mode file lacks activation params "
                                  "for layer " +
                                  std::to_string(i));
    m.effective();  // shape validation
    return m;
}

}  // namespace qdiff
