#include "qdiff/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"

namespace qdiff {

namespace {

using nlohmann::json;

[[noreturn]] void layer_error(const LayerSpec& layer, std::size_t index,
                              const std::string& what) {
    throw ShapeError("layer " + std::to_string(index) + " ('" + layer.name +
                     "', " + layer_kind_name(layer.kind) + "): " + what);
}

std::string dims_str(const Dims3& d) {
    return std::to_string(d.d1) + "x" + std::to_string(d.d2) + "x" +
           std::to_string(d.d3);
}

struct Tensor {
    Dims3 dims;
    std::vector<double> v;
    double at(std::uint32_t i, std::uint32_t j, std::uint32_t k) const {
        return v[(static_cast<std::size_t>(i) * dims.d2 + j) * dims.d3 + k];
    }
};

std::uint32_t conv_out(std::uint32_t in, std::uint32_t k, std::uint32_t s) {
    return (in - k) / s + 1;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::softmax_head: return "softmax_head";
        case LayerKind::conv3d: return "conv3d";
        case LayerKind::conv2d_per_band: return "conv2d_per_band";
        case LayerKind::relu: return "relu";
        case LayerKind::flatten: return "flatten";
    }
    throw ConfigError("unknown layer kind value");
}

LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "dense") return LayerKind::dense;
    if (name == "softmax_head") return LayerKind::softmax_head;
    if (name == "conv3d") return LayerKind::conv3d;
    if (name == "conv2d_per_band") return LayerKind::conv2d_per_band;
    if (name == "relu") return LayerKind::relu;
    if (name == "flatten") return LayerKind::flatten;
    throw FormatError("unknown layer kind '" + name + "'");
}

std::vector<Dims3> ModelSpec::validate() const {
    if (input_dims.d1 == 0 || input_dims.d2 == 0 || input_dims.d3 == 0)
        throw ShapeError("model input dims must all be positive, got " +
                         dims_str(input_dims));
    if (class_count < 2)
        throw ShapeError("model class_count must be at least 2, got " +
                         std::to_string(class_count));
    if (layers.empty()) throw ShapeError("model has no layers");

    std::vector<Dims3> shapes;
    shapes.reserve(layers.size());
    Dims3 cur = input_dims;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        switch (l.kind) {
            case LayerKind::dense:
            case LayerKind::softmax_head: {
                if (cur.d1 != 1 || cur.d2 != 1)
                    layer_error(l, i, "needs a flat input, got " + dims_str(cur));
                if (l.in != cur.d3)
                    layer_error(l, i, "expects " + std::to_string(l.in) +
                                          " inputs but receives " +
                                          std::to_string(cur.d3));
                if (l.out == 0) layer_error(l, i, "has zero outputs");
                if (l.weights.size() !=
                    static_cast<std::size_t>(l.out) * l.in)
                    layer_error(l, i, "weight count " +
                                          std::to_string(l.weights.size()) +
                                          " != out*in = " +
                                          std::to_string(std::size_t(l.out) * l.in));
                if (l.bias.size() != l.out)
                    layer_error(l, i, "bias count " +
                                          std::to_string(l.bias.size()) +
                                          " != out = " + std::to_string(l.out));
                cur = Dims3{1, 1, l.out};
                break;
            }
            case LayerKind::conv3d: {
                if (l.kernels == 0 || l.kh == 0 || l.kw == 0 || l.kd == 0 ||
                    l.stride == 0)
                    layer_error(l, i, "kernel dims, kernel count and stride "
                                      "must all be positive");
                if (cur.d1 < l.kh || cur.d2 < l.kw || cur.d3 < l.kd)
                    layer_error(l, i, "kernel " + std::to_string(l.kh) + "x" +
                                          std::to_string(l.kw) + "x" +
                                          std::to_string(l.kd) +
                                          " does not fit input " + dims_str(cur));
                std::size_t want = static_cast<std::size_t>(l.kernels) * l.kh *
                                   l.kw * l.kd;
                if (l.weights.size() != want)
                    layer_error(l, i, "weight count " +
                                          std::to_string(l.weights.size()) +
                                          " != kernels*kh*kw*kd = " +
                                          std::to_string(want));
                if (l.bias.size() != l.kernels)
                    layer_error(l, i, "bias count must equal kernel count");
                Dims3 out{conv_out(cur.d1, l.kh, l.stride),
                          conv_out(cur.d2, l.kw, l.stride),
                          l.kernels * conv_out(cur.d3, l.kd, l.stride)};
                cur = out;
                break;
            }
            case LayerKind::conv2d_per_band: {
                if (l.kernels == 0 || l.kh == 0 || l.kw == 0 || l.stride == 0)
                    layer_error(l, i, "kernel dims, kernel count and stride "
                                      "must all be positive");
                if (cur.d1 < l.kh || cur.d2 < l.kw)
                    layer_error(l, i, "kernel " + std::to_string(l.kh) + "x" +
                                          std::to_string(l.kw) +
                                          " does not fit input " + dims_str(cur));
                std::size_t want =
                    static_cast<std::size_t>(l.kernels) * l.kh * l.kw;
                if (l.weights.size() != want)
                    layer_error(l, i, "weight count " +
                                          std::to_string(l.weights.size()) +
                                          " != kernels*kh*kw = " +
                                          std::to_string(want));
                if (l.bias.size() != l.kernels)
                    layer_error(l, i, "bias count must equal kernel count");
                cur = Dims3{conv_out(cur.d1, l.kh, l.stride),
                            conv_out(cur.d2, l.kw, l.stride),
                            l.kernels * cur.d3};
                break;
            }
            case LayerKind::relu:
                break;
            case LayerKind::flatten:
                cur = Dims3{1, 1,
                            static_cast<std::uint32_t>(cur.count())};
                break;
        }
        shapes.push_back(cur);
    }
    if (layers.back().kind != LayerKind::softmax_head)
        throw ShapeError("final layer must be softmax_head, got " +
                         std::string(layer_kind_name(layers.back().kind)));
    if (cur.d3 != class_count)
        throw ShapeError("final layer emits " + std::to_string(cur.d3) +
                         " logits but class_count is " +
                         std::to_string(class_count));
    return shapes;
}

ForwardResult forward_with(const ModelSpec& model,
                           const std::vector<const LayerSpec*>& effective_layers,
                           const Patch3D& input,
                           const LayerBoundaryHook* boundary_hook) {
    std::vector<Dims3> shapes = model.validate();
    if (Dims3{input.d1, input.d2, input.d3} != model.input_dims)
        throw ShapeError("input patch is " +
                         dims_str({input.d1, input.d2, input.d3}) +
                         " but the model expects " +
                         dims_str(model.input_dims));
    if (!effective_layers.empty() &&
        effective_layers.size() != model.layers.size())
        throw ShapeError("effective layer list length does not match model");

    Tensor cur;
    cur.dims = model.input_dims;
    cur.v.assign(input.values.begin(), input.values.end());

    ForwardResult result;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const LayerSpec& l = effective_layers.empty() || !effective_layers[li]
                                 ? model.layers[li]
                                 : *effective_layers[li];
        Tensor out;
        out.dims = shapes[li];
        switch (l.kind) {
            case LayerKind::dense:
            case LayerKind::softmax_head: {
                out.v.resize(l.out);
                for (std::uint32_t o = 0; o < l.out; ++o) {
                    double acc = l.bias[o];
                    const double* w = l.weights.data() +
                                      static_cast<std::size_t>(o) * l.in;
                    for (std::uint32_t c = 0; c < l.in; ++c)
                        acc += w[c] * cur.v[c];
                    out.v[o] = acc;
                }
                break;
            }
            case LayerKind::conv3d: {
                std::uint32_t od = conv_out(cur.dims.d3, l.kd, l.stride);
                out.v.resize(out.dims.count());
                for (std::uint32_t kk = 0; kk < l.kernels; ++kk) {
                    const double* ker = l.weights.data() +
                                        static_cast<std::size_t>(kk) * l.kh *
                                            l.kw * l.kd;
                    for (std::uint32_t i = 0; i < out.dims.d1; ++i)
                        for (std::uint32_t j = 0; j < out.dims.d2; ++j)
                            for (std::uint32_t z = 0; z < od; ++z) {
                                double acc = l.bias[kk];
                                for (std::uint32_t a = 0; a < l.kh; ++a)
                                    for (std::uint32_t b = 0; b < l.kw; ++b)
                                        for (std::uint32_t c = 0; c < l.kd; ++c)
                                            acc += ker[(static_cast<std::size_t>(a) * l.kw + b) * l.kd + c] *
                                                   cur.at(i * l.stride + a,
                                                          j * l.stride + b,
                                                          z * l.stride + c);
                                out.v[(static_cast<std::size_t>(i) * out.dims.d2 + j) * out.dims.d3 +
                                      kk * od + z] = acc;
                            }
                }
                break;
            }
            case LayerKind::conv2d_per_band: {
                out.v.resize(out.dims.count());
                for (std::uint32_t kk = 0; kk < l.kernels; ++kk) {
                    const double* ker = l.weights.data() +
                                        static_cast<std::size_t>(kk) * l.kh * l.kw;
                    for (std::uint32_t i = 0; i < out.dims.d1; ++i)
                        for (std::uint32_t j = 0; j < out.dims.d2; ++j)
                            for (std::uint32_t z = 0; z < cur.dims.d3; ++z) {
                                double acc = l.bias[kk];
                                for (std::uint32_t a = 0; a < l.kh; ++a)
                                    for (std::uint32_t b = 0; b < l.kw; ++b)
                                        acc += ker[static_cast<std::size_t>(a) * l.kw + b] *
                                               cur.at(i * l.stride + a,
                                                      j * l.stride + b, z);
                                out.v[(static_cast<std::size_t>(i) * out.dims.d2 + j) * out.dims.d3 +
                                      kk * cur.dims.d3 + z] = acc;
                            }
                }
                break;
            }
            case LayerKind::relu: {
                out.v = cur.v;
                for (double& v : out.v) v = v < 0.0 ? 0.0 : v;
                break;
            }
            case LayerKind::flatten: {
                out.v = std::move(cur.v);
                break;
            }
        }
        if (boundary_hook && *boundary_hook) (*boundary_hook)(li, out.v);
        if (l.kind == LayerKind::relu)
            result.trace.layers.push_back({model.layers[li].name, out.v});
        cur = std::move(out);
    }
    result.logits = std::move(cur.v);
    return result;
}

ForwardResult forward(const ModelSpec& model, const Patch3D& input) {
    return forward_with(model, {}, input, nullptr);
}

std::size_t predict_label(const std::vector<double>& logits) {
    if (logits.empty()) throw ConfigError("predict_label on empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

NeuronIntervals profile_intervals(const ModelSpec& model,
                                  const PatchSet& profiling_set,
                                  std::uint32_t k) {
    if (k < 2)
        throw ConfigError("interval section count k must be at least 2, got " +
                          std::to_string(k));
    if (profiling_set.patches.empty())
        throw ConfigError("profiling set is empty");

    NeuronIntervals out;
    out.k = k;
    out.model_hash = model_hash(model);
    bool first = true;
    for (const Patch3D& p : profiling_set.patches) {
        ForwardResult r = forward(model, p);
        if (first) {
            for (const auto& lt : r.trace.layers) {
                out.layer_sizes.emplace_back(lt.name, lt.values.size());
                for (double v : lt.values)
                    out.neurons.push_back({v, v});
            }
            first = false;
            continue;
        }
        std::size_t n = 0;
        for (const auto& lt : r.trace.layers)
            for (double v : lt.values) {
                auto& iv = out.neurons[n++];
                iv.low = std::min(iv.low, v);
                iv.high = std::max(iv.high, v);
            }
    }
    return out;
}

namespace {

json layer_to_json(const LayerSpec& l) {
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
            return j;
    }
    std::vector<float> w(l.weights.begin(), l.weights.end());
    std::vector<float> b(l.bias.begin(), l.bias.end());
    j["weights"] = encode_f32_payload(w);
    j["bias"] = encode_f32_payload(b);
    return j;
}

LayerSpec layer_from_json(const json& j, std::size_t index,
                          const std::string& origin) {
    LayerSpec l;
    try {
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
                return l;
        }
        std::vector<float> w =
            decode_f32_payload(j.at("weights").get<std::string>());
        std::vector<float> b =
            decode_f32_payload(j.at("bias").get<std::string>());
        l.weights.assign(w.begin(), w.end());
        l.bias.assign(b.begin(), b.end());
    } catch (const json::exception& e) {
        throw FormatError(origin + ": layer " + std::to_string(index) + ": " +
                          e.what());
    }
    return l;
}

}  // namespace

std::string serialize_model(const ModelSpec& model) {
    json j;
    j["format"] = "qdiff-model";
    j["version"] = model.version;
    j["input_dims"] = {model.input_dims.d1, model.input_dims.d2,
                       model.input_dims.d3};
    j["class_count"] = model.class_count;
    j["layers"] = json::array();
    for (const LayerSpec& l : model.layers) j["layers"].push_back(layer_to_json(l));
    return j.dump(2) + "\n";
}

ModelSpec parse_model(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(origin + ": not valid JSON: " + e.what());
    }
    ModelSpec m;
    try {
        if (j.at("format").get<std::string>() != "qdiff-model")
            throw FormatError(origin + ": not a model file (format tag is '" +
                              j.at("format").get<std::string>() + "')");
        m.version = j.at("version").get<std::uint32_t>();
        if (m.version != 1)
            throw FormatError(origin + ": unsupported model version " +
                              std::to_string(m.version));
        auto dims = j.at("input_dims");
        if (!dims.is_array() || dims.size() != 3)
            throw FormatError(origin + ": input_dims must have 3 entries");
        m.input_dims = {dims[0].get<std::uint32_t>(),
                        dims[1].get<std::uint32_t>(),
                        dims[2].get<std::uint32_t>()};
        m.class_count = j.at("class_count").get<std::uint32_t>();
        for (std::size_t i = 0; i < j.at("layers").size(); ++i)
            m.layers.push_back(layer_from_json(j["layers"][i], i, origin));
    } catch (const json::exception& e) {
        throw FormatError(origin + ": " + e.what());
    }
    m.validate();
    return m;
}

ModelSpec load_model(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return parse_model(std::string(bytes.begin(), bytes.end()), path);
}

void save_model(const ModelSpec& model, const std::string& path) {
    model.validate();
    std::string text = serialize_model(model);
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string model_hash(const ModelSpec& model) {
    std::string text = serialize_model(model);
    return fnv1a_hex(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

NeuronIntervals load_intervals(const std::string& path) {
    auto bytes = read_file_bytes(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(path + ": not valid JSON: " + e.what());
    }
    NeuronIntervals out;
    try {
        if (j.at("format").get<std::string>() != "qdiff-intervals")
            throw FormatError(path + ": not an intervals file");
        out.k = j.at("k").get<std::uint32_t>();
        out.model_hash = j.at("model_hash").get<std::string>();
        for (const auto& e : j.at("layers"))
            out.layer_sizes.emplace_back(e.at(0).get<std::string>(),
                                         e.at(1).get<std::size_t>());
        for (const auto& e : j.at("neurons"))
            out.neurons.push_back(
                {e.at(0).get<double>(), e.at(1).get<double>()});
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    std::size_t expect = 0;
    for (const auto& [name, n] : out.layer_sizes) expect += n;
    if (expect != out.neurons.size())
        throw FormatError(path + ": layer sizes sum to " +
                          std::to_string(expect) + " but " +
                          std::to_string(out.neurons.size()) +
                          " neuron intervals are present");
    if (out.k < 2) throw FormatError(path + ": section count k must be >= 2");
    return out;
}

void save_intervals(const NeuronIntervals& intervals, const std::string& path) {
    json j;
    j["format"] = "qdiff-intervals";
    j["version"] = 1;
    j["k"] = intervals.k;
    j["model_hash"] = intervals.model_hash;
    j["layers"] = json::array();
    for (const auto& [name, n] : intervals.layer_sizes)
        j["layers"].push_back({name, n});
    j["neurons"] = json::array();
    for (const auto& iv : intervals.neurons)
        j["neurons"].push_back({iv.low, iv.high});
    std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace qdiff
