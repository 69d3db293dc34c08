#include "qdiff/fitness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qdiff/errors.hpp"

namespace qdiff {

std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw ConfigError("softmax on empty logits");
    double m = logits[0];
    for (double l : logits) m = std::max(m, l);
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

double kl_divergence(const std::vector<double>& q,
                     const std::vector<double>& r) {
    if (q.size() != r.size())
        throw ShapeError("KL arguments have different lengths");
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] == 0.0) continue;
        if (r[i] <= 0.0) return std::numeric_limits<double>::infinity();
        acc += q[i] * std::log(q[i] / r[i]);
    }
    return acc;
}

double jsd(const std::vector<double>& q, const std::vector<double>& r) {
    if (q.size() != r.size())
        throw ShapeError("JSD arguments have different lengths");
    std::vector<double> m(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) m[i] = 0.5 * (q[i] + r[i]);
    return 0.5 * (kl_divergence(q, m) + kl_divergence(r, m));
}

double f_div(const std::vector<double>& original_logits,
             const std::vector<double>& quantized_logits) {
    return jsd(softmax(original_logits), softmax(quantized_logits));
}

ActivationSignature signature(const ActivationTrace& trace,
                              const NeuronIntervals& intervals) {
    ActivationSignature sig;
    sig.k = intervals.k;
    std::size_t n = 0;
    double k = intervals.k;
    for (const auto& lt : trace.layers) {
        for (double v : lt.values) {
            if (n >= intervals.neurons.size())
                throw ShapeError("trace has more neurons than the intervals");
            const auto& iv = intervals.neurons[n];
            std::uint64_t neuron = n++;
            if (iv.degenerate()) continue;
            if (v < iv.low || v > iv.high) continue;
            double section = std::floor((v - iv.low) * k / (iv.high - iv.low));
            std::uint64_t s = std::min<std::uint64_t>(
                static_cast<std::uint64_t>(section), intervals.k - 1);
            sig.pairs.push_back(neuron * intervals.k + s);
        }
    }
    if (n != intervals.neurons.size())
        throw ShapeError("trace covers " + std::to_string(n) +
                         " neurons but the intervals describe " +
                         std::to_string(intervals.neurons.size()));
    return sig;
}

const char* jaccard_kind_name(JaccardKind kind) {
    return kind == JaccardKind::damped ? "damped" : "standard";
}

JaccardKind jaccard_kind_from_name(const std::string& name) {
    if (name == "damped") return JaccardKind::damped;
    if (name == "standard") return JaccardKind::standard;
    throw FormatError("unknown jaccard kind '" + name + "'");
}

double jaccard(const ActivationSignature& a, const ActivationSignature& b,
               JaccardKind kind) {
    std::size_t inter = 0, i = 0, j = 0;
    while (i < a.pairs.size() && j < b.pairs.size()) {
        if (a.pairs[i] == b.pairs[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a.pairs[i] < b.pairs[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    double ni = static_cast<double>(inter);
    double denom = kind == JaccardKind::damped ? na + nb + ni : na + nb - ni;
    if (denom == 0.0) return 0.0;
    return ni / denom;
}

double f_cov(const ActivationTrace& trace_o, const ActivationTrace& trace_q,
             const NeuronIntervals& intervals, JaccardKind kind) {
    return -jaccard(signature(trace_o, intervals),
                    signature(trace_q, intervals), kind);
}

const char* objective_name(Objective objective) {
    return objective == Objective::divergence ? "div" : "cov";
}

Objective objective_from_name(const std::string& name) {
    if (name == "div") return Objective::divergence;
    if (name == "cov") return Objective::coverage;
    throw FormatError("unknown objective '" + name + "'");
}

Evaluator::Evaluator(const ModelSpec& model, const QuantizedModel& qmodel,
                     const NeuronIntervals* intervals, const Layout& layout,
                     const DistortionBounds& bounds, const PatchSet& patches,
                     Objective objective, JaccardKind jaccard_kind,
                     double psnr_threshold)
    : model_(&model),
      intervals_(intervals),
      layout_(layout),
      bounds_(bounds),
      patches_(&patches),
      objective_(objective),
      jaccard_kind_(jaccard_kind),
      psnr_threshold_(psnr_threshold),
      qruntime_(qmodel) {
    model.validate();
    std::string hash = model_hash(model);
    if (qmodel.source_model_hash != hash)
        throw ConfigError("quantized model was built from model " +
                          qmodel.source_model_hash +
                          " but the full-precision model hashes to " + hash);
    if (objective_ == Objective::coverage) {
        if (!intervals_)
            throw ConfigError(
                "coverage objective needs profiled neuron intervals");
        if (!intervals_->model_hash.empty() && intervals_->model_hash != hash)
            throw ConfigError("intervals were profiled on model " +
                              intervals_->model_hash +
                              " but the full-precision model hashes to " +
                              hash);
    }
    if (patches.patches.empty()) throw ConfigError("patch set is empty");
    if (bounds_.ranges.size() != layout_.total_length)
        throw ConfigError("bounds do not match layout");
    for (const Patch3D& p : patches.patches) {
        if (Dims3{p.d1, p.d2, p.d3} != layout_.dims)
            throw ShapeError("patch dims do not match the layout dims");
        if (Dims3{p.d1, p.d2, p.d3} != model.input_dims)
            throw ShapeError("patch dims do not match the model input dims");
    }
    correct_.reserve(patches.patches.size());
    for (const Patch3D& p : patches.patches) {
        std::size_t label = predict_label(forward(model, p).logits);
        correct_.push_back(p.label >= 0 &&
                           label == static_cast<std::size_t>(p.label));
    }
}

bool Evaluator::original_correct(std::uint32_t patch_id) const {
    if (patch_id >= correct_.size())
        throw ConfigError("patch index " + std::to_string(patch_id) +
                          " out of range");
    return correct_[patch_id];
}

std::vector<std::uint32_t> Evaluator::eligible_patches() const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < correct_.size(); ++i)
        if (correct_[i]) out.push_back(i);
    return out;
}

EvalResult Evaluator::evaluate(const std::vector<float>& vec,
                               const std::vector<std::uint32_t>& patch_ids,
                               std::uint64_t rng_seed) const {
    if (patch_ids.empty())
        throw ConfigError("evaluation needs at least one patch");
    EvalResult result;
    result.details.reserve(patch_ids.size());
    double sum = 0.0;
    for (std::uint32_t pid : patch_ids) {
        if (pid >= patches_->patches.size())
            throw ConfigError("patch index " + std::to_string(pid) +
                              " out of range");
        const Patch3D& orig = patches_->patches[pid];
        Patch3D distorted = decode(layout_, bounds_, vec, orig, rng_seed);
        EvalDetail d;
        d.patch_index = pid;
        d.psnr_db = psnr(orig, distorted);
        d.valid = d.psnr_db >= psnr_threshold_;
        ForwardResult fo = forward(*model_, distorted);
        ForwardResult fq = qruntime_.forward(distorted);
        d.fitness = objective_ == Objective::divergence
                        ? f_div(fo.logits, fq.logits)
                        : f_cov(fo.trace, fq.trace, *intervals_, jaccard_kind_);
        d.label_original =
            orig.label >= 0 ? static_cast<std::uint32_t>(orig.label) : 0;
        d.label_o = static_cast<std::uint32_t>(predict_label(fo.logits));
        d.label_q = static_cast<std::uint32_t>(predict_label(fq.logits));
        d.dii = d.valid && d.label_o != d.label_q && correct_[pid];
        sum += d.fitness;
        result.details.push_back(d);
    }
    result.fitness = sum / static_cast<double>(patch_ids.size());
    return result;
}

}  // namespace qdiff
