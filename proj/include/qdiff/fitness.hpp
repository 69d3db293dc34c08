#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "qdiff/distort.hpp"
#include "qdiff/model.hpp"
#include "qdiff/patch.hpp"
#include "qdiff/quant.hpp"

namespace qdiff {

// Max-shifted softmax: s_i = exp(l_i - max) / sum exp(l_j - max).
std::vector<double> softmax(const std::vector<double>& logits);

// Natural-log KL divergence with 0*ln(0/r) := 0.
double kl_divergence(const std::vector<double>& q, const std::vector<double>& r);

// Jensen-Shannon divergence, natural log, so the range is [0, ln 2].
double jsd(const std::vector<double>& q, const std::vector<double>& r);

// Divergence objective: jsd of the two softmaxed logit vectors.
double f_div(const std::vector<double>& original_logits,
             const std::vector<double>& quantized_logits);

// Covered (neuron, section) pairs of one input, packed as neuron*k + section
// and kept sorted. Out-of-interval activations and degenerate neurons
// contribute no pair.
struct ActivationSignature {
    std::uint32_t k = 10;
    std::vector<std::uint64_t> pairs;

    std::size_t size() const { return pairs.size(); }
};

ActivationSignature signature(const ActivationTrace& trace,
                              const NeuronIntervals& intervals);

// `damped` uses the denominator |a|+|b|+|a∩b|, capping the score at 1/3
// (identical non-empty sets score exactly that) and softening its gradient;
// `standard` uses the usual |a|+|b|-|a∩b|.
enum class JaccardKind { damped, standard };

const char* jaccard_kind_name(JaccardKind kind);
JaccardKind jaccard_kind_from_name(const std::string& name);

double jaccard(const ActivationSignature& a, const ActivationSignature& b,
               JaccardKind kind);

// Coverage objective: negated signature similarity (maximal when the two
// models activate disjoint sections).
double f_cov(const ActivationTrace& trace_o, const ActivationTrace& trace_q,
             const NeuronIntervals& intervals, JaccardKind kind);

enum class Objective { divergence, coverage };

const char* objective_name(Objective objective);
Objective objective_from_name(const std::string& name);

struct EvalDetail {
    std::uint32_t patch_index = 0;
    double fitness = 0.0;  // this patch's objective value
    double psnr_db = 0.0;
    bool valid = false;
    std::uint32_t label_original = 0;  // true label of the seed patch
    std::uint32_t label_o = 0;         // full-precision model on the distorted patch
    std::uint32_t label_q = 0;         // quantized model on the distorted patch
    bool dii = false;
};

struct EvalResult {
    double fitness = 0.0;  // mean over the evaluated patches, fixed order
    std::vector<EvalDetail> details;
};

// Binds the two subject models, the search space and the patch corpus, and
// precomputes everything reused across candidate evaluations (dequantized
// weights, original-patch predictions for the correctness guard). evaluate()
// is const and safe to call concurrently.
class Evaluator {
  public:
    Evaluator(const ModelSpec& model, const QuantizedModel& qmodel,
              const NeuronIntervals* intervals, const Layout& layout,
              const DistortionBounds& bounds, const PatchSet& patches,
              Objective objective, JaccardKind jaccard_kind,
              double psnr_threshold);

    // Decodes the vector against each listed patch and averages the
    // objective; single mode is a one-element list. The DII flag per patch
    // requires validity, label disagreement, and the full-precision model
    // being correct on the unmodified patch.
    EvalResult evaluate(const std::vector<float>& vec,
                        const std::vector<std::uint32_t>& patch_ids,
                        std::uint64_t rng_seed) const;

    bool original_correct(std::uint32_t patch_id) const;
    // Patch indices the full-precision model classifies correctly — the only
    // admissible search seeds.
    std::vector<std::uint32_t> eligible_patches() const;

    const Layout& layout() const { return layout_; }
    const DistortionBounds& bounds() const { return bounds_; }
    double psnr_threshold() const { return psnr_threshold_; }

  private:
    const ModelSpec* model_;
    const NeuronIntervals* intervals_;
    Layout layout_;
    DistortionBounds bounds_;
    const PatchSet* patches_;
    Objective objective_;
    JaccardKind jaccard_kind_;
    double psnr_threshold_;
    QuantRuntime qruntime_;
    std::vector<bool> correct_;
};

}  // namespace qdiff
