#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qdiff/model.hpp"
#include "qdiff/patch.hpp"
#include "qdiff/rng.hpp"

namespace qdiff {

enum class DistortionFamily {
    continuous_dropout,
    discontinuous_dropout,
    stripping,
    band_loss,
    salt_pepper,
    gaussian_noise,
    rotation,
    zoom,
};

const char* family_name(DistortionFamily family);
DistortionFamily family_from_name(const std::string& name);

enum class SlotKind { activation_switch, selector, coordinate, parameter };

const char* slot_kind_name(SlotKind kind);

// One scalar component of the transformation vector. Selectors and
// coordinates are continuous in the vector and discretized at decode time
// via min(floor(v), hi - 1), so [lo, hi) maps uniformly onto the choices.
// `identity` is the zero-distortion value the bound tuner shrinks toward
// (meaningful for parameters only).
struct SlotComponent {
    std::string name;
    SlotKind kind = SlotKind::parameter;
    double lo = 0.0;
    double hi = 1.0;
    double identity = 0.0;
};

struct DistortionSlot {
    DistortionFamily family = DistortionFamily::continuous_dropout;
    std::size_t offset = 0;  // index of the switch component in the flat vector
    std::vector<SlotComponent> components;  // [0] is always the switch
};

// Fixed registry of distortion slots for one patch shape: radiometric
// families first, geometric last. Patches with fewer than 3 bands have no
// interior band, so the band-loss family is omitted for them.
struct Layout {
    Dims3 dims;
    std::vector<DistortionSlot> slots;
    std::size_t total_length = 0;

    const SlotComponent& component(std::size_t flat_index) const;
    std::optional<std::size_t> slot_index(DistortionFamily family) const;
};

Layout build_layout(Dims3 dims);

// Per-component [lo, hi] sampling/clamping ranges, aligned with the flat
// vector. Starts as the layout defaults; tune_bounds narrows parameter
// entries.
struct DistortionBounds {
    std::vector<std::pair<double, double>> ranges;

    static DistortionBounds defaults(const Layout& layout);
    double clamp(std::size_t flat_index, double v) const;
};

enum class ComponentKind { line, column, region };
enum class FillKind { min_fill, max_fill };
enum class GaussianAxis { spectral, spatial };
enum class SaltPepperForce { none, all_salt, all_pepper };

// The individual distortions. Each takes the patch to distort plus the
// reference stats of the ORIGINAL patch: fill values (min/max/mean) always
// come from the untouched original, also when several distortions compose.

Patch3D apply_continuous_dropout(const Patch3D& p, ComponentKind comp,
                                 std::uint32_t row, std::uint32_t col,
                                 std::uint32_t height, std::uint32_t width,
                                 FillKind fill, const PatchStats& ref);

Patch3D apply_discontinuous_dropout(const Patch3D& p, ComponentKind comp,
                                    std::uint32_t row, std::uint32_t col,
                                    std::uint32_t height, std::uint32_t width,
                                    double fraction, FillKind fill,
                                    const PatchStats& ref, Rng& rng);

// Rescales the pixels of one line/column toward target stats (m_d, sigma_d),
// where (m_o, sigma_o) are the reference mean/stddev. A constant reference
// (sigma_o == 0) is a no-op, reported through `degenerate` when non-null.
Patch3D apply_stripping(const Patch3D& p, ComponentKind comp,
                        std::uint32_t index, double m_d, double sigma_d,
                        const PatchStats& ref, bool* degenerate = nullptr);

// Each selected band becomes the cellwise mean of its two neighbor bands,
// always computed from the incoming values (selected bands never cascade).
// Edge bands are clamped to the interior; `clamped` counts such fixes.
Patch3D apply_band_loss(const Patch3D& p, const std::vector<std::uint32_t>& bands,
                        std::uint32_t* clamped = nullptr);

Patch3D apply_salt_pepper(const Patch3D& p, double density,
                          const PatchStats& ref, Rng& rng,
                          SaltPepperForce force = SaltPepperForce::none);

// Additive N(mu, sigma) noise. Spectral: whole spectra of ceil(fraction *
// d1*d2) pixels. Spatial: the cross product of ceil(fraction * d1*d2) pixels
// and ceil(fraction * d3) bands.
Patch3D apply_gaussian(const Patch3D& p, GaussianAxis axis, double mu,
                       double sigma, double fraction, Rng& rng);

// Nearest-neighbor spatial rotation about the patch center, per band; cells
// mapping outside the source take the reference mean.
Patch3D apply_rotation(const Patch3D& p, double angle_degrees,
                       const PatchStats& ref);

// Nearest-neighbor spatial rescale about the center: output offset delta
// samples the source at delta*factor, so factor < 1 magnifies and factor > 1
// shrinks with mean-filled borders. Output dims unchanged.
Patch3D apply_zoom(const Patch3D& p, double factor, const PatchStats& ref);

// Applies every slot whose switch component is >= 0.5, in registry order.
// Components are clamped into `bounds` first; stochastic sub-choices come
// from per-family substreams of `seed`, so (vector, patch, seed) fully
// reproduces the output.
Patch3D decode(const Layout& layout, const DistortionBounds& bounds,
               const std::vector<float>& vec, const Patch3D& original,
               std::uint64_t seed);

// Iterative range tuning: per family, halves each parameter endpoint toward
// its identity value until the median PSNR of `sample_budget` random
// single-family distortions reaches the threshold, for at most 10 halvings.
struct TuneResult {
    DistortionBounds bounds;
    struct AuditRow {
        DistortionFamily family;
        std::uint32_t halvings = 0;  // bounds state this median was measured at
        double median_psnr = 0.0;
        bool converged = false;
    };
    std::vector<AuditRow> trail;  // one row per (family, halving step)
};

TuneResult tune_bounds(const Layout& layout, const DistortionBounds& start,
                       const PatchSet& set, double psnr_threshold,
                       std::size_t sample_budget, Rng& rng);

DistortionBounds load_bounds(const std::string& path, const Layout& layout);
void save_bounds(const DistortionBounds& bounds, const Layout& layout,
                 const std::string& path);

// Offloaded difference-inducing record: everything needed to rebuild the
// distorted patch bit-exactly and re-check the label disagreement.
struct DiiRecord {
    std::uint64_t rng_seed = 0;
    std::uint32_t patch_index = 0;
    std::vector<float> vector;
    std::uint32_t original_label = 0;
    std::uint32_t mo_label = 0;
    std::uint32_t mq_label = 0;

    std::size_t byte_size() const { return 28 + 4 * vector.size(); }
};

extern const char kDiiMagic[8];  // "QDIFDII1"

std::vector<std::uint8_t> encode_dii_record(const DiiRecord& rec);
std::vector<DiiRecord> read_dii_file(const std::string& path);

}  // namespace qdiff
