#include "qdiff/distort.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "json.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"

namespace qdiff {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

int select_option(double v, int n_options) {
    int i = static_cast<int>(std::floor(v));
    return std::clamp(i, 0, n_options - 1);
}

std::uint32_t select_coord(double v, std::uint32_t dim) {
    double f = std::floor(v);
    if (f < 0.0) return 0;
    std::uint32_t i = static_cast<std::uint32_t>(f);
    return std::min(i, dim - 1);
}

std::uint32_t select_size(double v, std::uint32_t dim) {
    double f = std::floor(v);
    if (f < 1.0) return 1;
    std::uint32_t i = static_cast<std::uint32_t>(f);
    return std::min(i, dim);
}

// ceil(fraction * n) with a guard against FP drift on exact products
// (0.1 * 60 must stay 6, not become 7).
std::size_t ceil_count(double fraction, std::size_t n) {
    double x = fraction * static_cast<double>(n);
    double nearest = std::floor(x + 0.5);
    double c = std::abs(x - nearest) < 1e-9 ? nearest : std::ceil(x);
    if (c < 0.0) return 0;
    std::size_t out = static_cast<std::size_t>(c);
    if (out == 0 && fraction > 0.0 && n > 0) out = 1;
    return std::min(out, n);
}

// First k entries of a Fisher-Yates pass over [0, n), in selection order.
// The draw at step i depends only on (i, n), so a smaller k selects a prefix
// of the same sequence — shrinking a fraction keeps the subset nested.
std::vector<std::uint32_t> sample_distinct(Rng& rng, std::uint32_t n,
                                           std::size_t k) {
    k = std::min<std::size_t>(k, n);
    std::vector<std::uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t j = i + rng.index(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

struct PixelRect {
    std::uint32_t r0, c0, r1, c1;  // half-open
};

PixelRect component_rect(const Patch3D& p, ComponentKind comp,
                         std::uint32_t row, std::uint32_t col,
                         std::uint32_t height, std::uint32_t width) {
    switch (comp) {
        case ComponentKind::line:
            if (row >= p.d1)
                throw ShapeError("line index " + std::to_string(row) +
                                 " out of range for " + std::to_string(p.d1) +
                                 " rows");
            return {row, 0, row + 1, p.d2};
        case ComponentKind::column:
            if (col >= p.d2)
                throw ShapeError("column index " + std::to_string(col) +
                                 " out of range for " + std::to_string(p.d2) +
                                 " columns");
            return {0, col, p.d1, col + 1};
        case ComponentKind::region:
            if (row >= p.d1 || col >= p.d2)
                throw ShapeError("region anchor (" + std::to_string(row) +
                                 ", " + std::to_string(col) +
                                 ") out of range");
            if (height == 0 || width == 0)
                throw ShapeError("region size must be positive");
            return {row, col, std::min(row + height, p.d1),
                    std::min(col + width, p.d2)};
    }
    throw ConfigError("unknown component kind");
}

float fill_value(FillKind fill, const PatchStats& ref) {
    return static_cast<float>(fill == FillKind::min_fill ? ref.min : ref.max);
}

void fill_pixel(Patch3D& p, std::uint32_t i, std::uint32_t j, float value) {
    for (std::uint32_t k = 0; k < p.d3; ++k) p.at(i, j, k) = value;
}

}  // namespace

const char* family_name(DistortionFamily family) {
    switch (family) {
        case DistortionFamily::continuous_dropout: return "continuous_dropout";
        case DistortionFamily::discontinuous_dropout:
            return "discontinuous_dropout";
        case DistortionFamily::stripping: return "stripping";
        case DistortionFamily::band_loss: return "band_loss";
        case DistortionFamily::salt_pepper: return "salt_pepper";
        case DistortionFamily::gaussian_noise: return "gaussian_noise";
        case DistortionFamily::rotation: return "rotation";
        case DistortionFamily::zoom: return "zoom";
    }
    throw ConfigError("unknown distortion family value");
}

DistortionFamily family_from_name(const std::string& name) {
    static const std::pair<const char*, DistortionFamily> table[] = {
        {"continuous_dropout", DistortionFamily::continuous_dropout},
        {"discontinuous_dropout", DistortionFamily::discontinuous_dropout},
        {"stripping", DistortionFamily::stripping},
        {"band_loss", DistortionFamily::band_loss},
        {"salt_pepper", DistortionFamily::salt_pepper},
        {"gaussian_noise", DistortionFamily::gaussian_noise},
        {"rotation", DistortionFamily::rotation},
        {"zoom", DistortionFamily::zoom},
    };
    for (const auto& [n, f] : table)
        if (name == n) return f;
    throw FormatError("unknown distortion family '" + name + "'");
}

const char* slot_kind_name(SlotKind kind) {
    switch (kind) {
        case SlotKind::activation_switch: return "switch";
        case SlotKind::selector: return "selector";
        case SlotKind::coordinate: return "coordinate";
        case SlotKind::parameter: return "parameter";
    }
    throw ConfigError("unknown slot kind value");
}

const SlotComponent& Layout::component(std::size_t flat_index) const {
    for (const DistortionSlot& slot : slots) {
        if (flat_index >= slot.offset &&
            flat_index < slot.offset + slot.components.size())
            return slot.components[flat_index - slot.offset];
    }
    throw ConfigError("component index " + std::to_string(flat_index) +
                      " outside layout of length " +
                      std::to_string(total_length));
}

std::optional<std::size_t> Layout::slot_index(DistortionFamily family) const {
    for (std::size_t i = 0; i < slots.size(); ++i)
        if (slots[i].family == family) return i;
    return std::nullopt;
}

Layout build_layout(Dims3 dims) {
    if (dims.d1 == 0 || dims.d2 == 0 || dims.d3 == 0)
        throw ConfigError("layout needs positive patch dims");
    Layout layout;
    layout.dims = dims;
    double d1 = dims.d1, d2 = dims.d2, d3 = dims.d3;

    auto sw = [] { return SlotComponent{"switch", SlotKind::activation_switch,
                                        0.0, 1.0, 0.0}; };
    auto sel = [](const char* name, int n) {
        return SlotComponent{name, SlotKind::selector, 0.0,
                             static_cast<double>(n), 0.0};
    };
    auto coord = [](const char* name, double lo, double hi) {
        return SlotComponent{name, SlotKind::coordinate, lo, hi, lo};
    };
    auto param = [](const char* name, double lo, double hi, double id) {
        return SlotComponent{name, SlotKind::parameter, lo, hi, id};
    };
    auto add = [&layout](DistortionFamily family,
                         std::vector<SlotComponent> comps) {
        DistortionSlot slot;
        slot.family = family;
        slot.offset = layout.total_length;
        slot.components = std::move(comps);
        layout.total_length += slot.components.size();
        layout.slots.push_back(std::move(slot));
    };

    add(DistortionFamily::continuous_dropout,
        {sw(), sel("component", 3), sel("fill", 2), coord("row", 0, d1),
         coord("col", 0, d2), param("height", 1, d1 + 1, 1),
         param("width", 1, d2 + 1, 1)});
    add(DistortionFamily::discontinuous_dropout,
        {sw(), sel("component", 3), sel("fill", 2), coord("row", 0, d1),
         coord("col", 0, d2), param("height", 1, d1 + 1, 1),
         param("width", 1, d2 + 1, 1), param("fraction", 0.05, 0.3, 0.05)});
    add(DistortionFamily::stripping,
        {sw(), sel("component", 2), coord("index", 0, std::max(d1, d2)),
         param("mean_delta", -1.0, 1.0, 0.0),
         param("sigma_ratio", 0.5, 2.0, 1.0)});
    if (dims.d3 >= 3)
        add(DistortionFamily::band_loss,
            {sw(), SlotComponent{"count", SlotKind::selector, 1.0, 4.0, 1.0},
             coord("band1", 1, d3 - 1), coord("band2", 1, d3 - 1),
             coord("band3", 1, d3 - 1)});
    add(DistortionFamily::salt_pepper,
        {sw(), param("density", 0.005, 0.05, 0.005)});
    add(DistortionFamily::gaussian_noise,
        {sw(), sel("axis", 2), param("mu_rel", -0.05, 0.05, 0.0),
         param("sigma_rel", 0.0, 0.05, 0.0),
         param("fraction", 0.05, 1.0, 0.05)});
    add(DistortionFamily::rotation,
        {sw(), param("angle_deg", -45.0, 45.0, 0.0)});
    add(DistortionFamily::zoom, {sw(), param("factor", 0.8, 1.25, 1.0)});
    return layout;
}

DistortionBounds DistortionBounds::defaults(const Layout& layout) {
    DistortionBounds b;
    b.ranges.reserve(layout.total_length);
    for (const DistortionSlot& slot : layout.slots)
        for (const SlotComponent& c : slot.components)
            b.ranges.emplace_back(c.lo, c.hi);
    return b;
}

double DistortionBounds::clamp(std::size_t flat_index, double v) const {
    const auto& [lo, hi] = ranges[flat_index];
    return std::min(std::max(v, lo), hi);
}

Patch3D apply_continuous_dropout(const Patch3D& p, ComponentKind comp,
                                 std::uint32_t row, std::uint32_t col,
                                 std::uint32_t height, std::uint32_t width,
                                 FillKind fill, const PatchStats& ref) {
    PixelRect rect = component_rect(p, comp, row, col, height, width);
    float v = fill_value(fill, ref);
    Patch3D out = p;
    for (std::uint32_t i = rect.r0; i < rect.r1; ++i)
        for (std::uint32_t j = rect.c0; j < rect.c1; ++j)
            fill_pixel(out, i, j, v);
    return out;
}

Patch3D apply_discontinuous_dropout(const Patch3D& p, ComponentKind comp,
                                    std::uint32_t row, std::uint32_t col,
                                    std::uint32_t height, std::uint32_t width,
                                    double fraction, FillKind fill,
                                    const PatchStats& ref, Rng& rng) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ConfigError("dropout fraction must be in (0, 1], got " +
                          std::to_string(fraction));
    PixelRect rect = component_rect(p, comp, row, col, height, width);
    std::uint32_t rows = rect.r1 - rect.r0, cols = rect.c1 - rect.c0;
    std::uint32_t n = rows * cols;
    std::size_t k = ceil_count(fraction, n);
    Rng sel_rng = rng.fork(1);
    std::vector<std::uint32_t> picked = sample_distinct(sel_rng, n, k);
    float v = fill_value(fill, ref);
    Patch3D out = p;
    for (std::uint32_t flat : picked)
        fill_pixel(out, rect.r0 + flat / cols, rect.c0 + flat % cols, v);
    return out;
}

Patch3D apply_stripping(const Patch3D& p, ComponentKind comp,
                        std::uint32_t index, double m_d, double sigma_d,
                        const PatchStats& ref, bool* degenerate) {
    if (comp == ComponentKind::region)
        throw ConfigError("stripping applies to lines and columns only");
    if (degenerate) *degenerate = false;
    if (ref.stddev == 0.0) {
        if (degenerate) *degenerate = true;
        return p;
    }
    PixelRect rect = component_rect(p, comp, index, index, 1, 1);
    // (sigma_d/sigma_o)*(x - m_o + (sigma_o/sigma_d)*m_d), distributed so a
    // zero sigma_d stays finite.
    double scale = sigma_d / ref.stddev;
    Patch3D out = p;
    for (std::uint32_t i = rect.r0; i < rect.r1; ++i)
        for (std::uint32_t j = rect.c0; j < rect.c1; ++j)
            for (std::uint32_t k = 0; k < p.d3; ++k)
                out.at(i, j, k) = static_cast<float>(
                    scale * (p.at(i, j, k) - ref.mean) + m_d);
    return out;
}

Patch3D apply_band_loss(const Patch3D& p, const std::vector<std::uint32_t>& bands,
                        std::uint32_t* clamped) {
    if (p.d3 < 3)
        throw ShapeError("band loss needs at least 3 bands, patch has " +
                         std::to_string(p.d3));
    if (clamped) *clamped = 0;
    Patch3D out = p;
    for (std::uint32_t b : bands) {
        std::uint32_t bc = std::clamp(b, 1u, p.d3 - 2);
        if (bc != b && clamped) ++*clamped;
        for (std::uint32_t i = 0; i < p.d1; ++i)
            for (std::uint32_t j = 0; j < p.d2; ++j)
                out.at(i, j, bc) = static_cast<float>(
                    (static_cast<double>(p.at(i, j, bc - 1)) +
                     static_cast<double>(p.at(i, j, bc + 1))) /
                    2.0);
    }
    return out;
}

Patch3D apply_salt_pepper(const Patch3D& p, double density,
                          const PatchStats& ref, Rng& rng,
                          SaltPepperForce force) {
    if (density <= 0.0 || density > 1.0)
        throw ConfigError("salt & pepper density must be in (0, 1], got " +
                          std::to_string(density));
    std::size_t cells = p.cell_count();
    std::size_t k = ceil_count(density, cells);
    Rng sel_rng = rng.fork(1);
    Rng coin_rng = rng.fork(2);
    std::vector<std::uint32_t> picked =
        sample_distinct(sel_rng, static_cast<std::uint32_t>(cells), k);
    Patch3D out = p;
    for (std::uint32_t flat : picked) {
        bool salt = force == SaltPepperForce::all_salt   ? true
                    : force == SaltPepperForce::all_pepper ? false
                                                           : coin_rng.bernoulli(0.5);
        out.values[flat] =
            static_cast<float>(salt ? ref.max : ref.min);
    }
    return out;
}

Patch3D apply_gaussian(const Patch3D& p, GaussianAxis axis, double mu,
                       double sigma, double fraction, Rng& rng) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ConfigError("noise target fraction must be in (0, 1], got " +
                          std::to_string(fraction));
    if (sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    std::uint32_t n_pixels = p.d1 * p.d2;
    std::size_t k_px = ceil_count(fraction, n_pixels);
    Rng px_rng = rng.fork(1);
    Rng band_rng = rng.fork(2);
    Rng noise_root = rng.fork(3);
    std::vector<std::uint32_t> pixels = sample_distinct(px_rng, n_pixels, k_px);
    std::vector<std::uint32_t> bands;
    if (axis == GaussianAxis::spatial) {
        bands = sample_distinct(band_rng, p.d3, ceil_count(fraction, p.d3));
    } else {
        bands.resize(p.d3);
        std::iota(bands.begin(), bands.end(), 0u);
    }
    Patch3D out = p;
    // One noise substream per selected pixel, so the added noise at a given
    // (pixel position, band position) does not depend on how many pixels or
    // bands are targeted — shrinking sigma/fraction shrinks the error
    // monotonically, which the bound tuner relies on.
    for (std::size_t pi = 0; pi < pixels.size(); ++pi) {
        std::uint32_t i = pixels[pi] / p.d2, j = pixels[pi] % p.d2;
        Rng pr = noise_root.fork(pi);
        for (std::uint32_t b : bands)
            out.at(i, j, b) = static_cast<float>(out.at(i, j, b) +
                                                 pr.gaussian(mu, sigma));
    }
    return out;
}

namespace {

Patch3D resample_spatial(const Patch3D& p, double m00, double m01, double m10,
                         double m11, const PatchStats& ref) {
    double cr = (p.d1 - 1) / 2.0, cc = (p.d2 - 1) / 2.0;
    float mean = static_cast<float>(ref.mean);
    Patch3D out = p;
    for (std::uint32_t r = 0; r < p.d1; ++r)
        for (std::uint32_t c = 0; c < p.d2; ++c) {
            double dy = r - cr, dx = c - cc;
            double sr = cr + m00 * dy + m01 * dx;
            double sc = cc + m10 * dy + m11 * dx;
            long ri = static_cast<long>(std::floor(sr + 0.5));
            long ci = static_cast<long>(std::floor(sc + 0.5));
            bool inside = ri >= 0 && ci >= 0 && ri < static_cast<long>(p.d1) &&
                          ci < static_cast<long>(p.d2);
            for (std::uint32_t k = 0; k < p.d3; ++k)
                out.at(r, c, k) =
                    inside ? p.at(static_cast<std::uint32_t>(ri),
                                  static_cast<std::uint32_t>(ci), k)
                           : mean;
        }
    return out;
}

}  // namespace

Patch3D apply_rotation(const Patch3D& p, double angle_degrees,
                       const PatchStats& ref) {
    double theta = angle_degrees * kPi / 180.0;
    double c = std::cos(theta), s = std::sin(theta);
    // Snap near-zero trig values so multiples of 90 degrees stay exact index
    // permutations.
    if (std::abs(c) < 1e-12) c = 0.0;
    if (std::abs(s) < 1e-12) s = 0.0;
    if (std::abs(c - 1.0) < 1e-12) c = 1.0;
    if (std::abs(c + 1.0) < 1e-12) c = -1.0;
    if (std::abs(s - 1.0) < 1e-12) s = 1.0;
    if (std::abs(s + 1.0) < 1e-12) s = -1.0;
    // Inverse map: source offset = R(theta) * output offset in (row, col).
    return resample_spatial(p, c, s, -s, c, ref);
}

Patch3D apply_zoom(const Patch3D& p, double factor, const PatchStats& ref) {
    if (!(factor > 0.0))
        throw ConfigError("zoom factor must be positive, got " +
                          std::to_string(factor));
    return resample_spatial(p, factor, 0.0, 0.0, factor, ref);
}

Patch3D decode(const Layout& layout, const DistortionBounds& bounds,
               const std::vector<float>& vec, const Patch3D& original,
               std::uint64_t seed) {
    if (vec.size() != layout.total_length)
        throw ShapeError("transformation vector length " +
                         std::to_string(vec.size()) +
                         " does not match layout length " +
                         std::to_string(layout.total_length));
    if (bounds.ranges.size() != layout.total_length)
        throw ConfigError("bounds do not match layout");
    if (Dims3{original.d1, original.d2, original.d3} != layout.dims)
        throw ShapeError("patch dims do not match layout dims");

    std::vector<double> v(vec.size());
    for (std::size_t i = 0; i < vec.size(); ++i)
        v[i] = bounds.clamp(i, static_cast<double>(vec[i]));

    PatchStats ref = compute_stats(original);
    Patch3D out = original;
    for (std::size_t si = 0; si < layout.slots.size(); ++si) {
        const DistortionSlot& slot = layout.slots[si];
        const double* c = v.data() + slot.offset;
        if (c[0] < 0.5) continue;
        Rng rng(seed, si + 1);
        Dims3 d = layout.dims;
        switch (slot.family) {
            case DistortionFamily::continuous_dropout: {
                auto comp = static_cast<ComponentKind>(select_option(c[1], 3));
                auto fill = static_cast<FillKind>(select_option(c[2], 2));
                out = apply_continuous_dropout(
                    out, comp, select_coord(c[3], d.d1),
                    select_coord(c[4], d.d2), select_size(c[5], d.d1),
                    select_size(c[6], d.d2), fill, ref);
                break;
            }
            case DistortionFamily::discontinuous_dropout: {
                auto comp = static_cast<ComponentKind>(select_option(c[1], 3));
                auto fill = static_cast<FillKind>(select_option(c[2], 2));
                out = apply_discontinuous_dropout(
                    out, comp, select_coord(c[3], d.d1),
                    select_coord(c[4], d.d2), select_size(c[5], d.d1),
                    select_size(c[6], d.d2), c[7], fill, ref, rng);
                break;
            }
            case DistortionFamily::stripping: {
                auto comp = static_cast<ComponentKind>(select_option(c[1], 2));
                std::uint32_t dim =
                    comp == ComponentKind::line ? d.d1 : d.d2;
                out = apply_stripping(out, comp, select_coord(c[2], dim),
                                      ref.mean + c[3] * ref.stddev,
                                      c[4] * ref.stddev, ref);
                break;
            }
            case DistortionFamily::band_loss: {
                int count = std::clamp(static_cast<int>(std::floor(c[1])), 1, 3);
                std::vector<std::uint32_t> bands;
                for (int t = 0; t < count; ++t)
                    bands.push_back(select_coord(c[2 + t], d.d3 - 1));
                out = apply_band_loss(out, bands);
                break;
            }
            case DistortionFamily::salt_pepper:
                out = apply_salt_pepper(out, c[1], ref, rng);
                break;
            case DistortionFamily::gaussian_noise: {
                auto axis = static_cast<GaussianAxis>(select_option(c[1], 2));
                double range = ref.max - ref.min;
                out = apply_gaussian(out, axis, c[2] * range, c[3] * range,
                                     c[4], rng);
                break;
            }
            case DistortionFamily::rotation:
                out = apply_rotation(out, c[1], ref);
                break;
            case DistortionFamily::zoom:
                out = apply_zoom(out, c[1], ref);
                break;
        }
    }
    return out;
}

namespace {

double median_of(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    std::size_t n = xs.size();
    if (n == 0) throw ConfigError("median of empty sample");
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

TuneResult tune_bounds(const Layout& layout, const DistortionBounds& start,
                       const PatchSet& set, double psnr_threshold,
                       std::size_t sample_budget, Rng& rng) {
    if (set.patches.empty()) throw ConfigError("tuning patch set is empty");
    if (sample_budget < 100)
        throw ConfigError("tuning budget must be at least 100 samples per "
                          "family, got " +
                          std::to_string(sample_budget));
    if (start.ranges.size() != layout.total_length)
        throw ConfigError("bounds do not match layout");
    for (const Patch3D& p : set.patches)
        if (Dims3{p.d1, p.d2, p.d3} != layout.dims)
            throw ShapeError("tuning patch dims do not match layout dims");

    TuneResult result;
    result.bounds = start;

    for (std::size_t si = 0; si < layout.slots.size(); ++si) {
        const DistortionSlot& slot = layout.slots[si];
        std::vector<std::size_t> param_idx;
        for (std::size_t ci = 0; ci < slot.components.size(); ++ci)
            if (slot.components[ci].kind == SlotKind::parameter)
                param_idx.push_back(slot.offset + ci);

        // Fixed unit draws reused at every halving step: the same sample
        // only moves toward the identity as bounds shrink, so the audit
        // medians cannot decrease for purely scale-like families.
        struct Sample {
            std::vector<double> u;
            std::uint64_t seed;
            std::size_t patch;
        };
        Rng fam_rng = rng.fork(100 + si);
        std::vector<Sample> samples(sample_budget);
        for (std::size_t s = 0; s < sample_budget; ++s) {
            samples[s].u.resize(slot.components.size());
            for (std::size_t ci = 1; ci < slot.components.size(); ++ci)
                samples[s].u[ci] = fam_rng.next_double();
            samples[s].seed = fam_rng.next_u64();
            samples[s].patch = s % set.patches.size();
        }

        auto median_psnr = [&](const DistortionBounds& b) {
            std::vector<double> psnrs;
            psnrs.reserve(sample_budget);
            std::vector<float> vec(layout.total_length, 0.0f);
            for (const Sample& s : samples) {
                vec.assign(layout.total_length, 0.0f);
                vec[slot.offset] = 1.0f;
                for (std::size_t ci = 1; ci < slot.components.size(); ++ci) {
                    const auto& [lo, hi] = b.ranges[slot.offset + ci];
                    vec[slot.offset + ci] =
                        static_cast<float>(lo + s.u[ci] * (hi - lo));
                }
                const Patch3D& orig = set.patches[s.patch];
                Patch3D distorted = decode(layout, b, vec, orig, s.seed);
                psnrs.push_back(psnr(orig, distorted));
            }
            return median_of(std::move(psnrs));
        };

        std::uint32_t halvings = 0;
        double med = median_psnr(result.bounds);
        result.trail.push_back(
            {slot.family, halvings, med, med >= psnr_threshold});
        while (med < psnr_threshold && halvings < 10 && !param_idx.empty()) {
            for (std::size_t pi : param_idx) {
                double id = layout.component(pi).identity;
                auto& [lo, hi] = result.bounds.ranges[pi];
                lo = id + (lo - id) / 2.0;
                hi = id + (hi - id) / 2.0;
            }
            ++halvings;
            med = median_psnr(result.bounds);
            result.trail.push_back(
                {slot.family, halvings, med, med >= psnr_threshold});
        }
    }
    return result;
}

void save_bounds(const DistortionBounds& bounds, const Layout& layout,
                 const std::string& path) {
    if (bounds.ranges.size() != layout.total_length)
        throw ConfigError("bounds do not match layout");
    json j;
    j["format"] = "qdiff-bounds";
    j["version"] = 1;
    j["dims"] = {layout.dims.d1, layout.dims.d2, layout.dims.d3};
    j["slots"] = json::array();
    for (const DistortionSlot& slot : layout.slots) {
        json sj;
        sj["family"] = family_name(slot.family);
        sj["components"] = json::array();
        for (std::size_t ci = 0; ci < slot.components.size(); ++ci) {
            const auto& [lo, hi] = bounds.ranges[slot.offset + ci];
            sj["components"].push_back({{"name", slot.components[ci].name},
                                        {"lo", lo},
                                        {"hi", hi}});
        }
        j["slots"].push_back(std::move(sj));
    }
    std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

DistortionBounds load_bounds(const std::string& path, const Layout& layout) {
    auto bytes = read_file_bytes(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(path + ": not valid JSON: " + e.what());
    }
    DistortionBounds b;
    try {
        if (j.at("format").get<std::string>() != "qdiff-bounds")
            throw FormatError(path + ": not a bounds file");
        auto dims = j.at("dims");
        Dims3 d{dims.at(0).get<std::uint32_t>(), dims.at(1).get<std::uint32_t>(),
                dims.at(2).get<std::uint32_t>()};
        if (!(d == layout.dims))
            throw FormatError(path + ": bounds are for " +
                              std::to_string(d.d1) + "x" +
                              std::to_string(d.d2) + "x" +
                              std::to_string(d.d3) +
                              " patches, layout expects different dims");
        const auto& slots = j.at("slots");
        if (slots.size() != layout.slots.size())
            throw FormatError(path + ": slot count mismatch");
        for (std::size_t si = 0; si < layout.slots.size(); ++si) {
            const DistortionSlot& slot = layout.slots[si];
            const auto& sj = slots[si];
            if (family_from_name(sj.at("family").get<std::string>()) !=
                slot.family)
                throw FormatError(path + ": slot " + std::to_string(si) +
                                  " family mismatch");
            const auto& comps = sj.at("components");
            if (comps.size() != slot.components.size())
                throw FormatError(path + ": slot " + std::to_string(si) +
                                  " component count mismatch");
            for (std::size_t ci = 0; ci < slot.components.size(); ++ci) {
                const SlotComponent& c = slot.components[ci];
                if (comps[ci].at("name").get<std::string>() != c.name)
                    throw FormatError(path + ": component name mismatch in " +
                                      std::string(family_name(slot.family)));
                double lo = comps[ci].at("lo").get<double>();
                double hi = comps[ci].at("hi").get<double>();
                if (lo > hi || lo < c.lo - 1e-12 || hi > c.hi + 1e-12)
                    throw FormatError(
                        path + ": " + std::string(family_name(slot.family)) +
                        "." + c.name + " range [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "] outside layout range");
                b.ranges.emplace_back(lo, hi);
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return b;
}

const char kDiiMagic[8] = {'Q', 'D', 'I', 'F', 'D', 'I', 'I', '1'};

std::vector<std::uint8_t> encode_dii_record(const DiiRecord& rec) {
    std::vector<std::uint8_t> out;
    out.reserve(rec.byte_size());
    put_u64(out, rec.rng_seed);
    put_u32(out, rec.patch_index);
    put_u32(out, static_cast<std::uint32_t>(rec.vector.size()));
    for (float f : rec.vector) put_f32(out, f);
    put_u32(out, rec.original_label);
    put_u32(out, rec.mo_label);
    put_u32(out, rec.mq_label);
    return out;
}

std::vector<DiiRecord> read_dii_file(const std::string& path) {
    std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kDiiMagic, 8) != 0)
        throw FormatError(path + ": missing QDIFDII1 magic");
    std::vector<DiiRecord> records;
    std::size_t off = 8;
    while (off < bytes.size()) {
        if (bytes.size() - off < 16)
            throw FormatError(path + ": truncated record header at byte " +
                              std::to_string(off));
        DiiRecord rec;
        rec.rng_seed = get_u64(bytes.data() + off);
        rec.patch_index = get_u32(bytes.data() + off + 8);
        std::uint32_t len = get_u32(bytes.data() + off + 12);
        std::size_t need = 16 + 4 * static_cast<std::size_t>(len) + 12;
        if (bytes.size() - off < need)
            throw FormatError(path + ": truncated record at byte " +
                              std::to_string(off));
        rec.vector.resize(len);
        for (std::uint32_t i = 0; i < len; ++i)
            rec.vector[i] = get_f32(bytes.data() + off + 16 + 4 * i);
        std::size_t tail = off + 16 + 4 * static_cast<std::size_t>(len);
        rec.original_label = get_u32(bytes.data() + tail);
        rec.mo_label = get_u32(bytes.data() + tail + 4);
        rec.mq_label = get_u32(bytes.data() + tail + 8);
        records.push_back(std::move(rec));
        off += need;
    }
    return records;
}

}  // namespace qdiff
