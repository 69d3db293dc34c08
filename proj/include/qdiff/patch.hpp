#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qdiff {

// A d1 x d2 x d3 hyperspectral patch: two spatial dimensions (rows, cols)
// and one spectral dimension (bands). Values are stored row-major in
// (row, col, band) order so the same byte stream decodes identically
// everywhere. Immutable by convention after construction.
struct Patch3D {
    std::uint32_t d1 = 0;  // spatial rows
    std::uint32_t d2 = 0;  // spatial cols
    std::uint32_t d3 = 0;  // spectral bands
    std::vector<float> values;
    std::int32_t label = -1;  // -1 = unlabeled

    Patch3D() = default;
    Patch3D(std::uint32_t rows, std::uint32_t cols, std::uint32_t bands,
            float fill = 0.0f)
        : d1(rows), d2(cols), d3(bands),
          values(static_cast<std::size_t>(rows) * cols * bands, fill) {}

    std::size_t cell_count() const {
        return static_cast<std::size_t>(d1) * d2 * d3;
    }

    std::size_t idx(std::uint32_t i, std::uint32_t j, std::uint32_t k) const {
        return (static_cast<std::size_t>(i) * d2 + j) * d3 + k;
    }

    float at(std::uint32_t i, std::uint32_t j, std::uint32_t k) const {
        return values[idx(i, j, k)];
    }
    float& at(std::uint32_t i, std::uint32_t j, std::uint32_t k) {
        return values[idx(i, j, k)];
    }

    bool same_dims(const Patch3D& other) const {
        return d1 == other.d1 && d2 == other.d2 && d3 == other.d3;
    }

    // Throws ShapeError if dims are zero, the value count disagrees, or any
    // value is non-finite.
    void validate() const;
};

// Whole-patch statistics used as the reference frame for distortions.
struct PatchStats {
    double min = 0.0;
    double max = 0.0;
    double max_abs = 0.0;
    double mean = 0.0;
    double stddev = 0.0;  // population std
};

PatchStats compute_stats(const Patch3D& patch);

struct PatchSet {
    std::vector<Patch3D> patches;
    std::string provenance;

    bool empty() const { return patches.empty(); }
    std::size_t size() const { return patches.size(); }
};

// Peak signal-to-noise ratio in decibels: 10*log10(MAX^2 / MSE) with MSE the
// mean squared error over all cells and MAX the maximum absolute value of
// the ORIGINAL patch. MSE == 0 returns +infinity.
double psnr(const Patch3D& original, const Patch3D& distorted);

// PSNR >= threshold (inclusive boundary); +infinity always passes.
bool is_valid(const Patch3D& original, const Patch3D& distorted,
              double threshold_db = 20.0);

// Binary patch-set container, little-endian:
//   magic "QDPATCH1" | u32 version=1 | u32 count | u32 d1 d2 d3
//   per patch: i32 label | d1*d2*d3 binary32 values, row-major
PatchSet read_patchset(const std::string& path);
void write_patchset(const PatchSet& set, const std::string& path);

// In-memory codec used by the file functions (and by golden-byte tests).
std::vector<std::uint8_t> encode_patchset(const PatchSet& set);
PatchSet decode_patchset(const std::vector<std::uint8_t>& bytes,
                         const std::string& origin);

}  // namespace qdiff
