#include "qdiff/patch.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"

namespace qdiff {

namespace {
constexpr char kMagic[8] = {'Q', 'D', 'P', 'A', 'T', 'C', 'H', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void Patch3D::validate() const {
    if (d1 < 1 || d2 < 1 || d3 < 1)
        throw ShapeError("patch dims must each be >= 1");
    if (values.size() != cell_count())
        throw ShapeError("patch value count does not match dims");
    for (float v : values)
        if (!std::isfinite(v)) throw ShapeError("patch contains non-finite value");
}

PatchStats compute_stats(const Patch3D& patch) {
    PatchStats s;
    s.min = std::numeric_limits<double>::infinity();
    s.max = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (float v : patch.values) {
        double d = v;
        if (d < s.min) s.min = d;
        if (d > s.max) s.max = d;
        sum += d;
    }
    std::size_t n = patch.values.size();
    s.mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (float v : patch.values) {
        double d = static_cast<double>(v) - s.mean;
        sq += d * d;
    }
    s.stddev = std::sqrt(sq / static_cast<double>(n));
    s.max_abs = std::max(std::abs(s.min), std::abs(s.max));
    return s;
}

double psnr(const Patch3D& original, const Patch3D& distorted) {
    if (!original.same_dims(distorted))
        throw ShapeError("psnr: patch dims differ");
    double mse = 0.0;
    double max_abs = 0.0;
    for (std::size_t i = 0; i < original.values.size(); ++i) {
        double a = original.values[i];
        double d = a - static_cast<double>(distorted.values[i]);
        mse += d * d;
        max_abs = std::max(max_abs, std::abs(a));
    }
    mse /= static_cast<double>(original.values.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_abs * max_abs / mse);
}

bool is_valid(const Patch3D& original, const Patch3D& distorted,
              double threshold_db) {
    return psnr(original, distorted) >= threshold_db;
}

std::vector<std::uint8_t> encode_patchset(const PatchSet& set) {
    if (set.empty()) throw ConfigError("write_patchset: empty patch set");
    const Patch3D& first = set.patches.front();
    for (const Patch3D& p : set.patches) {
        p.validate();
        if (!p.same_dims(first))
            throw ShapeError("write_patchset: patches have mixed dims");
    }
    std::vector<std::uint8_t> out;
    out.reserve(32 + set.size() * (4 + first.cell_count() * 4));
    for (char m : kMagic) out.push_back(static_cast<std::uint8_t>(m));
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(set.size()));
    put_u32(out, first.d1);
    put_u32(out, first.d2);
    put_u32(out, first.d3);
    for (const Patch3D& p : set.patches) {
        put_i32(out, p.label);
        for (float v : p.values) put_f32(out, v);
    }
    return out;
}

PatchSet decode_patchset(const std::vector<std::uint8_t>& bytes,
                         const std::string& origin) {
    if (bytes.size() < 28)
        throw FormatError(origin + ": truncated header (have " +
                          std::to_string(bytes.size()) + " bytes, need 28)");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError(origin + ": bad magic at byte offset 0");
    std::uint32_t version = get_u32(bytes.data() + 8);
    if (version != kVersion)
        throw FormatError(origin + ": unsupported version " +
                          std::to_string(version) + " at byte offset 8");
    std::uint32_t count = get_u32(bytes.data() + 12);
    std::uint32_t d1 = get_u32(bytes.data() + 16);
    std::uint32_t d2 = get_u32(bytes.data() + 20);
    std::uint32_t d3 = get_u32(bytes.data() + 24);
    if (d1 < 1 || d2 < 1 || d3 < 1)
        throw FormatError(origin + ": zero dimension in header");
    std::size_t cells = static_cast<std::size_t>(d1) * d2 * d3;
    std::size_t expected = 28 + static_cast<std::size_t>(count) * (4 + cells * 4);
    if (bytes.size() != expected)
        throw FormatError(origin + ": declared " + std::to_string(count) +
                          " patches of " + std::to_string(cells) +
                          " cells but payload is " + std::to_string(bytes.size()) +
                          " bytes (expected " + std::to_string(expected) + ")");
    PatchSet set;
    set.provenance = origin;
    set.patches.reserve(count);
    std::size_t off = 28;
    for (std::uint32_t p = 0; p < count; ++p) {
        Patch3D patch(d1, d2, d3);
        patch.label = get_i32(bytes.data() + off);
        off += 4;
        for (std::size_t c = 0; c < cells; ++c) {
            patch.values[c] = get_f32(bytes.data() + off);
            off += 4;
        }
        set.patches.push_back(std::move(patch));
    }
    return set;
}

PatchSet read_patchset(const std::string& path) {
    return decode_patchset(read_file_bytes(path), path);
}

void write_patchset(const PatchSet& set, const std::string& path) {
    write_file_bytes(path, encode_patchset(set));
}

}  // namespace qdiff
