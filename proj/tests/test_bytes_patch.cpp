#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "qdiff/bytes.hpp"
#include "qdiff/errors.hpp"
#include "qdiff/patch.hpp"

using namespace qdiff;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<std::uint8_t> bytes_of(const std::string& s) {
    return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("base64 matches RFC 4648 vectors") {
    CHECK(base64_encode(bytes_of("")) == "");
    CHECK(base64_encode(bytes_of("f")) == "Zg==");
    CHECK(base64_encode(bytes_of("fo")) == "Zm8=");
    CHECK(base64_encode(bytes_of("foo")) == "Zm9v");
    CHECK(base64_encode(bytes_of("foob")) == "Zm9vYg==");
    CHECK(base64_encode(bytes_of("fooba")) == "Zm9vYmE=");
    CHECK(base64_encode(bytes_of("foobar")) == "Zm9vYmFy");
    CHECK(base64_decode("Zm9vYmFy") == bytes_of("foobar"));
    CHECK(base64_decode("Zm9vYg==") == bytes_of("foob"));
    CHECK_THROWS_AS(base64_decode("Zm9"), FormatError);
    CHECK_THROWS_AS(base64_decode("Zm=v"), FormatError);
    CHECK_THROWS_AS(base64_decode("Zm9!"), FormatError);
}

TEST_CASE("base64 round-trips arbitrary bytes") {
    Rng rng(3);
    for (int len = 0; len < 64; ++len) {
        std::vector<std::uint8_t> data(len);
        for (auto& b : data) b = static_cast<std::uint8_t>(rng.index(256));
        CHECK(base64_decode(base64_encode(data)) == data);
    }
}

TEST_CASE("little-endian scalar codecs are exact") {
    std::vector<std::uint8_t> out;
    put_u32(out, 0x01020304u);
    CHECK(out == std::vector<std::uint8_t>{0x04, 0x03, 0x02, 0x01});
    CHECK(get_u32(out.data()) == 0x01020304u);

    out.clear();
    put_u64(out, 0x1122334455667788ull);
    CHECK(get_u64(out.data()) == 0x1122334455667788ull);

    out.clear();
    put_i32(out, -2);
    CHECK(get_i32(out.data()) == -2);

    out.clear();
    put_f32(out, 1.0f);
    CHECK(out == std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3f});
    CHECK(get_f32(out.data()) == 1.0f);

    float specials[] = {0.0f, -0.0f, 3.14f, -1e-38f,
                        std::numeric_limits<float>::infinity()};
    for (float v : specials) {
        out.clear();
        put_f32(out, v);
        float back = get_f32(out.data());
        CHECK(std::memcmp(&back, &v, 4) == 0);
    }
}

TEST_CASE("f32 payload codec round-trips bit-exactly") {
    std::vector<float> vals = {0.0f, -0.0f, 1.5f, -2.25f, 1e-30f, 3e30f};
    auto text = encode_f32_payload(vals);
    auto back = decode_f32_payload(text);
    REQUIRE(back.size() == vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i)
        CHECK(std::memcmp(&back[i], &vals[i], 4) == 0);
}

TEST_CASE("fnv1a matches published vectors") {
    CHECK(fnv1a_hex({}) == "cbf29ce484222325");
    auto a = bytes_of("a");
    CHECK(fnv1a_hex(a) == "af63dc4c8601ec8c");
    auto foobar = bytes_of("foobar");
    CHECK(fnv1a_hex(foobar) == "85944171f73967e8");
}

TEST_CASE("patch indexing is row-major (row, col, band)") {
    Patch3D p(2, 3, 4);
    CHECK(p.idx(0, 0, 0) == 0);
    CHECK(p.idx(0, 0, 3) == 3);
    CHECK(p.idx(0, 1, 0) == 4);
    CHECK(p.idx(1, 0, 0) == 12);
    CHECK(p.idx(1, 2, 3) == 23);
    CHECK(p.cell_count() == 24);
}

TEST_CASE("patch validate rejects bad shapes and non-finite values") {
    Patch3D p(2, 2, 2, 0.5f);
    CHECK_NOTHROW(p.validate());
    p.values[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(p.validate(), ShapeError);
    Patch3D q;
    CHECK_THROWS_AS(q.validate(), ShapeError);
    Patch3D r(2, 2, 2);
    r.values.pop_back();
    CHECK_THROWS_AS(r.validate(), ShapeError);
}

TEST_CASE("stats oracle on a hand-computed patch") {
    Patch3D p(1, 2, 2);
    p.values = {1.0f, 2.0f, 3.0f, -6.0f};
    PatchStats s = compute_stats(p);
    CHECK(s.min == -6.0);
    CHECK(s.max == 3.0);
    CHECK(s.max_abs == 6.0);
    CHECK(s.mean == 0.0);
    // population std of {1,2,3,-6}: sqrt((1+4+9+36)/4) = sqrt(12.5)
    CHECK(s.stddev == doctest::Approx(std::sqrt(12.5)).epsilon(1e-12));
}

TEST_CASE("psnr oracle and validity gate") {
    Patch3D a(1, 1, 4);
    a.values = {1.0f, -2.0f, 0.5f, 1.5f};
    Patch3D b = a;
    CHECK(psnr(a, b) == std::numeric_limits<double>::infinity());
    CHECK(is_valid(a, b, 20.0));

    b.values[0] = 1.2f;  // MSE = delta^2/4, MAX = 2
    double delta = static_cast<double>(b.values[0]) - 1.0;
    double expect = 10.0 * std::log10(4.0 / (delta * delta / 4.0));
    CHECK(psnr(a, b) == doctest::Approx(expect).epsilon(1e-12));

    // threshold is inclusive: a patch exactly at the floor passes
    Patch3D c(1, 1, 1);
    c.values = {1.0f};
    Patch3D d = c;
    d.values[0] = 0.9f;
    double at = psnr(c, d);  // ~20 dB
    CHECK(at == doctest::Approx(20.0).epsilon(1e-6));
    CHECK(is_valid(c, d, at));
    CHECK_FALSE(is_valid(c, d, std::nextafter(at, 100.0)));
}

TEST_CASE("patchset write/read round-trips 5 random 7x7x20 patches") {
    PatchSet set = fixtures::random_patchset({7, 7, 20}, 5, 99);
    set.patches[2].label = 3;
    std::string path = temp_path("qdiff_test_patchset.bin");
    write_patchset(set, path);
    PatchSet back = read_patchset(path);
    REQUIRE(back.size() == set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        CHECK(back.patches[i].label == set.patches[i].label);
        REQUIRE(back.patches[i].values.size() == set.patches[i].values.size());
        CHECK(std::memcmp(back.patches[i].values.data(),
                          set.patches[i].values.data(),
                          4 * set.patches[i].values.size()) == 0);
    }
    std::remove(path.c_str());
}

TEST_CASE("patchset golden header bytes") {
    PatchSet set;
    Patch3D p(1, 1, 2);
    p.values = {1.0f, 2.0f};
    p.label = 7;
    set.patches.push_back(p);
    auto bytes = encode_patchset(set);
    // magic | version 1 | count 1 | dims 1 1 2 | label 7 | f32 1.0 | f32 2.0
    const std::uint8_t expect[] = {
        'Q', 'D', 'P', 'A', 'T', 'C', 'H', '1',
        1, 0, 0, 0,  1, 0, 0, 0,
        1, 0, 0, 0,  1, 0, 0, 0,  2, 0, 0, 0,
        7, 0, 0, 0,
        0x00, 0x00, 0x80, 0x3f,  0x00, 0x00, 0x00, 0x40};
    REQUIRE(bytes.size() == sizeof expect);
    CHECK(std::memcmp(bytes.data(), expect, sizeof expect) == 0);
    CHECK(decode_patchset(bytes, "golden").patches[0].label == 7);
}

TEST_CASE("patchset decode rejects corruption") {
    PatchSet set = fixtures::random_patchset({2, 2, 2}, 2, 5);
    auto bytes = encode_patchset(set);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_patchset(truncated, "t"), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_patchset(bad_magic, "t"), FormatError);
    CHECK_THROWS_AS(encode_patchset(PatchSet{}), ConfigError);
    PatchSet mixed;
    mixed.patches.push_back(Patch3D(2, 2, 2, 1.0f));
    mixed.patches.push_back(Patch3D(2, 2, 3, 1.0f));
    CHECK_THROWS_AS(encode_patchset(mixed), ShapeError);
}

TEST_CASE("append_file_bytes extends an existing file") {
    std::string path = temp_path("qdiff_test_append.bin");
    std::remove(path.c_str());
    write_file_bytes(path, bytes_of("abc"));
    append_file_bytes(path, bytes_of("def"));
    CHECK(read_file_bytes(path) == bytes_of("abcdef"));
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_file_bytes(path), IoError);
}
