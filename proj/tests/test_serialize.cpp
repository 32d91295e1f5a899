#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "darts/serialize.hpp"

using namespace darts;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
    static int counter = 0;
    const fs::path p = fs::temp_directory_path() / ("darts_serialize_" + std::to_string(counter++));
    fs::create_directories(p);
    return p.string();
}

}  // namespace

TEST_CASE("DFTN round-trips losslessly at float64") {
    Rng rng(3);
    Tensor t = Tensor::uniform({3, 4, 2}, rng, -1e9, 1e9);
    t.data()[0] = 0.0;
    t.data()[1] = -0.0;
    t.data()[2] = 1e-308;
    std::stringstream ss(std::ios::binary | std::ios::in | std::ios::out);
    write_dftn(ss, t);
    Tensor back = read_dftn(ss);
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);
    CHECK(std::signbit(back[1]));
}

TEST_CASE("DFTN header starts with magic, rank, dims") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    const auto bytes = dftn_bytes(t);
    REQUIRE(bytes.size() == 4 + 4 + 2 * 8 + 6 * 8);
    CHECK(bytes[0] == 'D');
    CHECK(bytes[1] == 'F');
    CHECK(bytes[2] == 'T');
    CHECK(bytes[3] == 'N');
    CHECK(bytes[4] == 2);  // rank, little-endian u32
    CHECK(bytes[8] == 2);  // first dim, little-endian u64
    CHECK(bytes[16] == 3);
}

TEST_CASE("DFTN read errors are distinct for bad magic and truncation") {
    {
        std::stringstream ss("XXXX", std::ios::binary | std::ios::in);
        CHECK_THROWS_WITH_AS(read_dftn(ss), doctest::Contains("malformed header"), IoError);
    }
    {
        Tensor t = Tensor::from_data({4}, {1, 2, 3, 4});
        auto bytes = dftn_bytes(t);
        bytes.resize(bytes.size() - 9);
        std::stringstream ss(std::string(bytes.begin(), bytes.end()), std::ios::binary | std::ios::in);
        CHECK_THROWS_WITH_AS(read_dftn(ss), doctest::Contains("truncated"), IoError);
    }
}

TEST_CASE("checkpoint container round-trips tensors and trailer") {
    Rng rng(5);
    Checkpoint ckpt;
    ckpt.tensors["b.weight"] = Tensor::uniform({3, 2}, rng, -1, 1);
    ckpt.tensors["a.bias"] = Tensor::uniform({5}, rng, -1, 1);
    ckpt.meta_json = R"({"hello":"world"})";
    const std::string path = temp_dir() + "/ckpt.bin";
    save_checkpoint(path, ckpt);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.meta_json == ckpt.meta_json);
    REQUIRE(back.tensors.size() == 2);
    for (const auto& [name, t] : ckpt.tensors) {
        REQUIRE(back.tensors.count(name) == 1);
        CHECK(back.tensors.at(name).data() == t.data());
        CHECK(back.tensors.at(name).shape() == t.shape());
    }
}

TEST_CASE("checkpoint writes are byte-identical for identical contents") {
    Rng rng(6);
    Checkpoint ckpt;
    ckpt.tensors["w"] = Tensor::uniform({4, 4}, rng, -1, 1);
    ckpt.meta_json = "{}";
    const std::string dir = temp_dir();
    save_checkpoint(dir + "/a.bin", ckpt);
    save_checkpoint(dir + "/b.bin", ckpt);
    std::ifstream a(dir + "/a.bin", std::ios::binary), b(dir + "/b.bin", std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
}

TEST_CASE("corrupted checkpoint bytes are caught by the checksum") {
    Rng rng(7);
    Checkpoint ckpt;
    ckpt.tensors["w"] = Tensor::uniform({8}, rng, -1, 1);
    ckpt.meta_json = R"({"k":1})";
    const std::string dir = temp_dir();
    const std::string path = dir + "/ckpt.bin";
    save_checkpoint(path, ckpt);

    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    const std::string bytes = ss.str();
    Rng frng(99);
    int detected = 0;
    const int trials = 40;
    for (int i = 0; i < trials; ++i) {
        std::string corrupt = bytes;
        const std::size_t pos = frng.uniform_index(corrupt.size());
        corrupt[pos] = static_cast<char>(corrupt[pos] ^ (1 << frng.uniform_index(8)));
        const std::string cpath = dir + "/corrupt.bin";
        std::ofstream os(cpath, std::ios::binary);
        os.write(corrupt.data(), static_cast<std::streamsize>(corrupt.size()));
        os.close();
        try {
            (void)load_checkpoint(cpath);
        } catch (const IoError&) {
            ++detected;
        }
    }
    CHECK(detected == trials);
}

TEST_CASE("crc32 matches the standard test vector") {
    const char* s = "123456789";
    CHECK(crc32_bytes(s, 9) == 0xCBF43926u);
}
