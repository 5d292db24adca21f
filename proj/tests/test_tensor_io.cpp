#include <catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <limits>

#include <gmoe/features.hpp>
#include <gmoe/tensor_io.hpp>

#include "test_support.hpp"

using namespace gmoe;
using gmoe::testing::random_tensor;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("gmoe_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

VideoFeatures random_video(const std::string& id, std::size_t classes, Rng& rng) {
    VideoFeatures v;
    v.id = id;
    v.label = static_cast<std::size_t>(rng.below(classes));
    v.cue_type = "both";
    for (int k = 0; k < 3; ++k) v.snippets.push_back({random_tensor({4, 4, 16}, rng), random_tensor({4, 4, 16}, rng)});
    v.scores = {random_tensor({classes}, rng, -5, 5), random_tensor({classes}, rng, -5, 5)};
    return v;
}

}  // namespace

TEST_CASE("little-endian payload layout") {
    TensorFile f;
    f.tensors.push_back({"x", Tensor::vector({1.0})});
    const std::string bytes = encode_tensor_file(f);
    const std::size_t sep = bytes.find('\0');
    REQUIRE(bytes.size() == sep + 1 + 8);
    // 1.0 = 0x3FF0000000000000
    CHECK(static_cast<unsigned char>(bytes[sep + 8]) == 0x3F);
    CHECK(static_cast<unsigned char>(bytes[sep + 7]) == 0xF0);
    CHECK(static_cast<unsigned char>(bytes[sep + 1]) == 0x00);
    const json header = json::parse(bytes.substr(0, sep));
    CHECK(header["dtype"] == "f64le");
    CHECK(header["payload_bytes"] == 8);
}

TEST_CASE("tensor file round trip is bit-identical") {
    Rng rng(1);
    TensorFile f;
    f.meta = {{"note", "x"}};
    f.tensors.push_back({"a", random_tensor({2, 3, 4}, rng)});
    f.tensors.push_back({"b", Tensor::vector({std::numeric_limits<double>::denorm_min(), -0.0, 1e308})});
    const TensorFile back = decode_tensor_file(encode_tensor_file(f));
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.meta == f.meta);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back.tensors[i].name == f.tensors[i].name);
        CHECK(bit_identical(back.tensors[i].tensor, f.tensors[i].tensor));
    }
}

TEST_CASE("distinct format errors") {
    Rng rng(2);
    TensorFile f;
    f.tensors.push_back({"scores", random_tensor({10}, rng)});
    const std::string good = encode_tensor_file(f);

    SECTION("malformed header") {
        CHECK_THROWS_AS(decode_tensor_file("{not json" + std::string(1, '\0')), MalformedHeaderError);
        CHECK_THROWS_AS(decode_tensor_file("no terminator"), MalformedHeaderError);
        CHECK_THROWS_AS(decode_tensor_file(std::string("{\"tensors\":[]}") + '\0'), MalformedHeaderError);
    }
    SECTION("truncated payload") {
        CHECK_THROWS_AS(decode_tensor_file(good.substr(0, good.size() - 3)), TruncatedPayloadError);
    }
    SECTION("declared shape disagrees with payload") {
        // Header declares 101 classes but the payload holds 10 values.
        const std::size_t sep = good.find('\0');
        json header = json::parse(good.substr(0, sep));
        header["tensors"][0]["shape"] = {101};
        const std::string forged = header.dump() + '\0' + good.substr(sep + 1);
        CHECK_THROWS_AS(decode_tensor_file(forged), ShapeMismatchError);
        CHECK_THROWS_AS(decode_tensor_file(good + "12345678"), ShapeMismatchError);
    }
    SECTION("the three kinds are distinct types") {
        bool caught_as_other = false;
        try {
            decode_tensor_file(good.substr(0, good.size() - 1));
        } catch (const ShapeMismatchError&) {
            caught_as_other = true;
        } catch (const MalformedHeaderError&) {
            caught_as_other = true;
        } catch (const TruncatedPayloadError&) {
        }
        CHECK_FALSE(caught_as_other);
    }
}

TEST_CASE("checkpoints restore parameters by name") {
    Rng rng(3);
    std::vector<Parameter> params{{"w", random_tensor({3, 2}, rng)}, {"b", random_tensor({2}, rng)}};
    const auto dir = scratch_dir("ckpt");
    save_checkpoint(dir / "model.gmt", params, {{"stage", 2}});

    std::vector<Parameter> other{{"b", Tensor({2})}, {"w", Tensor({3, 2})}};
    const json meta = load_checkpoint(dir / "model.gmt", other);
    CHECK(meta["stage"] == 2);
    CHECK(bit_identical(other[0].value, params[1].value));
    CHECK(bit_identical(other[1].value, params[0].value));
    CHECK(parameter_hash(std::vector<Parameter>{other[1], other[0]}) == parameter_hash(params));

    std::vector<Parameter> wrong{{"w", Tensor({2, 3})}, {"b", Tensor({2})}};
    CHECK_THROWS_AS(load_checkpoint(dir / "model.gmt", wrong), ShapeMismatchError);
    std::vector<Parameter> missing{{"v", Tensor({2})}};
    CHECK_THROWS_AS(load_checkpoint(dir / "model.gmt", missing), ShapeMismatchError);
}

TEST_CASE("feature export and ingest") {
    Rng rng(4);
    const auto dir = scratch_dir("features");
    std::vector<VideoFeatures> videos;
    for (int i = 0; i < 4; ++i) videos.push_back(random_video("v" + std::to_string(i), 10, rng));
    export_feature_split(dir, videos);

    const auto back = ingest_feature_split(dir, 10);
    REQUIRE(back.size() == videos.size());
    for (std::size_t i = 0; i < videos.size(); ++i) {
        CHECK(back[i].id == videos[i].id);
        CHECK(back[i].label == videos[i].label);
        CHECK(back[i].cue_type == videos[i].cue_type);
        REQUIRE(back[i].snippets.size() == 3);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(bit_identical(back[i].snippets[k].spatial, videos[i].snippets[k].spatial));
            CHECK(bit_identical(back[i].snippets[k].temporal, videos[i].snippets[k].temporal));
        }
        CHECK(bit_identical(back[i].scores.g_rgb, videos[i].scores.g_rgb));
        CHECK(bit_identical(back[i].scores.g_flow, videos[i].scores.g_flow));
    }
    CHECK_THROWS_AS(ingest_features(dir / "v0.gmt", 101), ShapeMismatchError);
}
