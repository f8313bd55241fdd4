#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "adjnet/checkpoint.hpp"
#include "test_util.hpp"

using namespace adjnet;
namespace fs = std::filesystem;

namespace {

NetworkSpec spec(MaskSpec m) {
    NetworkSpec s;
    s.stem = {4};
    s.stages = {{4, 1, m}, {8, 2, m}};
    return s;
}

fs::path temp_file(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "adjnet_checkpoint_test";
    fs::create_directories(d);
    return d / name;
}

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    Network<float> net(spec({2, 0.3, 9}), NetMode::adjoined, 4);
    // Give the running statistics non-default values.
    net.set_training(true);
    (void)net.logits_adjoined(testutil::random_tensor<float>({2, 3, 16, 16}, 1));
    const auto path = temp_file("rt.ckpt");
    auto ckpt = make_checkpoint(net, TrainClock{3, 7, 0, 12});
    ckpt.meta["note"] = "x";
    save(ckpt, path);
    const Checkpoint back = load(path);
    EXPECT_EQ(back.spec, net.spec());
    EXPECT_EQ(back.mode, NetMode::adjoined);
    EXPECT_EQ(back.layer_masks, net.layer_mask_specs());
    EXPECT_EQ(back.clock.current_epoch, 3u);
    EXPECT_EQ(back.clock.steps_per_epoch, 12u);
    EXPECT_EQ(back.meta["note"], "x");
    ASSERT_EQ(back.payload.size(), ckpt.payload.size());
    EXPECT_EQ(std::memcmp(back.payload.data(), ckpt.payload.data(), ckpt.payload.size() * 4), 0);

    Network<float> restored = restore(back);
    auto a = net.state(), b = restored.state();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_TRUE(std::equal(a[i].values.begin(), a[i].values.end(), b[i].values.begin())) << a[i].name;
    }
    auto la = net.adjoined_layers(), lb = restored.adjoined_layers();
    for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i]->mask(), lb[i]->mask());

    net.set_training(false);
    restored.set_training(false);
    const auto x = testutil::random_tensor<float>({2, 3, 16, 16}, 2);
    EXPECT_EQ(net.logits_small(x).values(), restored.logits_small(x).values());

    // Saving the restored network reproduces the file byte for byte.
    const auto path2 = temp_file("rt2.ckpt");
    auto c2 = make_checkpoint(restored, back.clock);
    c2.meta = back.meta;
    save(c2, path2);
    EXPECT_EQ(read_all(path), read_all(path2));
}

TEST(Checkpoint, StandardNetworkRoundTrip) {
    Network<float> net(spec({}), NetMode::standard, 5);
    const auto path = temp_file("std.ckpt");
    save(make_checkpoint(net), path);
    Network<float> back = restore(load(path));
    EXPECT_EQ(back.mode(), NetMode::standard);
    EXPECT_EQ(back.parameter_count(), net.parameter_count());
}

TEST(Checkpoint, HeaderStartsWithMagicAndVersion) {
    Network<float> net(spec({}), NetMode::standard, 5);
    const auto path = temp_file("hdr.ckpt");
    save(make_checkpoint(net), path);
    const auto text = read_all(path);
    EXPECT_EQ(text.rfind("ADJNET-CHECKPOINT\nversion 1\nheader ", 0), 0u);
}

TEST(Checkpoint, CorruptMagicRejected) {
    Network<float> net(spec({}), NetMode::standard, 5);
    const auto path = temp_file("magic.ckpt");
    save(make_checkpoint(net), path);
    auto text = read_all(path);
    text[0] = 'X';
    write_all(path, text);
    try {
        (void)load(path);
        FAIL() << "no error";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }
}

TEST(Checkpoint, OffsetPastEndRejected) {
    Network<float> net(spec({}), NetMode::standard, 5);
    const auto path = temp_file("offset.ckpt");
    auto ckpt = make_checkpoint(net);
    ckpt.tensors.back().offset = ckpt.payload.size() + 100;
    save(ckpt, path);
    try {
        (void)load(path);
        FAIL() << "no error";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find(std::to_string(ckpt.payload.size() + 100)), std::string::npos)
            << e.what();
    }
}

TEST(Checkpoint, TruncatedPayloadRejected) {
    Network<float> net(spec({}), NetMode::standard, 5);
    const auto path = temp_file("trunc.ckpt");
    save(make_checkpoint(net), path);
    auto text = read_all(path);
    text.resize(text.size() - 6);
    write_all(path, text);
    EXPECT_THROW((void)load(path), FormatError);
}

TEST(Checkpoint, UnsupportedVersionRejected) {
    Network<float> net(spec({}), NetMode::standard, 5);
    const auto path = temp_file("ver.ckpt");
    save(make_checkpoint(net), path);
    auto text = read_all(path);
    text.replace(text.find("version 1"), 9, "version 9");
    write_all(path, text);
    EXPECT_THROW((void)load(path), FormatError);
}

TEST(Checkpoint, MissingFileRejected) { EXPECT_THROW((void)load(temp_file("absent.ckpt")), FormatError); }
