#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "acemerge/tensor_store.hpp"
#include "test_util.hpp"

using namespace acemerge;
using acemerge::test::raw_container;

namespace {

std::vector<char> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

ContainerFault fault_of(const std::vector<char>& bytes) {
    try {
        decode_container(bytes);
    } catch (const ContainerError& e) {
        return e.fault();
    }
    ADD_FAILURE() << "decode_container accepted malformed bytes";
    return ContainerFault::malformed_header;
}

} // namespace

TEST(TensorStore, EmptyCheckpointLayout) {
    const auto bytes = encode_container(Checkpoint{});
    // magic, version 1, H = 2, "{}", zero padding to 24, empty data section
    const std::vector<char> expected = {'A', 'C', 'E', 'T', 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0,
                                        '{', '}', 0,   0,   0, 0, 0, 0};
    EXPECT_EQ(bytes, expected);
    EXPECT_EQ(decode_container(bytes), Checkpoint{});
}

TEST(TensorStore, ScalarEncodingIsLittleEndianIeee) {
    Checkpoint c;
    c.tensors.emplace("w", Tensor({}, std::vector<double>{1.0}));
    const auto bytes = encode_container(c);
    const std::string header = R"({"w":{"dtype":"f64","nbytes":8,"offset":0,"shape":[]}})";
    ASSERT_EQ(bytes.size(), 16 + 56 + 8u);  // header is 55 bytes, padded to 56
    EXPECT_EQ(std::string(bytes.begin() + 16, bytes.begin() + 16 + header.size()), header);
    const std::vector<char> data(bytes.end() - 8, bytes.end());
    const std::vector<char> one = {0, 0, 0, 0, 0, 0, static_cast<char>(0xf0), 0x3f};
    EXPECT_EQ(data, one);
}

TEST(TensorStore, HeaderKeysAndLayoutAreLexicographic) {
    Checkpoint c;
    c.tensors.emplace("b", Tensor({3}, std::vector<float>{1, 2, 3}));
    c.tensors.emplace("a", Tensor({1}, std::vector<double>{4}));
    c.tensors.emplace("Z", Tensor({2}, std::vector<float>{5, 6}));
    c.metadata["origin"] = "test";
    const auto bytes = encode_container(c);
    const std::uint64_t h = detail::get_le<std::uint64_t>(bytes.data() + 8);
    const std::string header(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(h));
    EXPECT_EQ(header, R"({"Z":{"dtype":"f32","nbytes":8,"offset":0,"shape":[2]},)"
                      R"("__metadata__":{"origin":"test"},)"
                      R"("a":{"dtype":"f64","nbytes":8,"offset":8,"shape":[1]},)"
                      R"("b":{"dtype":"f32","nbytes":12,"offset":16,"shape":[3]}})");
    EXPECT_EQ(decode_container(bytes), c);
}

TEST(TensorStore, OffsetsAre8AlignedWithZeroPadding) {
    Checkpoint c;
    c.tensors.emplace("a", Tensor({3}, std::vector<float>{1, 2, 3}));  // 12 bytes -> next at 16
    c.tensors.emplace("b", Tensor({1}, std::vector<float>{7}));
    const auto bytes = encode_container(c);
    const std::uint64_t h = detail::get_le<std::uint64_t>(bytes.data() + 8);
    const auto data_start = (16 + h + 7) / 8 * 8;
    const auto index = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(h));
    EXPECT_EQ(index["b"]["offset"], 16);
    EXPECT_EQ(bytes.size(), data_start + 20);
    for (std::size_t i = data_start + 12; i < data_start + 16; ++i) EXPECT_EQ(bytes[i], 0);
}

TEST(TensorStore, RoundTripThreeRandomTensors) {
    std::mt19937_64 rng(3);
    Checkpoint c;
    for (const char* name : {"encoder.w", "encoder.b", "head"}) c.tensors.emplace(name, test::random_tensor(rng));
    const auto bytes = encode_container(c);
    const auto back = decode_container(bytes);
    EXPECT_EQ(back, c);
    EXPECT_EQ(encode_container(back), bytes);
}

TEST(TensorStore, RoundTripPropertyRandomCheckpoints) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 200; ++i) {
        const auto c = test::random_checkpoint(rng);
        const auto bytes = encode_container(c);
        ASSERT_EQ(decode_container(bytes), c) << "iteration " << i;
        ASSERT_EQ(encode_container(c), bytes) << "non-deterministic encoding at iteration " << i;
    }
}

TEST(TensorStore, NanPayloadsSurviveBitExact) {
    const double nan_a = std::bit_cast<double>(std::uint64_t{0x7ff8000000000123});
    Checkpoint c;
    c.tensors.emplace("n", Tensor({2}, std::vector<double>{nan_a, -0.0}));
    const auto back = decode_container(encode_container(c));
    EXPECT_EQ(back, c);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back.tensors.at("n").values<double>()[0]), 0x7ff8000000000123u);
    EXPECT_TRUE(std::signbit(back.tensors.at("n").values<double>()[1]));
}

TEST(TensorStore, FileRoundTripAndDeterminism) {
    test::TempDir dir("store");
    std::mt19937_64 rng(5);
    const auto c = test::random_checkpoint(rng);
    write_container(c, dir / "a.acet");
    write_container(c, dir / "b.acet");
    EXPECT_EQ(read_container(dir / "a.acet"), c);
    std::ifstream a(dir / "a.acet", std::ios::binary), b(dir / "b.acet", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    EXPECT_EQ(sa, sb);
}

TEST(TensorStore, MissingFileIsIoError) {
    try {
        read_container("/nonexistent/dir/x.acet");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
}

TEST(TensorStore, BadMagic) {
    auto bytes = encode_container(Checkpoint{});
    bytes[0] = 'X';
    EXPECT_EQ(fault_of(bytes), ContainerFault::bad_magic);
    EXPECT_EQ(fault_of(bytes_of("AC")), ContainerFault::bad_magic);
    try {
        decode_container(bytes);
    } catch (const ContainerError& e) {
        EXPECT_STREQ(e.what(), "bad magic");
    }
}

TEST(TensorStore, UnsupportedVersion) {
    EXPECT_EQ(fault_of(raw_container("{}", {}, 2)), ContainerFault::unsupported_version);
}

TEST(TensorStore, TruncatedHeader) {
    auto bytes = raw_container("{}", {});
    bytes[8] = 100;  // header length beyond EOF
    EXPECT_EQ(fault_of(bytes), ContainerFault::truncated_header);
    EXPECT_EQ(fault_of(bytes_of("ACET\x01")), ContainerFault::truncated_header);
}

TEST(TensorStore, TruncatedData) {
    const auto bytes = raw_container(R"({"w":{"dtype":"f64","nbytes":16,"offset":0,"shape":[2]}})", std::vector<char>(8));
    EXPECT_EQ(fault_of(bytes), ContainerFault::truncated_data);
    try {
        decode_container(bytes);
    } catch (const ContainerError& e) {
        EXPECT_TRUE(std::string_view(e.what()).starts_with("truncated data"));
    }
}

TEST(TensorStore, OverlappingOffsets) {
    const auto bytes = raw_container(R"({"a":{"dtype":"f64","nbytes":16,"offset":0,"shape":[2]},)"
                                     R"("b":{"dtype":"f64","nbytes":8,"offset":8,"shape":[1]}})",
                                     std::vector<char>(24));
    EXPECT_EQ(fault_of(bytes), ContainerFault::overlapping_offsets);
}

TEST(TensorStore, UnknownDtype) {
    const auto bytes = raw_container(R"({"w":{"dtype":"bf16","nbytes":2,"offset":0,"shape":[1]}})", std::vector<char>(8));
    EXPECT_EQ(fault_of(bytes), ContainerFault::unknown_dtype);
}

TEST(TensorStore, OtherStructuralFaults) {
    EXPECT_EQ(fault_of(raw_container("{not json", {})), ContainerFault::malformed_header);
    EXPECT_EQ(fault_of(raw_container("[1,2]", {})), ContainerFault::malformed_header);
    EXPECT_EQ(fault_of(raw_container(R"({"w":{"dtype":"f64","nbytes":8,"offset":4,"shape":[1]}})", std::vector<char>(16))),
              ContainerFault::misaligned_offset);
    EXPECT_EQ(fault_of(raw_container(R"({"w":{"dtype":"f64","nbytes":16,"offset":0,"shape":[1]}})", std::vector<char>(16))),
              ContainerFault::size_mismatch);
    EXPECT_EQ(fault_of(raw_container(R"({"w":{"dtype":"f64","nbytes":8,"offset":0,"shape":[1,1,1,1,1]}})",
                                     std::vector<char>(8))),
              ContainerFault::bad_shape);
    EXPECT_EQ(fault_of(raw_container(R"({"w":{"dtype":"f64","nbytes":8,"offset":0,"shape":[-1]}})", std::vector<char>(8))),
              ContainerFault::bad_shape);
}

TEST(TensorStore, ZeroLengthTensorsMayShareOffsets) {
    const auto bytes = raw_container(R"({"a":{"dtype":"f32","nbytes":0,"offset":0,"shape":[0]},)"
                                     R"("b":{"dtype":"f64","nbytes":8,"offset":0,"shape":[1]}})",
                                     std::vector<char>(8));
    const auto c = decode_container(bytes);
    EXPECT_EQ(c.tensors.at("a").numel(), 0u);
    EXPECT_EQ(c.tensors.at("b").values<double>()[0], 0.0);
}

TEST(TensorStore, TensorInvariants) {
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
    EXPECT_THROW(Tensor({1, 1, 1, 1, 1}, std::vector<double>{1}), Error);
    EXPECT_NO_THROW(Tensor({1, 1, 1, 1}, std::vector<double>{1}));
    EXPECT_NO_THROW(Tensor({0, 3}, std::vector<float>{}));
}

TEST(TensorStore, WriterRejectsEmptyNames) {
    Checkpoint c;
    c.tensors.emplace("", Tensor({}, std::vector<double>{1}));
    EXPECT_THROW(encode_container(c), Error);
}

TEST(ShapeDiff, IdenticalIsEmpty) {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 20; ++i) {
        const auto c = test::random_checkpoint(rng);
        EXPECT_TRUE(shape_diff(c, c).empty());
    }
}

TEST(ShapeDiff, ReportsMissingAndShapeMismatch) {
    Checkpoint a, b;
    a.tensors.emplace("w", Tensor({2, 2}, std::vector<double>(4)));
    EXPECT_EQ(shape_diff(a, b), (std::vector<Mismatch>{{MismatchKind::missing_in_b, "w"}}));
    EXPECT_EQ(shape_diff(b, a), (std::vector<Mismatch>{{MismatchKind::missing_in_a, "w"}}));

    Checkpoint c, d;
    c.tensors.emplace("w", Tensor({2, 3}, std::vector<double>(6)));
    d.tensors.emplace("w", Tensor({3, 2}, std::vector<double>(6)));
    EXPECT_EQ(shape_diff(c, d), (std::vector<Mismatch>{{MismatchKind::shape_mismatch, "w"}}));

    Checkpoint e;
    e.tensors.emplace("w", Tensor({2, 3}, std::vector<float>(6)));
    EXPECT_EQ(shape_diff(c, e), (std::vector<Mismatch>{{MismatchKind::dtype_mismatch, "w"}}));
}
