#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "specmoe/moet.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace specmoe;

TEST_CASE("moet round trip") {
    testutil::ScratchDir dir("moet");
    const auto path = dir.path() / "t.moet";

    moet::Tensor t;
    t.dims = {2, 3};
    t.data = {1.5f, -2.0f, 0.0f, 4.25f, 1e-7f, -1e7f};
    moet::write(path, t);

    const moet::Tensor back = moet::read(path);
    CHECK(back.dims == t.dims);
    CHECK(back.data == t.data);
}

TEST_CASE("moet header is the documented byte layout") {
    testutil::ScratchDir dir("moet_hdr");
    const auto path = dir.path() / "t.moet";
    moet::write(path, std::vector<std::uint64_t>{1}, std::vector<float>{1.0f});

    std::ifstream in(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 4u + 4u + 1u + 1u + 8u + 4u);
    CHECK(bytes[0] == 'M');
    CHECK(bytes[1] == 'O');
    CHECK(bytes[2] == 'E');
    CHECK(bytes[3] == 'T');
    CHECK(bytes[4] == 1); // version u32 LE
    CHECK(bytes[8] == 1); // dtype f32
    CHECK(bytes[9] == 1); // ndim
    CHECK(bytes[10] == 1); // dim0 u64 LE
}

TEST_CASE("moet rejects malformed input") {
    testutil::ScratchDir dir("moet_bad");
    const auto path = dir.path() / "bad.moet";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE";
    }
    CHECK_THROWS_AS(moet::read(path), std::runtime_error);
    CHECK_THROWS_AS(moet::read(dir.path() / "missing.moet"), std::runtime_error);
    CHECK_THROWS_AS(
        moet::write(path, std::vector<std::uint64_t>{3}, std::vector<float>{1.0f}),
        std::invalid_argument);

    // truncated payload
    const auto trunc = dir.path() / "trunc.moet";
    moet::write(trunc, std::vector<std::uint64_t>{4}, std::vector<float>{1, 2, 3, 4});
    std::filesystem::resize_file(trunc, std::filesystem::file_size(trunc) - 4);
    CHECK_THROWS_AS(moet::read(trunc), std::runtime_error);
}

TEST_CASE("streaming writer and reader") {
    testutil::ScratchDir dir("moet_stream");
    const auto path = dir.path() / "s.moet";
    {
        moet::Writer w(path, {4, 2});
        w.append(std::vector<float>{0, 1});
        w.append(std::vector<float>{2, 3, 4, 5});
        CHECK_THROWS_AS(w.close(), std::runtime_error); // incomplete
        w.append(std::vector<float>{6, 7});
        w.close();
        CHECK_THROWS_AS(w.append(std::vector<float>{8}), std::runtime_error);
    }
    moet::Reader r(path);
    CHECK(r.dims() == std::vector<std::uint64_t>{4, 2});
    Vec row(2);
    r.seek_elements(4);
    r.read_chunk(row);
    CHECK(row == Vec{4, 5});
    r.seek_elements(0);
    r.read_chunk(row);
    CHECK(row == Vec{0, 1});

    moet::Writer overflow(dir.path() / "o.moet", {2});
    CHECK_THROWS_AS(overflow.append(std::vector<float>{1, 2, 3}), std::runtime_error);
}
