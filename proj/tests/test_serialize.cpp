#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "semfed/serialize.hpp"

using namespace semfed;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("semfed-test-" + name);
}
}  // namespace

TEST_CASE("primitives write little-endian and roundtrip") {
    std::ostringstream os;
    write_u32(os, 0x01020304u);
    write_u16(os, 0xBEEFu);
    write_u8(os, 0x7Fu);
    write_u64(os, 0x1122334455667788ull);
    write_f64(os, 1.5);
    const std::string bytes = os.str();
    REQUIRE(bytes.size() == 4 + 2 + 1 + 8 + 8);
    CHECK(static_cast<unsigned char>(bytes[0]) == 0x04);
    CHECK(static_cast<unsigned char>(bytes[1]) == 0x03);
    CHECK(static_cast<unsigned char>(bytes[2]) == 0x02);
    CHECK(static_cast<unsigned char>(bytes[3]) == 0x01);
    CHECK(static_cast<unsigned char>(bytes[4]) == 0xEF);
    CHECK(static_cast<unsigned char>(bytes[5]) == 0xBE);
    // IEEE-754 little-endian 1.5 = 00 00 00 00 00 00 F8 3F
    CHECK(static_cast<unsigned char>(bytes[15]) == 0x00);
    CHECK(static_cast<unsigned char>(bytes[21]) == 0xF8);
    CHECK(static_cast<unsigned char>(bytes[22]) == 0x3F);

    std::istringstream is(bytes);
    CHECK(read_u32(is) == 0x01020304u);
    CHECK(read_u16(is) == 0xBEEFu);
    CHECK(read_u8(is) == 0x7Fu);
    CHECK(read_u64(is) == 0x1122334455667788ull);
    CHECK(read_f64(is) == 1.5);
}

TEST_CASE("truncated reads fail loudly") {
    std::istringstream is(std::string("\x01\x02", 2));
    CHECK_THROWS_AS(read_u32(is), std::runtime_error);
}

TEST_CASE("magic mismatch is an error") {
    std::ostringstream os;
    write_magic(os, "SEMF");
    std::istringstream is(os.str());
    CHECK_NOTHROW(expect_magic(is, "SEMF", "test"));
    std::istringstream is2(os.str());
    CHECK_THROWS_AS(expect_magic(is2, "SKB1", "test"), std::runtime_error);
}

TEST_CASE("atomic file writes leave no temp behind and replace contents") {
    const fs::path p = temp_file("atomic.bin");
    atomic_write_text(p, "first");
    atomic_write_text(p, "second");
    CHECK(read_text_file(p) == "second");
    CHECK(!fs::exists(p.string() + ".tmp"));
    fs::remove(p);
}

TEST_CASE("format_double round-trips common values") {
    CHECK(format_double(0.0) == "0");
    CHECK(format_double(1.5) == "1.5");
    CHECK(format_double(600.0) == "600");
    const std::string nan = format_double(std::nan(""));
    CHECK(nan.substr(0, 3) == "nan");
    // shortest form parses back to the same bits
    const double v = 0.1 + 0.2;
    CHECK(std::stod(format_double(v)) == v);
}
