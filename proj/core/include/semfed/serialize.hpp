#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace semfed {

// Little-endian primitives. Reads throw std::runtime_error on short files so
// truncation is always a loud failure.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_f64_array(std::ostream& os, const double* v, std::size_t n);

std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_f64_array(std::istream& is, double* v, std::size_t n);

void write_magic(std::ostream& os, const char magic[4]);
void expect_magic(std::istream& is, const char magic[4], const std::string& what);

// Writes to "<path>.tmp" then renames, so readers never see partial files.
void atomic_write_file(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& body);

std::string read_text_file(const std::filesystem::path& path);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

// Shortest round-trippable decimal form of a double (std::to_chars), used for
// every float that lands in a results file so reruns are byte-comparable.
std::string format_double(double v);

}  // namespace semfed
