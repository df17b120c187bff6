#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace muse::text {

/// Strips ASCII and common Unicode whitespace (including U+3000) from both ends.
std::string trim(std::string_view s);

bool is_blank(std::string_view s);

/// Splits a UTF-8 string into code points. Invalid bytes become single-byte items.
std::vector<std::string> codepoints(std::string_view s);

std::size_t codepoint_count(std::string_view s);

std::string sha256_hex(std::string_view data);

std::string join(std::span<const std::string> parts, std::string_view sep);

bool contains(std::string_view haystack, std::string_view needle);

/// Replaces characters that are unsafe in file names. A changed name gets a
/// short hash suffix so distinct inputs stay distinct.
std::string safe_filename(std::string_view s);

/// Formats a real with fixed decimals ("%.4f").
std::string fixed(double v, int decimals);

}  // namespace muse::text
