#include "muse/text.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <stdexcept>

namespace muse::text {

namespace {

std::size_t sequence_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;
}

// Length of a whitespace sequence starting at `pos`, 0 if none.
std::size_t space_at(std::string_view s, std::size_t pos) {
    const auto c = static_cast<unsigned char>(s[pos]);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return 1;
    // U+3000 IDEOGRAPHIC SPACE, U+00A0 NO-BREAK SPACE
    if (s.substr(pos, 3) == "\xE3\x80\x80") return 3;
    if (s.substr(pos, 2) == "\xC2\xA0") return 2;
    return 0;
}

// Length of a whitespace sequence ending right before `end`, 0 if none.
std::size_t space_before(std::string_view s, std::size_t end) {
    if (end >= 1 && space_at(s, end - 1) == 1) return 1;
    if (end >= 2 && s.substr(end - 2, 2) == "\xC2\xA0") return 2;
    if (end >= 3 && s.substr(end - 3, 3) == "\xE3\x80\x80") return 3;
    return 0;
}

}  // namespace

std::string trim(std::string_view s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end) {
        const auto n = space_at(s, begin);
        if (n == 0) break;
        begin += n;
    }
    while (end > begin) {
        const auto n = space_before(s, end);
        if (n == 0) break;
        end -= n;
    }
    return std::string(s.substr(begin, end - begin));
}

bool is_blank(std::string_view s) { return trim(s).empty(); }

std::vector<std::string> codepoints(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t n = sequence_length(static_cast<unsigned char>(s[i]));
        if (i + n > s.size()) n = 1;
        out.emplace_back(s.substr(i, n));
        i += n;
    }
    return out;
}

std::size_t codepoint_count(std::string_view s) {
    std::size_t count = 0;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t n = sequence_length(static_cast<unsigned char>(s[i]));
        if (i + n > s.size()) n = 1;
        i += n;
        ++count;
    }
    return count;
}

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
}

std::string join(std::span<const std::string> parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

bool contains(std::string_view haystack, std::string_view needle) {
    return haystack.find(needle) != std::string_view::npos;
}

std::string safe_filename(std::string_view s) {
    std::string out;
    bool changed = false;
    for (char c : s) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                        c == '-' || c == '_' || c == '.';
        out.push_back(ok ? c : '_');
        changed |= !ok;
    }
    if (out.empty() || out == "." || out == "..") {
        out = "_" + out;
        changed = true;
    }
    // Distinct ids must not collide after mangling.
    if (changed) out += "-" + sha256_hex(s).substr(0, 8);
    return out;
}

std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

}  // namespace muse::text
