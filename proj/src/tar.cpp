#include "tar.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace amal::detail {

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(char* field, std::size_t width, unsigned long long value) {
    // width includes the terminating NUL
    std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1), value);
}

unsigned header_checksum(const char* header) {
    unsigned sum = 0;
    for (std::size_t i = 0; i < kBlock; ++i) {
        const bool in_chksum = i >= 148 && i < 156;
        sum += in_chksum ? static_cast<unsigned>(' ') : static_cast<unsigned char>(header[i]);
    }
    return sum;
}

unsigned long long parse_octal(const char* field, std::size_t width) {
    unsigned long long v = 0;
    std::size_t i = 0;
    while (i < width && field[i] == ' ') ++i;
    for (; i < width && field[i] >= '0' && field[i] <= '7'; ++i) v = v * 8 + static_cast<unsigned>(field[i] - '0');
    return v;
}

}  // namespace

std::string tar_pack(const std::vector<std::pair<std::string, std::string>>& entries) {
    std::string out;
    for (const auto& [name, data] : entries) {
        if (name.size() >= 100) throw std::invalid_argument("tar entry name too long: " + name);
        char header[kBlock] = {};
        std::memcpy(header, name.data(), name.size());
        put_octal(header + 100, 8, 0644);
        put_octal(header + 108, 8, 0);
        put_octal(header + 116, 8, 0);
        put_octal(header + 124, 12, data.size());
        put_octal(header + 136, 12, 0);
        header[156] = '0';
        std::memcpy(header + 257, "ustar", 6);
        std::memcpy(header + 263, "00", 2);
        std::snprintf(header + 148, 8, "%06o", header_checksum(header));
        header[155] = ' ';
        out.append(header, kBlock);
        out += data;
        out.append((kBlock - data.size() % kBlock) % kBlock, '\0');
    }
    out.append(2 * kBlock, '\0');
    return out;
}

std::map<std::string, std::string> tar_unpack(std::string_view archive) {
    std::map<std::string, std::string> files;
    std::size_t pos = 0;
    bool saw_end = false;
    while (pos + kBlock <= archive.size()) {
        const char* header = archive.data() + pos;
        bool zero = true;
        for (std::size_t i = 0; i < kBlock && zero; ++i) zero = header[i] == '\0';
        if (zero) {
            saw_end = true;
            break;
        }
        if (parse_octal(header + 148, 8) != header_checksum(header)) {
            throw std::runtime_error("tar header checksum mismatch");
        }
        const std::string name(header, strnlen(header, 100));
        const auto size = static_cast<std::size_t>(parse_octal(header + 124, 12));
        pos += kBlock;
        if (size > archive.size() - pos) throw std::runtime_error("tar entry '" + name + "' is truncated");
        if (header[156] == '0' || header[156] == '\0') files[name] = std::string(archive.substr(pos, size));
        pos += (size + kBlock - 1) / kBlock * kBlock;
    }
    if (!saw_end) throw std::runtime_error("tar archive is truncated");
    return files;
}

}  // namespace amal::detail
