#pragma once

// Just enough ustar to hold a handful of regular files.

#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace amal::detail {

/// Entries are written in order with mtime 0, so output is reproducible.
std::string tar_pack(const std::vector<std::pair<std::string, std::string>>& entries);

/// Throws std::runtime_error on bad header checksums or truncation.
std::map<std::string, std::string> tar_unpack(std::string_view archive);

}  // namespace amal::detail
