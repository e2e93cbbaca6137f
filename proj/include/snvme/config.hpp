#pragma once

// Reader for the TOML subset used by the tools: [table] headers, `key = value`
// with basic strings, integers (underscores allowed) and booleans, and
// `#` comments. Dotted keys, arrays and inline tables are not supported.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>

namespace snvme {

using TomlValue = std::variant<std::string, std::int64_t, bool>;
/// table name ("" for keys before the first header) -> key -> value
using TomlDoc = std::map<std::string, std::map<std::string, TomlValue>>;

/// Throws Error(kConfig) naming the offending line.
TomlDoc parse_toml(std::string_view text);

}  // namespace snvme
