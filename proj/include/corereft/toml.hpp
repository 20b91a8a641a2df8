#pragma once

// Reader/writer for the TOML subset used by experiment configs:
//   - comments (#), blank lines
//   - [table] and [table.sub] headers
//   - bare or "quoted" keys, one `key = value` per line
//   - basic "strings" (with \" \\ \n \t escapes) and 'literal' strings
//   - integers, floats (incl. exponent), true/false
//   - arrays of the above, possibly spanning lines, trailing comma allowed
// Inline tables, dates and multi-line strings are not supported.

#include <string>
#include <string_view>

#include <json.hpp>

namespace corereft::toml {

using Document = nlohmann::ordered_json;

// Throws ConfigError naming the line on malformed input or duplicate keys.
Document parse(std::string_view text);

// Scalars first, then nested tables, both in insertion order. Floats are
// written with 17 significant digits so parse(dump(d)) == d.
std::string dump(const Document& doc);

}  // namespace corereft::toml
