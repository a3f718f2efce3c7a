#pragma once

#include <cstdint>
#include <string>

#include "pifs/data.hpp"
#include "pifs/protocol.hpp"

namespace pifs {

struct RunConfig {
    ProtocolConfig protocol;
    SyntheticSpec data;
    int n_base_images = 300;
    int n_val_images = 100;
};

RunConfig default_run_config();

/// Flat `key = value` format with `#` comments and `[section]` headers.
/// Unknown sections or keys are errors (no silent typos).
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<string>");
RunConfig parse_config_file(const std::string& path);

/// Canonical printable form; parsing it back reproduces the config.
std::string config_text(const RunConfig& cfg);

/// FNV-1a over the sorted canonical key=value lines: stable under key
/// reordering in the source file.
std::uint64_t config_hash(const RunConfig& cfg);

/// Cross-checks constraints that span several keys (fold arithmetic, shot
/// counts, palette separation). Throws std::invalid_argument.
void validate_config(const RunConfig& cfg);

}  // namespace pifs
