#pragma once

#include <string>

#include <json.hpp>

#include "charpipe/nn.hpp"

namespace charpipe {

using json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;

// Container layout: "CPKT" magic, int32 format version, uint64 header
// length, UTF-8 JSON header, then raw little-endian float64 parameter data
// in the header's listed order (names sorted). Round trips are bit exact.
//
// The header carries {"format_version", "params": [{name, shape}...]} plus
// everything in header_extra (model kind, config, upstream hashes).
void save_checkpoint(const std::string& path, const ParamStore& ps, const json& header_extra);

struct LoadedCheckpoint {
    json header;
    ParamStore params;
};

// Throws DependencyError if missing, ValidationError if malformed or the
// format version does not match.
LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace charpipe
