#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hmoe/tensor.hpp"

namespace hmoe {

// Little-endian binary tensor container:
//   magic "HMOE", u32 version, u32 text length + config text block,
//   u32 tensor count, then per tensor: u32 name length + name, u32 rank,
//   u64 dims, raw 64-bit float data.
// Writing is deterministic, so identical contents produce identical bytes.
struct TensorContainer {
    std::uint32_t version = 1;
    std::string config_text;  // key=value lines
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::string& path, const TensorContainer& c);
TensorContainer read_container(const std::string& path);

// key=value helpers for the config text block (one pair per line).
std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text);
std::string format_double(double v);  // shortest round-trip formatting

}  // namespace hmoe
