#pragma once

#include <iosfwd>
#include <string>
#include <variant>

#include "hta/adapters.hpp"

namespace hta {

using AnyAdapter = std::variant<HtaAdapter, LoraAdapter, BottleneckAdapter>;

/// JSON form: {"version": 1, "kind": ..., dims, "r", per-kind flags, and the
/// parameter arrays as plain number lists (doubles round-trip exactly).
std::string adapter_to_json(const AnyAdapter& a);
AnyAdapter adapter_from_json(const std::string& text);
void save_adapter_json(const AnyAdapter& a, const std::string& path);
AnyAdapter load_adapter_json(const std::string& path);

/// Binary form, byte-stable across platforms (everything little-endian):
///   magic "HTAB" | u32 version=1 | u8 kind (0 hta, 1 lora, 2 bottleneck)
///   | u8 flags (bit0 normalize_v; bits1-2 activation) | u32 dim_in
///   | u32 dim_out | u32 r | then five arrays in this exact order, each a
///   u64 count followed by count f64 values: v_left, v_right, d,
///   w_down (row-major), w_up (row-major). Absent arrays have count 0.
void write_adapter_binary(const AnyAdapter& a, std::ostream& out);
AnyAdapter read_adapter_binary(std::istream& in);
void save_adapter_binary(const AnyAdapter& a, const std::string& path);
AnyAdapter load_adapter_binary(const std::string& path);

}  // namespace hta
