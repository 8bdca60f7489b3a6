#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace cotwatch {

using Rng = std::mt19937_64;

/// Seed for a named sub-stream ("split", "init", "synth", ...) of a root seed.
/// All randomness in a pipeline run flows from one root seed through here.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

inline Rng make_rng(std::uint64_t root, std::string_view stream) {
  return Rng(derive_seed(root, stream));
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace cotwatch
