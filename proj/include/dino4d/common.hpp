#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dino4d {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BehindCamera : Error {
    BehindCamera() : Error("point is at or behind the camera plane") {}
};
struct EmptySet : Error {
    using Error::Error;
};
struct ShapeMismatch : Error {
    using Error::Error;
};
struct NoVisiblePoints : Error {
    using Error::Error;
};
struct NoValidPixels : Error {
    using Error::Error;
};
struct NonOrthonormalInput : Error {
    using Error::Error;
};
struct DimMismatch : Error {
    using Error::Error;
};
struct EmptyOmega : Error {
    using Error::Error;
};
struct StepOutOfRange : Error {
    using Error::Error;
};
struct InsufficientCorrespondences : Error {
    using Error::Error;
};
struct DivergedPnP : Error {
    using Error::Error;
};
struct WindowTooLong : Error {
    using Error::Error;
};
struct ConfigInvalid : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};
struct CheckpointCorrupt : Error {
    using Error::Error;
};

// Depth below which projection is refused; keeps the projection operator
// well-defined near the camera plane.
inline constexpr double kEpsDepth = 1e-6;

/// Derive a per-stage RNG seed from the run seed and a stage name so each
/// stochastic stage is individually reproducible (FNV-1a over the name,
/// mixed with the base seed).
inline std::uint64_t stage_seed(std::uint64_t base, std::string_view stage) {
    std::uint64_t h = 14695981039346656037ull ^ base;
    for (char c : stage) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

}  // namespace dino4d
