#include "lab/rng.hpp"

#include <cmath>

#include "lab/errors.hpp"

namespace lab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t Rng::next_u64() {
    state_ += kGolden;
    return mix64(state_);
}

Rng Rng::fork(std::uint64_t salt) const {
    // Two finalizer rounds keep child streams decorrelated even for adjacent
    // salts and states.
    std::uint64_t seed = mix64(state_ ^ mix64(salt * kGolden + 0xD1B54A32D192ED03ULL));
    return Rng(seed);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    // u1 in (0,1] so the log is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw ContractError("Rng::uniform_int requires n > 0");
    // Lemire multiply-high mapping; deterministic, bias < 2^-32 at desk sizes.
    unsigned __int128 wide =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<int>(wide >> 64);
}

}  // namespace lab
