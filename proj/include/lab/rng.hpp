#pragma once

#include <cstdint>
#include <vector>

namespace lab {

// Deterministic seedable stream generator: SplitMix64.
//
// The state advances by the 64-bit golden-ratio constant (a Weyl sequence);
// each output is the SplitMix64 finalizer of the new state. `fork(salt)`
// derives an independent child stream from the current state and a caller
// chosen salt without advancing the parent, so per-task streams (parameter
// init, per-sample augmentation, episodes, grid cells) can be handed out
// reproducibly in any order. The exact mixing function is documented in
// docs/formats.md so datasets and runs are regenerable outside this codebase.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    // Child stream keyed by (current state, salt); parent state untouched.
    Rng fork(std::uint64_t salt) const;

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double normal();

    // Uniform integer in [0, n); n must be positive.
    int uniform_int(int n);

    // Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

    std::uint64_t state() const { return state_; }
    static Rng from_state(std::uint64_t s) { return Rng(s); }

private:
    std::uint64_t state_;
};

}  // namespace lab
