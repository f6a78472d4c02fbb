#pragma once

#include <cmath>
#include <cstdint>

#include "mmsde/linalg.hpp"

namespace mmsde {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Inverse of the standard normal CDF (Wichura's PPND16 rational
/// approximations, |error| ~ 1e-15). Input must lie strictly in (0,1).
double normal_quantile(double p);

}  // namespace detail

/// Counter-based Gaussian noise source. The k-th variate of a stream is a
/// pure function of (master_seed, stream_id, k): replayable, random-access,
/// and independent of evaluation order, so concurrent replications with
/// distinct stream ids reproduce bitwise regardless of scheduling.
class NoiseStream {
  public:
    NoiseStream(std::uint64_t master_seed, std::uint64_t stream_id, int dimension)
        : master_seed_(master_seed),
          stream_id_(stream_id),
          dimension_(dimension),
          key_(detail::mix64(detail::mix64(master_seed) ^
                             detail::mix64(stream_id ^ 0x6A09E667F3BCC909ull))) {}

    std::uint64_t master_seed() const { return master_seed_; }
    std::uint64_t stream_id() const { return stream_id_; }
    int dimension() const { return dimension_; }

    /// Uniform variate in the open interval (0,1) at the given counter.
    double uniform(std::uint64_t index) const {
        const std::uint64_t v = detail::mix64(key_ + index * detail::kGolden);
        return (static_cast<double>(v >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal variate at the given counter.
    double normal(std::uint64_t index) const { return detail::normal_quantile(uniform(index)); }

    /// Brownian increment for step k: sqrt(h) * N(0, I_dim).
    void fill_increment(std::uint64_t step, double sqrt_h, Vec& out) const {
        out.resize(static_cast<std::size_t>(dimension_));
        const std::uint64_t base = step * static_cast<std::uint64_t>(dimension_);
        for (int j = 0; j < dimension_; ++j)
            out[static_cast<std::size_t>(j)] = sqrt_h * normal(base + static_cast<std::uint64_t>(j));
    }

  private:
    std::uint64_t master_seed_;
    std::uint64_t stream_id_;
    int dimension_;
    std::uint64_t key_;
};

/// Stream-id layout used by the experiment drivers: task / eps-index /
/// replication / channel (0 = slow noise W1, 1 = fast noise W2).
inline std::uint64_t make_stream_id(std::uint64_t task, std::uint64_t eps_index,
                                    std::uint64_t replication, std::uint64_t channel) {
    return ((task * 256u + eps_index) << 32) | (replication * 4u + channel);
}

}  // namespace mmsde
