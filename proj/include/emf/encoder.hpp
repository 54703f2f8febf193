#pragma once

#include <cstdint>
#include <vector>

#include "emf/event_io.hpp"
#include "emf/tensor.hpp"

namespace emf {

/// Stacked-histogram encoding parameters. Defaults follow the standard
/// protocol: 2 polarities x 10 time bins over 50 ms windows.
struct EncoderConfig {
    int polarities = 2;          // fixed by the representation
    int bins = 10;               // T
    std::int64_t dt_us = 50000;  // window duration
    int spatial_divisor = 1;     // 2 for the downsampled 1 Mpx protocol
    int saturation = 255;        // max count per cell

    void validate() const {
        if (bins < 1) throw ArgumentError("EncoderConfig: bins must be >= 1");
        if (dt_us <= 0) throw ArgumentError("EncoderConfig: dt_us must be positive");
        if (spatial_divisor < 1)
            throw ArgumentError("EncoderConfig: spatial_divisor must be >= 1");
        if (saturation < 1) throw ArgumentError("EncoderConfig: saturation must be >= 1");
    }
};

/// Per-(polarity, bin, pixel) event counts, shape (P, T, H', W') with
/// H' = ceil(H / divisor), W' = ceil(W / divisor). Cells saturate at
/// cfg.saturation.
struct EventVolume {
    int polarities = 0;
    int bins = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;  // row-major (p, tau, y, x)

    std::uint32_t& at(int p, int tau, int y, int x) {
        return counts[((static_cast<std::size_t>(p) * bins + tau) * height + y) * width + x];
    }
    std::uint32_t at(int p, int tau, int y, int x) const {
        return counts[((static_cast<std::size_t>(p) * bins + tau) * height + y) * width + x];
    }
};

/// Builds the stacked histogram of one window: polarity index (p+1)/2, time
/// bin min(floor((t - t0) * T / dt), T-1), cell (y/divisor, x/divisor),
/// saturating increments.
EventVolume encode_stacked_histogram(const EventWindow& window, int sensor_width,
                                     int sensor_height, const EncoderConfig& cfg);

/// Reshapes a volume to the network input (P*T, H', W'); channel c = p*T + tau.
Tensor flatten_volume(const EventVolume& vol);

}  // namespace emf
