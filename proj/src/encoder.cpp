#include "emf/encoder.hpp"

namespace emf {

EventVolume encode_stacked_histogram(const EventWindow& window, int sensor_width,
                                     int sensor_height, const EncoderConfig& cfg) {
    cfg.validate();
    if (sensor_width <= 0 || sensor_height <= 0)
        throw ArgumentError("encode_stacked_histogram: non-positive sensor geometry");

    EventVolume vol;
    vol.polarities = cfg.polarities;
    vol.bins = cfg.bins;
    vol.height = (sensor_height + cfg.spatial_divisor - 1) / cfg.spatial_divisor;
    vol.width = (sensor_width + cfg.spatial_divisor - 1) / cfg.spatial_divisor;
    vol.counts.assign(static_cast<std::size_t>(vol.polarities) * vol.bins * vol.height *
                          vol.width,
                      0u);

    const std::uint32_t cap = static_cast<std::uint32_t>(cfg.saturation);
    for (const Event& e : window.events) {
        const std::int64_t rel = e.t - window.t0;
        if (rel < 0 || rel >= window.dt)
            throw ValidationError(
                "encode_stacked_histogram: event at t=" + std::to_string(e.t) +
                " outside window [" + std::to_string(window.t0) + "," +
                std::to_string(window.t0 + window.dt) + ")");
        const int pol = (e.p + 1) / 2;
        std::int64_t tau = rel * cfg.bins / window.dt;
        if (tau > cfg.bins - 1) tau = cfg.bins - 1;  // closed last bin
        std::uint32_t& cell =
            vol.at(pol, static_cast<int>(tau), e.y / cfg.spatial_divisor,
                   e.x / cfg.spatial_divisor);
        if (cell < cap) ++cell;
    }
    return vol;
}

Tensor flatten_volume(const EventVolume& vol) {
    Tensor t({vol.polarities * vol.bins, vol.height, vol.width});
    float* dst = t.data();
    for (std::size_t i = 0; i < vol.counts.size(); ++i)
        dst[i] = static_cast<float>(vol.counts[i]);
    return t;
}

}  // namespace emf
