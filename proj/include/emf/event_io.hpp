#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emf/error.hpp"

namespace emf {

/// One asynchronous camera event. Polarity is -1 or +1.
struct Event {
    std::int64_t t = 0;  // microseconds, non-negative
    int x = 0;
    int y = 0;
    int p = 1;
};

/// Time-ordered event sequence with its sensor geometry.
struct EventStream {
    int width = 0;
    int height = 0;
    std::vector<Event> events;  // sorted non-decreasing by t
};

/// Ground-truth box: top-left corner plus extent, timestamped in microseconds.
struct LabeledBox {
    std::int64_t t = 0;
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;
    int class_id = 0;
    std::optional<std::int64_t> track_id;
};

/// One dt-long slice of a stream. Events cover [t0, t0+dt); labels cover
/// (t0, t0+dt], so a detection produced from the window is evaluated against
/// the labels at its end.
struct EventWindow {
    std::int64_t t0 = 0;
    std::int64_t dt = 0;
    std::vector<Event> events;
    std::vector<LabeledBox> labels;
};

enum class EventFileFormat { binary, csv };

/// Reads and validates an event file.
///
/// Binary layout: magic "EVT1" | width u16 LE | height u16 LE | reserved u32
/// LE | count u64 LE | count records of {t_us u64, x u16, y u16, p i8, pad
/// u8=0}. CSV carries no geometry, so `width`/`height` must be supplied for
/// that format. Out-of-order events are stably sorted by t.
EventStream read_events(const std::string& path, EventFileFormat format,
                        int width = 0, int height = 0);

/// Writes a stream in the given format. Binary output round-trips bit-exactly
/// through read_events.
void write_events(const std::string& path, const EventStream& stream,
                  EventFileFormat format);

/// Reads a JSON-lines label file (keys t_us, x, y, w, h, class_id, optional
/// track_id; unknown keys ignored), in file order.
std::vector<LabeledBox> read_labels(const std::string& path);

void write_labels(const std::string& path, const std::vector<LabeledBox>& boxes);

/// Splits a stream into consecutive dt-wide windows aligned to multiples of
/// dt, covering [floor(t_first/dt)*dt, t_last]. Each event lands in exactly
/// one window; each label lands in the window whose (t0, t0+dt] interval
/// contains its timestamp (labels outside every window are dropped).
std::vector<EventWindow> window_events(const EventStream& stream, std::int64_t dt,
                                       const std::vector<LabeledBox>& labels = {});

}  // namespace emf
