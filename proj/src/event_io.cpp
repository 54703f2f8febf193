#include "emf/event_io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "emf/io_util.hpp"

namespace emf {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'T', '1'};
constexpr std::size_t kHeaderBytes = 20;
constexpr std::size_t kRecordBytes = 16;

std::uint64_t load_u64(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}
std::uint16_t load_u16(const unsigned char* b) {
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
void store_u64(unsigned char* b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}
void store_u32(unsigned char* b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}
void store_u16(unsigned char* b, std::uint16_t v) {
    b[0] = static_cast<unsigned char>(v & 0xff);
    b[1] = static_cast<unsigned char>((v >> 8) & 0xff);
}

void sort_and_validate(EventStream& s, const std::string& path) {
    if (s.width <= 0 || s.height <= 0)
        throw ValidationError(path + ": non-positive sensor geometry " +
                              std::to_string(s.width) + "x" + std::to_string(s.height));
    for (std::size_t i = 0; i < s.events.size(); ++i) {
        const Event& e = s.events[i];
        if (e.t < 0)
            throw ValidationError(path + ": record " + std::to_string(i) +
                                  ": negative timestamp");
        if (e.x < 0 || e.x >= s.width || e.y < 0 || e.y >= s.height)
            throw ValidationError(path + ": record " + std::to_string(i) + ": coordinate (" +
                                  std::to_string(e.x) + "," + std::to_string(e.y) +
                                  ") outside " + std::to_string(s.width) + "x" +
                                  std::to_string(s.height));
        if (e.p != -1 && e.p != 1)
            throw ValidationError(path + ": record " + std::to_string(i) +
                                  ": polarity must be -1 or +1");
    }
    if (!std::is_sorted(s.events.begin(), s.events.end(),
                        [](const Event& a, const Event& b) { return a.t < b.t; })) {
        std::stable_sort(s.events.begin(), s.events.end(),
                         [](const Event& a, const Event& b) { return a.t < b.t; });
    }
}

EventStream read_events_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < kHeaderBytes)
        throw FormatError(path + ": truncated header (" + std::to_string(buf.size()) +
                          " bytes, need " + std::to_string(kHeaderBytes) + ")");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw FormatError(path + ": bad magic at byte 0, expected \"EVT1\"");

    EventStream s;
    s.width = load_u16(buf.data() + 4);
    s.height = load_u16(buf.data() + 6);
    const std::uint64_t count = load_u64(buf.data() + 12);
    const std::uint64_t expected = kHeaderBytes + count * kRecordBytes;
    if (buf.size() != expected)
        throw FormatError(path + ": size " + std::to_string(buf.size()) +
                          " does not match header count (expected " +
                          std::to_string(expected) + " bytes)");

    s.events.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::size_t off = kHeaderBytes + i * kRecordBytes;
        const unsigned char* r = buf.data() + off;
        const std::uint64_t t = load_u64(r);
        if (t > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
            throw FormatError(path + ": timestamp overflow at byte " + std::to_string(off));
        const int p = static_cast<std::int8_t>(r[12]);
        if (p != -1 && p != 1)
            throw FormatError(path + ": invalid polarity byte at byte " +
                              std::to_string(off + 12));
        if (r[13] != 0 || r[14] != 0 || r[15] != 0)
            throw FormatError(path + ": nonzero pad byte at byte " + std::to_string(off + 13));
        s.events.push_back(Event{static_cast<std::int64_t>(t), load_u16(r + 8),
                                 load_u16(r + 10), p});
    }
    sort_and_validate(s, path);
    return s;
}

long long parse_ll(const std::string& field, const std::string& path, std::size_t line_no) {
    long long v = 0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        throw FormatError(path + ": line " + std::to_string(line_no) +
                          ": cannot parse integer \"" + field + "\"");
    return v;
}

EventStream read_events_csv(const std::string& path, int width, int height) {
    if (width <= 0 || height <= 0)
        throw ArgumentError("read_events: CSV input needs explicit sensor geometry");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);

    EventStream s;
    s.width = width;
    s.height = height;

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line))
        throw FormatError(path + ": empty file, expected header \"t_us,x,y,p\"");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "t_us,x,y,p")
        throw FormatError(path + ": line 1: expected header \"t_us,x,y,p\", got \"" + line + "\"");

    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::string fields[4];
        std::size_t start = 0;
        int nf = 0;
        for (; nf < 4; ++nf) {
            const std::size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                fields[nf] = line.substr(start);
                ++nf;
                break;
            }
            fields[nf] = line.substr(start, comma - start);
            start = comma + 1;
        }
        if (nf != 4 || line.find(',', start) != std::string::npos)
            throw FormatError(path + ": line " + std::to_string(line_no) +
                              ": expected 4 comma-separated fields");
        Event e;
        e.t = parse_ll(fields[0], path, line_no);
        e.x = static_cast<int>(parse_ll(fields[1], path, line_no));
        e.y = static_cast<int>(parse_ll(fields[2], path, line_no));
        e.p = static_cast<int>(parse_ll(fields[3], path, line_no));
        s.events.push_back(e);
    }
    sort_and_validate(s, path);
    return s;
}

}  // namespace

EventStream read_events(const std::string& path, EventFileFormat format, int width,
                        int height) {
    return format == EventFileFormat::binary ? read_events_binary(path)
                                             : read_events_csv(path, width, height);
}

void write_events(const std::string& path, const EventStream& stream,
                  EventFileFormat format) {
    AtomicFileWriter out(path);
    if (format == EventFileFormat::binary) {
        unsigned char header[kHeaderBytes];
        std::memcpy(header, kMagic, 4);
        store_u16(header + 4, static_cast<std::uint16_t>(stream.width));
        store_u16(header + 6, static_cast<std::uint16_t>(stream.height));
        store_u32(header + 8, 0);
        store_u64(header + 12, stream.events.size());
        out.write(header, kHeaderBytes);
        // Records are padded to 16 bytes; bytes 13..15 are zero.
        unsigned char rec[kRecordBytes] = {0};
        for (const Event& e : stream.events) {
            store_u64(rec, static_cast<std::uint64_t>(e.t));
            store_u16(rec + 8, static_cast<std::uint16_t>(e.x));
            store_u16(rec + 10, static_cast<std::uint16_t>(e.y));
            rec[12] = static_cast<unsigned char>(static_cast<std::int8_t>(e.p));
            rec[13] = 0;
            out.write(rec, kRecordBytes);
        }
    } else {
        std::string text = "t_us,x,y,p\n";
        for (const Event& e : stream.events) {
            text += std::to_string(e.t) + "," + std::to_string(e.x) + "," +
                    std::to_string(e.y) + "," + std::to_string(e.p) + "\n";
        }
        out.write(text.data(), text.size());
    }
    out.commit();
}

std::vector<LabeledBox> read_labels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<LabeledBox> boxes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": line " + std::to_string(line_no) + ": " + e.what());
        }
        for (const char* key : {"t_us", "x", "y", "w", "h", "class_id"}) {
            if (!j.contains(key))
                throw FormatError(path + ": line " + std::to_string(line_no) +
                                  ": missing required key \"" + key + "\"");
        }
        LabeledBox b;
        try {
            b.t = j.at("t_us").get<std::int64_t>();
            b.x = j.at("x").get<double>();
            b.y = j.at("y").get<double>();
            b.w = j.at("w").get<double>();
            b.h = j.at("h").get<double>();
            b.class_id = j.at("class_id").get<int>();
            if (j.contains("track_id")) b.track_id = j.at("track_id").get<std::int64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": line " + std::to_string(line_no) + ": " + e.what());
        }
        if (b.w <= 0.0 || b.h <= 0.0)
            throw ValidationError(path + ": line " + std::to_string(line_no) +
                                  ": box extent must be positive (w=" + std::to_string(b.w) +
                                  ", h=" + std::to_string(b.h) + ")");
        if (b.class_id < 0)
            throw ValidationError(path + ": line " + std::to_string(line_no) +
                                  ": negative class_id");
        boxes.push_back(b);
    }
    return boxes;
}

void write_labels(const std::string& path, const std::vector<LabeledBox>& boxes) {
    AtomicFileWriter out(path);
    for (const LabeledBox& b : boxes) {
        nlohmann::json j{{"t_us", b.t}, {"x", b.x},         {"y", b.y},
                         {"w", b.w},    {"h", b.h},         {"class_id", b.class_id}};
        if (b.track_id) j["track_id"] = *b.track_id;
        const std::string line = j.dump() + "\n";
        out.write(line.data(), line.size());
    }
    out.commit();
}

std::vector<EventWindow> window_events(const EventStream& stream, std::int64_t dt,
                                       const std::vector<LabeledBox>& labels) {
    if (dt <= 0) throw ArgumentError("window_events: dt must be positive");
    std::vector<EventWindow> windows;
    if (stream.events.empty()) return windows;

    const std::int64_t first_idx = stream.events.front().t / dt;
    const std::int64_t last_idx = stream.events.back().t / dt;
    windows.resize(static_cast<std::size_t>(last_idx - first_idx + 1));
    for (std::size_t i = 0; i < windows.size(); ++i) {
        windows[i].t0 = (first_idx + static_cast<std::int64_t>(i)) * dt;
        windows[i].dt = dt;
    }
    for (const Event& e : stream.events) {
        windows[static_cast<std::size_t>(e.t / dt - first_idx)].events.push_back(e);
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const LabeledBox& b = labels[i];
        if (b.x >= stream.width || b.x + b.w <= 0 || b.y >= stream.height || b.y + b.h <= 0)
            throw ValidationError("label " + std::to_string(i) +
                                  " does not intersect the sensor frame");
        // (t0, t0+dt] membership: index = floor((t-1)/dt), exact for all t >= 0.
        const std::int64_t shifted = b.t - 1;
        std::int64_t idx = shifted / dt;
        if (shifted < 0 && shifted % dt != 0) --idx;
        if (idx < first_idx || idx > last_idx) continue;
        windows[static_cast<std::size_t>(idx - first_idx)].labels.push_back(b);
    }
    return windows;
}

}  // namespace emf
