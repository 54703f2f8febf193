#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "emf/error.hpp"

namespace emf {

/// Writes into "<path>.tmp" and renames onto `path` on commit, so a failed
/// command never leaves a partially-written output behind.
class AtomicFileWriter {
public:
    explicit AtomicFileWriter(std::string path)
        : path_(std::move(path)), tmp_(path_ + ".tmp"), out_(tmp_, std::ios::binary) {
        if (!out_) throw IoError("cannot open " + tmp_ + " for writing");
    }

    ~AtomicFileWriter() {
        if (!committed_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

    AtomicFileWriter(const AtomicFileWriter&) = delete;
    AtomicFileWriter& operator=(const AtomicFileWriter&) = delete;

    void write(const void* data, std::size_t bytes) {
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
        if (!out_) throw IoError("write failed on " + tmp_);
    }

    void write(const std::string& text) { write(text.data(), text.size()); }

    void commit() {
        out_.flush();
        if (!out_) throw IoError("flush failed on " + tmp_);
        out_.close();
        std::error_code ec;
        std::filesystem::rename(tmp_, path_, ec);
        if (ec) throw IoError("cannot rename " + tmp_ + " to " + path_ + ": " + ec.message());
        committed_ = true;
    }

private:
    std::string path_;
    std::string tmp_;
    std::ofstream out_;
    bool committed_ = false;
};

}  // namespace emf
