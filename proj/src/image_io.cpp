#include "d2bnet/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace d2b::harness {

namespace {

uint8_t to_byte(double v) {
    return static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

std::ofstream open_binary(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    return os;
}

}  // namespace

void write_ppm(const std::string& path, std::span<const double> rgb, int h, int w) {
    const size_t npix = static_cast<size_t>(h) * w;
    if (rgb.size() != 3 * npix) throw std::runtime_error("write_ppm: bad buffer size");
    auto os = open_binary(path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t p = static_cast<size_t>(y) * w + x;
            row[static_cast<size_t>(x) * 3 + 0] = to_byte(rgb[0 * npix + p]);
            row[static_cast<size_t>(x) * 3 + 1] = to_byte(rgb[1 * npix + p]);
            row[static_cast<size_t>(x) * 3 + 2] = to_byte(rgb[2 * npix + p]);
        }
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

void write_pgm(const std::string& path, std::span<const double> values, int h, int w,
               double max_value) {
    if (values.size() != static_cast<size_t>(h) * w)
        throw std::runtime_error("write_pgm: bad buffer size");
    auto os = open_binary(path);
    os << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            row[static_cast<size_t>(x)] =
                to_byte(values[static_cast<size_t>(y) * w + x] / max_value);
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

void write_label_ppm(const std::string& path, std::span<const int32_t> class_id,
                     std::span<const int32_t> instance_id, int h, int w) {
    if (class_id.size() != static_cast<size_t>(h) * w || instance_id.size() != class_id.size())
        throw std::runtime_error("write_label_ppm: bad buffer size");
    auto os = open_binary(path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t p = static_cast<size_t>(y) * w + x;
            const uint32_t key = static_cast<uint32_t>(class_id[p]) * 53u +
                                 static_cast<uint32_t>(instance_id[p]) * 19u;
            row[static_cast<size_t>(x) * 3 + 0] = static_cast<uint8_t>(37u + key * 97u);
            row[static_cast<size_t>(x) * 3 + 1] = static_cast<uint8_t>(91u + key * 57u);
            row[static_cast<size_t>(x) * 3 + 2] = static_cast<uint8_t>(151u + key * 31u);
        }
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

}  // namespace d2b::harness
