#pragma once

// Binary PPM/PGM writers for rendered predictions.

#include <cstdint>
#include <span>
#include <string>

namespace d2b::harness {

// rgb: three h*w planes in [0,1].
void write_ppm(const std::string& path, std::span<const double> rgb, int h, int w);

// values scaled by 255/max_value and clamped.
void write_pgm(const std::string& path, std::span<const double> values, int h, int w,
               double max_value);

// One colour per (class, instance) pair for panoptic renderings.
void write_label_ppm(const std::string& path, std::span<const int32_t> class_id,
                     std::span<const int32_t> instance_id, int h, int w);

}  // namespace d2b::harness
