#pragma once

// Tensor wire format: one JSON header line {"shape":[...],"dtype":"f64"}
// terminated by '\n', immediately followed by the raw little-endian f64
// payload. Named records add a "name" field to the header.

#include <iosfwd>
#include <string>
#include <utility>

#include "d2bnet/tensor.hpp"

namespace d2b {

void save_tensor(std::ostream& os, const Tensor& t);
Tensor load_tensor(std::istream& is);

void save_named_tensor(std::ostream& os, const std::string& name, const Tensor& t);
// Returns {name, tensor}; name is empty for anonymous records.
std::pair<std::string, Tensor> load_named_tensor(std::istream& is);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace d2b
