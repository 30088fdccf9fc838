#include "d2bnet/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are little-endian; big-endian hosts need byte swapping");

namespace d2b {

namespace {

void write_record(std::ostream& os, nlohmann::json header, const Tensor& t) {
    header["shape"] = t.shape();
    header["dtype"] = "f64";
    os << header.dump() << '\n';
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    if (!os) throw std::runtime_error("tensor write failed");
}

std::pair<std::string, Tensor> read_record(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("tensor read: missing header line");
    const nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("dtype").get<std::string>() != "f64")
        throw std::runtime_error("tensor read: unsupported dtype");
    Shape shape = header.at("shape").get<Shape>();
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("tensor read: truncated payload");
    std::string name = header.value("name", std::string());
    return {std::move(name), Tensor::from(std::move(shape), std::move(data))};
}

}  // namespace

void save_tensor(std::ostream& os, const Tensor& t) { write_record(os, {}, t); }

Tensor load_tensor(std::istream& is) { return read_record(is).second; }

void save_named_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    nlohmann::json header;
    header["name"] = name;
    write_record(os, std::move(header), t);
}

std::pair<std::string, Tensor> load_named_tensor(std::istream& is) { return read_record(is); }

void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    save_tensor(os, t);
}

Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return load_tensor(is);
}

}  // namespace d2b
