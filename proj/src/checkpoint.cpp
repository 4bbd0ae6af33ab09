#include "fsm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fsm {

namespace {

constexpr uint32_t kDtypeF32 = 0;

void write_u32(std::ostream& out, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

uint32_t read_u32(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error(path + ": truncated while reading " + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write("FSM1", 4);
    write_u32(out, static_cast<uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        write_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, kDtypeF32);
        const auto& shape = tensor.shape();
        write_u32(out, static_cast<uint32_t>(shape.size()));
        for (int d : shape) write_u32(out, static_cast<uint32_t>(d));
    }
    for (const auto& [name, tensor] : params) {
        static_assert(sizeof(float) == 4);
        out.write(reinterpret_cast<const char*>(tensor.values().data()),
                  static_cast<std::streamsize>(tensor.values().size() * 4));
    }
    if (!out) throw std::runtime_error(path + ": write failed");
}

NamedParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open file");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "FSM1", 4) != 0)
        throw std::runtime_error(path + ": not an FSM1 checkpoint");
    uint32_t count = read_u32(in, path, "parameter count");

    struct Entry {
        std::string name;
        ad::Shape shape;
    };
    std::vector<Entry> manifest(count);
    for (auto& e : manifest) {
        uint32_t name_len = read_u32(in, path, "name length");
        if (name_len > 4096) throw std::runtime_error(path + ": implausible name length");
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw std::runtime_error(path + ": truncated while reading a parameter name");
        uint32_t dtype = read_u32(in, path, "dtype");
        if (dtype != kDtypeF32)
            throw std::runtime_error(path + ": unsupported dtype code " + std::to_string(dtype));
        uint32_t ndim = read_u32(in, path, "rank");
        if (ndim > 8) throw std::runtime_error(path + ": implausible rank");
        e.shape.resize(ndim);
        for (auto& d : e.shape) d = static_cast<int>(read_u32(in, path, "extent"));
    }

    NamedParams params;
    params.reserve(count);
    for (auto& e : manifest) {
        std::vector<float> vals(ad::numel(e.shape));
        in.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * 4));
        if (!in)
            throw std::runtime_error(path + ": truncated payload for parameter \"" + e.name + "\"");
        params.emplace_back(e.name, ad::Tensor<float>::from(e.shape, std::move(vals), true));
    }
    return params;
}

void assign_params(NamedParams& dst, const NamedParams& src) {
    if (dst.size() != src.size())
        throw std::runtime_error("checkpoint holds " + std::to_string(src.size()) +
                                 " parameters, model has " + std::to_string(dst.size()));
    for (size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].first != src[i].first)
            throw std::runtime_error("parameter " + std::to_string(i) + " is \"" + src[i].first +
                                     "\" in the checkpoint but \"" + dst[i].first +
                                     "\" in the model");
        if (dst[i].second.shape() != src[i].second.shape())
            throw std::runtime_error("parameter \"" + dst[i].first + "\": shape " +
                                     ad::shape_str(src[i].second.shape()) +
                                     " does not match model's " +
                                     ad::shape_str(dst[i].second.shape()));
        dst[i].second.values() = src[i].second.values();
    }
}

void save_meta(const std::string& path, const MetaEntries& entries) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    for (const auto& [k, v] : entries) out << k << "=" << v << "\n";
    if (!out) throw std::runtime_error(path + ": write failed");
}

MetaEntries load_meta(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open file");
    MetaEntries entries;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ": line " + std::to_string(number) + " has no '='");
        entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return entries;
}

}  // namespace fsm
