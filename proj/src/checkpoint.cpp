#include "hmoe/checkpoint.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace hmoe {

namespace {

constexpr char kMagic[4] = {'H', 'M', 'O', 'E'};

void write_u32(std::ofstream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ofstream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::ifstream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated file (u32)");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::ifstream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated file (u64)");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64_le(std::ofstream& os, const double* data, std::size_t n) {
    // Little-endian host: raw write. (The sandbox and targets are LE x86.)
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace

const Tensor* TensorContainer::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return &t;
    }
    return nullptr;
}

void write_container(const std::string& path, const TensorContainer& c) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_u32(os, c.version);
    write_u32(os, static_cast<std::uint32_t>(c.config_text.size()));
    os.write(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size()));
    write_u32(os, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) write_u64(os, static_cast<std::uint64_t>(d));
        write_f64_le(os, t.data.data(), t.data.size());
    }
    if (!os) throw IoError("write failed for " + path);
}

TensorContainer read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("bad magic bytes in " + path);
    }
    TensorContainer c;
    c.version = read_u32(is);
    if (c.version != kContainerVersion) {
        throw IoError("unsupported container version " + std::to_string(c.version));
    }
    std::uint32_t text_len = read_u32(is);
    c.config_text.resize(text_len);
    if (text_len > 0 && !is.read(c.config_text.data(), text_len)) {
        throw IoError("truncated config block in " + path);
    }
    std::uint32_t count = read_u32(is);
    c.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        if (name_len > 0 && !is.read(name.data(), name_len)) throw IoError("truncated tensor name");
        std::uint32_t rank = read_u32(is);
        std::vector<int> shape;
        std::uint64_t numel = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            std::uint64_t d = read_u64(is);
            shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        Tensor t = Tensor::zeros(shape);
        if (numel > 0 &&
            !is.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(numel * sizeof(double)))) {
            throw IoError("truncated tensor data for " + name);
        }
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty() || line[0] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed config line: " + line);
        out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return out;
}

std::string format_double(double v) {
    char buf[40];
    // Shortest representation that round-trips a double.
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        double back = 0.0;
        std::sscanf(buf, "%lf", &back);
        if (back == v) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace hmoe
