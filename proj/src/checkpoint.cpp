#include "pandagpt/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace pgpt {

namespace {

const std::array<uint32_t, 256>& crc_table() {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    return table;
}

void put_u32(std::string& out, uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

uint32_t get_u32(const std::string& in, size_t& pos) {
    if (pos + 4 > in.size()) throw IoError("checkpoint: truncated file");
    uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
}

void append_tensor_table(std::string& out, const ParamMap& tensors) {
    for (const auto& [name, t] : tensors) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        put_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put_u32(out, static_cast<uint32_t>(d));
        const size_t bytes = t.data.size() * sizeof(float);
        const size_t off = out.size();
        out.resize(off + bytes);
        std::memcpy(out.data() + off, t.data.data(), bytes);
    }
}

}  // namespace

uint32_t crc32(const void* data, size_t len, uint32_t crc) {
    const auto& table = crc_table();
    const auto* p = static_cast<const unsigned char*>(data);
    crc ^= 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out = "PGPT";
    put_u32(out, kCheckpointVersion);

    std::string meta;
    for (const auto& [k, v] : ckpt.meta) {
        if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos) {
            throw UsageError("checkpoint meta key/value may not contain '=' or newline: " + k);
        }
        meta += k + "=" + v + "\n";
    }
    put_u32(out, static_cast<uint32_t>(meta.size()));
    out.append(meta);

    append_tensor_table(out, ckpt.tensors);
    put_u32(out, crc32(out.data(), out.size()));
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || bytes.compare(0, 4, "PGPT") != 0) {
        throw InvariantError("checkpoint: bad magic (not a PGPT file)");
    }
    const size_t body_len = bytes.size() - 4;
    uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body_len, 4);
    const uint32_t actual = crc32(bytes.data(), body_len);
    if (stored_crc != actual) throw InvariantError("checkpoint: CRC mismatch, file is corrupt");

    size_t pos = 4;
    const uint32_t version = get_u32(bytes, pos);
    if (version != kCheckpointVersion) {
        throw InvariantError("checkpoint: unsupported format version " + std::to_string(version));
    }

    Checkpoint ckpt;
    const uint32_t meta_len = get_u32(bytes, pos);
    if (pos + meta_len > body_len) throw IoError("checkpoint: truncated metadata");
    size_t line_start = pos;
    const size_t meta_end = pos + meta_len;
    while (line_start < meta_end) {
        size_t nl = bytes.find('\n', line_start);
        if (nl == std::string::npos || nl >= meta_end) throw IoError("checkpoint: malformed metadata");
        const std::string line = bytes.substr(line_start, nl - line_start);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw IoError("checkpoint: metadata line without '='");
        ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
        line_start = nl + 1;
    }
    pos = meta_end;

    while (pos < body_len) {
        const uint32_t name_len = get_u32(bytes, pos);
        if (pos + name_len > body_len) throw IoError("checkpoint: truncated tensor name");
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const uint32_t ndim = get_u32(bytes, pos);
        if (ndim == 0 || ndim > 8) throw IoError("checkpoint: implausible rank for tensor " + name);
        std::vector<int> shape(ndim);
        int64_t numel = 1;
        for (uint32_t i = 0; i < ndim; ++i) {
            shape[i] = static_cast<int>(get_u32(bytes, pos));
            numel *= shape[i];
        }
        const size_t data_bytes = static_cast<size_t>(numel) * sizeof(float);
        if (pos + data_bytes > body_len) throw IoError("checkpoint: truncated tensor data for " + name);
        Tensor t(shape);
        std::memcpy(t.data.data(), bytes.data() + pos, data_bytes);
        pos += data_bytes;
        if (!ckpt.tensors.emplace(std::move(name), std::move(t)).second) {
            throw IoError("checkpoint: duplicate tensor name");
        }
    }
    return ckpt;
}

uint32_t save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    write_file(path, bytes);
    uint32_t trailing;
    std::memcpy(&trailing, bytes.data() + bytes.size() - 4, 4);
    return trailing;
}

Checkpoint load_checkpoint(const std::string& path, uint32_t* file_crc) {
    const std::string bytes = read_file(path);
    Checkpoint ckpt = parse_checkpoint(bytes);
    if (file_crc) std::memcpy(file_crc, bytes.data() + bytes.size() - 4, 4);
    return ckpt;
}

uint32_t params_checksum(const ParamMap& params) {
    std::string table;
    append_tensor_table(table, params);
    return crc32(table.data(), table.size());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on " + path);
    return bytes;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed on " + path);
}

}  // namespace pgpt
