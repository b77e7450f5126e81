#include "fbn/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

#include "fbn/errors.hpp"

namespace fbn {

namespace {

constexpr char kMagic[8] = {'F', 'B', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& f, std::uint32_t x) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& f, std::uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return x;
}

std::uint64_t get_u64(std::ifstream& f) {
    unsigned char b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return x;
}

struct StoredTensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

}  // namespace

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

void save_checkpoint(const std::filesystem::path& path, const ParamRefs& params,
                     const std::string& signature) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) raise(ErrorCode::WriteError, "cannot open " + path.string() + " for writing");
    f.write(kMagic, 8);
    put_u32(f, kVersion);
    put_u64(f, fnv1a64(signature));
    put_u32(f, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        put_u32(f, static_cast<std::uint32_t>(p->name.size()));
        f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        put_u32(f, static_cast<std::uint32_t>(p->value.rank()));
        for (auto d : p->value.shape) put_u64(f, static_cast<std::uint64_t>(d));
        std::vector<float> buf(static_cast<std::size_t>(p->value.numel()));
        for (std::size_t i = 0; i < buf.size(); ++i)
            buf[i] = static_cast<float>(p->value.v[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!f) raise(ErrorCode::WriteError, "short write on " + path.string());
}

LoadReport load_checkpoint(const std::filesystem::path& path, const ParamRefs& params,
                           const std::string& signature, bool strict) {
    std::ifstream f(path, std::ios::binary);
    if (!f) raise(ErrorCode::CorruptBundle, "cannot open checkpoint " + path.string());
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        raise(ErrorCode::CheckpointMismatch, path.string() + " is not a checkpoint file");
    const std::uint32_t version = get_u32(f);
    if (version != kVersion)
        raise(ErrorCode::CheckpointMismatch,
              "unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t digest = get_u64(f);
    if (strict && digest != fnv1a64(signature))
        raise(ErrorCode::CheckpointMismatch,
              "architecture digest differs; the file was saved under another config");

    const std::uint32_t count = get_u32(f);
    std::map<std::string, StoredTensor> stored;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t name_len = get_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const std::uint32_t rank = get_u32(f);
        StoredTensor t;
        std::int64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            t.shape.push_back(static_cast<std::int64_t>(get_u64(f)));
            numel *= t.shape.back();
        }
        t.data.resize(static_cast<std::size_t>(numel));
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!f) raise(ErrorCode::CorruptBundle, "truncated checkpoint " + path.string());
        stored.emplace(std::move(name), std::move(t));
    }

    LoadReport report;
    for (auto* p : params) {
        auto it = stored.find(p->name);
        if (it == stored.end()) {
            report.missing.push_back(p->name);
            continue;
        }
        if (it->second.shape != p->value.shape) {
            report.mismatched.push_back(p->name);
            stored.erase(it);
            continue;
        }
        for (std::size_t i = 0; i < it->second.data.size(); ++i)
            p->value.v[i] = static_cast<double>(it->second.data[i]);
        stored.erase(it);
    }
    for (const auto& [name, t] : stored) report.unexpected.push_back(name);
    std::sort(report.unexpected.begin(), report.unexpected.end());

    if (strict && !report.clean()) {
        std::string what = "checkpoint tensor set does not match the model:";
        for (const auto& n : report.missing) what += " missing " + n;
        for (const auto& n : report.unexpected) what += " unexpected " + n;
        for (const auto& n : report.mismatched) what += " shape-mismatch " + n;
        raise(ErrorCode::CheckpointMismatch, what);
    }
    return report;
}

}  // namespace fbn
