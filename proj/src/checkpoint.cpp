#include "dtune/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dtune/errors.hpp"
#include "dtune/rng.hpp"

namespace dtune {

namespace {

constexpr const char* kFormat = "dtune-checkpoint";
constexpr int kFormatVersion = 1;

std::string le_bytes(const std::vector<float>& values) {
    std::string bytes(values.size() * 4, '\0');
    for (size_t i = 0; i < values.size(); ++i) {
        auto u = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
    }
    return bytes;
}

std::vector<float> from_le_bytes(const std::string& bytes) {
    std::vector<float> v(bytes.size() / 4);
    for (size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
        v[i] = std::bit_cast<float>(u);
    }
    return v;
}

std::string read_file(const std::filesystem::path& p, bool& ok) {
    std::ifstream is(p, std::ios::binary);
    ok = static_cast<bool>(is);
    if (!ok) return {};
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string blob_name(size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "tensors/%05zu.bin", i);
    return buf;
}

}  // namespace

int64_t HostTensor::numel() const {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string module_of(const std::string& name) {
    const auto dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string tensor_hash(const HostTensor& t) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto d : t.shape) h = fnv1a64(std::to_string(d) + ",", h);
    h = fnv1a64(le_bytes(t.values), h);
    return hex64(h);
}

std::string map_hash(const TensorMap& m, const std::string& prefix) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : m) {
        if (!prefix.empty() && name.compare(0, prefix.size(), prefix) != 0) continue;
        h = fnv1a64(name, h);
        h = fnv1a64(tensor_hash(t), h);
    }
    return hex64(h);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (fs::exists(dir / "manifest.json")) {
        throw IoError("checkpoint directory already holds a checkpoint (write-once): " + dir.string());
    }
    std::error_code ec;
    fs::create_directories(dir / "tensors", ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kFormatVersion;
    manifest["config"] = ckpt.config;
    manifest["config_hash"] = ckpt.config_hash;
    manifest["extra"] = ckpt.extra;
    if (ckpt.backbone) manifest["backbone"] = {{"path", ckpt.backbone->path}, {"hash", ckpt.backbone->hash}};
    nlohmann::json entries = nlohmann::json::array();
    size_t i = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        if (static_cast<int64_t>(t.values.size()) != t.numel()) {
            throw ContractError("tensor " + name + " has " + std::to_string(t.values.size()) +
                                " values for its shape");
        }
        const std::string file = blob_name(i++);
        std::ofstream os(dir / file, std::ios::binary);
        const std::string bytes = le_bytes(t.values);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw IoError("failed writing blob for " + name);
        entries.push_back({{"name", name},
                           {"module", module_of(name)},
                           {"shape", t.shape},
                           {"dtype", "float32"},
                           {"file", file},
                           {"bytes", bytes.size()},
                           {"hash", tensor_hash(t)}});
    }
    manifest["tensors"] = entries;
    std::ofstream os(dir / "manifest.json", std::ios::binary);
    os << manifest.dump(2) << '\n';
    if (!os) throw IoError("failed writing manifest in " + dir.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    bool ok = false;
    const std::string text = read_file(dir / "manifest.json", ok);
    if (!ok) throw IoError("no checkpoint manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != kFormat) throw CorruptionError("not a checkpoint manifest: " + dir.string());

    Checkpoint ckpt;
    try {
        ckpt.config = manifest.at("config");
        ckpt.config_hash = manifest.at("config_hash").get<std::string>();
        ckpt.extra = manifest.value("extra", nlohmann::json::object());
        if (manifest.contains("backbone")) {
            ckpt.backbone = BackboneRef{manifest["backbone"].at("path").get<std::string>(),
                                        manifest["backbone"].at("hash").get<std::string>()};
        }
        for (const auto& e : manifest.at("tensors")) {
            const auto name = e.at("name").get<std::string>();
            if (e.at("dtype").get<std::string>() != "float32") throw CorruptionError("tensor " + name + ": unsupported dtype");
            HostTensor t;
            t.shape = e.at("shape").get<std::vector<int64_t>>();
            const std::string bytes = read_file(dir / e.at("file").get<std::string>(), ok);
            if (!ok) throw CorruptionError("tensor " + name + ": blob missing");
            const auto expected = static_cast<size_t>(t.numel()) * 4;
            if (bytes.size() != expected) {
                throw CorruptionError("tensor " + name + ": blob has " + std::to_string(bytes.size()) +
                                      " bytes, expected " + std::to_string(expected));
            }
            t.values = from_le_bytes(bytes);
            if (tensor_hash(t) != e.at("hash").get<std::string>()) {
                throw CorruptionError("tensor " + name + ": content hash mismatch");
            }
            ckpt.tensors.emplace(name, std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    return ckpt;
}

}  // namespace dtune
