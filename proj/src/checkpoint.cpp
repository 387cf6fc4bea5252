#include "charpipe/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

namespace charpipe {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'K', 'T'};

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_bytes(FILE* f, const void* data, size_t size, const std::string& path) {
    if (std::fwrite(data, 1, size, f) != size) {
        throw ValidationError("save_checkpoint: write failed for " + path);
    }
}

void read_bytes(FILE* f, void* data, size_t size, const std::string& path) {
    if (std::fread(data, 1, size, f) != size) {
        throw ValidationError("load_checkpoint: truncated checkpoint " + path);
    }
}

} // namespace

void save_checkpoint(const std::string& path, const ParamStore& ps, const json& header_extra) {
    json header = header_extra;
    header["format_version"] = kCheckpointVersion;
    json plist = json::array();
    for (const auto& [name, t] : ps.all()) {
        plist.push_back({{"name", name}, {"shape", t.shape()}});
    }
    header["params"] = plist;
    std::string hbytes = header.dump();

    std::string tmp = path + ".tmp";
    {
        FilePtr f(std::fopen(tmp.c_str(), "wb"));
        if (!f) throw ValidationError("save_checkpoint: cannot open " + tmp + " for writing");
        write_bytes(f.get(), kMagic, 4, tmp);
        int32_t ver = kCheckpointVersion;
        write_bytes(f.get(), &ver, sizeof(ver), tmp);
        uint64_t hlen = hbytes.size();
        write_bytes(f.get(), &hlen, sizeof(hlen), tmp);
        write_bytes(f.get(), hbytes.data(), hbytes.size(), tmp);
        for (const auto& [name, t] : ps.all()) {
            write_bytes(f.get(), t.val().data(), t.val().size() * sizeof(real), tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw DependencyError("load_checkpoint: cannot open " + path);

    char magic[4];
    read_bytes(f.get(), magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw ValidationError("load_checkpoint: " + path + " is not a checkpoint file");
    }
    int32_t ver = 0;
    read_bytes(f.get(), &ver, sizeof(ver), path);
    if (ver != kCheckpointVersion) {
        throw ValidationError("load_checkpoint: " + path + " has format version " +
                              std::to_string(ver) + ", expected " +
                              std::to_string(kCheckpointVersion));
    }
    uint64_t hlen = 0;
    read_bytes(f.get(), &hlen, sizeof(hlen), path);
    check(hlen > 0 && hlen < (1ull << 30), "load_checkpoint: implausible header size");
    std::string hbytes(hlen, '\0');
    read_bytes(f.get(), hbytes.data(), hlen, path);

    LoadedCheckpoint out;
    try {
        out.header = json::parse(hbytes);
    } catch (const json::exception& e) {
        throw ValidationError("load_checkpoint: bad header JSON in " + path + ": " + e.what());
    }
    check(out.header.contains("params") && out.header["params"].is_array(),
          "load_checkpoint: header missing params list");
    for (const auto& entry : out.header["params"]) {
        std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        Tensor t = Tensor::zeros(shape);
        read_bytes(f.get(), t.val().data(), t.val().size() * sizeof(real), path);
        out.params.put(name, std::move(t));
    }
    return out;
}

} // namespace charpipe
