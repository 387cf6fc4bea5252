#include "charpipe/hashing.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <memory>

#include "charpipe/common.hpp"

namespace charpipe {

static std::string to_hex(const unsigned char* digest, size_t n) {
    static const char* hex = "0123456789abcdef";
    std::string out(n * 2, '0');
    for (size_t i = 0; i < n; ++i) {
        out[2 * i] = hex[digest[i] >> 4];
        out[2 * i + 1] = hex[digest[i] & 0xf];
    }
    return out;
}

struct EvpCtx {
    EVP_MD_CTX* ctx;
    EvpCtx() : ctx(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr); }
    ~EvpCtx() { EVP_MD_CTX_free(ctx); }
    void update(const void* data, size_t size) { EVP_DigestUpdate(ctx, data, size); }
    std::string finish() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx, digest, &len);
        return to_hex(digest, len);
    }
};

std::string sha256_hex(const void* data, size_t size) {
    EvpCtx c;
    c.update(data, size);
    return c.finish();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_hex(const std::vector<uint8_t>& bytes) {
    return sha256_hex(bytes.data(), bytes.size());
}

std::string sha256_file(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!f) throw DependencyError("sha256_file: cannot open " + path);
    EvpCtx c;
    char buf[1 << 16];
    size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof(buf), f.get())) > 0) c.update(buf, n);
    return c.finish();
}

Sha256Stream::Sha256Stream() : ctx_(new EvpCtx()) {}
Sha256Stream::~Sha256Stream() { delete static_cast<EvpCtx*>(ctx_); }

void Sha256Stream::update(const void* data, size_t size) {
    static_cast<EvpCtx*>(ctx_)->update(data, size);
}

std::string Sha256Stream::hex() { return static_cast<EvpCtx*>(ctx_)->finish(); }

} // namespace charpipe
