#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace charpipe {

// SHA-256 hex digest of a byte buffer.
std::string sha256_hex(const void* data, size_t size);
std::string sha256_hex(const std::string& s);
std::string sha256_hex(const std::vector<uint8_t>& bytes);

// SHA-256 hex digest of a file's contents. Throws DependencyError if the
// file cannot be read.
std::string sha256_file(const std::string& path);

// Incremental SHA-256 for hashing structured data without concatenating it.
class Sha256Stream {
public:
    Sha256Stream();
    ~Sha256Stream();
    Sha256Stream(const Sha256Stream&) = delete;
    Sha256Stream& operator=(const Sha256Stream&) = delete;

    void update(const void* data, size_t size);
    void update(const std::string& s) { update(s.data(), s.size()); }
    // Finalizes and returns the hex digest. Call at most once.
    std::string hex();

private:
    void* ctx_;
};

} // namespace charpipe
