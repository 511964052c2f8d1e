#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bevmt/tensor.hpp"

namespace bevmt {

// Single-file container: 8-byte magic "BVMTC001", a u64 length-prefixed
// JSON metadata document (which also indexes the arrays), then the raw
// array payloads back to back in index order. Numeric payloads are written
// in the host byte order; save/load stability on one platform is the
// contract. Array order is insertion order, so identical contents produce
// identical bytes.
class Container {
public:
    nlohmann::json meta = nlohmann::json::object();

    void put_f64(const std::string& name, const Tensor& t);
    void put_i64(const std::string& name, const std::vector<int64_t>& v);
    void put_u8(const std::string& name, const std::vector<uint8_t>& v);

    bool has(const std::string& name) const;
    Tensor f64(const std::string& name) const;          // throws ConfigError when absent/mistyped
    std::vector<int64_t> i64(const std::string& name) const;
    std::vector<uint8_t> u8(const std::string& name) const;
    std::vector<std::string> names() const;

    void save(const std::string& path) const;
    static Container load(const std::string& path);  // throws ConfigError on bad magic/version

private:
    struct Entry {
        std::string dtype;  // "f64" | "i64" | "u8"
        int64_t rows = 0, cols = 0;
        std::vector<unsigned char> bytes;
    };
    std::vector<std::pair<std::string, Entry>> entries_;
    const Entry& find(const std::string& name, const char* dtype) const;
    void reject_duplicate(const std::string& name) const;  // throws ConfigError
};

}  // namespace bevmt
