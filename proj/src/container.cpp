#include "bevmt/container.hpp"

#include <cstring>
#include <fstream>

#include "bevmt/common.hpp"

namespace bevmt {

namespace {

constexpr char kMagic[8] = {'B', 'V', 'M', 'T', 'C', '0', '0', '1'};

std::vector<unsigned char> to_bytes(const void* src, size_t n) {
    std::vector<unsigned char> out(n);
    std::memcpy(out.data(), src, n);
    return out;
}

}  // namespace

void Container::put_f64(const std::string& name, const Tensor& t) {
    reject_duplicate(name);
    entries_.push_back({name, {"f64", t.rows, t.cols, to_bytes(t.d.data(), t.d.size() * sizeof(double))}});
}

void Container::put_i64(const std::string& name, const std::vector<int64_t>& v) {
    reject_duplicate(name);
    entries_.push_back(
        {name, {"i64", static_cast<int64_t>(v.size()), 1, to_bytes(v.data(), v.size() * sizeof(int64_t))}});
}

void Container::put_u8(const std::string& name, const std::vector<uint8_t>& v) {
    reject_duplicate(name);
    entries_.push_back({name, {"u8", static_cast<int64_t>(v.size()), 1, to_bytes(v.data(), v.size())}});
}

void Container::reject_duplicate(const std::string& name) const {
    if (has(name)) throw ConfigError("container already holds an array named '" + name + "'");
}

bool Container::has(const std::string& name) const {
    for (const auto& [n, e] : entries_)
        if (n == name) return true;
    return false;
}

const Container::Entry& Container::find(const std::string& name, const char* dtype) const {
    for (const auto& [n, e] : entries_)
        if (n == name) {
            if (e.dtype != dtype)
                throw ConfigError("container array '" + name + "' has dtype " + e.dtype + ", expected " + dtype);
            return e;
        }
    throw ConfigError("container array '" + name + "' not found");
}

Tensor Container::f64(const std::string& name) const {
    const Entry& e = find(name, "f64");
    Tensor t(e.rows, e.cols);
    std::memcpy(t.d.data(), e.bytes.data(), e.bytes.size());
    return t;
}

std::vector<int64_t> Container::i64(const std::string& name) const {
    const Entry& e = find(name, "i64");
    std::vector<int64_t> v(static_cast<size_t>(e.rows));
    std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
    return v;
}

std::vector<uint8_t> Container::u8(const std::string& name) const {
    const Entry& e = find(name, "u8");
    std::vector<uint8_t> v(e.bytes.begin(), e.bytes.end());
    return v;
}

std::vector<std::string> Container::names() const {
    std::vector<std::string> out;
    for (const auto& [n, e] : entries_) out.push_back(n);
    return out;
}

void Container::save(const std::string& path) const {
    nlohmann::json doc;
    doc["format_version"] = 1;
    doc["meta"] = meta;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [n, e] : entries_)
        arr.push_back({{"name", n}, {"dtype", e.dtype}, {"rows", e.rows}, {"cols", e.cols}});
    doc["arrays"] = arr;
    const std::string js = doc.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    f.write(kMagic, sizeof(kMagic));
    const uint64_t len = js.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(js.data(), static_cast<std::streamsize>(js.size()));
    for (const auto& [n, e] : entries_)
        f.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    if (!f) throw ConfigError("write to '" + path + "' failed");
}

Container Container::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open '" + path + "'");
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ConfigError("'" + path + "' is not a recognized container file");
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string js(len, '\0');
    f.read(js.data(), static_cast<std::streamsize>(len));
    if (!f) throw ConfigError("'" + path + "': truncated metadata");

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("'" + path + "': bad metadata: " + e.what());
    }
    if (!doc.contains("format_version") || doc["format_version"].get<int>() != 1)
        throw ConfigError("'" + path + "': unsupported container version");

    Container c;
    c.meta = doc.value("meta", nlohmann::json::object());
    for (const auto& a : doc["arrays"]) {
        Entry e;
        e.dtype = a.at("dtype").get<std::string>();
        e.rows = a.at("rows").get<int64_t>();
        e.cols = a.at("cols").get<int64_t>();
        size_t unit;
        if (e.dtype == "f64")
            unit = sizeof(double);
        else if (e.dtype == "i64")
            unit = sizeof(int64_t);
        else if (e.dtype == "u8")
            unit = 1;
        else
            throw ConfigError("'" + path + "': unknown dtype " + e.dtype);
        e.bytes.resize(static_cast<size_t>(e.rows) * static_cast<size_t>(e.cols) * unit);
        f.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
        if (!f) throw ConfigError("'" + path + "': truncated array payload");
        c.entries_.push_back({a.at("name").get<std::string>(), std::move(e)});
    }
    return c;
}

}  // namespace bevmt
