#include "flowlab/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace flowlab {

namespace {

constexpr char kTensorMagic[4] = {'R', 'F', 'T', '1'};
constexpr char kCheckpointMagic[4] = {'R', 'F', 'C', 'P'};
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error(std::string("truncated read: ") + what);
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const char* what) {
    const auto n = read_pod<uint64_t>(is, what);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error(std::string("truncated read: ") + what);
    return s;
}

void write_f32_array(std::ostream& os, const std::vector<float>& v) {
    write_pod<uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::vector<float> read_f32_array(std::istream& is, const char* what) {
    const auto n = read_pod<uint64_t>(is, what);
    std::vector<float> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw std::runtime_error(std::string("truncated read: ") + what);
    return v;
}

}  // namespace

void write_tensor(const std::string& path, const std::vector<uint64_t>& dims, const std::vector<float>& values) {
    if (dims.empty()) throw std::runtime_error("write_tensor: dims empty");
    size_t n = 1;
    for (uint64_t d : dims) n *= static_cast<size_t>(d);
    if (n != values.size()) throw std::runtime_error("write_tensor: dim/payload mismatch");
    for (float v : values)
        if (!std::isfinite(v)) throw std::runtime_error("write_tensor: non-finite payload");

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_tensor: cannot open " + path);
    os.write(kTensorMagic, 4);
    write_pod<uint32_t>(os, static_cast<uint32_t>(dims.size()));
    for (uint64_t d : dims) write_pod<uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!os) throw std::runtime_error("write_tensor: write failed for " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_tensor: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) throw std::runtime_error("read_tensor: malformed header");
    const auto rank = read_pod<uint32_t>(is, "rank");
    if (rank == 0 || rank > 8) throw std::runtime_error("read_tensor: malformed header (rank)");
    Tensor t;
    t.dims.resize(rank);
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        t.dims[i] = read_pod<uint64_t>(is, "dims");
        n *= static_cast<size_t>(t.dims[i]);
    }
    if (n > (1ull << 33)) throw std::runtime_error("read_tensor: implausible element count");
    t.values.resize(n);
    is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<size_t>(is.gcount()) != n * sizeof(float)) throw std::runtime_error("read_tensor: payload short");
    for (float v : t.values)
        if (!std::isfinite(v)) throw std::runtime_error("read_tensor: non-finite payload");
    return t;
}

std::string format_sig6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

namespace {

std::string cell_to_string(const Cell& c) {
    if (std::holds_alternative<std::string>(c)) return std::get<std::string>(c);
    if (std::holds_alternative<int64_t>(c)) return std::to_string(std::get<int64_t>(c));
    return format_sig6(std::get<double>(c));
}

}  // namespace

void emit_csv(const std::string& path, const std::vector<std::string>& columns,
              const std::vector<std::vector<Cell>>& rows) {
    std::ofstream os(path, std::ios::binary);  // binary: LF endings everywhere
    if (!os) throw std::runtime_error("emit_csv: cannot open " + path);
    for (size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << "\n";
    for (const auto& row : rows) {
        if (row.size() != columns.size()) throw std::runtime_error("emit_csv: row width mismatch");
        for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << cell_to_string(row[i]);
        os << "\n";
    }
    if (!os) throw std::runtime_error("emit_csv: write failed for " + path);
}

void emit_csv(const std::vector<CsvRow>& rows, const std::string& path) {
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> table;
    for (const auto& row : rows) {
        if (columns.empty()) {
            for (const auto& [k, v] : row) columns.push_back(k);
        } else {
            if (row.size() != columns.size()) throw std::runtime_error("emit_csv: non-uniform columns");
            for (size_t i = 0; i < row.size(); ++i)
                if (row[i].first != columns[i]) throw std::runtime_error("emit_csv: non-uniform columns");
        }
        std::vector<Cell> cells;
        for (const auto& [k, v] : row) cells.push_back(v);
        table.push_back(std::move(cells));
    }
    if (columns.empty()) throw std::runtime_error("emit_csv: no rows (column set unknown)");
    emit_csv(path, columns, table);
}

void emit_jsonl(const std::vector<std::string>& json_records, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("emit_jsonl: cannot open " + path);
    for (const auto& r : json_records) os << r << "\n";
    if (!os) throw std::runtime_error("emit_jsonl: write failed for " + path);
}

const std::vector<float>& Checkpoint::section(const std::string& name) const {
    for (const auto& [k, v] : sections)
        if (k == name) return v;
    throw std::runtime_error("checkpoint: missing section " + name);
}

bool Checkpoint::has_section(const std::string& name) const {
    for (const auto& [k, v] : sections)
        if (k == name) return true;
    return false;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, 4);
    write_pod<uint32_t>(os, ck.version);
    write_string(os, ck.config_json);
    write_pod<uint64_t>(os, ck.step);
    write_pod<uint64_t>(os, ck.sections.size());
    for (const auto& [name, data] : ck.sections) {
        write_string(os, name);
        write_f32_array(os, data);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("load_checkpoint: malformed header");
    Checkpoint ck;
    ck.version = read_pod<uint32_t>(is, "version");
    if (ck.version != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: version mismatch (got " + std::to_string(ck.version) +
                                 ", expected " + std::to_string(kCheckpointVersion) + ")");
    ck.config_json = read_string(is, "config");
    ck.step = read_pod<uint64_t>(is, "step");
    const auto n = read_pod<uint64_t>(is, "section count");
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = read_string(is, "section name");
        ck.sections.emplace_back(std::move(name), read_f32_array(is, "section data"));
    }
    return ck;
}

}  // namespace flowlab
