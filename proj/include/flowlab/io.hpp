#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flowlab/tensor.hpp"

namespace flowlab {

// ---- tensor files ----------------------------------------------------------
// Binary format: magic "RFT1", u32 rank, rank x u64 dims, f32 little-endian
// row-major payload. Single dtype; all values must be finite.

void write_tensor(const std::string& path, const std::vector<uint64_t>& dims, const std::vector<float>& values);
Tensor read_tensor(const std::string& path);

// ---- CSV / JSONL -----------------------------------------------------------

using Cell = std::variant<std::string, double, int64_t>;
using CsvRow = std::vector<std::pair<std::string, Cell>>;

// Columns come from the first row; every row must carry the same columns in
// the same order. Numbers are printed with 6 significant digits, LF endings.
void emit_csv(const std::vector<CsvRow>& rows, const std::string& path);
void emit_csv(const std::string& path, const std::vector<std::string>& columns,
              const std::vector<std::vector<Cell>>& rows);

// One record per line (records are serialized JSON objects).
void emit_jsonl(const std::vector<std::string>& json_records, const std::string& path);

std::string format_sig6(double v);

// ---- checkpoints -----------------------------------------------------------
// Versioned binary container; round-trip is bit-exact. Sections are named f32
// arrays (parameters, EMA shadows, optimizer moments, standardization stats).

struct Checkpoint {
    uint32_t version = 1;
    std::string config_json;  // RunConfig snapshot
    uint64_t step = 0;
    std::vector<std::pair<std::string, std::vector<float>>> sections;

    const std::vector<float>& section(const std::string& name) const;
    bool has_section(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace flowlab
