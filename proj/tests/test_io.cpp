#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flowlab/io.hpp"
#include "flowlab/rng.hpp"

using namespace flowlab;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("flowlab_io_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("tensor round-trip identity") {
    const auto path = tmp_path("zeros.rft");
    write_tensor(path, {2, 3}, std::vector<float>(6, 0.0f));
    const Tensor t = read_tensor(path);
    CHECK(t.dims == std::vector<uint64_t>{2, 3});
    CHECK(t.values == std::vector<float>(6, 0.0f));

    write_tensor(path, {1}, {3.5f});
    const Tensor s = read_tensor(path);
    CHECK(s.dims == std::vector<uint64_t>{1});
    CHECK(s.values[0] == 3.5f);
}

TEST_CASE("tensor round-trip is bit-exact for random shapes") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const int rank = 1 + int(rng.uniform_int(3));
        std::vector<uint64_t> dims(rank);
        size_t n = 1;
        for (auto& d : dims) {
            d = 1 + rng.uniform_int(6);
            n *= d;
        }
        std::vector<float> vals(n);
        for (auto& v : vals) v = float(rng.normal() * 100.0);
        const auto path = tmp_path("rand.rft");
        write_tensor(path, dims, vals);
        const Tensor t = read_tensor(path);
        CHECK(t.dims == dims);
        CHECK(t.values == vals);
    }
}

TEST_CASE("tensor error paths") {
    const auto path = tmp_path("bad.rft");
    CHECK_THROWS(write_tensor(path, {2, 2}, {1.0f}));                       // dim/payload mismatch
    CHECK_THROWS(write_tensor(path, {}, {}));                               // empty dims
    CHECK_THROWS(write_tensor(path, {1}, {std::nanf("")}));                 // non-finite

    write_tensor(path, {4}, {1, 2, 3, 4});
    auto data = slurp(path);
    std::ofstream(path, std::ios::binary) << data.substr(0, data.size() - 5);
    CHECK_THROWS_WITH_AS(read_tensor(path), "read_tensor: payload short", std::runtime_error);

    std::ofstream(path, std::ios::binary) << "XXXX";
    CHECK_THROWS(read_tensor(path));  // malformed header
}

TEST_CASE("csv emission") {
    const auto path = tmp_path("table.csv");
    emit_csv({CsvRow{{"k", int64_t(2)}, {"fid_proxy", 0.5}}}, path);
    CHECK(slurp(path) == "k,fid_proxy\n2,0.5\n");

    emit_csv(path, {"a", "b"}, {});
    CHECK(slurp(path) == "a,b\n");  // empty rows: header only

    CHECK_THROWS_WITH_AS(emit_csv({CsvRow{{"a", 1.0}}, CsvRow{{"b", 2.0}}}, path), "emit_csv: non-uniform columns",
                         std::runtime_error);
}

TEST_CASE("csv uses 6 significant digits") {
    CHECK(format_sig6(0.5) == "0.5");
    CHECK(format_sig6(1.23456789) == "1.23457");
    CHECK(format_sig6(1234567.0) == "1.23457e+06");
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Checkpoint ck;
    ck.config_json = "{\"seed\": 42}";
    ck.step = 1234;
    Rng rng(3);
    std::vector<float> params(1000);
    for (auto& p : params) p = float(rng.normal());
    ck.sections.emplace_back("params", params);
    ck.sections.emplace_back("empty", std::vector<float>{});

    const auto path = tmp_path("ck.rfcp");
    save_checkpoint(ck, path);
    const Checkpoint rd = load_checkpoint(path);
    CHECK(rd.version == ck.version);
    CHECK(rd.config_json == ck.config_json);
    CHECK(rd.step == ck.step);
    CHECK(rd.section("params") == params);
    CHECK(rd.has_section("empty"));
    CHECK_THROWS(rd.section("missing"));
}

TEST_CASE("checkpoint version mismatch is a hard error") {
    Checkpoint ck;
    ck.version = 99;
    const auto path = tmp_path("badver.rfcp");
    save_checkpoint(ck, path);
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}

}  // TEST_SUITE
