#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string kCli = IDF_CLI_PATH;

struct TempDir {
    fs::path dir;
    TempDir() {
        dir = fs::temp_directory_path() / ("idf_cli_test_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args) {
    const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

int run_capture(const std::string& args, const std::string& out_file) {
    const std::string cmd = kCli + " " + args + " >" + out_file + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<char>((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
}

std::string toy_spec(int count, int seed, int side = 8) {
    std::ostringstream ss;
    ss << "'toy:{\"count\":" << count << ",\"seed\":" << seed << ",\"height\":" << side
       << ",\"width\":" << side
       << ",\"checker_delta\":10,\"components\":[{\"weight\":1.0,\"mu\":128,\"s\":3}]}'";
    return ss.str();
}

std::string tiny_train_flags(int epochs = 3, int model_seed = 9) {
    return " --levels 2 --flows-per-level 1 --net-depth 1 --net-growth 8 --mixture-k 2"
           " --patch 8 --epochs " + std::to_string(epochs) +
           " --batch-size 8 --lr-base 0.005 --seed 9 --model-seed " +
           std::to_string(model_seed);
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run("definitely-not-a-verb") == 2);
    CHECK(run("compress") == 2);  // missing required options
    CHECK(run("") == 2);
}

TEST_CASE("train, compress, decompress: lossless through the file formats") {
    TempDir tmp;
    const std::string model = tmp.path("m.idf");
    CHECK(run("train --dataset " + toy_spec(80, 1) + " --out " + model + " --metrics " +
              tmp.path("metrics.jsonl") + tiny_train_flags()) == 0);
    CHECK(fs::exists(model));
    CHECK(fs::exists(model + ".config.json"));

    // Metrics: one JSON record per epoch.
    {
        std::ifstream mf(tmp.path("metrics.jsonl"));
        int lines = 0;
        std::string line;
        while (std::getline(mf, line)) {
            const json rec = json::parse(line);
            CHECK(rec.contains("epoch"));
            CHECK(rec.contains("train_bpd"));
            CHECK(rec.contains("val_bpd"));
            CHECK(rec.contains("lr"));
            ++lines;
        }
        CHECK(lines == 3);
    }

    // Config snapshot records the optimizer and its parameters.
    {
        const json snap = json::parse(std::ifstream(model + ".config.json"));
        CHECK(snap.at("optimizer") == "adamax");
        CHECK(snap.at("train").at("beta1") == 0.9);
        CHECK(snap.at("train").at("beta2") == 0.999);
    }

    // Round trip a PGM through compress/decompress.
    const std::string img = tmp.path("in.pgm");
    {
        std::ofstream f(img, std::ios::binary);
        f << "P5\n8 8\n255\n";
        for (int i = 0; i < 64; ++i) f.put(static_cast<char>((123 + 7 * i) % 256));
    }
    CHECK(run("compress --model " + model + " --input " + img + " --output " +
              tmp.path("c.idfc") + " --stats " + tmp.path("s.json")) == 0);
    CHECK(run("decompress --model " + model + " --input " + tmp.path("c.idfc") +
              " --output " + tmp.path("out.pgm")) == 0);
    CHECK(slurp(img) == slurp(tmp.path("out.pgm")));

    // Stats schema is stable (golden key set).
    const json stats = json::parse(std::ifstream(tmp.path("s.json")));
    std::vector<std::string> keys;
    for (auto it = stats.begin(); it != stats.end(); ++it) keys.push_back(it.key());
    const std::vector<std::string> golden = {"bpd",         "compression_rate", "escapes",
                                             "gap_bpd",     "header_bits",      "images",
                                             "model_bpd",   "total_bits"};
    CHECK(keys == golden);
    CHECK(stats.at("compression_rate").get<double>() ==
          doctest::Approx(8.0 / stats.at("bpd").get<double>()));
}

TEST_CASE("every command is deterministic given config, seed, and inputs") {
    TempDir tmp;
    const std::string m1 = tmp.path("m1.idf"), m2 = tmp.path("m2.idf");
    const std::string base = " --dataset " + toy_spec(80, 2) + tiny_train_flags();
    CHECK(run("train --out " + m1 + base) == 0);
    CHECK(run("train --out " + m2 + base) == 0);
    CHECK(slurp(m1) == slurp(m2));  // identical bytes -> identical hash

    // Same-seed sampling and progressive rendering repeat byte-for-byte.
    CHECK(run("sample --model " + m1 + " --count 2 --height 8 --width 8 --seed 5 --out-prefix " +
              tmp.path("a_")) == 0);
    CHECK(run("sample --model " + m1 + " --count 2 --height 8 --width 8 --seed 5 --out-prefix " +
              tmp.path("b_")) == 0);
    CHECK(slurp(tmp.path("a_0000.pgm")) == slurp(tmp.path("b_0000.pgm")));
    CHECK(slurp(tmp.path("a_0001.pgm")) == slurp(tmp.path("b_0001.pgm")));

    const std::string img = tmp.path("in.pgm");
    {
        std::ofstream f(img, std::ios::binary);
        f << "P5\n8 8\n255\n";
        for (int i = 0; i < 64; ++i) f.put(static_cast<char>(120 + (i % 16)));
    }
    CHECK(run("compress --model " + m1 + " --input " + img + " --output " + tmp.path("c1") +
              " --stats " + tmp.path("s1.json")) == 0);
    CHECK(run("compress --model " + m1 + " --input " + img + " --output " + tmp.path("c2") +
              " --stats " + tmp.path("s2.json")) == 0);
    CHECK(slurp(tmp.path("c1")) == slurp(tmp.path("c2")));
    CHECK(slurp(tmp.path("s1.json")) == slurp(tmp.path("s2.json")));

    CHECK(run("progressive --model " + m1 + " --input " + tmp.path("c1") +
              " --fractions 0.5,1.0 --seed 3 --out-prefix " + tmp.path("p1_")) == 0);
    CHECK(run("progressive --model " + m1 + " --input " + tmp.path("c1") +
              " --fractions 0.5,1.0 --seed 3 --out-prefix " + tmp.path("p2_")) == 0);
    CHECK(slurp(tmp.path("p1_050.pgm")) == slurp(tmp.path("p2_050.pgm")));
    CHECK(slurp(tmp.path("p1_100.pgm")) == slurp(tmp.path("p2_100.pgm")));

    // Full-fraction progressive equals decompress output exactly.
    CHECK(run("decompress --model " + m1 + " --input " + tmp.path("c1") + " --output " +
              tmp.path("full.pgm")) == 0);
    CHECK(slurp(tmp.path("p1_100.pgm")) == slurp(tmp.path("full.pgm")));
}

TEST_CASE("ingest: formats, globs, and failure modes") {
    TempDir tmp;
    // P5 2x2 with the documented byte order.
    {
        std::ofstream f(tmp.path("a.pgm"), std::ios::binary);
        f << "P5\n# comment\n2 2\n255\n";
        f.put(static_cast<char>(0));
        f.put(static_cast<char>(64));
        f.put(static_cast<char>(128));
        f.put(static_cast<char>(255));
    }
    const std::string model = tmp.path("m.idf");
    // 2x2 images cannot feed a 2-level model; but ingest itself is what we
    // exercise via a failing-but-parsing train (patch too large -> data error).
    CHECK(run("train --dataset '" + tmp.path("*.pgm") + "' --out " + model +
              tiny_train_flags()) == 3);

    // Empty glob is a data error.
    CHECK(run("train --dataset '" + tmp.path("nope*.pgm") + "' --out " + model +
              tiny_train_flags()) == 3);

    // 16-bit maxval is rejected.
    {
        std::ofstream f(tmp.path("wide.pgm"), std::ios::binary);
        f << "P5\n2 2\n65535\n";
        for (int i = 0; i < 8; ++i) f.put(static_cast<char>(i));
    }
    CHECK(run("compress --model " + model + " --input " + tmp.path("wide.pgm") +
              " --output /dev/null") == 3);

    // Bad toy spec is a data error.
    CHECK(run("train --dataset 'toy:{broken' --out " + model + tiny_train_flags()) == 3);
}

TEST_CASE("corruption and model mismatch map to exit code 4") {
    TempDir tmp;
    const std::string m1 = tmp.path("m1.idf"), m2 = tmp.path("m2.idf");
    CHECK(run("train --dataset " + toy_spec(60, 3) + " --out " + m1 + tiny_train_flags()) == 0);
    CHECK(run("train --dataset " + toy_spec(60, 4) + " --out " + m2 +
              tiny_train_flags(3, 77)) == 0);

    const std::string img = tmp.path("in.pgm");
    {
        std::ofstream f(img, std::ios::binary);
        f << "P5\n8 8\n255\n";
        for (int i = 0; i < 64; ++i) f.put(static_cast<char>(128));
    }
    CHECK(run("compress --model " + m1 + " --input " + img + " --output " + tmp.path("c") +
              " --stats /dev/null") == 0);

    // Wrong model: hash mismatch.
    CHECK(run("decompress --model " + m2 + " --input " + tmp.path("c") + " --output /dev/null") ==
          4);

    // Truncated container.
    {
        std::vector<char> bytes = slurp(tmp.path("c"));
        std::ofstream f(tmp.path("cut"), std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 1));
    }
    CHECK(run("decompress --model " + m1 + " --input " + tmp.path("cut") +
              " --output /dev/null") == 4);

    // Corrupt model file.
    {
        std::vector<char> bytes = slurp(m1);
        bytes[bytes.size() / 3] ^= 0x01;
        std::ofstream f(tmp.path("bad.idf"), std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK(run("decompress --model " + tmp.path("bad.idf") + " --input " + tmp.path("c") +
              " --output /dev/null") == 4);
}

TEST_CASE("eval reports the analytic/coded gap and improves with training") {
    TempDir tmp;
    const std::string fresh = tmp.path("fresh.idf"), trained = tmp.path("trained.idf");
    const std::string data = toy_spec(80, 5);
    CHECK(run("train --dataset " + data + " --out " + fresh + tiny_train_flags(0)) == 0);
    CHECK(run("train --dataset " + data + " --out " + trained + tiny_train_flags(6)) == 0);

    CHECK(run("eval --model " + fresh + " --dataset " + data + " --stats " +
              tmp.path("before.json")) == 0);
    CHECK(run("eval --model " + trained + " --dataset " + data + " --stats " +
              tmp.path("after.json")) == 0);
    // Double-run determinism of eval outputs, at any parallelism.
    CHECK(run("eval --model " + fresh + " --dataset " + data + " --parallelism 4 --stats " +
              tmp.path("before2.json")) == 0);
    CHECK(slurp(tmp.path("before.json")) == slurp(tmp.path("before2.json")));
    const json before = json::parse(std::ifstream(tmp.path("before.json")));
    const json after = json::parse(std::ifstream(tmp.path("after.json")));
    CHECK(after.at("model_bpd").get<double>() <= before.at("model_bpd").get<double>());

    // Gap within framing overhead on the trained model.
    const double gap = after.at("gap_bpd").get<double>();
    const double header_per_dim =
        after.at("header_bits").get<double>() / (80.0 * 64.0);
    CHECK(gap >= 0.0);
    CHECK(gap <= 0.05 + header_per_dim);
}

TEST_CASE("depth sweep emits one row per requested depth") {
    TempDir tmp;
    const std::string out = tmp.path("sweep.txt");
    CHECK(run_capture("eval --dataset " + toy_spec(40, 6) +
                          " --sweep-depths 1,2 --epochs 1 --levels 2 --net-depth 1"
                          " --net-growth 8 --patch 8 --stats " + tmp.path("sweep.json"),
                      out) == 0);
    std::ifstream f(out);
    std::string line;
    std::getline(f, line);
    CHECK(line == "D\tanalytic_bpd\tcoded_bpd");
    int rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
    const json sweep = json::parse(std::ifstream(tmp.path("sweep.json")));
    CHECK(sweep.size() == 2);
    CHECK(sweep[0].at("flows_per_level") == 1);
    CHECK(sweep[1].at("flows_per_level") == 2);
}
