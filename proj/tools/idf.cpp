// idf: train integer discrete flows and use them for lossless image
// compression. Verbs: train, compress, decompress, eval, sample, progressive.
//
// Exit codes: 0 ok, 2 usage, 3 data error, 4 corruption/hash mismatch.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "idf/codec.hpp"
#include "idf/image.hpp"
#include "idf/model.hpp"
#include "idf/toy.hpp"
#include "idf/train.hpp"

using json = nlohmann::json;

namespace {

// ---- config plumbing --------------------------------------------------------

json model_to_json(const idf::ModelConfig& m) {
    return json{{"channels", m.channels},
                {"levels", m.levels},
                {"flows_per_level", m.flows_per_level},
                {"net_depth", m.net_depth},
                {"net_growth", m.net_growth},
                {"mixture_k", m.mixture_k},
                {"lower_triangular", m.lower_triangular},
                {"pmf_precision", m.pmf_precision},
                {"seed", m.seed}};
}

json train_to_json(const idf::TrainConfig& t) {
    return json{{"batch_size", t.batch_size}, {"epochs", t.epochs},
                {"lr_base", t.lr_base},       {"lr_decay", t.lr_decay},
                {"seed", t.seed},             {"patch", t.patch},
                {"val_fraction", t.val_fraction}, {"clip_norm", t.clip_norm},
                {"beta1", t.beta1},           {"beta2", t.beta2},
                {"eps", t.eps}};
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void model_from_json(const json& j, idf::ModelConfig& m) {
    maybe(j, "channels", m.channels);
    maybe(j, "levels", m.levels);
    maybe(j, "flows_per_level", m.flows_per_level);
    maybe(j, "net_depth", m.net_depth);
    maybe(j, "net_growth", m.net_growth);
    maybe(j, "mixture_k", m.mixture_k);
    maybe(j, "lower_triangular", m.lower_triangular);
    maybe(j, "pmf_precision", m.pmf_precision);
    maybe(j, "seed", m.seed);
}

void train_from_json(const json& j, idf::TrainConfig& t) {
    maybe(j, "batch_size", t.batch_size);
    maybe(j, "epochs", t.epochs);
    maybe(j, "lr_base", t.lr_base);
    maybe(j, "lr_decay", t.lr_decay);
    maybe(j, "seed", t.seed);
    maybe(j, "patch", t.patch);
    maybe(j, "val_fraction", t.val_fraction);
    maybe(j, "clip_norm", t.clip_norm);
    maybe(j, "beta1", t.beta1);
    maybe(j, "beta2", t.beta2);
    maybe(j, "eps", t.eps);
}

idf::ToyConfig toy_from_json(const json& j) {
    idf::ToyConfig t;
    maybe(j, "count", t.count);
    maybe(j, "channels", t.channels);
    maybe(j, "height", t.height);
    maybe(j, "width", t.width);
    maybe(j, "seed", t.seed);
    maybe(j, "checker_delta", t.checker_delta);
    if (j.contains("components")) {
        t.components.clear();
        for (const json& c : j.at("components")) {
            idf::ToyComponent tc;
            maybe(c, "weight", tc.weight);
            maybe(c, "mu", tc.mu);
            maybe(c, "s", tc.s);
            t.components.push_back(tc);
        }
    }
    return t;
}

// Dataset spec: a PGM/PPM path, directory or glob, or "toy:{...json...}".
std::vector<idf::IntTensor> load_dataset(const std::string& spec) {
    if (spec.rfind("toy:", 0) == 0) {
        json j;
        try {
            j = json::parse(spec.substr(4));
        } catch (const json::exception& e) {
            throw idf::data_error(std::string("bad toy spec: ") + e.what());
        }
        return idf::toy::generate(toy_from_json(j));
    }
    std::vector<idf::IntTensor> out;
    for (idf::ImageRecord& r : idf::ingest(spec)) out.push_back(std::move(r.pixels));
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw idf::data_error("cannot write: " + path);
    f << text;
}

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw idf::data_error("cannot read config: " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw idf::data_error(std::string("bad config json: ") + e.what());
    }
}

json stats_json(const idf::CodecStats& s) {
    return json{{"bpd", s.bpd},
                {"compression_rate", s.rate()},
                {"model_bpd", s.model_bpd},
                {"gap_bpd", s.bpd - s.model_bpd},
                {"total_bits", s.total_bits},
                {"header_bits", s.header_bits},
                {"escapes", s.escapes},
                {"images", s.images}};
}

void emit_stats(const json& j, const std::string& path) {
    const std::string text = j.dump(2) + "\n";
    if (path.empty())
        std::cout << text;
    else
        write_text(path, text);
}

// ---- verbs ------------------------------------------------------------------

struct CommonOpts {
    std::string config_path;
    idf::ModelConfig model;
    idf::TrainConfig train;

    void load_config() {
        if (config_path.empty()) return;
        const json j = load_json_file(config_path);
        if (j.contains("model")) model_from_json(j.at("model"), model);
        if (j.contains("train")) train_from_json(j.at("train"), train);
    }
};

int cmd_train(const CommonOpts& base, const std::string& dataset, const std::string& out,
              const std::string& metrics_path) {
    std::vector<idf::IntTensor> images = load_dataset(dataset);
    idf::ModelConfig mc = base.model;
    mc.channels = images.front().shape().c;
    idf::IDFModel model(mc);
    std::vector<idf::EpochMetrics> metrics = idf::train(model, images, base.train);
    model.save(out);

    json snapshot{{"model", model_to_json(mc)},
                  {"train", train_to_json(base.train)},
                  {"dataset", dataset},
                  {"optimizer", "adamax"}};
    write_text(out + ".config.json", snapshot.dump(2) + "\n");

    std::ostringstream lines;
    for (const idf::EpochMetrics& m : metrics)
        lines << json{{"epoch", m.epoch},
                      {"train_bpd", m.train_bpd},
                      {"val_bpd", m.val_bpd},
                      {"lr", m.lr}}
                     .dump()
              << "\n";
    if (!metrics_path.empty()) write_text(metrics_path, lines.str());

    if (!metrics.empty())
        std::cout << "trained " << base.train.epochs << " epochs, final val bpd "
                  << metrics.back().val_bpd << "\n";
    std::cout << "model written to " << out << "\n";
    return 0;
}

int cmd_compress(const std::string& model_path, const std::string& input,
                 const std::string& output, const std::string& stats_path) {
    idf::IDFModel model = idf::IDFModel::load(model_path);
    idf::ImageRecord rec = idf::read_pnm(input);
    idf::CompressResult res = idf::compress_with_stats(rec.pixels, model);
    idf::write_container(output, res.image);
    idf::CodecStats s;
    s.bpd = res.stats.coded_bpd;
    s.model_bpd = res.stats.model_bpd;
    s.total_bits = res.stats.total_bits;
    s.header_bits = res.stats.header_bits;
    s.escapes = res.stats.escaped ? 1 : 0;
    s.images = 1;
    emit_stats(stats_json(s), stats_path);
    return 0;
}

int cmd_decompress(const std::string& model_path, const std::string& input,
                   const std::string& output) {
    idf::IDFModel model = idf::IDFModel::load(model_path);
    idf::CompressedImage ci = idf::read_container(input);
    idf::write_pnm(output, idf::decompress(ci, model));
    return 0;
}

int cmd_eval(const CommonOpts& base, const std::string& model_path, const std::string& dataset,
             const std::string& stats_path, const std::string& sweep, int parallelism) {
    std::vector<idf::IntTensor> images = load_dataset(dataset);
    if (sweep.empty()) {
        idf::IDFModel model = idf::IDFModel::load(model_path);
        auto [compressed, stats] = idf::compress_batch(images, model, parallelism);
        std::cout << "analytic " << idf::bpd_with_rate(stats.model_bpd) << ", coded "
                  << idf::bpd_with_rate(stats.bpd) << ", gap "
                  << (stats.bpd - stats.model_bpd) << " bpd\n";
        emit_stats(stats_json(stats), stats_path);
        return 0;
    }
    // Depth sweep: train one model per requested D on this dataset and report
    // analytic vs coded bpd for each.
    std::vector<int> depths;
    std::stringstream ss(sweep);
    for (std::string tok; std::getline(ss, tok, ',');) depths.push_back(std::stoi(tok));
    if (depths.empty()) throw idf::data_error("sweep: no depths given");
    std::cout << "D\tanalytic_bpd\tcoded_bpd\n";
    json rows = json::array();
    for (int d : depths) {
        idf::ModelConfig mc = base.model;
        mc.channels = images.front().shape().c;
        mc.flows_per_level = d;
        idf::IDFModel model(mc);
        idf::train(model, images, base.train);
        auto [compressed, stats] = idf::compress_batch(images, model, 1);
        std::printf("%d\t%.4f\t%.4f\n", d, stats.model_bpd, stats.bpd);
        rows.push_back(json{{"flows_per_level", d},
                            {"analytic_bpd", stats.model_bpd},
                            {"coded_bpd", stats.bpd}});
    }
    if (!stats_path.empty()) write_text(stats_path, rows.dump(2) + "\n");
    return 0;
}

int cmd_sample(const std::string& model_path, int count, int height, int width,
               std::uint64_t seed, const std::string& prefix) {
    idf::IDFModel model = idf::IDFModel::load(model_path);
    idf::Rng rng(seed);
    const std::vector<idf::IntTensor> samples = model.sample(count, height, width, rng);
    const char* ext = model.config().channels == 3 ? ".ppm" : ".pgm";
    for (int i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%04d%s", i, ext);
        idf::write_pnm(prefix + name, samples[static_cast<std::size_t>(i)]);
    }
    std::cout << "wrote " << count << " samples to " << prefix << "*" << ext << "\n";
    return 0;
}

int cmd_progressive(const std::string& model_path, const std::string& input,
                    const std::string& fractions_csv, std::uint64_t seed,
                    const std::string& prefix) {
    idf::IDFModel model = idf::IDFModel::load(model_path);
    idf::CompressedImage ci = idf::read_container(input);
    std::vector<double> fractions;
    std::stringstream ss(fractions_csv);
    for (std::string tok; std::getline(ss, tok, ',');) fractions.push_back(std::stod(tok));
    if (fractions.empty()) throw idf::data_error("progressive: no fractions given");
    const char* ext = model.config().channels == 3 ? ".ppm" : ".pgm";
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        const int k = idf::prefix_for_fraction(ci, fractions[i]);
        idf::Rng rng(seed);  // same seed per fraction: renders differ only by prefix
        idf::IntTensor img = idf::progressive_decode(ci, model, k, rng);
        char name[48];
        std::snprintf(name, sizeof(name), "%03d%s",
                      static_cast<int>(std::lround(fractions[i] * 100.0)), ext);
        idf::write_pnm(prefix + name, img);
        std::cout << "fraction " << fractions[i] << " -> " << k << " of "
                  << model.config().levels << " levels -> " << prefix + name << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"integer discrete flow lossless compression toolkit"};
    app.require_subcommand(1);

    CommonOpts common;

    // train
    auto* train = app.add_subcommand("train", "train a model on a dataset");
    std::string dataset, model_out = "model.idf", metrics_path;
    train->add_option("--dataset", dataset, "PGM/PPM path, glob, or toy:<json>")->required();
    train->add_option("--out", model_out, "output model file");
    train->add_option("--metrics", metrics_path, "write per-epoch JSONL metrics here");
    train->add_option("--config", common.config_path, "JSON config file");
    train->add_option("--levels", common.model.levels);
    train->add_option("--flows-per-level", common.model.flows_per_level);
    train->add_option("--net-depth", common.model.net_depth);
    train->add_option("--net-growth", common.model.net_growth);
    train->add_option("--mixture-k", common.model.mixture_k);
    train->add_flag("--lower-triangular", common.model.lower_triangular);
    train->add_option("--pmf-precision", common.model.pmf_precision);
    train->add_option("--model-seed", common.model.seed);
    train->add_option("--batch-size", common.train.batch_size);
    train->add_option("--epochs", common.train.epochs);
    train->add_option("--lr-base", common.train.lr_base);
    train->add_option("--lr-decay", common.train.lr_decay);
    train->add_option("--seed", common.train.seed);
    train->add_option("--patch", common.train.patch);
    train->add_option("--val-fraction", common.train.val_fraction);

    // compress / decompress
    auto* comp = app.add_subcommand("compress", "compress one image losslessly");
    std::string model_path, input, output, stats_path;
    comp->add_option("--model", model_path)->required();
    comp->add_option("--input", input)->required();
    comp->add_option("--output", output)->required();
    comp->add_option("--stats", stats_path, "stats JSON path (default: stdout)");

    auto* decomp = app.add_subcommand("decompress", "reconstruct the original image");
    decomp->add_option("--model", model_path)->required();
    decomp->add_option("--input", input)->required();
    decomp->add_option("--output", output)->required();

    // eval
    auto* eval = app.add_subcommand("eval", "analytic vs coded bpd on a dataset");
    std::string sweep;
    int parallelism = 1;
    eval->add_option("--model", model_path);
    eval->add_option("--parallelism", parallelism, "worker threads (bytes are identical)");
    eval->add_option("--dataset", dataset)->required();
    eval->add_option("--stats", stats_path, "stats JSON path (default: stdout)");
    eval->add_option("--sweep-depths", sweep,
                     "comma-separated flows-per-level values; trains a model per value");
    eval->add_option("--config", common.config_path, "JSON config file (sweep training)");
    eval->add_option("--epochs", common.train.epochs);
    eval->add_option("--patch", common.train.patch);
    eval->add_option("--batch-size", common.train.batch_size);
    eval->add_option("--lr-base", common.train.lr_base);
    eval->add_option("--net-depth", common.model.net_depth);
    eval->add_option("--net-growth", common.model.net_growth);
    eval->add_option("--levels", common.model.levels);
    eval->add_option("--mixture-k", common.model.mixture_k);
    eval->add_option("--seed", common.train.seed);

    // sample
    auto* sample = app.add_subcommand("sample", "draw images from the model");
    int count = 1, height = 16, width = 16;
    std::uint64_t seed = 1;
    std::string prefix = "sample_";
    sample->add_option("--model", model_path)->required();
    sample->add_option("--count", count);
    sample->add_option("--height", height);
    sample->add_option("--width", width);
    sample->add_option("--seed", seed);
    sample->add_option("--out-prefix", prefix);

    // progressive
    auto* prog = app.add_subcommand("progressive", "partial-stream renders");
    std::string fractions = "0.15,0.3,0.6,1.0";
    prog->add_option("--model", model_path)->required();
    prog->add_option("--input", input)->required();
    prog->add_option("--fractions", fractions, "comma-separated stream fractions");
    prog->add_option("--seed", seed);
    prog->add_option("--out-prefix", prefix);

    try {
        app.parse(argc, argv);
        common.load_config();
        if (train->parsed()) return cmd_train(common, dataset, model_out, metrics_path);
        if (comp->parsed()) return cmd_compress(model_path, input, output, stats_path);
        if (decomp->parsed()) return cmd_decompress(model_path, input, output);
        if (eval->parsed())
            return cmd_eval(common, model_path, dataset, stats_path, sweep, parallelism);
        if (sample->parsed()) return cmd_sample(model_path, count, height, width, seed, prefix);
        if (prog->parsed()) return cmd_progressive(model_path, input, fractions, seed, prefix);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const idf::corruption_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const idf::shape_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const idf::data_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
