#include <doctest.h>

#include <vector>

#include "idf/codec.hpp"
#include "idf/toy.hpp"
#include "idf/train.hpp"

using namespace idf;

namespace {

ModelConfig tiny_config(int channels = 1, std::uint64_t seed = 1) {
    ModelConfig c;
    c.channels = channels;
    c.levels = 2;
    c.flows_per_level = 2;
    c.net_depth = 1;
    c.net_growth = 8;
    c.mixture_k = 3;
    c.seed = seed;
    return c;
}

IntTensor random_image(Shape s, Rng& rng, int lo = 0, int hi = 255) {
    IntTensor t(s);
    for (int i = 0; i < t.size(); ++i)
        t[i] = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    return t;
}

// A small model trained on the sharp toy texture; shared across cases.
struct TrainedFixture {
    ToyConfig toy;
    IDFModel model;
    std::vector<IntTensor> test_images;

    TrainedFixture() : model(tiny_config()) {
        toy.count = 400;
        toy.height = 16;
        toy.width = 16;
        toy.seed = 31;
        toy.checker_delta = 10.0;
        toy.components = {{1.0, 128.0, 3.0}};
        const std::vector<IntTensor> images = toy::generate(toy);
        TrainConfig tc;
        tc.epochs = 12;
        tc.batch_size = 16;
        tc.patch = 16;
        tc.lr_base = 3e-3;
        tc.lr_decay = 0.9;
        tc.seed = 3;
        train(model, images, tc);

        ToyConfig tt = toy;
        tt.count = 40;
        tt.seed = 32;
        test_images = toy::generate(tt);
    }
};

TrainedFixture& fixture() {
    static TrainedFixture f;
    return f;
}

}  // namespace

TEST_CASE("lossless round trip on random, constant, and gradient images") {
    Rng rng(1);
    IDFModel m(tiny_config());
    for (Parameter* p : m.parameters())
        for (int i = 0; i < p->value.size(); ++i) p->value[i] += 0.1 * (uniform01(rng) - 0.5);

    std::vector<IntTensor> cases;
    for (int i = 0; i < 60; ++i) cases.push_back(random_image(Shape{1, 8, 8}, rng));
    for (int v : {0, 1, 127, 128, 254, 255}) cases.push_back(IntTensor(Shape{1, 8, 8}, v));
    {
        IntTensor grad(Shape{1, 16, 16});
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) grad.at(0, y, x) = (y * 16 + x) % 256;
        cases.push_back(grad);
    }
    for (const IntTensor& x : cases) {
        CompressedImage ci = compress(x, m);
        CHECK(decompress(ci, m) == x);
        // Container survives serialization too.
        CompressedImage back = CompressedImage::parse(ci.serialize());
        CHECK(decompress(back, m) == x);
    }
}

TEST_CASE("compress validates its input") {
    IDFModel m(tiny_config());
    Rng rng(2);
    CHECK_THROWS_AS(compress(random_image(Shape{1, 6, 6}, rng), m), shape_error);
    IntTensor bad(Shape{1, 8, 8}, 300);
    CHECK_THROWS_AS(compress(bad, m), data_error);
    IntTensor neg(Shape{1, 8, 8}, -1);
    CHECK_THROWS_AS(compress(neg, m), data_error);
}

TEST_CASE("uniform noise escapes to raw with the documented size bound") {
    Rng rng(3);
    const IDFModel& m = fixture().model;
    int escapes = 0;
    for (int i = 0; i < 20; ++i) {
        IntTensor x = random_image(Shape{1, 16, 16}, rng);
        CompressResult r = compress_with_stats(x, m);
        if (r.image.escape) {
            ++escapes;
            // magic(4)+ver(1)+hash(32)+dims(6)+flags(1)+raw(d)
            CHECK(r.image.serialize().size() == 44u + 256u);
        }
        CHECK(r.image.serialize().size() <= 44u + 256u);
        CHECK(decompress(r.image, m) == x);
    }
    CHECK(escapes == 20);  // noise never beats raw under this model
}

TEST_CASE("constant image under a trained model codes well below raw") {
    // A sharply concentrated toy source; its trained model prices the mode
    // cheaply enough that a constant image costs well under a bit per dim.
    ToyConfig sharp;
    sharp.count = 300;
    sharp.height = 8;
    sharp.width = 8;
    sharp.seed = 41;
    sharp.checker_delta = 0.0;
    sharp.components = {{1.0, 128.0, 0.25}};
    ModelConfig mc = tiny_config(1, 9);
    mc.flows_per_level = 1;
    IDFModel m(mc);
    TrainConfig tc;
    tc.epochs = 30;  // enough optimizer steps for the means to reach ~128
    tc.batch_size = 4;
    tc.patch = 8;
    tc.lr_base = 5e-3;
    tc.lr_decay = 0.97;
    tc.seed = 4;
    train(m, toy::generate(sharp), tc);

    IntTensor x(Shape{1, 8, 8}, 128);
    CompressResult r = compress_with_stats(x, m);
    CHECK_FALSE(r.image.escape);
    CHECK(r.image.serialize().size() < 44u + 64u);
    // Payload without container framing: well under one bit per dimension.
    const double payload_bpd =
        static_cast<double>(r.stats.total_bits - r.stats.header_bits) / 64.0;
    CHECK(payload_bpd < 1.0);
}

TEST_CASE("coded length tracks the model NLL within framing overhead") {
    const TrainedFixture& f = fixture();
    for (const IntTensor& x : f.test_images) {
        CompressResult r = compress_with_stats(x, f.model);
        CHECK_FALSE(r.image.escape);
        CHECK(r.stats.gap >= 0.0);
        CHECK(r.stats.gap <=
              0.05 + static_cast<double>(r.stats.header_bits) / static_cast<double>(r.stats.dims));
    }
}

TEST_CASE("decompress rejects a different model before decoding") {
    const TrainedFixture& f = fixture();
    IDFModel other(tiny_config(1, 777));
    CompressedImage ci = compress(f.test_images[0], f.model);
    CHECK_THROWS_AS(decompress(ci, other), corruption_error);
}

TEST_CASE("corrupt containers fail loudly, never crash") {
    const TrainedFixture& f = fixture();
    CompressedImage ci = compress(f.test_images[0], f.model);
    const std::vector<std::uint8_t> bytes = ci.serialize();

    {
        // Drop one byte: structural truncation.
        std::vector<std::uint8_t> t(bytes.begin(), bytes.end() - 1);
        CHECK_THROWS_AS(CompressedImage::parse(t), corruption_error);
    }
    {
        // Truncate one substream but keep the container consistent: the
        // rANS decoder must detect it.
        CompressedImage cut = ci;
        REQUIRE(!cut.substreams.empty());
        REQUIRE(cut.substreams[0].size() > 8);
        cut.substreams[0].pop_back();
        cut.substreams[0].pop_back();
        cut.substreams[0].pop_back();
        cut.substreams[0].pop_back();
        CompressedImage reparsed = CompressedImage::parse(cut.serialize());
        CHECK_THROWS_AS(decompress(reparsed, f.model), corruption_error);
    }
    {
        std::vector<std::uint8_t> t = bytes;
        t[0] = 'X';
        CHECK_THROWS_AS(CompressedImage::parse(t), corruption_error);
        t = bytes;
        t[4] = 99;  // version
        CHECK_THROWS_AS(CompressedImage::parse(t), corruption_error);
    }
    // Random single-byte mutations: wrong bytes or an error, never UB.
    Rng rng(5);
    const IntTensor original = f.test_images[0];
    for (int iter = 0; iter < 100; ++iter) {
        std::vector<std::uint8_t> t = bytes;
        t[rng() % t.size()] ^= static_cast<std::uint8_t>(1 + rng() % 255);
        bool harmless_or_caught = true;
        try {
            CompressedImage parsed = CompressedImage::parse(t);
            IntTensor out = decompress(parsed, f.model);
            harmless_or_caught = true;  // decoded to something; may differ
            (void)out;
        } catch (const error&) {
            harmless_or_caught = true;
        }
        CHECK(harmless_or_caught);
    }
}

TEST_CASE("progressive: full prefix equals decompress bitwise") {
    const TrainedFixture& f = fixture();
    Rng rng(6);
    CompressedImage ci = compress(f.test_images[1], f.model);
    IntTensor full = decompress(ci, f.model);
    IntTensor prog = progressive_decode(ci, f.model, f.model.config().levels, rng);
    CHECK(prog == full);
    CHECK(prefix_for_fraction(ci, 1.0) == f.model.config().levels);
}

TEST_CASE("progressive: empty prefix is a pure ancestral sample") {
    const TrainedFixture& f = fixture();
    CompressedImage ci = compress(f.test_images[2], f.model);
    Rng a(404), b(404);
    IntTensor prog = progressive_decode(ci, f.model, 0, a);
    IntTensor samp = f.model.sample_one(16, 16, b);
    CHECK(prog == samp);
}

TEST_CASE("progressive: one-level prefix reproduces the true top latent") {
    const TrainedFixture& f = fixture();
    const IntTensor& x = f.test_images[3];
    CompressedImage ci = compress(x, f.model);
    auto [true_latents, lik] = f.model.forward(x);
    Rng rng(7);
    IntTensor rendered = progressive_decode(ci, f.model, 1, rng);
    auto [render_latents, lik2] = f.model.forward(rendered);
    CHECK(render_latents.back() == true_latents.back());
    CHECK(prefix_for_fraction(ci, 0.0) == 0);
}

TEST_CASE("prefix_for_fraction maps bytes to whole level prefixes") {
    const TrainedFixture& f = fixture();
    CompressedImage ci = compress(f.test_images[4], f.model);
    std::size_t total = 0;
    for (const auto& s : ci.substreams) total += s.size();
    for (double frac : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) {
        const int k = prefix_for_fraction(ci, frac);
        std::size_t used = 0;
        for (int i = 0; i < k; ++i) used += ci.substreams[static_cast<std::size_t>(i)].size();
        CHECK(static_cast<double>(used) <= frac * static_cast<double>(total) + 1e-9);
        if (k < static_cast<int>(ci.substreams.size())) {
            const std::size_t next = used + ci.substreams[static_cast<std::size_t>(k)].size();
            CHECK(static_cast<double>(next) > frac * static_cast<double>(total));
        }
    }
}

TEST_CASE("escaped containers render identically at any prefix") {
    const IDFModel& m = fixture().model;
    Rng rng(8);
    IntTensor noise = random_image(Shape{1, 16, 16}, rng);
    CompressedImage ci = compress(noise, m);
    REQUIRE(ci.escape);
    Rng r1(1);
    CHECK(progressive_decode(ci, m, 0, r1) == noise);
}

TEST_CASE("compress_batch: equivalence, parallel determinism, stats") {
    const TrainedFixture& f = fixture();
    std::vector<IntTensor> batch(f.test_images.begin(), f.test_images.begin() + 12);

    auto [one, stats1] = compress_batch(batch, f.model, 1);
    auto [eight, stats8] = compress_batch(batch, f.model, 8);
    REQUIRE(one.size() == batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
        CHECK(one[i].serialize() == eight[i].serialize());

    // Batch of one equals a single compress.
    auto [single, sstats] = compress_batch({batch[0]}, f.model, 1);
    CHECK(single[0].serialize() == compress(batch[0], f.model).serialize());

    // Batch bpd is the mean of per-image coded bpd.
    double mean = 0.0;
    for (const IntTensor& x : batch) mean += compress_with_stats(x, f.model).stats.coded_bpd;
    mean /= static_cast<double>(batch.size());
    CHECK(stats1.bpd == doctest::Approx(mean).epsilon(1e-12));
    CHECK(stats1.images == 12);
    CHECK(stats1.escapes == 0);
    CHECK(stats1.rate() == doctest::Approx(8.0 / stats1.bpd));
}

TEST_CASE("bpd/rate reporting convention") {
    CHECK(bpd_with_rate(3.34) == "3.34 (2.40x)");
    CHECK(bpd_with_rate(4.0) == "4.00 (2.00x)");
    CHECK(bpd_with_rate(8.0) == "8.00 (1.00x)");
}
