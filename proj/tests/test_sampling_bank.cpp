#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include "oracles.hpp"
#include "selflab/sampling_bank.hpp"
#include "selflab/synth_world.hpp"

using namespace selflab;

namespace {

Matrix unit_features(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Matrix z(n, d);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (double& x : z.row(j)) s += (x = g(rng)) * x;
        for (double& x : z.row(j)) x /= std::sqrt(s);
    }
    return z;
}

HardLabelMap blocks(std::vector<std::size_t> counts) {
    std::vector<std::uint16_t> v;
    for (std::size_t c = 0; c < counts.size(); ++c) v.insert(v.end(), counts[c], static_cast<std::uint16_t>(c));
    return HardLabelMap(1, static_cast<std::uint32_t>(v.size()), v);
}

std::vector<std::size_t> recount(const SampleSet& s, const HardLabelMap& labels, std::size_t classes,
                                 std::size_t first, std::size_t count) {
    std::vector<std::size_t> n(classes, 0);
    for (std::size_t k = first; k < first + count; ++k) ++n[labels.data[s.source_indices[k].pixel]];
    return n;
}

}  // namespace

TEST_CASE("per-image class distribution") {
    CHECK(class_distribution(HardLabelMap(2, 2, std::vector<std::uint16_t>{0, 0, 1, 2}), 3) ==
          std::vector<double>{0.5, 0.25, 0.25});
    CHECK(class_distribution(HardLabelMap(3, 3, 1), 4) == std::vector<double>{0, 1, 0, 0});
    CHECK(class_distribution(HardLabelMap(1, 3, std::vector<std::uint16_t>{0, 2, 2}), 2) ==
          std::vector<double>{1.0, 0.0});
    CHECK_THROWS_AS(class_distribution(HardLabelMap(2, 2, 5), 5), std::invalid_argument);

    std::mt19937_64 rng(10);
    const HardLabelMap m = oracle::random_labels(rng, 10, 10, 5, true);
    const auto got = class_distribution(m, 5), want = oracle::histogram(m.data, 5);
    for (std::size_t c = 0; c < 5; ++c) CHECK(got[c] == doctest::Approx(want[c]).epsilon(1e-15));
}

TEST_CASE("quota arithmetic") {
    SUBCASE("M = 512 over (0.5, 0.25, 0.25)") {
        const HardLabelMap y = blocks({512, 256, 256});
        Rng rng(1);
        const SampleSet s = balanced_sample(unit_features(1024, 4, 1), y, 3, 512, 0, rng);
        CHECK(s.per_class_quota == std::vector<std::size_t>{256, 128, 128});
        CHECK(s.remainder == 0);
        CHECK(recount(s, y, 3, 0, 512) == std::vector<std::size_t>{256, 128, 128});
    }
    SUBCASE("M = 10 over (0.55, 0.45)") {
        const HardLabelMap y = blocks({11, 9});
        Rng rng(2);
        const SampleSet s = balanced_sample(unit_features(20, 3, 2), y, 2, 10, 0, rng);
        CHECK(s.per_class_quota == std::vector<std::size_t>{5, 4});
        CHECK(s.remainder == 1);
        CHECK(s.size() == 10);
        const auto n = recount(s, y, 2, 0, 9);
        CHECK(n == std::vector<std::size_t>{5, 4});
    }
}

TEST_CASE("drawn counts on a synthetic image equal floor(M * delta)") {
    WorldSpec spec;
    spec.n_images = 3;
    const World world = generate(spec);
    for (std::size_t img = 0; img < world.images.size(); ++img) {
        const auto& im = world.images[img];
        const Matrix z = to_matrix(im.features);
        const HardLabelMap& y = im.truth;
        const auto counts = class_counts(y, 5);
        std::size_t total = 0;
        for (auto n : counts) total += n;
        Rng rng(100 + img);
        const SampleSet s = balanced_sample(z, y, 5, 512, static_cast<std::uint32_t>(img), rng);
        std::size_t quota_sum = 0;
        for (std::size_t c = 0; c < 5; ++c) {
            CHECK(s.per_class_quota[c] == 512 * counts[c] / total);
            quota_sum += s.per_class_quota[c];
        }
        CHECK(quota_sum + s.remainder == 512);
        CHECK(recount(s, y, 5, 0, quota_sum) == s.per_class_quota);
        for (std::size_t k = 0; k < s.size(); ++k) {
            CHECK(s.source_indices[k].image == img);
            CHECK(s.class_hints[k] == y.data[s.source_indices[k].pixel]);
            for (std::size_t d = 0; d < z.cols(); ++d) CHECK(s.features(k, d) == z(s.source_indices[k].pixel, d));
        }
    }
}

TEST_CASE("sampler properties") {
    std::mt19937_64 gen(3);
    const HardLabelMap y = oracle::random_labels(gen, 32, 32, 4, true);
    Matrix z = unit_features(1024, 6, 3);
    for (double& x : z.row(17)) x = 0.0;
    for (double& x : z.row(400)) x = 0.0;

    SUBCASE("without replacement, IGNORE and zero-feature pixels never drawn") {
        Rng rng(4);
        const SampleSet s = balanced_sample(z, y, 4, 700, 9, rng);
        std::set<std::uint32_t> seen;
        for (const auto& idx : s.source_indices) {
            CHECK(seen.insert(idx.pixel).second);
            CHECK(y.data[idx.pixel] != 4);
            CHECK(idx.pixel != 17);
            CHECK(idx.pixel != 400);
        }
        CHECK(seen.size() == 700);
    }
    SUBCASE("deterministic per seed") {
        Rng a(5), b(5), c(6);
        const SampleSet sa = balanced_sample(z, y, 4, 300, 0, a);
        const SampleSet sb = balanced_sample(z, y, 4, 300, 0, b);
        const SampleSet sc = balanced_sample(z, y, 4, 300, 0, c);
        CHECK(sa.source_indices == sb.source_indices);
        CHECK(sa.features == sb.features);
        CHECK(sa.class_hints == sb.class_hints);
        CHECK_FALSE(sa.source_indices == sc.source_indices);
    }
    SUBCASE("requests beyond the drawable pixels are rejected") {
        Rng rng(7);
        CHECK_THROWS_AS(balanced_sample(z, y, 4, 1024, 0, rng), std::invalid_argument);
        CHECK_THROWS_AS(balanced_sample(Matrix(5, 6), y, 4, 3, 0, rng), std::invalid_argument);
    }
}

TEST_CASE("FIFO feature bank") {
    auto batch = [](std::initializer_list<double> tags) {
        SampleSet s;
        s.features = Matrix(tags.size(), 2);
        std::size_t k = 0;
        for (double t : tags) {
            s.features(k, 0) = t;
            s.features(k, 1) = -t;
            s.source_indices.push_back({0, static_cast<std::uint32_t>(k)});
            s.class_hints.push_back(static_cast<std::uint16_t>(static_cast<int>(t) % 3));
            ++k;
        }
        return s;
    };
    SUBCASE("capacity 4, push 3 then 3 keeps the last 4 in order") {
        FeatureBank bank(4, 2);
        bank.push_batch(batch({1, 2, 3}));
        bank.push_batch(batch({4, 5, 6}));
        CHECK(bank.size() == 4);
        const Matrix f = bank.features();
        for (std::size_t k = 0; k < 4; ++k) CHECK(f(k, 0) == static_cast<double>(k + 3));
        CHECK(bank.hints() == std::vector<std::uint16_t>{0, 1, 2, 0});
        CHECK(bank.total_pushed() == 6);
        CHECK(bank.total_evicted() == 2);
        CHECK(bank.total_pushed() - bank.total_evicted() == bank.size());
    }
    SUBCASE("exactly capacity evicts nothing") {
        FeatureBank bank(4, 2);
        bank.push_batch(batch({1, 2, 3, 4}));
        CHECK(bank.size() == 4);
        CHECK(bank.total_evicted() == 0);
        CHECK(bank.features()(0, 0) == 1.0);
    }
    SUBCASE("dimension mismatch is rejected") {
        FeatureBank bank(4, 3);
        CHECK_THROWS_AS(bank.push_batch(batch({1})), std::invalid_argument);
        CHECK_THROWS_AS(FeatureBank(0, 2), std::invalid_argument);
    }
    SUBCASE("never exceeds capacity under random batch sizes") {
        FeatureBank bank(50, 2);
        std::mt19937_64 rng(8);
        for (int it = 0; it < 40; ++it) {
            SampleSet s;
            const std::size_t m = rng() % 23;
            s.features = Matrix(m, 2, 0.5);
            s.source_indices.assign(m, {});
            s.class_hints.assign(m, 0);
            bank.push_batch(s);
            CHECK(bank.size() <= 50);
            CHECK(bank.total_pushed() - bank.total_evicted() == bank.size());
        }
    }
}

TEST_CASE("1000 class-balanced pushes track the corpus distribution") {
    WorldSpec spec;
    spec.n_images = 20;
    const World world = generate(spec);
    FeatureBank bank(1000, spec.dim);
    Rng rng(9);
    std::vector<std::uint16_t> all;
    for (std::size_t img = 0; img < world.images.size(); ++img) {
        const auto& im = world.images[img];
        bank.push_batch(balanced_sample(to_matrix(im.features), im.truth, 5, 50, static_cast<std::uint32_t>(img), rng));
        all.insert(all.end(), im.truth.data.begin(), im.truth.data.end());
    }
    CHECK(bank.total_pushed() == 1000);
    const auto hist = bank.hint_histogram(5);
    std::vector<double> got(5);
    for (std::size_t c = 0; c < 5; ++c) got[c] = static_cast<double>(hist[c]) / 1000.0;
    const auto want = oracle::histogram(all, 5);
    double l1 = 0.0;
    for (std::size_t c = 0; c < 5; ++c) l1 += std::abs(got[c] - want[c]);
    CHECK(l1 <= 0.05);
}

TEST_CASE("augmentation with the bank") {
    SampleSet cur;
    cur.features = Matrix(3, 2, std::vector<double>{1, 0, 0, 1, 1, 1});
    cur.source_indices.assign(3, {});
    cur.class_hints.assign(3, 0);
    SUBCASE("empty bank") {
        const AugmentedBatch a = augment(cur, FeatureBank(10, 2));
        CHECK(a.features == cur.features);
        CHECK(a.current_first == 0);
        CHECK(a.current_count == 3);
    }
    SUBCASE("bank of 7") {
        FeatureBank bank(10, 2);
        for (int k = 0; k < 7; ++k) {
            const double v[2]{static_cast<double>(k), 9.0};
            bank.push(v, 1);
        }
        const AugmentedBatch a = augment(cur, bank);
        CHECK(a.features.rows() == 10);
        CHECK(a.current_first == 0);
        CHECK(a.current_count == 3);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t d = 0; d < 2; ++d) CHECK(a.features(r, d) == cur.features(r, d));
        for (std::size_t k = 0; k < 7; ++k) CHECK(a.features(3 + k, 0) == static_cast<double>(k));
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(augment(cur, FeatureBank(10, 5)), std::invalid_argument);
    }
}

TEST_CASE("bank checkpoint round-trips") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "selflab_bank_io";
    fs::remove_all(dir);
    fs::create_directories(dir);
    FeatureBank bank(5, 2);
    for (int k = 0; k < 8; ++k) {
        const double v[2]{0.25 * k, -0.5 * k};
        bank.push(v, static_cast<std::uint16_t>(k % 3));
    }
    bank.save(dir / "bank.slt1", dir / "bank.json");
    const FeatureBank back = FeatureBank::load(dir / "bank.slt1", dir / "bank.json");
    CHECK(back.capacity() == 5);
    CHECK(back.size() == 5);
    CHECK(back.features() == bank.features());
    CHECK(back.hints() == bank.hints());
    CHECK(back.total_pushed() == 8);
    CHECK(back.total_evicted() == 3);
    fs::remove_all(dir);
}
