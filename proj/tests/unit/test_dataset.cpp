#include <doctest.h>

#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "amal/dataset.hpp"
#include "amal/errors.hpp"
#include "amal/util.hpp"
#include "fixtures.hpp"

using namespace amal;
namespace fs = std::filesystem;

namespace {

void write_png(const fs::path& p, int side = 8, int value = 128) {
    fs::create_directories(p.parent_path());
    cv::Mat img(side, side, CV_8UC3, cv::Scalar(value, value, value));
    REQUIRE(cv::imwrite(p.string(), img));
}

/// root/<split>/<class>/img_k.png with `per` images per class.
void make_tree(const fs::path& root, std::vector<std::string> classes, int per = 2) {
    for (const char* split : {"train", "validation", "test"})
        for (const auto& c : classes)
            for (int k = 0; k < per; ++k) write_png(root / split / c / ("img_" + std::to_string(k) + ".png"));
}

DatasetManifest random_manifest(Rng& rng, std::size_t n) {
    DatasetManifest m;
    m.class_names = {"a", "b"};
    m.source_root = "/data";
    m.created_at = "1970-01-01T00:00:00Z";
    const char* sources[] = {"", "human", "oracle", "autolabel:abc"};
    for (std::size_t i = 0; i < n; ++i) {
        Sample s;
        s.id = "id," + std::to_string(rng.below(1000000)) + "\"" + std::to_string(i);
        s.image_ref = "/data/x " + std::to_string(i) + ".png";
        s.split = static_cast<Split>(rng.below(3));
        if (rng.below(2)) s.true_label = static_cast<Label>(rng.below(2));
        if (rng.below(2)) {
            s.assigned_label = static_cast<Label>(rng.below(2));
            s.label_source = sources[1 + rng.below(3)];
        }
        m.samples.push_back(s);
    }
    std::sort(m.samples.begin(), m.samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
    return m;
}

}  // namespace

TEST_CASE("scan of a split_dirs tree") {
    test::TempDir dir;
    make_tree(dir / "root", {"ok", "bad"}, 3);
    const auto m = scan_directory(dir / "root", ScanLayout::split_dirs);
    CHECK(m.samples.size() == 18);
    CHECK(m.class_names == std::array<std::string, 2>{"bad", "ok"});
    CHECK(m.split_counts().at(Split::train) == 6);
    CHECK(std::is_sorted(m.samples.begin(), m.samples.end(),
                         [](const Sample& a, const Sample& b) { return a.id < b.id; }));
    const Sample* s = m.find("train/ok/img_0.png");
    REQUIRE(s);
    CHECK(s->true_label == 1);
    CHECK(s->split == Split::train);
    CHECK(fs::path(s->image_ref).is_absolute());
}

TEST_CASE("scan rejects malformed trees") {
    test::TempDir dir;
    SUBCASE("three classes") {
        make_tree(dir / "r", {"a", "b", "c"}, 1);
        CHECK_THROWS_AS(scan_directory(dir / "r", ScanLayout::split_dirs), ClassCountError);
    }
    SUBCASE("missing split") {
        for (const char* split : {"train", "validation"})
            for (const char* c : {"a", "b"}) write_png(dir / "r" / split / c / "x.png");
        CHECK_THROWS_AS(scan_directory(dir / "r", ScanLayout::split_dirs), StructureError);
    }
    SUBCASE("inconsistent class names") {
        make_tree(dir / "r", {"a", "b"}, 1);
        fs::rename(dir / "r" / "test" / "b", dir / "r" / "test" / "z");
        CHECK_THROWS_AS(scan_directory(dir / "r", ScanLayout::split_dirs), StructureError);
    }
    SUBCASE("no images") {
        for (const char* split : {"train", "validation", "test"})
            for (const char* c : {"a", "b"}) fs::create_directories(dir / "r" / split / c);
        CHECK_THROWS_AS(scan_directory(dir / "r", ScanLayout::split_dirs), EmptyDatasetError);
    }
    SUBCASE("missing root") {
        CHECK_THROWS_AS(scan_directory(dir / "nope", ScanLayout::split_dirs), NotFoundError);
    }
    SUBCASE("flat layout without manifest") {
        fs::create_directories(dir / "r");
        CHECK_THROWS_AS(scan_directory(dir / "r", ScanLayout::flat), StructureError);
    }
}

TEST_CASE("flat layout reads root/manifest.csv") {
    test::TempDir dir;
    make_tree(dir / "r", {"a", "b"}, 1);
    const auto m = scan_directory(dir / "r", ScanLayout::split_dirs);
    save_manifest(m, dir / "r" / "manifest.csv");
    CHECK(scan_directory(dir / "r", ScanLayout::flat) == m);
}

TEST_CASE("manifest save/load round-trips (property)") {
    test::TempDir dir;
    Rng rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        const auto m = random_manifest(rng, 1 + rng.below(40));
        const auto p = dir / ("m" + std::to_string(trial) + ".csv");
        save_manifest(m, p);
        CHECK(load_manifest(p) == m);
        const std::string first = read_file(p);
        save_manifest(load_manifest(p), p);
        CHECK(read_file(p) == first);  // byte-stable
    }
}

TEST_CASE("manifest header and provenance column") {
    test::TempDir dir;
    DatasetManifest m;
    m.samples.push_back({"b", "/b.png", Split::train, 1, std::nullopt, ""});
    m.samples.push_back({"a", "/a.png", Split::test, 0, 0, ""});
    save_manifest(m, dir / "m.csv");
    CHECK(read_file(dir / "m.csv") ==
          "id,image_ref,split,true_label,assigned_label\na,/a.png,test,0,0\nb,/b.png,train,1,\n");
    m.samples[0].assigned_label = 1;
    m.samples[0].label_source = "human";
    save_manifest(m, dir / "m2.csv");
    CHECK(read_file(dir / "m2.csv").rfind("id,image_ref,split,true_label,assigned_label,label_source\n", 0) == 0);
    CHECK(fs::exists(dir / "m.csv.meta.json"));
}

TEST_CASE("manifest loading errors") {
    test::TempDir dir;
    auto load_text = [&](const std::string& text) {
        write_file_atomic(dir / "x.csv", text);
        return load_manifest(dir / "x.csv");
    };
    const std::string h = "id,image_ref,split,true_label,assigned_label\n";
    CHECK_THROWS_AS(load_text("wrong,header\n"), ParseError);
    CHECK_THROWS_AS(load_text(h + "a,/a,train,0,\na,/b,train,1,\n"), DuplicateIdError);
    CHECK_THROWS_AS(load_text(h + "a,/a,train,2,\n"), ParseError);
    CHECK_THROWS_AS(load_text(h + "a,/a,holdout,0,\n"), ParseError);
    CHECK_THROWS_AS(load_text(h + "a,/a,train\n"), ParseError);
    try {
        load_text(h + "a,/a,train,0,\nb,/b,train,x,\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(load_manifest(dir / "absent.csv"), NotFoundError);
    DatasetManifest empty;
    CHECK_THROWS_AS(save_manifest(empty, dir / "e.csv"), EmptyDatasetError);
    DatasetManifest one;
    one.samples.push_back({"a", "/a", Split::train, 0, std::nullopt, ""});
    CHECK_THROWS_AS(save_manifest(one, dir / "no" / "such" / "dir.csv"), IoError);
}

TEST_CASE("label assignment honours precedence") {
    DatasetManifest m;
    m.samples.push_back({"a", "/a", Split::train, 0, std::nullopt, ""});
    assign_label(m, "a", 1, "autolabel:x");
    CHECK_THROWS_AS(assign_label(m, "a", 0, "human"), LabelOverwriteError);
    correct_label(m, "a", 0, "oracle");
    CHECK(m.samples[0].assigned_label == 0);
    CHECK_THROWS_AS(correct_label(m, "a", 1, "autolabel:y"), LabelOverwriteError);
    correct_label(m, "a", 1, "human");
    CHECK_THROWS_AS(correct_label(m, "a", 0, "oracle"), LabelOverwriteError);
    CHECK(m.samples[0].label_source == "human");
    CHECK_THROWS_AS(assign_label(m, "zz", 0, "human"), NotFoundError);
    CHECK_THROWS_AS(correct_label(m, "a", 3, "human"), RangeError);
}

TEST_CASE("init_pools partitions the train split (property)") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        DatasetManifest m;
        const std::size_t n = 1 + rng.below(60);
        for (std::size_t i = 0; i < n; ++i) {
            m.samples.push_back({"s" + std::to_string(i), "/x", i % 4 == 3 ? Split::validation : Split::train,
                                 static_cast<Label>(i % 2), std::nullopt, ""});
        }
        const std::size_t train = m.samples_in(Split::train).size();
        const std::size_t seed = rng.below(train + 1);
        DatasetManifest copy = m;
        const auto pool = init_pools(m, seed, 77 + trial);
        CHECK(pool.labeled_ids.size() == seed);
        CHECK(pool.size() == train);
        check_pool(m, pool);
        CHECK(init_pools(copy, seed, 77 + trial) == pool);  // reproducible
        for (const auto& id : pool.labeled_ids) CHECK(m.find(id)->label_source == "oracle");
        CHECK(pool_from_manifest(m) == pool);
    }
}

TEST_CASE("init_pools errors") {
    DatasetManifest m;
    m.samples.push_back({"a", "/a", Split::train, std::nullopt, std::nullopt, ""});
    CHECK_THROWS_AS(init_pools(m, 2, 0), RangeError);
    CHECK_THROWS_AS(init_pools(m, 1, 0), MissingLabelError);
    CHECK(init_pools(m, 0, 0).unlabeled_ids.size() == 1);
}

TEST_CASE("check_pool detects violations") {
    DatasetManifest m;
    m.samples.push_back({"a", "/a", Split::train, 0, std::nullopt, ""});
    m.samples.push_back({"b", "/b", Split::train, 1, std::nullopt, ""});
    PoolState p{{"a"}, {"a", "b"}};
    CHECK_THROWS_AS(check_pool(m, p), IntegrityError);
    PoolState q{{}, {"a"}};
    CHECK_THROWS_AS(check_pool(m, q), IntegrityError);
    PoolState r{{"a"}, {"b"}};
    CHECK_THROWS_AS(check_pool(m, r), IntegrityError);  // a has no assigned label
}

TEST_CASE("preprocess produces normalized RGB at the configured side") {
    test::TempDir dir;
    const auto p = dir / "img.png";
    fs::create_directories(dir.path());
    cv::Mat img(40, 30, CV_8UC3, cv::Scalar(0, 0, 255));  // BGR: pure red
    REQUIRE(cv::imwrite(p.string(), img));
    PreprocessConfig cfg;
    cfg.side = 32;
    const auto t = preprocess_image({"x", p.string(), Split::train, 0, std::nullopt, ""}, cfg);
    CHECK(t.height == 32);
    CHECK(t.width == 32);
    CHECK(t.channels == 3);
    CHECK(t.at(5, 5, 0) == doctest::Approx((1.0 - 0.485) / 0.229).epsilon(1e-5));
    CHECK(t.at(5, 5, 1) == doctest::Approx((0.0 - 0.456) / 0.224).epsilon(1e-5));
    CHECK(t.at(5, 5, 2) == doctest::Approx((0.0 - 0.406) / 0.225).epsilon(1e-5));
}

TEST_CASE("preprocess reports the failing sample") {
    test::TempDir dir;
    const auto jpg = dir / "cut.jpg";
    cv::Mat img(64, 64, CV_8UC3, cv::Scalar(10, 200, 30));
    cv::randu(img, cv::Scalar::all(0), cv::Scalar::all(255));
    REQUIRE(cv::imwrite(jpg.string(), img));
    const std::string bytes = read_file(jpg);
    write_file_atomic(jpg, bytes.substr(0, bytes.size() / 2));
    write_file_atomic(dir / "junk.png", "not an image");
    PreprocessConfig cfg;
    cfg.side = 32;
    for (const char* name : {"cut.jpg", "junk.png", "absent.png"}) {
        try {
            preprocess_image({name, (dir / name).string(), Split::test, 0, std::nullopt, ""}, cfg);
            FAIL("expected DecodeError");
        } catch (const DecodeError& e) {
            CHECK(e.sample_id() == name);
        }
    }
}
