#include "amal/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "amal/errors.hpp"
#include "amal/util.hpp"

namespace amal {

using nlohmann::json;

namespace {

constexpr std::string_view kHeader = "id,image_ref,split,true_label,assigned_label";
constexpr std::string_view kHeaderWithSource =
    "id,image_ref,split,true_label,assigned_label,label_source";

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

fs::path meta_path(const fs::path& csv_path) {
    fs::path p = csv_path;
    p += ".meta.json";
    return p;
}

std::string label_field(const std::optional<Label>& l) {
    return l ? std::to_string(*l) : std::string();
}

std::optional<Label> parse_label_field(const std::string& s, std::size_t line,
                                       std::string_view column) {
    if (s.empty()) return std::nullopt;
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw ParseError(line, "invalid " + std::string(column) + " '" + s + "' (expected 0, 1 or empty)");
}

}  // namespace

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    throw std::invalid_argument("invalid split '" + std::string(s) + "'");
}

LabelOrigin label_origin(std::string_view source) {
    if (source.empty()) return LabelOrigin::none;
    if (source == "human") return LabelOrigin::human;
    if (source == "oracle") return LabelOrigin::oracle;
    if (source.starts_with("autolabel")) return LabelOrigin::autolabel;
    throw std::invalid_argument("unknown label source '" + std::string(source) + "'");
}

std::map<Split, std::size_t> DatasetManifest::split_counts() const {
    std::map<Split, std::size_t> counts{{Split::train, 0}, {Split::validation, 0}, {Split::test, 0}};
    for (const auto& s : samples) ++counts[s.split];
    return counts;
}

std::vector<Sample> DatasetManifest::samples_in(Split split) const {
    std::vector<Sample> out;
    for (const auto& s : samples)
        if (s.split == split) out.push_back(s);
    return out;
}

const Sample* DatasetManifest::find(std::string_view id) const {
    for (const auto& s : samples)
        if (s.id == id) return &s;
    return nullptr;
}

Sample* DatasetManifest::find(std::string_view id) {
    return const_cast<Sample*>(std::as_const(*this).find(id));
}

IdIndex::IdIndex(const DatasetManifest& manifest) {
    map_.reserve(manifest.samples.size());
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) map_.emplace(manifest.samples[i].id, i);
}

std::size_t IdIndex::at(const std::string& id) const {
    auto it = map_.find(id);
    if (it == map_.end()) throw NotFoundError("unknown sample id '" + id + "'");
    return it->second;
}

DatasetManifest scan_directory(const fs::path& root, ScanLayout layout) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw NotFoundError("dataset root not found: " + root.string());
    if (layout == ScanLayout::flat) {
        fs::path manifest_file = root / "manifest.csv";
        if (!fs::exists(manifest_file)) {
            throw StructureError("flat layout requires " + manifest_file.string());
        }
        return load_manifest(manifest_file);
    }

    const fs::path canon_root = fs::weakly_canonical(root);
    DatasetManifest m;
    m.source_root = canon_root;
    m.created_at = WallClock().now_iso();

    std::optional<std::array<std::string, 2>> class_names;
    for (Split split : {Split::train, Split::validation, Split::test}) {
        const fs::path split_dir = canon_root / to_string(split);
        if (!fs::is_directory(split_dir)) {
            throw StructureError("missing split directory: " + split_dir.string());
        }
        std::vector<std::string> classes;
        for (const auto& entry : fs::directory_iterator(split_dir)) {
            if (entry.is_directory()) classes.push_back(entry.path().filename().string());
        }
        if (classes.size() != 2) {
            throw ClassCountError(split_dir.string() + " has " + std::to_string(classes.size()) +
                                  " class directories, expected exactly 2");
        }
        std::sort(classes.begin(), classes.end());
        std::array<std::string, 2> names{classes[0], classes[1]};
        if (class_names && *class_names != names) {
            throw StructureError("class directories of '" + std::string(to_string(split)) +
                                 "' differ from the other splits");
        }
        class_names = names;

        for (Label label : {0, 1}) {
            const fs::path class_dir = split_dir / names[static_cast<std::size_t>(label)];
            for (const auto& entry : fs::recursive_directory_iterator(class_dir)) {
                if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
                Sample s;
                s.id = entry.path().lexically_relative(canon_root).generic_string();
                s.image_ref = entry.path().string();
                s.split = split;
                s.true_label = label;
                m.samples.push_back(std::move(s));
            }
        }
    }
    if (m.samples.empty()) throw EmptyDatasetError("no images found under " + canon_root.string());
    m.class_names = *class_names;
    std::sort(m.samples.begin(), m.samples.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });
    return m;
}

std::string manifest_csv(const DatasetManifest& manifest, bool with_source) {
    std::vector<const Sample*> rows;
    rows.reserve(manifest.samples.size());
    for (const auto& s : manifest.samples) rows.push_back(&s);
    std::sort(rows.begin(), rows.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });

    std::string out(with_source ? kHeaderWithSource : kHeader);
    out.push_back('\n');
    for (const Sample* s : rows) {
        std::vector<std::string> fields{s->id, s->image_ref, std::string(to_string(s->split)),
                                        label_field(s->true_label), label_field(s->assigned_label)};
        if (with_source) fields.push_back(s->label_source);
        out += csv::join(fields);
        out.push_back('\n');
    }
    return out;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    if (manifest.samples.empty()) throw EmptyDatasetError("refusing to save an empty manifest");
    bool with_source = std::any_of(manifest.samples.begin(), manifest.samples.end(),
                                   [](const Sample& s) { return !s.label_source.empty(); });
    json meta = {{"class_names", manifest.class_names},
                 {"source_root", manifest.source_root.string()},
                 {"created_at", manifest.created_at}};
    std::error_code ec;
    if (path.has_parent_path() && !fs::is_directory(path.parent_path(), ec)) {
        throw IoError("directory does not exist: " + path.parent_path().string());
    }
    write_file_atomic(path, manifest_csv(manifest, with_source));
    write_file_atomic(meta_path(path), meta.dump(2) + "\n");
}

DatasetManifest load_manifest(const fs::path& path) {
    const std::string text = read_file(path);
    DatasetManifest m;

    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool with_source = false;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            if (line == kHeader) with_source = false;
            else if (line == kHeaderWithSource) with_source = true;
            else throw ParseError(lineno, "unexpected header '" + line + "'");
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> f;
        try {
            f = csv::split(line);
        } catch (const std::invalid_argument& e) {
            throw ParseError(lineno, e.what());
        }
        const std::size_t expected = with_source ? 6 : 5;
        if (f.size() != expected) {
            throw ParseError(lineno, "expected " + std::to_string(expected) + " fields, got " +
                                         std::to_string(f.size()));
        }
        Sample s;
        s.id = f[0];
        if (s.id.empty()) throw ParseError(lineno, "empty id");
        s.image_ref = f[1];
        try {
            s.split = parse_split(f[2]);
        } catch (const std::invalid_argument& e) {
            throw ParseError(lineno, e.what());
        }
        s.true_label = parse_label_field(f[3], lineno, "true_label");
        s.assigned_label = parse_label_field(f[4], lineno, "assigned_label");
        if (with_source) {
            s.label_source = f[5];
            try {
                label_origin(s.label_source);
            } catch (const std::invalid_argument& e) {
                throw ParseError(lineno, e.what());
            }
        }
        if (!seen.insert(s.id).second) {
            throw DuplicateIdError("line " + std::to_string(lineno) + ": duplicate id '" + s.id + "'");
        }
        m.samples.push_back(std::move(s));
    }
    if (lineno == 0) throw ParseError(1, "empty file");

    const fs::path mp = meta_path(path);
    if (fs::exists(mp)) {
        json meta;
        try {
            meta = json::parse(read_file(mp));
            m.class_names = meta.at("class_names").get<std::array<std::string, 2>>();
            m.source_root = meta.at("source_root").get<std::string>();
            m.created_at = meta.at("created_at").get<std::string>();
        } catch (const json::exception& e) {
            throw ParseError(1, mp.string() + ": " + e.what());
        }
    } else {
        m.source_root = fs::weakly_canonical(path).parent_path();
    }
    return m;
}

void assign_label(DatasetManifest& manifest, const std::string& id, Label label,
                  std::string label_source) {
    if (!is_valid_label(label)) throw RangeError("label must be 0 or 1");
    Sample* s = manifest.find(id);
    if (!s) throw NotFoundError("unknown sample id '" + id + "'");
    if (s->assigned_label) {
        throw LabelOverwriteError("sample '" + id + "' already labeled by '" + s->label_source +
                                  "'; use an explicit correction");
    }
    s->assigned_label = label;
    s->label_source = std::move(label_source);
}

void correct_label(DatasetManifest& manifest, const std::string& id, Label label,
                   std::string label_source) {
    if (!is_valid_label(label)) throw RangeError("label must be 0 or 1");
    Sample* s = manifest.find(id);
    if (!s) throw NotFoundError("unknown sample id '" + id + "'");
    if (label_origin(label_source) < label_origin(s->label_source)) {
        throw LabelOverwriteError("a '" + label_source + "' label cannot replace a '" +
                                  s->label_source + "' label on '" + id + "'");
    }
    s->assigned_label = label;
    s->label_source = std::move(label_source);
}

PoolState init_pools(DatasetManifest& manifest, std::size_t seed_size, std::uint64_t rng_seed) {
    std::vector<std::string> train_ids;
    for (const auto& s : manifest.samples)
        if (s.split == Split::train) train_ids.push_back(s.id);
    if (seed_size > train_ids.size()) {
        throw RangeError("seed_size " + std::to_string(seed_size) + " exceeds train split size " +
                         std::to_string(train_ids.size()));
    }
    std::sort(train_ids.begin(), train_ids.end());
    IdIndex index(manifest);
    if (seed_size > 0) {
        for (const auto& id : train_ids) {
            if (!manifest.samples[index.at(id)].true_label) {
                throw MissingLabelError("train sample '" + id + "' has no true_label to seed from");
            }
        }
    }
    Rng rng(rng_seed);
    rng.shuffle(train_ids);
    PoolState pool;
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
        if (i < seed_size) {
            Sample& s = manifest.samples[index.at(train_ids[i])];
            if (!s.assigned_label) {
                s.assigned_label = s.true_label;
                s.label_source = "oracle";
            }
            pool.labeled_ids.insert(train_ids[i]);
        } else {
            pool.unlabeled_ids.insert(train_ids[i]);
        }
    }
    return pool;
}

PoolState pool_from_manifest(const DatasetManifest& manifest) {
    PoolState pool;
    for (const auto& s : manifest.samples) {
        if (s.split != Split::train) continue;
        (s.assigned_label ? pool.labeled_ids : pool.unlabeled_ids).insert(s.id);
    }
    return pool;
}

void check_manifest(const DatasetManifest& manifest) {
    std::set<std::string> ids;
    for (const auto& s : manifest.samples) {
        if (!ids.insert(s.id).second) throw IntegrityError("id '" + s.id + "' appears more than once");
    }
}

void check_pool(const DatasetManifest& manifest, const PoolState& pool) {
    for (const auto& id : pool.labeled_ids) {
        if (pool.unlabeled_ids.count(id)) throw IntegrityError("id '" + id + "' is in both pools");
    }
    std::size_t train = 0;
    for (const auto& s : manifest.samples) {
        if (s.split != Split::train) {
            if (pool.labeled_ids.count(s.id) || pool.unlabeled_ids.count(s.id)) {
                throw IntegrityError("non-train id '" + s.id + "' in pool");
            }
            continue;
        }
        ++train;
        bool labeled = pool.labeled_ids.count(s.id) != 0;
        if (!labeled && !pool.unlabeled_ids.count(s.id)) {
            throw IntegrityError("train id '" + s.id + "' missing from pool");
        }
        if (labeled && !s.assigned_label) {
            throw IntegrityError("labeled id '" + s.id + "' has no assigned label");
        }
    }
    if (pool.size() != train) throw IntegrityError("pool size differs from train split size");
}

ImageTensor preprocess_image(const Sample& sample, const PreprocessConfig& cfg) {
    if (cfg.side <= 0) throw RangeError("preprocess side must be positive");
    std::string bytes;
    try {
        bytes = read_file(sample.image_ref);
    } catch (const Error& e) {
        throw DecodeError(sample.id, e.what());
    }
    if (bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
        static_cast<unsigned char>(bytes[1]) == 0xD8) {
        // libjpeg silently pads truncated streams; require the EOI marker.
        std::size_t end = bytes.size();
        while (end > 2 && bytes[end - 1] == '\0') --end;
        if (end < 4 || static_cast<unsigned char>(bytes[end - 2]) != 0xFF ||
            static_cast<unsigned char>(bytes[end - 1]) != 0xD9) {
            throw DecodeError(sample.id, "truncated JPEG stream");
        }
    }
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, bytes.data());
    cv::Mat img = cv::imdecode(raw, cv::IMREAD_COLOR);
    if (img.empty()) throw DecodeError(sample.id, "unsupported or corrupt image data");

    cv::Mat rgb;
    cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
    if (rgb.rows != cfg.side || rgb.cols != cfg.side) {
        const bool shrinking = rgb.rows > cfg.side || rgb.cols > cfg.side;
        cv::resize(rgb, rgb, cv::Size(cfg.side, cfg.side), 0, 0,
                   shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    }

    ImageTensor t;
    t.height = cfg.side;
    t.width = cfg.side;
    t.channels = 3;
    t.data.resize(static_cast<std::size_t>(cfg.side) * cfg.side * 3);
    for (int y = 0; y < cfg.side; ++y) {
        const auto* row = rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < cfg.side; ++x) {
            for (int c = 0; c < 3; ++c) {
                float v = static_cast<float>(row[x][c]) / 255.0f;
                t.data[(static_cast<std::size_t>(y) * cfg.side + x) * 3 + c] =
                    (v - cfg.mean[static_cast<std::size_t>(c)]) / cfg.stddev[static_cast<std::size_t>(c)];
            }
        }
    }
    return t;
}

}  // namespace amal
