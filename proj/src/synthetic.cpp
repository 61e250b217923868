#include "amal/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "amal/errors.hpp"
#include "amal/util.hpp"

namespace amal {

namespace {

cv::Mat render(int side, Label label, double noise, double overlap, Rng& rng) {
    cv::Mat img(side, side, CV_32FC1, cv::Scalar(18.0));
    const double s = side / 64.0;

    // Shape parameters: each class draws from its own range, and `overlap`
    // drags a fraction of samples close to (never across) the class boundary.
    const bool hard = rng.uniform01() < overlap;
    double aspect = label == 1 ? rng.uniform(1.9, 2.8) : rng.uniform(1.0, 1.35);
    int spatter = label == 1 ? 3 + static_cast<int>(rng.below(4)) : 0;
    if (hard) {
        aspect = label == 1 ? rng.uniform(1.6, 1.9) : rng.uniform(1.3, 1.5);
        spatter = label == 1 ? 1 : 0;
    }

    const cv::Point2d centre(side / 2.0 + rng.uniform(-4, 4) * s, side / 2.0 + rng.uniform(-4, 4) * s);
    const double minor = rng.uniform(6.0, 8.0) * s;
    const double angle = rng.uniform(-25.0, 25.0);
    const double peak = rng.uniform(200.0, 240.0);
    // Soft pool: a few nested ellipses approximate a radial falloff.
    for (int k = 4; k >= 1; --k) {
        const double f = k / 4.0;
        cv::ellipse(img, centre, cv::Size2d(minor * aspect * (0.6 + 0.4 * f) * 1.0, minor * (0.6 + 0.4 * f)), angle, 0,
                    360, cv::Scalar(peak * (1.15 - 0.25 * f)), cv::FILLED, cv::LINE_AA);
    }
    for (int i = 0; i < spatter; ++i) {
        const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double r = rng.uniform(14.0, 24.0) * s;
        const cv::Point2d p(centre.x + r * std::cos(theta), centre.y + r * std::sin(theta));
        cv::circle(img, p, static_cast<int>(std::max(1.0, rng.uniform(1.0, 2.5) * s)),
                   cv::Scalar(rng.uniform(150.0, 230.0)), cv::FILLED, cv::LINE_AA);
    }
    for (int y = 0; y < side; ++y) {
        auto* row = img.ptr<float>(y);
        for (int x = 0; x < side; ++x) row[x] += static_cast<float>(rng.normal() * noise);
    }
    cv::Mat out;
    img.convertTo(out, CV_8UC1);  // saturating
    return out;
}

}  // namespace

DatasetManifest write_synthetic_dataset(const std::filesystem::path& root, const SyntheticSpec& spec) {
    if (spec.side < 32) throw RangeError("synthetic side must be at least 32");
    if (spec.train_per_class <= 0 || spec.validation_per_class <= 0 || spec.test_per_class <= 0) {
        throw RangeError("synthetic split sizes must be positive");
    }
    if (spec.class_names[0] >= spec.class_names[1]) {
        throw RangeError("class names must sort in class-index order");
    }
    const std::array<std::pair<Split, int>, 3> splits{
        {{Split::train, spec.train_per_class},
         {Split::validation, spec.validation_per_class},
         {Split::test, spec.test_per_class}}};
    std::uint64_t stream = 0;
    for (const auto& [split, count] : splits) {
        for (Label label : {0, 1}) {
            const auto dir = root / std::string(to_string(split)) / spec.class_names[static_cast<std::size_t>(label)];
            std::filesystem::create_directories(dir);
            Rng rng(mix_seed(spec.seed, stream++));
            for (int i = 0; i < count; ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "%05d.png", i);
                const cv::Mat img = render(spec.side, label, spec.noise, spec.overlap, rng);
                if (!cv::imwrite((dir / name).string(), img)) throw IoError("cannot write " + (dir / name).string());
            }
        }
    }
    return scan_directory(root, ScanLayout::split_dirs);
}

}  // namespace amal
