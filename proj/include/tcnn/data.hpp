#pragma once

// Image classification datasets: an in-memory Dataset container with
// batching, optional resolution resampling and horizontal-flip augmentation,
// a deterministic synthetic shapes dataset, and a CIFAR-10 binary loader.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "tcnn/tensor.hpp"

namespace tcnn {

template <typename T>
struct Dataset {
    std::size_t channels = 3, height = 32, width = 32;
    std::vector<std::vector<T>> images;  // CHW, already normalized
    std::vector<int> labels;
    std::size_t n_classes = 10;

    std::size_t size() const { return images.size(); }

    // Assemble a [B,C,res,res] batch. resolution 0 keeps the native size;
    // other values resample bilinearly. When rng is given each image is
    // mirrored horizontally with probability 1/2.
    std::pair<Tensor<T>, std::vector<int>> batch(
        const std::vector<std::size_t>& idx, std::size_t resolution = 0,
        bool augment = false, std::mt19937_64* rng = nullptr) const {
        std::size_t res_h = resolution ? resolution : height;
        std::size_t res_w = resolution ? resolution : width;
        std::size_t B = idx.size();
        Tensor<T> x = Tensor<T>::zeros({B, channels, res_h, res_w});
        std::vector<int> y(B);
        T* out = x.data().data();
        std::bernoulli_distribution coin(0.5);
        for (std::size_t b = 0; b < B; ++b) {
            check(idx[b] < images.size(), "Dataset::batch: index out of range");
            const std::vector<T>& img = images[idx[b]];
            y[b] = labels[idx[b]];
            bool flip = augment && rng && coin(*rng);
            for (std::size_t c = 0; c < channels; ++c) {
                const T* src = img.data() + c * height * width;
                T* dst = out + (b * channels + c) * res_h * res_w;
                for (std::size_t i = 0; i < res_h; ++i) {
                    for (std::size_t j = 0; j < res_w; ++j) {
                        std::size_t jj = flip ? res_w - 1 - j : j;
                        if (res_h == height && res_w == width) {
                            dst[i * res_w + j] = src[i * width + jj];
                        } else {
                            double fy = (height > 1 && res_h > 1)
                                            ? static_cast<double>(i) *
                                                  (height - 1) / (res_h - 1)
                                            : 0.0;
                            double fx = (width > 1 && res_w > 1)
                                            ? static_cast<double>(jj) *
                                                  (width - 1) / (res_w - 1)
                                            : 0.0;
                            std::size_t y0 = static_cast<std::size_t>(fy);
                            std::size_t x0 = static_cast<std::size_t>(fx);
                            std::size_t y1 = std::min(y0 + 1, height - 1);
                            std::size_t x1 = std::min(x0 + 1, width - 1);
                            double wy = fy - y0, wx = fx - x0;
                            double v =
                                (1 - wy) * ((1 - wx) * src[y0 * width + x0] +
                                            wx * src[y0 * width + x1]) +
                                wy * ((1 - wx) * src[y1 * width + x0] +
                                      wx * src[y1 * width + x1]);
                            dst[i * res_w + j] = static_cast<T>(v);
                        }
                    }
                }
            }
        }
        return {x, y};
    }
};

// ---------------------------------------------------------------------------
// Synthetic shapes: 10 classes = 5 shapes x 2 color schemes, drawn with
// per-sample jitter on a noisy background. Every sample is a pure function
// of (seed, index); labels cycle so any prefix is class-balanced.

namespace detail {

inline bool shape_hit(int shape, double u, double v) {
    // u, v in [-1, 1] relative to the shape center; footprint radius ~1.
    double au = std::abs(u), av = std::abs(v);
    switch (shape) {
        case 0: return u * u + v * v <= 1.0;                     // disc
        case 1: return au <= 0.82 && av <= 0.82;                 // square
        case 2: return au + av <= 1.1;                           // diamond
        case 3: return v >= -0.8 && au <= 0.55 * (1.0 - v);      // triangle
        default: {                                               // ring
            double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.30;
        }
    }
}

}  // namespace detail

template <typename T>
Dataset<T> gen_synthetic(std::size_t n, std::size_t resolution = 32,
                         std::size_t n_classes = 10, std::uint64_t seed = 0) {
    check(n > 0 && resolution > 0 && n_classes > 0 && n_classes <= 10,
          "gen_synthetic: need positive sizes and at most 10 classes");
    Dataset<T> d;
    d.height = d.width = resolution;
    d.n_classes = n_classes;
    d.images.reserve(n);
    d.labels.reserve(n);
    const double R = static_cast<double>(resolution);
    for (std::size_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % n_classes);
        int shape = label % 5;
        int scheme = label / 5;
        std::mt19937_64 rng(seed ^ (0x5851f42d4c957f2dULL * (i + 1)));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> gauss(0.0, 1.0);
        double cx = R * (0.30 + 0.40 * unif(rng));
        double cy = R * (0.30 + 0.40 * unif(rng));
        double radius = R * (0.14 + 0.10 * unif(rng));
        // color scheme 0: warm shape / cool bg tint; scheme 1: reversed
        std::array<double, 3> fg, bg;
        double m = 0.25 * unif(rng);
        if (scheme == 0) {
            fg = {0.85, 0.35 + m, 0.15};
            bg = {0.15, 0.35, 0.65 + m};
        } else {
            fg = {0.15, 0.55 + m, 0.85};
            bg = {0.65 + m, 0.35, 0.15};
        }
        std::vector<T> img(3 * resolution * resolution);
        for (std::size_t y = 0; y < resolution; ++y) {
            for (std::size_t x = 0; x < resolution; ++x) {
                double u = (x + 0.5 - cx) / radius;
                double v = (y + 0.5 - cy) / radius;
                bool hit = detail::shape_hit(shape, u, v);
                for (std::size_t c = 0; c < 3; ++c) {
                    double base = hit ? fg[c] : bg[c];
                    double val = base + 0.08 * gauss(rng);
                    // roughly zero-mean unit-ish scale after normalization
                    img[c * resolution * resolution + y * resolution + x] =
                        static_cast<T>((val - 0.45) / 0.25);
                }
            }
        }
        d.images.push_back(std::move(img));
        d.labels.push_back(label);
    }
    return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 1 label byte + 3072 pixel bytes.

template <typename T>
Dataset<T> load_cifar10(const std::vector<std::string>& files) {
    Dataset<T> d;
    constexpr std::size_t kRecord = 3073;
    constexpr double kMean[3] = {0.4914, 0.4822, 0.4465};
    constexpr double kStd[3] = {0.2470, 0.2435, 0.2616};
    for (const auto& path : files) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open " + path);
        std::vector<char> blob((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
        if (blob.empty() || blob.size() % kRecord != 0)
            throw std::runtime_error(path + ": size " +
                                     std::to_string(blob.size()) +
                                     " is not a multiple of 3073");
        for (std::size_t r = 0; r < blob.size() / kRecord; ++r) {
            const unsigned char* rec = reinterpret_cast<const unsigned char*>(
                blob.data() + r * kRecord);
            int label = rec[0];
            if (label < 0 || label >= 10)
                throw std::runtime_error(path + ": bad label " +
                                         std::to_string(label) + " in record " +
                                         std::to_string(r));
            std::vector<T> img(3072);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t p = 0; p < 1024; ++p)
                    img[c * 1024 + p] = static_cast<T>(
                        (rec[1 + c * 1024 + p] / 255.0 - kMean[c]) / kStd[c]);
            d.images.push_back(std::move(img));
            d.labels.push_back(label);
        }
    }
    return d;
}

}  // namespace tcnn
