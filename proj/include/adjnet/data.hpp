#pragma once

// Image datasets (CIFAR-10 binary batches, MNIST IDX), deterministic subsets,
// batch assembly and training-time augmentation.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace adjnet {

/// Raw 8-bit images stored as [N, C, H, W] plus integer labels.
struct Dataset {
    std::string name;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 10;
    std::vector<std::uint8_t> pixels;
    std::vector<std::uint8_t> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return {pixels.data() + i * image_size(), image_size()};
    }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
           (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

}  // namespace detail

inline constexpr std::size_t cifar_record_bytes = 1 + 3 * 32 * 32;

/// Appends the records of one CIFAR-10 binary batch file.
inline void append_cifar10_file(Dataset& ds, const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    if (bytes.empty() || bytes.size() % cifar_record_bytes != 0) {
        const std::size_t whole = bytes.size() / cifar_record_bytes;
        throw FormatError(path.string() + ": expected a multiple of " + std::to_string(cifar_record_bytes) +
                          " bytes, got " + std::to_string(bytes.size()) + " (expected " +
                          std::to_string((whole + 1) * cifar_record_bytes) +
                          "); incomplete record at byte offset " +
                          std::to_string(whole * cifar_record_bytes));
    }
    const std::size_t n = bytes.size() / cifar_record_bytes;
    ds.pixels.reserve(ds.pixels.size() + n * (cifar_record_bytes - 1));
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t off = r * cifar_record_bytes;
        if (bytes[off] > 9) {
            throw FormatError(path.string() + ": label " + std::to_string(bytes[off]) +
                              " out of range at byte offset " + std::to_string(off));
        }
        ds.labels.push_back(bytes[off]);
        ds.pixels.insert(ds.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                         bytes.begin() + static_cast<std::ptrdiff_t>(off + cifar_record_bytes));
    }
}

enum class Split { train, test };

/// Loads a CIFAR-10 batch file, or from a directory the training batches
/// (data_batch_*.bin, in name order) or test_batch.bin.
inline Dataset load_cifar10(const std::filesystem::path& path, Split split = Split::train) {
    Dataset ds;
    ds.name = "cifar10";
    if (!std::filesystem::is_directory(path)) {
        append_cifar10_file(ds, path);
        return ds;
    }
    std::vector<std::filesystem::path> files;
    if (split == Split::test) {
        files.push_back(path / "test_batch.bin");
    } else {
        for (const auto& e : std::filesystem::directory_iterator(path)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("data_batch_", 0) == 0 && e.path().extension() == ".bin") {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
    }
    if (files.empty()) {
        throw FormatError(path.string() + ": no CIFAR-10 batch files found");
    }
    for (const auto& f : files) {
        append_cifar10_file(ds, f);
    }
    return ds;
}

/// Writes a dataset in the CIFAR-10 binary record layout.
inline void save_cifar10(const Dataset& ds, const std::filesystem::path& path) {
    if (ds.channels != 3 || ds.height != 32 || ds.width != 32) {
        throw FormatError("save_cifar10: images must be 3x32x32");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.put(static_cast<char>(ds.labels[i]));
        const auto img = ds.image(i);
        out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
}

/// Loads an IDX image/label file pair; grayscale is replicated to 3 channels.
inline Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto ib = detail::read_file(images);
    const auto lb = detail::read_file(labels);
    if (ib.size() < 16 || detail::read_be32(ib, 0) != 2051) {
        throw FormatError(images.string() + ": bad IDX image magic at byte offset 0");
    }
    if (lb.size() < 8 || detail::read_be32(lb, 0) != 2049) {
        throw FormatError(labels.string() + ": bad IDX label magic at byte offset 0");
    }
    const std::size_t n = detail::read_be32(ib, 4);
    const std::size_t rows = detail::read_be32(ib, 8);
    const std::size_t cols = detail::read_be32(ib, 12);
    const std::size_t expect_i = 16 + n * rows * cols;
    if (ib.size() != expect_i) {
        throw FormatError(images.string() + ": expected " + std::to_string(expect_i) + " bytes, got " +
                          std::to_string(ib.size()));
    }
    if (detail::read_be32(lb, 4) != n || lb.size() != 8 + n) {
        throw FormatError(labels.string() + ": expected " + std::to_string(8 + n) + " bytes for " +
                          std::to_string(n) + " labels, got " + std::to_string(lb.size()));
    }
    Dataset ds;
    ds.name = "mnist";
    ds.height = rows;
    ds.width = cols;
    const std::size_t plane = rows * cols;
    ds.pixels.resize(n * 3 * plane);
    for (std::size_t i = 0; i < n; ++i) {
        if (lb[8 + i] > 9) {
            throw FormatError(labels.string() + ": label out of range at byte offset " + std::to_string(8 + i));
        }
        ds.labels.push_back(lb[8 + i]);
        const auto* src = ib.data() + 16 + i * plane;
        for (std::size_t c = 0; c < 3; ++c) {
            std::copy(src, src + plane, ds.pixels.begin() + static_cast<std::ptrdiff_t>((i * 3 + c) * plane));
        }
    }
    return ds;
}

/// MNIST from a directory holding the standard four IDX files.
inline Dataset load_mnist(const std::filesystem::path& dir, Split split = Split::train) {
    const std::string prefix = split == Split::train ? "train" : "t10k";
    return load_mnist_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
}

/// The first `per_class` samples of each class, in file order.
inline Dataset subset_per_class(const Dataset& ds, std::size_t per_class) {
    Dataset out = ds;
    out.pixels.clear();
    out.labels.clear();
    std::vector<std::size_t> taken(ds.num_classes, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto l = ds.labels[i];
        if (taken[l] < per_class) {
            ++taken[l];
            out.labels.push_back(l);
            const auto img = ds.image(i);
            out.pixels.insert(out.pixels.end(), img.begin(), img.end());
        }
    }
    return out;
}

/// Undecoded images of one batch.
struct RawBatch {
    std::size_t channels = 3, height = 32, width = 32;
    std::vector<std::uint8_t> pixels;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

inline RawBatch gather(const Dataset& ds, std::span<const std::size_t> indices) {
    RawBatch b{ds.channels, ds.height, ds.width, {}, {}};
    b.pixels.reserve(indices.size() * ds.image_size());
    for (auto i : indices) {
        if (i >= ds.size()) {
            throw ContractError("gather: index " + std::to_string(i) + " out of range");
        }
        const auto img = ds.image(i);
        b.pixels.insert(b.pixels.end(), img.begin(), img.end());
        b.labels.push_back(ds.labels[i]);
    }
    return b;
}

template <class T>
struct DatasetBatch {
    Tensor<T> images;                 // [N, C, H, W], normalized
    Tensor<T> labels;                 // [N, n_c], one-hot
    std::vector<std::size_t> classes; // label indices
};

struct AugmentPolicy {
    double flip_prob = 0.5;
    std::size_t pad = 4;  // reflect-pad then random crop back to size; 0 disables
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};

    static AugmentPolicy for_dataset(const std::string& name) {
        AugmentPolicy p;
        if (name == "mnist") {
            p.flip_prob = 0.0;
            p.pad = 0;
        }
        return p;
    }
};

/// Mirrors every image left-right.
inline RawBatch hflip(RawBatch b) {
    for (std::size_t row = 0; row < b.size() * b.channels * b.height; ++row) {
        auto first = b.pixels.begin() + static_cast<std::ptrdiff_t>(row * b.width);
        std::reverse(first, first + static_cast<std::ptrdiff_t>(b.width));
    }
    return b;
}

/// /255 then per-channel (x - mean) / std; labels become one-hot rows.
template <class T>
DatasetBatch<T> normalize(const RawBatch& b, std::size_t num_classes, const AugmentPolicy& policy = {}) {
    const std::size_t plane = b.height * b.width;
    std::vector<T> img(b.pixels.size());
    for (std::size_t n = 0; n < b.size(); ++n) {
        for (std::size_t c = 0; c < b.channels; ++c) {
            const double m = policy.mean[c % 3];
            const double s = policy.std[c % 3];
            const std::size_t base = (n * b.channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                img[base + i] = static_cast<T>((b.pixels[base + i] / 255.0 - m) / s);
            }
        }
    }
    std::vector<T> onehot(b.size() * num_classes, T(0));
    for (std::size_t n = 0; n < b.size(); ++n) {
        if (b.labels[n] >= num_classes) {
            throw ContractError("normalize: label " + std::to_string(b.labels[n]) + " >= classes");
        }
        onehot[n * num_classes + b.labels[n]] = T(1);
    }
    return {Tensor<T>({b.size(), b.channels, b.height, b.width}, std::move(img)),
            Tensor<T>({b.size(), num_classes}, std::move(onehot)), b.labels};
}

/// Random horizontal flip and reflect-pad + crop, then normalization. Draws
/// one flip decision and (when padding) two crop offsets per image.
template <class T>
DatasetBatch<T> augment(const RawBatch& b, Rng& rng, const AugmentPolicy& policy, std::size_t num_classes) {
    RawBatch out = b;
    const std::size_t H = b.height, W = b.width, plane = H * W;
    const auto reflect = [](std::ptrdiff_t u, std::size_t n) {
        const auto len = static_cast<std::ptrdiff_t>(n);
        if (u < 0) u = -u;
        if (u >= len) u = 2 * len - 2 - u;
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(u, 0, len - 1));
    };
    for (std::size_t n = 0; n < b.size(); ++n) {
        const bool flip = rng.bernoulli(policy.flip_prob);
        std::size_t oy = policy.pad, ox = policy.pad;
        if (policy.pad > 0) {
            oy = static_cast<std::size_t>(rng.below(2 * policy.pad + 1));
            ox = static_cast<std::size_t>(rng.below(2 * policy.pad + 1));
        }
        const auto shift_y = static_cast<std::ptrdiff_t>(oy) - static_cast<std::ptrdiff_t>(policy.pad);
        const auto shift_x = static_cast<std::ptrdiff_t>(ox) - static_cast<std::ptrdiff_t>(policy.pad);
        for (std::size_t c = 0; c < b.channels; ++c) {
            const std::size_t base = (n * b.channels + c) * plane;
            for (std::size_t y = 0; y < H; ++y) {
                const std::size_t sy = reflect(static_cast<std::ptrdiff_t>(y) + shift_y, H);
                for (std::size_t x = 0; x < W; ++x) {
                    std::size_t sx = reflect(static_cast<std::ptrdiff_t>(x) + shift_x, W);
                    if (flip) {
                        sx = W - 1 - sx;
                    }
                    out.pixels[base + y * W + x] = b.pixels[base + sy * W + sx];
                }
            }
        }
    }
    return normalize<T>(out, num_classes, policy);
}

/// Class-dependent noisy patterns in the CIFAR layout; handy for smoke runs.
inline Dataset synthetic_dataset(std::size_t per_class, std::uint64_t seed, std::size_t num_classes = 10) {
    Dataset ds;
    ds.name = "synthetic";
    ds.num_classes = num_classes;
    Rng rng(seed);
    for (std::size_t i = 0; i < per_class; ++i) {
        for (std::size_t k = 0; k < num_classes; ++k) {
            ds.labels.push_back(static_cast<std::uint8_t>(k));
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t y = 0; y < 32; ++y) {
                    for (std::size_t x = 0; x < 32; ++x) {
                        const double stripe = ((x + y * k) / (2 + k % 4)) % 2 == 0 ? 60.0 : -60.0;
                        const double tint = (c == k % 3) ? 40.0 : 0.0;
                        const double v = 128.0 + stripe + tint + 30.0 * rng.normal();
                        ds.pixels.push_back(static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)));
                    }
                }
            }
        }
    }
    return ds;
}

}  // namespace adjnet
