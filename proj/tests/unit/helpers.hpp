#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "voxcomp/corpus.hpp"
#include "voxcomp/voxel.hpp"

namespace vc_test {

inline voxcomp::ClassTable table_for(int max_label) {
    voxcomp::ClassTable t;
    for (int c = 1; c <= max_label; ++c) t[c] = "c" + std::to_string(c);
    return t;
}

inline voxcomp::LabelVolume random_labels(voxcomp::Shape3 shape, int max_label, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, max_label);
    std::vector<std::uint8_t> data(static_cast<std::size_t>(shape.voxels()));
    for (auto& v : data) v = static_cast<std::uint8_t>(d(rng));
    return voxcomp::LabelVolume(shape, std::move(data), {1.0, 1.0, 1.0}, table_for(max_label));
}

inline voxcomp::BinaryVolume random_binary(voxcomp::Shape3 shape, double p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution d(p);
    std::vector<std::uint8_t> data(static_cast<std::size_t>(shape.voxels()));
    for (auto& v : data) v = d(rng) ? 1 : 0;
    return voxcomp::BinaryVolume(shape, std::move(data));
}

/// Fresh scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("voxcomp_test_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Phantom subjects on a small grid with ribs/spine protected.
inline std::vector<voxcomp::Subject> small_phantoms(int count, std::uint64_t seed, int n = 24) {
    return voxcomp::generate_phantoms(voxcomp::default_phantom_spec({n, n, n}), count, seed);
}

}  // namespace vc_test
