#include <cstdio>
#include <random>

#include <png.h>

#include "voxcomp/error.hpp"
#include "voxcomp/evalkit.hpp"
#include "voxcomp/io.hpp"

namespace voxcomp {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Plane p) {
    switch (p) {
        case Plane::coronal: return "coronal";
        case Plane::axial: return "axial";
        case Plane::sagittal: return "sagittal";
    }
    return "?";
}

Plane plane_from_string(const std::string& s) {
    for (auto p : {Plane::coronal, Plane::axial, Plane::sagittal})
        if (to_string(p) == s) return p;
    throw UsageError("invalid plane '" + s + "' (coronal, axial, sagittal)");
}

std::string to_string(VoxelCategory c) {
    switch (c) {
        case VoxelCategory::background: return "background";
        case VoxelCategory::input_overlap: return "input_overlap";
        case VoxelCategory::reconstructed_missing: return "reconstructed_missing";
        case VoxelCategory::false_negative: return "false_negative";
        case VoxelCategory::false_positive: return "false_positive";
    }
    return "?";
}

VoxelCategory classify_voxel(bool input, bool truth, bool completion) noexcept {
    if (completion && input) return VoxelCategory::input_overlap;
    if (completion && truth) return VoxelCategory::reconstructed_missing;
    if (completion) return VoxelCategory::false_positive;
    if (truth || input) return VoxelCategory::false_negative;
    return VoxelCategory::background;
}

namespace {

constexpr Rgb kGap{24, 24, 24};
constexpr int kGapPx = 2;

// Image axes per plane: the slice normal, the row axis (drawn top-down from
// the high end) and the column axis. Axes: 0 = L, 1 = W, 2 = H.
struct PlaneAxes {
    int normal, row, col;
    bool flip_rows;
};

PlaneAxes axes_of(Plane p) {
    switch (p) {
        case Plane::coronal: return {1, 2, 0, true};
        case Plane::axial: return {2, 1, 0, false};
        case Plane::sagittal: return {0, 2, 1, true};
    }
    return {1, 2, 0, true};
}

void write_png(const fs::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::mt19937_64 rd(std::random_device{}());
    const fs::path tmp = path.string() + ".tmp" + std::to_string(rd() % 1000000);
    FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw IoError("cannot write " + tmp.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        fs::remove(tmp);
        throw IoError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fclose(f) != 0) throw IoError("cannot write " + tmp.string());
    fs::rename(tmp, path);
}

}  // namespace

RenderResult render_slices(const BinaryVolume& input, const BinaryVolume& truth, const BinaryVolume& completion,
                           Plane plane, const fs::path& path, const RenderOptions& options) {
    const Shape3 shape = truth.shape();
    if (input.shape() != shape || completion.shape() != shape)
        throw ShapeError("render: input " + input.shape().str() + ", truth " + shape.str() + ", completion " +
                         completion.shape().str() + " differ");
    if (options.scale < 1 || options.columns < 1 || options.tiles < 1)
        throw UsageError("render: scale, columns and tiles must be positive");
    const auto ax = axes_of(plane);
    const std::int64_t n_normal = shape[ax.normal], n_rows = shape[ax.row], n_cols = shape[ax.col];

    RenderResult result;
    result.path = path;
    if (options.slices.empty()) {
        const std::int64_t k = std::min<std::int64_t>(options.tiles, n_normal);
        for (std::int64_t i = 0; i < k; ++i) result.slices.push_back(static_cast<int>(((2 * i + 1) * n_normal) / (2 * k)));
    } else {
        for (int s : options.slices)
            if (s < 0 || s >= n_normal)
                throw UsageError("render: slice " + std::to_string(s) + " outside [0, " + std::to_string(n_normal) + ")");
        result.slices = options.slices;
    }

    const int tiles = static_cast<int>(result.slices.size());
    const int cols = std::min(options.columns, tiles);
    const int rows = (tiles + cols - 1) / cols;
    const int tile_w = static_cast<int>(n_cols) * options.scale, tile_h = static_cast<int>(n_rows) * options.scale;
    const int width = cols * tile_w + (cols - 1) * kGapPx, height = rows * tile_h + (rows - 1) * kGapPx;
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
    for (std::size_t i = 0; i < rgb.size(); i += 3) {
        rgb[i] = kGap.r;
        rgb[i + 1] = kGap.g;
        rgb[i + 2] = kGap.b;
    }

    for (int t = 0; t < tiles; ++t) {
        const int ox = (t % cols) * (tile_w + kGapPx), oy = (t / cols) * (tile_h + kGapPx);
        for (std::int64_t r = 0; r < n_rows; ++r)
            for (std::int64_t c = 0; c < n_cols; ++c) {
                std::array<std::int64_t, 3> idx{};
                idx[static_cast<std::size_t>(ax.normal)] = result.slices[static_cast<std::size_t>(t)];
                idx[static_cast<std::size_t>(ax.row)] = ax.flip_rows ? n_rows - 1 - r : r;
                idx[static_cast<std::size_t>(ax.col)] = c;
                const auto v = static_cast<std::size_t>(shape.index(idx[0], idx[1], idx[2]));
                const auto cat = classify_voxel(input.data()[v], truth.data()[v], completion.data()[v]);
                ++result.counts[static_cast<std::size_t>(cat)];
                const Rgb col = kCategoryColors[static_cast<std::size_t>(cat)];
                for (int dy = 0; dy < options.scale; ++dy)
                    for (int dx = 0; dx < options.scale; ++dx) {
                        const std::size_t px =
                            (static_cast<std::size_t>(oy + r * options.scale + dy) * width + ox + c * options.scale + dx) * 3;
                        rgb[px] = col.r;
                        rgb[px + 1] = col.g;
                        rgb[px + 2] = col.b;
                    }
            }
    }
    write_png(path, width, height, rgb);

    json legend{{"plane", to_string(plane)}, {"slices", result.slices}, {"scale", options.scale}};
    json cats = json::array();
    for (std::size_t c = 0; c < kCategoryColors.size(); ++c) {
        const auto& col = kCategoryColors[c];
        cats.push_back({{"category", to_string(static_cast<VoxelCategory>(c))},
                        {"rgb", {col.r, col.g, col.b}},
                        {"voxels", result.counts[c]}});
    }
    legend["categories"] = cats;
    write_file_atomic(path.string() + ".legend.json", legend.dump(2) + "\n");
    return result;
}

}  // namespace voxcomp
