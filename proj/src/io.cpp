#include "voxcomp/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

#include "voxcomp/error.hpp"

namespace voxcomp {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kHeaderSize = 348;
constexpr int kCommentExtension = 6;

// NIfTI datatype codes.
enum : short {
    dt_uint8 = 2,
    dt_int16 = 4,
    dt_int32 = 8,
    dt_float32 = 16,
    dt_float64 = 64,
    dt_int8 = 256,
    dt_uint16 = 512,
    dt_uint32 = 768,
};

class HeaderReader {
public:
    HeaderReader(const std::uint8_t* bytes, bool swap) : p_(bytes), swap_(swap) {}

    template <typename T>
    T get(std::size_t offset) const {
        std::array<std::uint8_t, sizeof(T)> raw;
        std::memcpy(raw.data(), p_ + offset, sizeof(T));
        if (swap_) std::reverse(raw.begin(), raw.end());
        T v;
        std::memcpy(&v, raw.data(), sizeof(T));
        return v;
    }

private:
    const std::uint8_t* p_;
    bool swap_;
};

template <typename T>
void put(std::vector<std::uint8_t>& buf, std::size_t offset, T v) {
    std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::vector<std::uint8_t> gz_read_all(const fs::path& path) {
    if (!fs::exists(path)) throw MissingFileError(path.string());
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::array<std::uint8_t, 1 << 16> chunk;
    for (;;) {
        const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
        if (n < 0) {
            int errnum = 0;
            std::string msg = gzerror(f, &errnum);
            gzclose(f);
            throw IoError("decompression failed for " + path.string() + ": " + msg);
        }
        if (n == 0) break;
        out.insert(out.end(), chunk.begin(), chunk.begin() + n);
    }
    gzclose(f);
    return out;
}

void gz_write_all(const fs::path& path, std::span<const std::uint8_t> bytes) {
    const bool compress = path.extension() == ".gz";
    const fs::path tmp = path.string() + ".tmp";
    gzFile f = gzopen(tmp.c_str(), compress ? "wb6" : "wT");
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - off, 1u << 24));
        if (gzwrite(f, bytes.data() + off, n) != static_cast<int>(n)) {
            gzclose(f);
            throw IoError("write failed for " + tmp.string());
        }
        off += n;
    }
    if (gzclose(f) != Z_OK) throw IoError("close failed for " + tmp.string());
    fs::rename(tmp, path);
}

Affine affine_from_qform(const HeaderReader& h, const std::array<float, 8>& pixdim) {
    const double b = h.get<float>(256), c = h.get<float>(260), d = h.get<float>(264);
    double a = 1.0 - (b * b + c * c + d * d);
    a = a < 1e-7 ? 0.0 : std::sqrt(a);
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    const double r[3][3] = {
        {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
        {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
        {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b},
    };
    const double scale[3] = {pixdim[1], pixdim[2], qfac * pixdim[3]};
    Affine out{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) out[i][j] = r[i][j] * scale[j];
        out[i][3] = h.get<float>(268 + 4 * i);
    }
    return out;
}

template <typename T>
void decode_labels(const std::uint8_t* src, std::size_t n, bool swap, double slope, double inter,
                   std::vector<double>& out) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::array<std::uint8_t, sizeof(T)> raw;
        std::memcpy(raw.data(), src + i * sizeof(T), sizeof(T));
        if (swap) std::reverse(raw.begin(), raw.end());
        T v;
        std::memcpy(&v, raw.data(), sizeof(T));
        out[i] = static_cast<double>(v) * slope + inter;
    }
}

json class_table_json(const ClassTable& table) {
    json j = json::object();
    for (const auto& [id, name] : table) j[std::to_string(id)] = name;
    return j;
}

ClassTable class_table_from_json(const json& j) {
    ClassTable table;
    for (const auto& [key, value] : j.items()) table[std::stoi(key)] = value.get<std::string>();
    return table;
}

json affine_json(const Affine& a) {
    json rows = json::array();
    for (const auto& r : a) rows.push_back(json(std::vector<double>(r.begin(), r.end())));
    return rows;
}

Affine affine_from_json(const json& j) {
    Affine a{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) a[r][c] = j.at(r).at(c).get<double>();
    return a;
}

std::vector<std::uint8_t> encode_nifti(Shape3 shape, std::span<const std::uint8_t> data, const Spacing& spacing,
                                       const Affine& affine, const ClassTable& table) {
    std::string ext_payload = json{{"voxcomp_class_table", class_table_json(table)}}.dump();
    ext_payload.push_back('\0');
    std::size_t esize = 8 + ext_payload.size();
    esize = (esize + 15) / 16 * 16;
    const std::size_t vox_offset = kHeaderSize + 4 + esize;

    std::vector<std::uint8_t> buf(vox_offset + data.size(), 0);
    put<std::int32_t>(buf, 0, kHeaderSize);
    buf[38] = 'r';
    std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(shape.l), static_cast<std::int16_t>(shape.w),
                                    static_cast<std::int16_t>(shape.h), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, dim[i]);
    put<std::int16_t>(buf, 70, dt_uint8);
    put<std::int16_t>(buf, 72, 8);
    std::array<float, 8> pixdim{1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                                static_cast<float>(spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) put<float>(buf, 76 + 4 * i, pixdim[i]);
    put<float>(buf, 108, static_cast<float>(vox_offset));
    put<float>(buf, 112, 1.0f);
    put<float>(buf, 116, 0.0f);
    buf[123] = 2;  // mm
    put<std::int16_t>(buf, 252, 0);
    put<std::int16_t>(buf, 254, 2);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) put<float>(buf, 280 + 16 * r + 4 * c, static_cast<float>(affine[r][c]));
    std::memcpy(buf.data() + 344, "n+1\0", 4);
    buf[348] = 1;
    put<std::int32_t>(buf, 352, static_cast<std::int32_t>(esize));
    put<std::int32_t>(buf, 356, kCommentExtension);
    std::memcpy(buf.data() + 360, ext_payload.data(), ext_payload.size());

    // (l, w, h) row-major -> i fastest.
    std::uint8_t* out = buf.data() + vox_offset;
    for (std::int64_t k = 0; k < shape.h; ++k)
        for (std::int64_t j = 0; j < shape.w; ++j)
            for (std::int64_t i = 0; i < shape.l; ++i) *out++ = data[static_cast<std::size_t>(shape.index(i, j, k))];
    return buf;
}

}  // namespace

LabelVolume load_nifti(const fs::path& path) {
    const auto bytes = gz_read_all(path);
    if (bytes.size() < kHeaderSize) throw IoError("malformed NIfTI header in " + path.string() + ": file too short");

    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, bytes.data(), 4);
    bool swap = false;
    if (sizeof_hdr != kHeaderSize) {
        if (static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr))) != kHeaderSize)
            throw IoError("malformed NIfTI header in " + path.string() + ": sizeof_hdr != 348");
        swap = true;
    }
    if (std::memcmp(bytes.data() + 344, "n+1", 3) != 0)
        throw IoError("malformed NIfTI header in " + path.string() + ": expected single-file magic 'n+1'");
    HeaderReader h(bytes.data(), swap);

    const auto ndim = h.get<std::int16_t>(40);
    if (ndim < 3 || ndim > 7) throw IoError("malformed NIfTI header in " + path.string() + ": dim[0] = " + std::to_string(ndim));
    Shape3 shape{h.get<std::int16_t>(42), h.get<std::int16_t>(44), h.get<std::int16_t>(46)};
    for (int d = 4; d <= ndim; ++d)
        if (h.get<std::int16_t>(40 + 2 * d) > 1)
            throw IoError("NIfTI file " + path.string() + " is not a single 3D volume");
    if (!shape.valid()) throw IoError("malformed NIfTI header in " + path.string() + ": empty grid");

    std::array<float, 8> pixdim;
    for (int i = 0; i < 8; ++i) pixdim[i] = h.get<float>(76 + 4 * i);
    Spacing spacing{std::abs(pixdim[1]), std::abs(pixdim[2]), std::abs(pixdim[3])};
    for (auto& s : spacing)
        if (!(s > 0.0)) s = 1.0;

    Affine affine;
    if (h.get<std::int16_t>(254) > 0) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) affine[r][c] = h.get<float>(280 + 16 * r + 4 * c);
    } else if (h.get<std::int16_t>(252) > 0) {
        affine = affine_from_qform(h, pixdim);
    } else {
        affine = diagonal_affine(spacing);
    }

    const auto vox_offset = static_cast<std::size_t>(h.get<float>(108));
    std::optional<ClassTable> table;
    if (bytes.size() >= kHeaderSize + 4 && bytes[348] != 0) {
        std::size_t off = kHeaderSize + 4;
        while (off + 8 <= vox_offset) {
            const auto esize = static_cast<std::size_t>(h.get<std::int32_t>(off));
            const auto ecode = h.get<std::int32_t>(off + 4);
            if (esize < 8 || off + esize > vox_offset) break;
            if (ecode == kCommentExtension) {
                const char* text = reinterpret_cast<const char*>(bytes.data() + off + 8);
                std::string payload(text, strnlen(text, esize - 8));
                auto j = json::parse(payload, nullptr, false);
                if (!j.is_discarded() && j.contains("voxcomp_class_table"))
                    table = class_table_from_json(j["voxcomp_class_table"]);
            }
            off += esize;
        }
    }

    const auto dtype = h.get<std::int16_t>(70);
    const auto n = static_cast<std::size_t>(shape.voxels());
    std::size_t elem = 0;
    switch (dtype) {
        case dt_uint8: case dt_int8: elem = 1; break;
        case dt_int16: case dt_uint16: elem = 2; break;
        case dt_int32: case dt_uint32: case dt_float32: elem = 4; break;
        case dt_float64: elem = 8; break;
        default: throw IoError("unsupported NIfTI datatype " + std::to_string(dtype) + " in " + path.string());
    }
    if (bytes.size() < vox_offset + n * elem) throw IoError("NIfTI file " + path.string() + " is truncated");

    double slope = h.get<float>(112), inter = h.get<float>(116);
    if (slope == 0.0 || !std::isfinite(slope)) {
        slope = 1.0;
        inter = 0.0;
    }
    if (!std::isfinite(inter)) inter = 0.0;
    std::vector<double> values;
    const std::uint8_t* src = bytes.data() + vox_offset;
    switch (dtype) {
        case dt_uint8: decode_labels<std::uint8_t>(src, n, swap, slope, inter, values); break;
        case dt_int8: decode_labels<std::int8_t>(src, n, swap, slope, inter, values); break;
        case dt_int16: decode_labels<std::int16_t>(src, n, swap, slope, inter, values); break;
        case dt_uint16: decode_labels<std::uint16_t>(src, n, swap, slope, inter, values); break;
        case dt_int32: decode_labels<std::int32_t>(src, n, swap, slope, inter, values); break;
        case dt_uint32: decode_labels<std::uint32_t>(src, n, swap, slope, inter, values); break;
        case dt_float32: decode_labels<float>(src, n, swap, slope, inter, values); break;
        case dt_float64: decode_labels<double>(src, n, swap, slope, inter, values); break;
    }

    std::vector<std::uint8_t> data(n);
    std::size_t idx = 0;
    for (std::int64_t k = 0; k < shape.h; ++k)
        for (std::int64_t j = 0; j < shape.w; ++j)
            for (std::int64_t i = 0; i < shape.l; ++i) {
                const double v = std::round(values[idx++]);
                if (v < 0 || v > 255)
                    throw IoError("label value " + std::to_string(v) + " outside [0, 255] in " + path.string());
                data[static_cast<std::size_t>(shape.index(i, j, k))] = static_cast<std::uint8_t>(v);
            }

    if (!table) {
        table = ClassTable{};
        std::array<bool, 256> seen{};
        for (auto v : data) seen[v] = true;
        for (int v = 1; v < 256; ++v)
            if (seen[v]) (*table)[v] = "class_" + std::to_string(v);
    }
    return LabelVolume(shape, std::move(data), spacing, std::move(*table), affine);
}

void save_nifti(const LabelVolume& vol, const fs::path& path) {
    gz_write_all(path, encode_nifti(vol.shape(), vol.data(), vol.spacing(), vol.affine(), vol.class_table()));
}

void save_nifti(const BinaryVolume& vol, const fs::path& path) {
    gz_write_all(path, encode_nifti(vol.shape(), vol.data(), vol.spacing(), diagonal_affine(vol.spacing()),
                                    ClassTable{{1, "foreground"}}));
}

std::string save_cache(const LabelVolume& vol, const fs::path& stem) {
    const fs::path raw = stem.string() + ".raw";
    const fs::path side = stem.string() + ".json";
    const std::string crc = checksum(vol.data());
    json j{
        {"schema_version", 1},
        {"shape", {vol.shape().l, vol.shape().w, vol.shape().h}},
        {"spacing", {vol.spacing()[0], vol.spacing()[1], vol.spacing()[2]}},
        {"affine", affine_json(vol.affine())},
        {"class_table", class_table_json(vol.class_table())},
        {"axis_order", kAxisOrder},
        {"dtype", "uint8"},
        {"checksum", crc},
    };
    write_file_atomic(raw, vol.data());
    write_file_atomic(side, j.dump(2) + "\n");
    return crc;
}

LabelVolume load_cache(const fs::path& stem) {
    const fs::path raw = stem.string() + ".raw";
    const fs::path side = stem.string() + ".json";
    const auto side_bytes = read_file(side);
    json j;
    try {
        j = json::parse(side_bytes.begin(), side_bytes.end());
    } catch (const json::parse_error& e) {
        throw ParseError("corrupted sidecar " + side.string() + ": " + e.what(), e.byte);
    }
    try {
        if (j.at("axis_order").get<std::string>() != kAxisOrder)
            throw IoError("unknown axis order '" + j.at("axis_order").get<std::string>() + "' in " + side.string());
        const auto& s = j.at("shape");
        Shape3 shape{s.at(0).get<std::int64_t>(), s.at(1).get<std::int64_t>(), s.at(2).get<std::int64_t>()};
        const auto& sp = j.at("spacing");
        Spacing spacing{sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        auto data = read_file(raw);
        if (checksum(data) != j.at("checksum").get<std::string>())
            throw ChecksumError("checksum mismatch for " + raw.string());
        return LabelVolume(shape, std::move(data), spacing, class_table_from_json(j.at("class_table")),
                           affine_from_json(j.at("affine")));
    } catch (const json::exception& e) {
        throw IoError("malformed sidecar " + side.string() + ": " + e.what());
    }
}

LabelVolume load_raw(const fs::path& raw_path, Shape3 assumed_shape) {
    auto data = read_file(raw_path);
    ClassTable table;
    std::array<bool, 256> seen{};
    for (auto v : data) seen[v] = true;
    for (int v = 1; v < 256; ++v)
        if (seen[v]) table[v] = "class_" + std::to_string(v);
    return LabelVolume(assumed_shape, std::move(data), {1.0, 1.0, 1.0}, std::move(table));
}

std::string checksum(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = crc32(crc, bytes.data() + off, n);
        off += n;
    }
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc & 0xffffffffUL));
    return buf;
}

std::string checksum(const std::string& text) {
    return checksum(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string checksum_file(const fs::path& path) { return checksum(read_file(path)); }

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        if (!fs::exists(path)) throw MissingFileError(path.string());
        throw IoError("cannot read " + path.string());
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_file_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

StagedDirectory::StagedDirectory(fs::path final_path) : final_(std::move(final_path)) {
    std::random_device rd;
    const fs::path parent = final_.has_parent_path() ? final_.parent_path() : fs::path(".");
    fs::create_directories(parent);
    staging_ = parent / ("." + final_.filename().string() + ".partial-" + std::to_string(rd()));
    fs::create_directories(staging_);
}

StagedDirectory::~StagedDirectory() {
    if (!committed_) {
        std::error_code ec;
        fs::remove_all(staging_, ec);
    }
}

void StagedDirectory::commit() {
    if (committed_) return;
    fs::path backup;
    if (fs::exists(final_)) {
        backup = final_.string() + ".old";
        fs::remove_all(backup);
        fs::rename(final_, backup);
    }
    fs::rename(staging_, final_);
    committed_ = true;
    if (!backup.empty()) fs::remove_all(backup);
}

}  // namespace voxcomp
