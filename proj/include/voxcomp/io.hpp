#pragma once

// File formats for label volumes.
//
// NIfTI-1 (.nii / .nii.gz): voxel (i, j, k) of the file maps to (l, w, h) of
// the in-memory grid. The file stores i fastest, so reading and writing
// transposes into the row-major (L, W, H) layout. The class table travels in
// a JSON comment extension (ecode 6); files without one get "class_<id>"
// names for the labels they contain.
//
// Cache format: `<stem>.raw` holds the uint8 grid in row-major (L, W, H)
// order, little-endian, no header. `<stem>.json` is the sidecar with shape,
// spacing, affine, class_table, axis_order and a CRC-32 of the raw bytes.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "voxcomp/voxel.hpp"

namespace voxcomp {

inline constexpr const char* kAxisOrder = "LWH-row-major";

LabelVolume load_nifti(const std::filesystem::path& path);
void save_nifti(const LabelVolume& vol, const std::filesystem::path& path);
void save_nifti(const BinaryVolume& vol, const std::filesystem::path& path);

/// Writes `<stem>.raw` + `<stem>.json`; returns the CRC-32 of the raw bytes.
std::string save_cache(const LabelVolume& vol, const std::filesystem::path& stem);
LabelVolume load_cache(const std::filesystem::path& stem);
/// Raw grid without a sidecar; the caller supplies the geometry.
LabelVolume load_raw(const std::filesystem::path& raw_path, Shape3 assumed_shape);

/// CRC-32 (zlib polynomial) rendered as 8 lowercase hex digits.
std::string checksum(std::span<const std::uint8_t> bytes);
std::string checksum(const std::string& text);
std::string checksum_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

/// Output directory that only appears at its final path once commit() runs.
class StagedDirectory {
public:
    explicit StagedDirectory(std::filesystem::path final_path);
    ~StagedDirectory();
    StagedDirectory(const StagedDirectory&) = delete;
    StagedDirectory& operator=(const StagedDirectory&) = delete;

    const std::filesystem::path& path() const noexcept { return staging_; }
    const std::filesystem::path& final_path() const noexcept { return final_; }
    void commit();

private:
    std::filesystem::path final_;
    std::filesystem::path staging_;
    bool committed_ = false;
};

}  // namespace voxcomp
