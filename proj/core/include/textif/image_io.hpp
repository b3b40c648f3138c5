#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "textif/image.hpp"

namespace textif {

// 8-bit codecs. Pixel values map v8 / 255 <-> double; gray files load as
// Gray, color files as Rgb (alpha is dropped). YCbCr images cannot be saved.

Image load_image(const std::filesystem::path& path);
void save_image(const Image& img, const std::filesystem::path& path);

Image decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const Image& img);

Image decode_jpeg(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality = 95);

/// Sniffs the signature and dispatches to the PNG or JPEG decoder.
Image decode_image(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

}  // namespace textif
