#include "vehids/error.hpp"
#include "vehids/transform.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace vehids {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg)
{
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err)
        *err = msg;
    png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

} // namespace

void export_image(const ImageChunk& image, const std::filesystem::path& path)
{
    if (image.pixels.size() != ChunkSpec::channels * image.height * image.width)
        throw ShapeError("image pixel buffer does not match its geometry");

    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file)
        throw DataError("cannot write image " + path.string());

    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("libpng init failed for " + path.string());
    }

    const auto w = image.width, h = image.height;
    std::vector<png_byte> rows(h * w * 3);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch)
                rows[(r * w + c) * 3 + ch] = image.at(ch, r, c);
    std::vector<png_bytep> row_ptrs(h);
    for (std::size_t r = 0; r < h; ++r)
        row_ptrs[r] = rows.data() + r * w * 3;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("PNG encode failed for " + path.string() + ": " + err);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_rows(png, info, row_ptrs.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(file.get()) != 0)
        throw DataError("write failed: " + path.string());
}

ImageChunk import_image(const std::filesystem::path& path)
{
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file)
        throw DataError("cannot open image " + path.string());

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng init failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("PNG decode failed for " + path.string() + ": " + err);
    }
    png_init_io(png, file.get());
    png_read_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);

    const auto w = png_get_image_width(png, info);
    const auto h = png_get_image_height(png, info);
    const bool rgb8 = png_get_color_type(png, info) == PNG_COLOR_TYPE_RGB &&
                      png_get_bit_depth(png, info) == 8;
    if (!rgb8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(path.string() + " is not an 8-bit RGB PNG");
    }
    png_bytepp rows = png_get_rows(png, info);

    ImageChunk img;
    img.width = w;
    img.height = h;
    img.pixels.resize(3 * std::size_t{w} * h);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch)
                img.pixels[(ch * h + r) * w + c] = rows[r][c * 3 + ch];
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

std::string image_file_name(const ImageChunk& image, const std::vector<std::string>& class_names)
{
    std::string cls = image.label >= 0 && static_cast<std::size_t>(image.label) < class_names.size()
                          ? class_names[static_cast<std::size_t>(image.label)]
                          : std::to_string(image.label);
    return "chunk_" + std::to_string(image.chunk_index) + "_" + cls + ".png";
}

ImageSetWriter::ImageSetWriter(std::filesystem::path dir, std::vector<std::string> class_names)
    : dir_(std::move(dir)), index_path_(dir_ / "index.csv"), class_names_(std::move(class_names))
{
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec)
        throw DataError("cannot create " + dir_.string() + ": " + ec.message());
    index_.open(index_path_, std::ios::trunc);
    if (!index_)
        throw DataError("cannot write " + index_path_.string());
    index_ << "chunk_index,label,first_timestamp,last_timestamp\n";
}

void ImageSetWriter::write(const ImageChunk& image)
{
    export_image(image, dir_ / image_file_name(image, class_names_));
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%d,%.6f,%.6f\n", image.chunk_index, image.label,
                  image.first_timestamp, image.last_timestamp);
    index_ << buf;
    index_.flush();
    if (!index_)
        throw DataError("write failed: " + index_path_.string());
    ++count_;
}

} // namespace vehids
