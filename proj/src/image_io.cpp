#include "mvd/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace mvd {

namespace {

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back((v >> 24) & 0xff);
    out.push_back((v >> 16) & 0xff);
    out.push_back((v >> 8) & 0xff);
    out.push_back(v & 0xff);
}

std::uint32_t get_u32_be(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open file: " + path);
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(is)),
                                      std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const void* data, std::size_t n) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open file for writing: " + path);
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os) throw DataError("write failed: " + path);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

constexpr char kDepthMagic[8] = {'M', 'V', 'D', 'D', 'E', 'P', 'T', 'H'};
constexpr char kNormalMagic[8] = {'M', 'V', 'D', 'N', 'O', 'R', 'M', 'L'};

void write_float_buffer(const std::string& path, const char magic[8], int height, int width,
                        const float* data, std::size_t channels) {
    std::vector<unsigned char> out;
    out.insert(out.end(), magic, magic + 8);
    const std::uint32_t h = height, w = width;
    out.insert(out.end(), reinterpret_cast<const unsigned char*>(&h),
               reinterpret_cast<const unsigned char*>(&h) + 4);
    out.insert(out.end(), reinterpret_cast<const unsigned char*>(&w),
               reinterpret_cast<const unsigned char*>(&w) + 4);
    const std::size_t n = std::size_t(height) * width * channels * sizeof(float);
    out.insert(out.end(), reinterpret_cast<const unsigned char*>(data),
               reinterpret_cast<const unsigned char*>(data) + n);
    write_file(path, out.data(), out.size());
}

std::vector<float> read_float_buffer(const std::string& path, const char magic[8], int& height,
                                     int& width, std::size_t channels) {
    const auto buf = read_file(path);
    if (buf.size() < 16 || std::memcmp(buf.data(), magic, 8) != 0)
        throw DataError("bad header in " + path);
    std::uint32_t h, w;
    std::memcpy(&h, buf.data() + 8, 4);
    std::memcpy(&w, buf.data() + 12, 4);
    const std::size_t n = std::size_t(h) * w * channels;
    if (buf.size() != 16 + n * sizeof(float)) throw DataError("truncated buffer: " + path);
    height = static_cast<int>(h);
    width = static_cast<int>(w);
    std::vector<float> out(n);
    std::memcpy(out.data(), buf.data() + 16, n * sizeof(float));
    return out;
}

}  // namespace

ImageU8 quantize_image(const std::vector<float>& rgb, int height, int width) {
    ImageU8 img;
    img.height = height;
    img.width = width;
    img.pixels.resize(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        const float v = std::min(1.f, std::max(0.f, rgb[i]));
        img.pixels[i] = static_cast<unsigned char>(std::lround(v * 255.f));
    }
    return img;
}

std::vector<float> dequantize_image(const ImageU8& img) {
    std::vector<float> out(img.pixels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] / 255.f;
    return out;
}

void write_png(const std::string& path, const ImageU8& img) {
    const std::size_t row = std::size_t(img.width) * 3;
    std::vector<unsigned char> raw((row + 1) * img.height);
    for (int r = 0; r < img.height; ++r) {
        raw[r * (row + 1)] = 0;  // filter: none
        std::memcpy(raw.data() + r * (row + 1) + 1, img.pixels.data() + r * row, row);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("png deflate failed");
    compressed.resize(bound);

    std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<unsigned char> ihdr;
    put_u32_be(ihdr, img.width);
    put_u32_be(ihdr, img.height);
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor rgb
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", compressed);
    append_chunk(out, "IEND", {});
    write_file(path, out.data(), out.size());
}

ImageU8 read_png(const std::string& path) {
    const auto buf = read_file(path);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw DataError("not a png: " + path);

    ImageU8 img;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = get_u32_be(buf.data() + pos);
        const std::string type(reinterpret_cast<const char*>(buf.data() + pos + 4), 4);
        if (pos + 12 + len > buf.size()) throw DataError("truncated png: " + path);
        const unsigned char* payload = buf.data() + pos + 8;
        if (type == "IHDR") {
            img.width = static_cast<int>(get_u32_be(payload));
            img.height = static_cast<int>(get_u32_be(payload + 4));
            if (payload[8] != 8 || payload[9] != 2 || payload[12] != 0)
                throw DataError("unsupported png format (need 8-bit RGB): " + path);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (img.width <= 0 || img.height <= 0) throw DataError("png missing IHDR: " + path);

    const std::size_t row = std::size_t(img.width) * 3;
    std::vector<unsigned char> raw((row + 1) * img.height);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw DataError("png inflate failed: " + path);

    img.pixels.resize(row * img.height);
    std::vector<unsigned char> prev(row, 0);
    for (int r = 0; r < img.height; ++r) {
        const unsigned char filter = raw[r * (row + 1)];
        const unsigned char* src = raw.data() + r * (row + 1) + 1;
        unsigned char* dst = img.pixels.data() + r * row;
        for (std::size_t i = 0; i < row; ++i) {
            const int a = i >= 3 ? dst[i - 3] : 0;
            const int b = prev[i];
            const int c = i >= 3 ? prev[i - 3] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw DataError("bad png filter: " + path);
            }
            dst[i] = static_cast<unsigned char>(v & 0xff);
        }
        std::memcpy(prev.data(), dst, row);
    }
    return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open file for writing: " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
}

ImageU8 read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open file: " + path);
    std::string magic;
    int w, h, maxval;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw DataError("unsupported ppm: " + path);
    is.get();
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.pixels.resize(std::size_t(w) * h * 3);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw DataError("truncated ppm: " + path);
    return img;
}

void write_depth(const std::string& path, int height, int width, const float* data) {
    write_float_buffer(path, kDepthMagic, height, width, data, 1);
}

std::vector<float> read_depth(const std::string& path, int& height, int& width) {
    return read_float_buffer(path, kDepthMagic, height, width, 1);
}

void write_normals(const std::string& path, int height, int width, const float* data) {
    write_float_buffer(path, kNormalMagic, height, width, data, 3);
}

std::vector<float> read_normals(const std::string& path, int& height, int& width) {
    return read_float_buffer(path, kNormalMagic, height, width, 3);
}

}  // namespace mvd
