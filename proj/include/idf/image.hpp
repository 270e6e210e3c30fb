#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "idf/common.hpp"
#include "idf/tensor.hpp"

namespace idf {

// Binary PGM (P5, 1 channel) and PPM (P6, 3 channels), 8-bit only.

struct ImageRecord {
    IntTensor pixels;  // values in [0,255]
    std::string id;
};

namespace pnm {

inline int next_token(std::istream& in) {
    // Skip whitespace and '#' comments, then parse a decimal token.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw data_error("pnm: malformed header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        if (v > 1 << 20) throw data_error("pnm: header value out of range");
        c = in.get();
    }
    return v;
}

}  // namespace pnm

inline ImageRecord read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open image: " + path);
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    int channels = 0;
    if (m0 == 'P' && m1 == '5') channels = 1;
    else if (m0 == 'P' && m1 == '6') channels = 3;
    else throw data_error("unsupported image format (want binary PGM/PPM): " + path);
    const int w = pnm::next_token(f);
    const int h = pnm::next_token(f);
    const int maxval = pnm::next_token(f);
    if (maxval > 255) throw data_error("16-bit images are not supported: " + path);
    if (maxval < 1) throw data_error("pnm: bad maxval");
    // next_token consumed the single whitespace byte separating the header
    // from the pixel data; the stream now sits on the first pixel.
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * channels);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(f.gcount()) != raw.size())
        throw data_error("pnm: pixel data truncated: " + path);
    ImageRecord rec;
    rec.id = path;
    rec.pixels = IntTensor(Shape{channels, h, w});
    // PNM interleaves channels per pixel; we store channel-planar.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                rec.pixels.at(c, y, x) = raw[static_cast<std::size_t>((y * w + x) * channels + c)];
    return rec;
}

// Values are clipped to [0,255] here, at file-write time only; the model and
// codec paths never clip.
inline void write_pnm(const std::string& path, const IntTensor& img) {
    const Shape s = img.shape();
    require(s.c == 1 || s.c == 3, "write_pnm: need 1 or 3 channels");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open image for writing: " + path);
    f << (s.c == 1 ? "P5" : "P6") << "\n" << s.w << " " << s.h << "\n255\n";
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(s.w) * s.h * s.c);
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < s.c; ++c)
                raw[static_cast<std::size_t>((y * s.w + x) * s.c + c)] = static_cast<std::uint8_t>(
                    std::clamp(img.at(c, y, x), 0, 255));
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw data_error("image write failed: " + path);
}

namespace detail {

// '*' wildcard match on a single path component.
inline bool wildcard_match(const std::string& pat, const std::string& str) {
    std::size_t p = 0, s = 0, star = std::string::npos, mark = 0;
    while (s < str.size()) {
        if (p < pat.size() && (pat[p] == str[s])) {
            ++p;
            ++s;
        } else if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = s;
        } else if (star != std::string::npos) {
            p = star + 1;
            s = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

}  // namespace detail

// Loads a file, a directory of .pgm/.ppm files, or a glob with '*' in the
// final component. Records come back sorted by identifier.
inline std::vector<ImageRecord> ingest(const std::string& pattern) {
    namespace fs = std::filesystem;
    std::vector<std::string> paths;
    const fs::path pat(pattern);
    if (pattern.find('*') != std::string::npos) {
        const fs::path dir = pat.parent_path().empty() ? fs::path(".") : pat.parent_path();
        if (fs::is_directory(dir))
            for (const auto& e : fs::directory_iterator(dir))
                if (e.is_regular_file() &&
                    detail::wildcard_match(pat.filename().string(), e.path().filename().string()))
                    paths.push_back(e.path().string());
    } else if (fs::is_directory(pat)) {
        for (const auto& e : fs::directory_iterator(pat)) {
            const std::string ext = e.path().extension().string();
            if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm"))
                paths.push_back(e.path().string());
        }
    } else if (fs::is_regular_file(pat)) {
        paths.push_back(pattern);
    }
    if (paths.empty()) throw data_error("dataset is empty: " + pattern);
    std::sort(paths.begin(), paths.end());
    std::vector<ImageRecord> out;
    out.reserve(paths.size());
    for (const std::string& p : paths) out.push_back(read_pnm(p));
    return out;
}

}  // namespace idf
