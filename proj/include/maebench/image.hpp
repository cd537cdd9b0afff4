#pragma once

// Grayscale image I/O and the augmentation chain used for training and
// evaluation. Images are single-channel float rasters in [0,1]; decoding
// scales integer samples by the container's max sample value.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "maebench/errors.hpp"
#include "maebench/rng.hpp"

namespace maebench {

struct image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pix;  // row-major

    static image make(std::size_t h, std::size_t w, float fill = 0.0f) {
        image im;
        im.height = h;
        im.width = w;
        im.pix.assign(h * w, fill);
        return im;
    }

    float& at(std::size_t y, std::size_t x) { return pix[y * width + x]; }
    float at(std::size_t y, std::size_t x) const { return pix[y * width + x]; }
};

namespace detail {

inline std::string magic_repr(const unsigned char* p, std::size_t n) {
    // Printable magics (PGM) shown as text, binary ones as hex bytes.
    bool printable = n > 0;
    for (std::size_t i = 0; i < n; ++i)
        if (p[i] < 0x20 || p[i] > 0x7e) printable = false;
    if (printable) return std::string(reinterpret_cast<const char*>(p), n);
    std::ostringstream os;
    os << std::hex;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) os << ' ';
        os << "0x" << static_cast<unsigned>(p[i]);
    }
    return os.str();
}

// Header fields in PGM may be separated by whitespace runs and '#' comments.
inline std::uint64_t pgm_header_uint(std::istream& in, const std::string& what) {
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = in.get();
        c = in.get();
    }
    if (c == EOF || !std::isdigit(c))
        throw format_error("pgm: expected " + what + " in header");
    std::uint64_t v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
        c = in.get();
    }
    if (c != EOF) in.unget();
    return v;
}

inline image load_pgm(std::istream& in) {
    const std::uint64_t w = pgm_header_uint(in, "width");
    const std::uint64_t h = pgm_header_uint(in, "height");
    const std::uint64_t maxval = pgm_header_uint(in, "maxval");
    if (w == 0 || h == 0) throw format_error("pgm: zero image dimension");
    if (maxval == 0 || maxval > 65535)
        throw format_error("pgm: maxval " + std::to_string(maxval) + " out of range [1,65535]");
    in.get();  // single whitespace byte before the raster

    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw format_error("pgm: raster truncated, expected " + std::to_string(raw.size()) +
                           " bytes");

    image im = image::make(h, w);
    const float scale = 1.0f / static_cast<float>(maxval);
    for (std::size_t i = 0; i < im.pix.size(); ++i) {
        std::uint32_t v = raw[i * bytes_per];
        if (bytes_per == 2) v = (v << 8) | raw[i * bytes_per + 1];  // big-endian
        im.pix[i] = static_cast<float>(v) * scale;
    }
    return im;
}

inline std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline unsigned paeth_predict(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<unsigned>(a);
    if (pb <= pc) return static_cast<unsigned>(b);
    return static_cast<unsigned>(c);
}

inline image load_png(std::istream& in) {
    // Signature already consumed by the caller's sniff; chunks follow.
    std::uint32_t width = 0, height = 0;
    int bit_depth = 0;
    bool have_ihdr = false, have_iend = false;
    std::vector<unsigned char> idat;

    while (!have_iend) {
        unsigned char lenbuf[8];
        in.read(reinterpret_cast<char*>(lenbuf), 8);
        if (in.gcount() != 8) throw format_error("png: truncated chunk header");
        const std::uint32_t len = be32(lenbuf);
        std::string type(reinterpret_cast<char*>(lenbuf + 4), 4);
        std::vector<unsigned char> data(len);
        if (len > 0) {
            in.read(reinterpret_cast<char*>(data.data()), len);
            if (static_cast<std::uint32_t>(in.gcount()) != len)
                throw format_error("png: truncated " + type + " chunk");
        }
        unsigned char crcbuf[4];
        in.read(reinterpret_cast<char*>(crcbuf), 4);
        if (in.gcount() != 4) throw format_error("png: missing crc on " + type);
        uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type.data()), 4);
        if (len > 0) crc = crc32(crc, data.data(), len);
        if (static_cast<std::uint32_t>(crc) != be32(crcbuf))
            throw format_error("png: crc mismatch in " + type + " chunk");

        if (type == "IHDR") {
            if (len != 13) throw format_error("png: IHDR length " + std::to_string(len));
            width = be32(data.data());
            height = be32(data.data() + 4);
            bit_depth = data[8];
            const int color_type = data[9];
            const int interlace = data[12];
            if (color_type != 0)
                throw format_error("png: color type " + std::to_string(color_type) +
                                   " not supported, grayscale (0) only");
            if (bit_depth != 8 && bit_depth != 16)
                throw format_error("png: grayscale bit depth " + std::to_string(bit_depth) +
                                   " not supported, want 8 or 16");
            if (interlace != 0) throw format_error("png: interlaced images not supported");
            if (width == 0 || height == 0) throw format_error("png: zero image dimension");
            have_ihdr = true;
        } else if (type == "IDAT") {
            if (!have_ihdr) throw format_error("png: IDAT before IHDR");
            idat.insert(idat.end(), data.begin(), data.end());
        } else if (type == "IEND") {
            have_iend = true;
        }
        // Ancillary chunks (tRNS, gAMA, tEXt, ...) are skipped.
    }
    if (!have_ihdr) throw format_error("png: missing IHDR");

    const std::size_t bpp = static_cast<std::size_t>(bit_depth) / 8;  // bytes per pixel
    const std::size_t rowbytes = static_cast<std::size_t>(width) * bpp;
    const std::size_t raw_size = static_cast<std::size_t>(height) * (1 + rowbytes);
    std::vector<unsigned char> raw(raw_size);
    uLongf dest_len = static_cast<uLongf>(raw_size);
    const int zrc = uncompress(raw.data(), &dest_len, idat.data(),
                               static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || dest_len != raw_size)
        throw format_error("png: IDAT inflate failed (zlib rc " + std::to_string(zrc) + ")");

    // Undo per-row filtering in place. `prev` tracks the reconstructed row above.
    std::vector<unsigned char> prev(rowbytes, 0);
    image im = image::make(height, width);
    const float scale = bit_depth == 16 ? 1.0f / 65535.0f : 1.0f / 255.0f;
    for (std::size_t y = 0; y < height; ++y) {
        const unsigned char filter = raw[y * (1 + rowbytes)];
        unsigned char* row = raw.data() + y * (1 + rowbytes) + 1;
        for (std::size_t i = 0; i < rowbytes; ++i) {
            const unsigned a = i >= bpp ? row[i - bpp] : 0;  // left
            const unsigned b = prev[i];                      // above
            const unsigned c = i >= bpp ? prev[i - bpp] : 0; // upper-left
            unsigned v = row[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth_predict(static_cast<int>(a), static_cast<int>(b),
                                           static_cast<int>(c)); break;
                default:
                    throw format_error("png: unknown filter type " + std::to_string(filter));
            }
            row[i] = static_cast<unsigned char>(v & 0xff);
        }
        std::memcpy(prev.data(), row, rowbytes);
        for (std::size_t x = 0; x < width; ++x) {
            std::uint32_t v = row[x * bpp];
            if (bpp == 2) v = (v << 8) | row[x * bpp + 1];
            im.at(y, x) = static_cast<float>(v) * scale;
        }
    }
    return im;
}

}  // namespace detail

// Decodes a PGM (P5, 8/16-bit) or grayscale PNG file to floats in [0,1].
inline image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open image file: " + path);

    unsigned char sig[8] = {0};
    in.read(reinterpret_cast<char*>(sig), 8);
    const std::size_t got = static_cast<std::size_t>(in.gcount());

    static const unsigned char png_sig[8] = {137, 'P', 'N', 'G', 13, 10, 26, 10};
    if (got == 8 && std::memcmp(sig, png_sig, 8) == 0) return detail::load_png(in);

    if (got >= 2 && sig[0] == 'P' && sig[1] == '5') {
        in.seekg(2);
        return detail::load_pgm(in);
    }
    throw format_error("unsupported image format, magic bytes: " +
                       detail::magic_repr(sig, std::min<std::size_t>(got, 2)));
}

// Writes binary PGM. maxval 255 gives 8-bit samples, anything larger 16-bit.
inline void save_pgm(const std::string& path, const image& im, std::uint32_t maxval = 255) {
    if (maxval == 0 || maxval > 65535)
        throw config_error("save_pgm: maxval " + std::to_string(maxval) +
                           " out of range [1,65535]");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "P5\n" << im.width << " " << im.height << "\n" << maxval << "\n";
    const double mv = static_cast<double>(maxval);
    for (float f : im.pix) {
        const double clamped = std::min(1.0, std::max(0.0, static_cast<double>(f)));
        const std::uint32_t v = static_cast<std::uint32_t>(std::lround(clamped * mv));
        if (maxval > 255) out.put(static_cast<char>((v >> 8) & 0xff));
        out.put(static_cast<char>(v & 0xff));
    }
    if (!out) throw io_error("write failed: " + path);
}

namespace detail {

// Catmull-Rom weights (a = -0.5) for the four taps around fractional offset t.
inline void cubic_weights(double t, double w[4]) {
    w[0] = t * (-0.5 + t * (1.0 - 0.5 * t));
    w[1] = 1.0 + t * t * (-2.5 + 1.5 * t);
    w[2] = t * (0.5 + t * (2.0 - 1.5 * t));
    w[3] = t * t * (-0.5 + 0.5 * t);
}

inline std::size_t clamp_idx(long i, std::size_t n) {
    if (i < 0) return 0;
    if (i >= static_cast<long>(n)) return n - 1;
    return static_cast<std::size_t>(i);
}

inline image resize_cubic_rect(const image& src, std::size_t out_h, std::size_t out_w) {
    image dst = image::make(out_h, out_w);
    const double sy_scale = static_cast<double>(src.height) / static_cast<double>(out_h);
    const double sx_scale = static_cast<double>(src.width) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        // Pixel-center mapping: output center lands at (oy + 0.5) * scale in
        // source space, taps are the four nearest rows with edge clamping.
        const double sy = (static_cast<double>(oy) + 0.5) * sy_scale - 0.5;
        const long iy = static_cast<long>(std::floor(sy));
        double wy[4];
        cubic_weights(sy - static_cast<double>(iy), wy);
        std::size_t ys[4];
        for (int k = 0; k < 4; ++k) ys[k] = clamp_idx(iy - 1 + k, src.height);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double sx = (static_cast<double>(ox) + 0.5) * sx_scale - 0.5;
            const long ix = static_cast<long>(std::floor(sx));
            double wx[4];
            cubic_weights(sx - static_cast<double>(ix), wx);
            double acc = 0.0;
            for (int ky = 0; ky < 4; ++ky) {
                const float* row = src.pix.data() + ys[ky] * src.width;
                double rowacc = 0.0;
                for (int kx = 0; kx < 4; ++kx)
                    rowacc += wx[kx] * static_cast<double>(row[clamp_idx(ix - 1 + kx, src.width)]);
                acc += wy[ky] * rowacc;
            }
            dst.at(oy, ox) = static_cast<float>(acc);
        }
    }
    return dst;
}

inline image crop(const image& src, std::size_t y0, std::size_t x0, std::size_t h,
                  std::size_t w) {
    image out = image::make(h, w);
    for (std::size_t y = 0; y < h; ++y)
        std::copy_n(src.pix.data() + (y0 + y) * src.width + x0, w,
                    out.pix.data() + y * w);
    return out;
}

}  // namespace detail

inline image resize_cubic(const image& im, std::size_t side) {
    if (side == 0) throw config_error("resize_cubic: side must be >= 1");
    if (im.height == 0 || im.width == 0) throw dim_error("resize_cubic: empty input image");
    return detail::resize_cubic_rect(im, side, side);
}

struct augment_config {
    std::size_t resize_side = 512;
    double scale_lo = 0.20;  // crop area as a fraction of the whole image
    double scale_hi = 1.00;
    std::size_t out_side = 224;
    double hflip_prob = 0.5;
    double normalize_mean = 0.5;
    double normalize_std = 0.25;

    void validate() const {
        std::vector<std::string> bad;
        if (!(scale_lo > 0.0)) bad.push_back("scale_lo must be > 0, got " +
                                             std::to_string(scale_lo));
        if (!(scale_lo <= scale_hi))
            bad.push_back("scale_lo " + std::to_string(scale_lo) + " exceeds scale_hi " +
                          std::to_string(scale_hi));
        if (!(scale_hi <= 1.0)) bad.push_back("scale_hi must be <= 1, got " +
                                              std::to_string(scale_hi));
        if (hflip_prob < 0.0 || hflip_prob > 1.0)
            bad.push_back("hflip_prob must be in [0,1], got " + std::to_string(hflip_prob));
        if (resize_side == 0) bad.push_back("resize_side must be >= 1");
        if (out_side == 0) bad.push_back("out_side must be >= 1");
        if (!(normalize_std > 0.0))
            bad.push_back("normalize_std must be > 0, got " + std::to_string(normalize_std));
        if (bad.empty()) return;
        std::string msg = "invalid augment config:";
        for (const auto& b : bad) msg += "\n  - " + b;
        throw config_error(msg);
    }
};

namespace detail {

struct crop_box {
    std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
};

// Samples a crop whose area fraction is uniform on [scale_lo, scale_hi].
// The area fraction is drawn first, then the aspect ratio log-uniformly on
// the part of [3/4, 4/3] that keeps a crop of that area inside the image,
// so clipping never distorts the area marginal. Proposals only fail when
// the image's own aspect ratio leaves that intersection empty; after 10
// failures the fallback is a centered crop of the largest inscribed square.
inline crop_box sample_crop_box(std::size_t height, std::size_t width,
                                const augment_config& cfg, rng& r) {
    const double W = static_cast<double>(width), H = static_cast<double>(height);
    const double ar_lo = 3.0 / 4.0, ar_hi = 4.0 / 3.0;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double frac = r.uniform(cfg.scale_lo, cfg.scale_hi);
        const double lo = std::max(ar_lo, frac * W / H);
        const double hi = std::min(ar_hi, W / (frac * H));
        if (lo > hi) continue;
        const double aspect = std::exp(r.uniform(std::log(lo), std::log(hi)));
        const double area = frac * W * H;
        auto round_clamp = [](double v, std::size_t n) {
            const long r_ = std::lround(v);
            return static_cast<std::size_t>(std::min<long>(std::max<long>(r_, 1),
                                                           static_cast<long>(n)));
        };
        crop_box b;
        b.w = round_clamp(std::sqrt(area * aspect), width);
        b.h = round_clamp(std::sqrt(area / aspect), height);
        b.x0 = static_cast<std::size_t>(r.uniform_int(width - b.w + 1));
        b.y0 = static_cast<std::size_t>(r.uniform_int(height - b.h + 1));
        return b;
    }
    crop_box b;
    b.h = b.w = std::min(height, width);
    b.y0 = (height - b.h) / 2;
    b.x0 = (width - b.w) / 2;
    return b;
}

}  // namespace detail

inline image random_resized_crop(const image& im, const augment_config& cfg, rng& r) {
    cfg.validate();
    if (im.height == 0 || im.width == 0)
        throw dim_error("random_resized_crop: empty input image");
    const detail::crop_box b = detail::sample_crop_box(im.height, im.width, cfg, r);
    const image patch = detail::crop(im, b.y0, b.x0, b.h, b.w);
    return detail::resize_cubic_rect(patch, cfg.out_side, cfg.out_side);
}

// Reverses columns with probability p. Applying the column reversal twice
// restores the input bit for bit.
inline image hflip(const image& im, double p, rng& r) {
    if (p < 0.0 || p > 1.0)
        throw config_error("hflip: probability " + std::to_string(p) + " not in [0,1]");
    if (r.uniform() >= p) return im;
    image out = image::make(im.height, im.width);
    for (std::size_t y = 0; y < im.height; ++y)
        for (std::size_t x = 0; x < im.width; ++x)
            out.at(y, x) = im.at(y, im.width - 1 - x);
    return out;
}

inline image normalize(const image& im, double mean, double std_dev) {
    if (!(std_dev > 0.0))
        throw config_error("normalize: std must be > 0, got " + std::to_string(std_dev));
    image out = im;
    const float m = static_cast<float>(mean), inv = static_cast<float>(1.0 / std_dev);
    for (float& v : out.pix) v = (v - m) * inv;
    return out;
}

inline image denormalize(const image& im, double mean, double std_dev) {
    if (!(std_dev > 0.0))
        throw config_error("denormalize: std must be > 0, got " + std::to_string(std_dev));
    image out = im;
    const float m = static_cast<float>(mean), s = static_cast<float>(std_dev);
    for (float& v : out.pix) v = v * s + m;
    return out;
}

// Training-time chain: square resize, random resized crop, horizontal flip,
// normalize. All randomness comes from the caller's rng stream.
inline image train_transform(const image& im, const augment_config& cfg, rng& r) {
    cfg.validate();
    image x = resize_cubic(im, cfg.resize_side);
    x = random_resized_crop(x, cfg, r);
    x = hflip(x, cfg.hflip_prob, r);
    return normalize(x, cfg.normalize_mean, cfg.normalize_std);
}

// Evaluation-time chain, fully deterministic: square resize to the working
// resolution, then straight down to the model input size, then normalize.
// The intermediate is square by construction so no crop is needed.
inline image eval_transform(const image& im, const augment_config& cfg) {
    cfg.validate();
    image x = resize_cubic(im, cfg.resize_side);
    x = resize_cubic(x, cfg.out_side);
    return normalize(x, cfg.normalize_mean, cfg.normalize_std);
}

// Otsu's threshold over a 256-bin histogram: picks the split that maximizes
// between-class variance. Returned as a [0,1] intensity.
inline float otsu_threshold(const image& im) {
    if (im.pix.empty()) throw dim_error("otsu_threshold: empty image");
    std::vector<std::size_t> hist(256, 0);
    for (float v : im.pix) {
        const double c = std::min(1.0, std::max(0.0, static_cast<double>(v)));
        hist[static_cast<std::size_t>(std::lround(c * 255.0))]++;
    }
    const double total = static_cast<double>(im.pix.size());
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * static_cast<double>(hist[i]);

    double best_var = -1.0;
    int best_t = 0;
    double w0 = 0.0, sum0 = 0.0;
    for (int t = 0; t < 255; ++t) {
        w0 += static_cast<double>(hist[t]);
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += t * static_cast<double>(hist[t]);
        const double mu0 = sum0 / w0, mu1 = (sum_all - sum0) / w1;
        const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (var > best_var) {
            best_var = var;
            best_t = t;
        }
    }
    return (static_cast<float>(best_t) + 0.5f) / 255.0f;
}

// Crops to the bounding box of the largest 4-connected bright region, where
// bright means at or above the Otsu threshold. Used at ingestion to discard
// empty background around the subject; a fully dark image is returned as is.
inline image chest_crop(const image& im) {
    const float thr = otsu_threshold(im);
    const std::size_t h = im.height, w = im.width;
    std::vector<std::uint8_t> seen(h * w, 0);
    std::size_t best_count = 0;
    std::size_t best_y0 = 0, best_y1 = 0, best_x0 = 0, best_x1 = 0;
    std::vector<std::size_t> stack;

    for (std::size_t start = 0; start < h * w; ++start) {
        if (seen[start] || im.pix[start] < thr) continue;
        std::size_t count = 0;
        std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t idx = stack.back();
            stack.pop_back();
            const std::size_t y = idx / w, x = idx % w;
            ++count;
            y0 = std::min(y0, y); y1 = std::max(y1, y);
            x0 = std::min(x0, x); x1 = std::max(x1, x);
            const std::size_t nbr[4][2] = {{y, x > 0 ? x - 1 : x}, {y, x + 1 < w ? x + 1 : x},
                                           {y > 0 ? y - 1 : y, x}, {y + 1 < h ? y + 1 : y, x}};
            for (const auto& n : nbr) {
                const std::size_t ni = n[0] * w + n[1];
                if (!seen[ni] && im.pix[ni] >= thr) {
                    seen[ni] = 1;
                    stack.push_back(ni);
                }
            }
        }
        if (count > best_count) {
            best_count = count;
            best_y0 = y0; best_y1 = y1; best_x0 = x0; best_x1 = x1;
        }
    }
    if (best_count == 0) return im;
    return detail::crop(im, best_y0, best_x0, best_y1 - best_y0 + 1, best_x1 - best_x0 + 1);
}

}  // namespace maebench
