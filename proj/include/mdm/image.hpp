#ifndef MDM_IMAGE_HPP
#define MDM_IMAGE_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/tape.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// raster image with interleaved pixels, values in [0,1]
struct Image {
  int width = 0, height = 0, channels = 1;  // channels: 1 (gray) or 3 (rgb)
  std::vector<double> pixels;               // row-major, channel-interleaved

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  static Image blank(int width, int height, int channels) {
    check_value(width >= 1 && height >= 1,
                "image dimensions must be positive");
    check_value(channels == 1 || channels == 3,
                "image must have 1 or 3 channels");
    Image im;
    im.width = width;
    im.height = height;
    im.channels = channels;
    im.pixels.assign(
        static_cast<std::size_t>(width) * height * channels, 0.0);
    return im;
  }
};

// planar [C,H,W] tensor <-> interleaved image
inline Tensor image_to_tensor(const Image& im) {
  Tensor t({static_cast<std::size_t>(im.channels),
            static_cast<std::size_t>(im.height),
            static_cast<std::size_t>(im.width)});
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < im.channels; ++c) {
        t.at(c, y, x) = im.at(y, x, c);
      }
    }
  }
  return t;
}

inline Image tensor_to_image(const Tensor& t) {
  check_shape(t.rank() == 3 && (t.shape()[0] == 1 || t.shape()[0] == 3),
              "tensor_to_image: need [1|3,H,W], got " + shape_str(t.shape()));
  Image im = Image::blank(static_cast<int>(t.shape()[2]),
                          static_cast<int>(t.shape()[1]),
                          static_cast<int>(t.shape()[0]));
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < im.channels; ++c) {
        im.at(y, x, c) = t.at(c, y, x);
      }
    }
  }
  return im;
}

namespace detail {

inline int pnm_next_int(std::istream& is, const std::string& path) {
  // skips whitespace and '#' comment lines per the netpbm grammar
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) {
    throw FormatError("malformed PNM header in " + path);
  }
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}

}  // namespace detail

// binary PGM (P5) / PPM (P6), maxval 255 or 65535 (16-bit is big-endian
// per the netpbm convention); values are clipped to [0,1] on load
inline Image load_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open image: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0).get(m1);
  if (!is || m0 != 'P' || (m1 != '5' && m1 != '6')) {
    throw FormatError("bad magic in " + path + " (want P5 or P6)");
  }
  const int channels = m1 == '6' ? 3 : 1;
  const int width = detail::pnm_next_int(is, path);
  const int height = detail::pnm_next_int(is, path);
  const int maxval = detail::pnm_next_int(is, path);
  if (width < 1 || height < 1) {
    throw FormatError("bad dimensions in " + path);
  }
  if (maxval != 255 && maxval != 65535) {
    throw FormatError("unsupported maxval " + std::to_string(maxval) +
                      " in " + path);
  }
  // exactly one whitespace byte separates header from raster
  Image im = Image::blank(width, height, channels);
  const std::size_t count = im.pixels.size();
  const int bytes_per = maxval == 255 ? 1 : 2;
  std::vector<unsigned char> raw(count * bytes_per);
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!is) throw FormatError("truncated raster in " + path);
  for (std::size_t i = 0; i < count; ++i) {
    int v;
    if (bytes_per == 1) {
      v = raw[i];
    } else {
      v = raw[2 * i] << 8 | raw[2 * i + 1];
    }
    im.pixels[i] = std::clamp(static_cast<double>(v) / maxval, 0.0, 1.0);
  }
  return im;
}

inline void save_pnm(const std::string& path, const Image& im,
                     int maxval = 255) {
  check_value(maxval == 255 || maxval == 65535,
              "save_pnm: maxval must be 255 or 65535");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os << (im.channels == 3 ? "P6" : "P5") << '\n'
     << im.width << ' ' << im.height << '\n'
     << maxval << '\n';
  for (double p : im.pixels) {
    const double clipped = std::clamp(p, 0.0, 1.0);
    const int v = static_cast<int>(std::lround(clipped * maxval));
    if (maxval == 255) {
      os.put(static_cast<char>(v));
    } else {
      os.put(static_cast<char>(v >> 8));
      os.put(static_cast<char>(v & 0xFF));
    }
  }
  if (!os) throw FormatError("write failed: " + path);
}

// fixed 5-anchor colormap: 0 blue, 0.25 cyan, 0.5 green, 0.75 yellow, 1 red
inline void colormap_rgb(double v, double rgb[3]) {
  static const double anchors[5][3] = {{0, 0, 1},
                                       {0, 1, 1},
                                       {0, 1, 0},
                                       {1, 1, 0},
                                       {1, 0, 0}};
  v = std::clamp(v, 0.0, 1.0);
  const double pos = v * 4.0;
  const int lo = std::min(3, static_cast<int>(pos));
  const double t = pos - lo;
  for (int c = 0; c < 3; ++c) {
    rgb[c] = (1.0 - t) * anchors[lo][c] + t * anchors[lo + 1][c];
  }
}

// alpha*X + beta*colormap(M_h), clipped to [0,1]; always renders RGB
inline Image render_heatmap(const Tensor& heat, const Tensor& image,
                            double alpha, double beta) {
  check_shape(image.rank() == 3 && heat.rank() == 2 &&
                  image.shape()[1] == heat.shape()[0] &&
                  image.shape()[2] == heat.shape()[1],
              "render_heatmap: image/heat shape mismatch");
  const std::size_t ch = image.shape()[0];
  Image out = Image::blank(static_cast<int>(heat.shape()[1]),
                           static_cast<int>(heat.shape()[0]), 3);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      double rgb[3];
      colormap_rgb(heat.at(y, x), rgb);
      for (int c = 0; c < 3; ++c) {
        const double base =
            image.at(ch == 3 ? static_cast<std::size_t>(c) : 0, y, x);
        out.at(y, x, c) = std::clamp(alpha * base + beta * rgb[c], 0.0, 1.0);
      }
    }
  }
  return out;
}

// bilinear image resize (half-pixel centers, both directions supported)
inline Image resize_bilinear(const Image& im, int width, int height) {
  check_value(width >= 1 && height >= 1, "resize: bad target size");
  Image out = Image::blank(width, height, im.channels);
  for (int y = 0; y < height; ++y) {
    double sy = (y + 0.5) * im.height / static_cast<double>(height) - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(im.height - 1));
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, im.height - 1);
    const double ty = sy - y0;
    for (int x = 0; x < width; ++x) {
      double sx = (x + 0.5) * im.width / static_cast<double>(width) - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(im.width - 1));
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, im.width - 1);
      const double tx = sx - x0;
      for (int c = 0; c < im.channels; ++c) {
        out.at(y, x, c) =
            (1 - ty) * ((1 - tx) * im.at(y0, x0, c) + tx * im.at(y0, x1, c)) +
            ty * ((1 - tx) * im.at(y1, x0, c) + tx * im.at(y1, x1, c));
      }
    }
  }
  return out;
}

}  // namespace mdm

#endif  // MDM_IMAGE_HPP
