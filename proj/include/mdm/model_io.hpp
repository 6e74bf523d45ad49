#ifndef MDM_MODEL_IO_HPP
#define MDM_MODEL_IO_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/model.hpp"

namespace mdm {

static_assert(std::endian::native == std::endian::little,
              "MDMW serialization assumes a little-endian host");

namespace detail {

// standard reflected CRC-32 (polynomial 0xEDB88320)
inline std::uint32_t crc32(const unsigned char* data, std::size_t len,
                           std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      }
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  }
  return ~crc;
}

template <typename T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("weight file truncated at ") + what);
  return v;
}

}  // namespace detail

// Weight file layout ("MDMW"): magic, u16 format version, u32 layer count
// with one compact descriptor per layer, u32 input C/H/W and output size,
// then the tensor table (u32 rank, u32 extents, raw f64 little-endian
// payload per tensor) and a trailing CRC32 over all payload bytes.
inline constexpr std::uint16_t kWeightFormatVersion = 1;

inline void save_model(const ModelSpec& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os.write("MDMW", 4);
  detail::write_raw<std::uint16_t>(os, kWeightFormatVersion);

  detail::write_raw<std::uint32_t>(os,
                                   static_cast<std::uint32_t>(m.layers.size()));
  for (const LayerSpec& l : m.layers) {
    detail::write_raw<std::uint8_t>(os, static_cast<std::uint8_t>(l.kind));
    switch (l.kind) {
      case LayerKind::Conv2d:
        detail::write_raw<std::uint32_t>(os, l.out_channels);
        detail::write_raw<std::uint32_t>(os, l.kernel);
        detail::write_raw<std::uint32_t>(os, l.stride);
        detail::write_raw<std::uint32_t>(os, l.padding);
        break;
      case LayerKind::AvgPool:
        detail::write_raw<std::uint32_t>(os, l.window);
        detail::write_raw<std::uint32_t>(os, l.pool_stride);
        break;
      case LayerKind::Linear:
        detail::write_raw<std::uint32_t>(os, l.out_features);
        break;
      case LayerKind::Relu:
      case LayerKind::GlobalAvgPool:
        break;
    }
  }
  for (std::size_t e : m.input_shape) {
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  detail::write_raw<std::uint32_t>(
      os, static_cast<std::uint32_t>(m.output_size));

  detail::write_raw<std::uint32_t>(os,
                                   static_cast<std::uint32_t>(m.params.size()));
  std::uint32_t crc = 0;
  for (const Tensor& t : m.params) {
    detail::write_raw<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) {
      detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    }
    const auto* bytes =
        reinterpret_cast<const unsigned char*>(t.data().data());
    const std::size_t nbytes = t.size() * sizeof(double);
    os.write(reinterpret_cast<const char*>(bytes),
             static_cast<std::streamsize>(nbytes));
    crc = detail::crc32(bytes, nbytes, crc);
  }
  detail::write_raw<std::uint32_t>(os, crc);
  if (!os) throw FormatError("write failed: " + path);
}

inline ModelSpec load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open for reading: " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MDMW", 4) != 0) {
    throw FormatError("bad magic in weight file: " + path);
  }
  const auto version = detail::read_raw<std::uint16_t>(is, "version");
  if (version != kWeightFormatVersion) {
    throw FormatError("unsupported weight format version " +
                      std::to_string(version));
  }

  const auto layer_count = detail::read_raw<std::uint32_t>(is, "layer count");
  std::vector<LayerSpec> layers;
  layers.reserve(layer_count);
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const auto kind = detail::read_raw<std::uint8_t>(is, "layer kind");
    if (kind > static_cast<std::uint8_t>(LayerKind::Linear)) {
      throw FormatError("unknown layer kind " + std::to_string(kind));
    }
    LayerSpec l;
    l.kind = static_cast<LayerKind>(kind);
    switch (l.kind) {
      case LayerKind::Conv2d:
        l.out_channels =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "conv"));
        l.kernel =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "conv"));
        l.stride =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "conv"));
        l.padding =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "conv"));
        break;
      case LayerKind::AvgPool:
        l.window =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "pool"));
        l.pool_stride =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "pool"));
        break;
      case LayerKind::Linear:
        l.out_features =
            static_cast<int>(detail::read_raw<std::uint32_t>(is, "linear"));
        break;
      case LayerKind::Relu:
      case LayerKind::GlobalAvgPool:
        break;
    }
    layers.push_back(l);
  }

  std::array<std::size_t, 3> input_shape{};
  for (std::size_t& e : input_shape) {
    e = detail::read_raw<std::uint32_t>(is, "input shape");
  }
  const auto output_size = detail::read_raw<std::uint32_t>(is, "output size");

  const auto tensor_count =
      detail::read_raw<std::uint32_t>(is, "tensor count");
  std::vector<Tensor> params;
  params.reserve(tensor_count);
  std::uint32_t crc = 0;
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    const auto rank = detail::read_raw<std::uint32_t>(is, "tensor rank");
    if (rank == 0 || rank > 8) {
      throw FormatError("implausible tensor rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = detail::read_raw<std::uint32_t>(is, "tensor extent");
      if (shape[d] == 0) throw FormatError("zero tensor extent");
    }
    std::vector<double> data(shape_size(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw FormatError("weight file truncated in tensor payload");
    crc = detail::crc32(reinterpret_cast<const unsigned char*>(data.data()),
                        data.size() * sizeof(double), crc);
    params.emplace_back(std::move(shape), std::move(data));
  }
  const auto stored_crc = detail::read_raw<std::uint32_t>(is, "crc32");
  if (stored_crc != crc) {
    throw FormatError("weight payload CRC mismatch");
  }

  // make_model re-derives the shape table; any inconsistency with the
  // stored descriptors surfaces here as a shape error
  ModelSpec m;
  try {
    m = make_model(input_shape, std::move(layers), std::move(params));
  } catch (const ShapeError& e) {
    throw FormatError(std::string("weight shape table mismatch: ") + e.what());
  }
  if (m.output_size != output_size) {
    throw FormatError("weight output size mismatch");
  }
  for (const Tensor& t : m.params) t.ensure_finite("weight tensor");
  return m;
}

}  // namespace mdm

#endif  // MDM_MODEL_IO_HPP
