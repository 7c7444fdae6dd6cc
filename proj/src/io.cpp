#include "mvswin/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mvswin::io {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'S', 'T'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

struct Header {
  DType dtype;
  Shape shape;
  std::size_t payload_offset;
};

Header parse_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("MVST: bad magic");
  }
  if (bytes[4] != kFormatVersion) {
    throw IoError("MVST: unsupported format version " + std::to_string(bytes[4]));
  }
  const auto code = bytes[5];
  if (code != static_cast<std::uint8_t>(DType::F32) && code != static_cast<std::uint8_t>(DType::F64)) {
    throw IoError("MVST: unknown dtype code " + std::to_string(code));
  }
  const std::size_t ndim = bytes[6];
  const std::size_t offset = 7 + 8 * ndim;
  if (bytes.size() < offset) throw IoError("MVST: truncated header");
  Header h{static_cast<DType>(code), Shape(ndim), offset};
  for (std::size_t i = 0; i < ndim; ++i) {
    h.shape[i] = static_cast<std::size_t>(get_le<std::uint64_t>(bytes.data() + 7 + 8 * i));
    if (h.shape[i] == 0) throw IoError("MVST: zero extent in header");
  }
  return h;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kFormatVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
  if (t.ndim() > 255) throw IoError("MVST: rank above 255");
  out.push_back(static_cast<std::uint8_t>(t.ndim()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  out.reserve(out.size() + t.numel() * sizeof(T));
  for (auto v : t.data()) put_le<Bits>(out, std::bit_cast<Bits>(v));
  return out;
}

template <typename T>
Tensor<T> decode(const std::vector<std::uint8_t>& bytes) {
  const auto h = parse_header(bytes);
  const std::size_t width = h.dtype == DType::F32 ? 4 : 8;
  const std::size_t n = shape_numel(h.shape);
  if (bytes.size() - h.payload_offset != n * width) {
    throw IoError("MVST: payload length mismatch (expected " + std::to_string(n * width) +
                  " bytes for shape " + shape_str(h.shape) + ", found " +
                  std::to_string(bytes.size() - h.payload_offset) + ")");
  }
  std::vector<T> values(n);
  const std::uint8_t* p = bytes.data() + h.payload_offset;
  for (std::size_t i = 0; i < n; ++i) {
    if (h.dtype == DType::F32) {
      values[i] = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i)));
    } else {
      values[i] = static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i)));
    }
  }
  return Tensor<T>(h.shape, std::move(values));
}

DType peek_dtype(const std::vector<std::uint8_t>& bytes) { return parse_header(bytes).dtype; }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

template std::vector<std::uint8_t> encode(const Tensor<float>&);
template std::vector<std::uint8_t> encode(const Tensor<double>&);
template Tensor<float> decode(const std::vector<std::uint8_t>&);
template Tensor<double> decode(const std::vector<std::uint8_t>&);

}  // namespace mvswin::io
