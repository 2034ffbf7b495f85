#include "luser/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace luser {

namespace {

constexpr char kMagic[4] = {'U', 'L', 'T', '1'};

void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const char* p;
  const char* end;
  std::string where;

  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end - p) < n) {
      throw IoError(where + ": truncated tensor data");
    }
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    std::memcpy(&v, p, 2);
    p += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    std::memcpy(&v, p, 8);
    p += 8;
    return v;
  }
};

AnyTensor read_tensor(Reader& r) {
  r.need(4);
  if (std::memcmp(r.p, kMagic, 4) != 0) {
    throw IoError(r.where + ": bad magic, not a ULT1 tensor");
  }
  r.p += 4;
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw IoError(r.where + ": implausible rank");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(r.u64());
  }
  r.need(1);
  const std::uint8_t tag = static_cast<std::uint8_t>(*r.p++);
  const std::size_t n = numel(shape);
  if (tag == 0) {
    r.need(n * 4);
    std::vector<float> v(n);
    std::memcpy(v.data(), r.p, n * 4);
    r.p += n * 4;
    return Tensor<float>(std::move(shape), std::move(v));
  }
  if (tag == 1) {
    r.need(n * 8);
    std::vector<double> v(n);
    std::memcpy(v.data(), r.p, n * 8);
    r.p += n * 8;
    return Tensor<double>(std::move(shape), std::move(v));
  }
  throw IoError(r.where + ": unknown dtype tag " + std::to_string(tag));
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void spew(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

}  // namespace

template <typename T>
void save_tensor_stream(const Tensor<T>& t, std::string& out) {
  out.append(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(out, static_cast<std::uint64_t>(e));
  out.push_back(static_cast<char>(Tensor<T>::dtype() == DType::f32 ? 0 : 1));
  const std::size_t bytes = t.size() * sizeof(T);
  const std::size_t off = out.size();
  out.resize(off + bytes);
  std::memcpy(out.data() + off, t.data(), bytes);
}

template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path) {
  std::string bytes;
  save_tensor_stream(t, bytes);
  spew(path, bytes);
}

AnyTensor load_tensor_any(const std::string& path) {
  const std::string bytes = slurp(path);
  Reader r{bytes.data(), bytes.data() + bytes.size(), path};
  return read_tensor(r);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  AnyTensor any = load_tensor_any(path);
  if (auto* p = std::get_if<Tensor<T>>(&any)) return *p;
  if constexpr (std::is_same_v<T, float>) {
    return std::get<Tensor<double>>(any).to_f32();
  } else {
    return std::get<Tensor<float>>(any).to_f64();
  }
}

template <typename T>
void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor<T>>>& entries,
    const std::string& path) {
  std::string bytes;
  put_u32(bytes, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (name.size() > 0xffff) throw IoError("checkpoint name too long");
    put_u16(bytes, static_cast<std::uint16_t>(name.size()));
    bytes.append(name);
    save_tensor_stream(tensor, bytes);
  }
  spew(path, bytes);
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path) {
  const std::string bytes = slurp(path);
  Reader r{bytes.data(), bytes.data() + bytes.size(), path};
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    r.need(len);
    std::string name(r.p, len);
    r.p += len;
    AnyTensor any = read_tensor(r);
    if (auto* p = std::get_if<Tensor<T>>(&any)) {
      out.emplace(std::move(name), *p);
    } else if constexpr (std::is_same_v<T, float>) {
      out.emplace(std::move(name), std::get<Tensor<double>>(any).to_f32());
    } else {
      out.emplace(std::move(name), std::get<Tensor<float>>(any).to_f64());
    }
  }
  return out;
}

// ---- images ----------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> from_bytes(const std::vector<unsigned char>& raw, std::size_t c,
                     std::size_t h, std::size_t w) {
  // interleaved bytes -> planar [1,C,H,W] in [0,1]
  Tensor<T> out({1, c, h, w});
  T* op = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        op[(ch * h + y) * w + x] =
            static_cast<T>(raw[(y * w + x) * c + ch]) / T(255);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<unsigned char> to_bytes(const Tensor<T>& img) {
  const std::size_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  std::vector<unsigned char> raw(c * h * w);
  const T* p = img.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        T v = p[(ch * h + y) * w + x];
        v = std::min(T(1), std::max(T(0), v));
        raw[(y * w + x) * c + ch] =
            static_cast<unsigned char>(std::lround(static_cast<double>(v) * 255.0));
      }
    }
  }
  return raw;
}

bool has_suffix(const std::string& s, const std::string& suf) {
  if (s.size() < suf.size()) return false;
  std::string tail = s.substr(s.size() - suf.size());
  std::transform(tail.begin(), tail.end(), tail.begin(), ::tolower);
  return tail == suf;
}

template <typename T>
Tensor<T> load_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P6") {
    throw IoError(path + ": only binary P5/P6 pnm supported");
  }
  auto next_int = [&]() {
    // skip whitespace and '#' comments
    for (;;) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
    long v = 0;
    f >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxv = next_int();
  if (w <= 0 || h <= 0 || maxv != 255) {
    throw IoError(path + ": expected 8-bit image");
  }
  f.get();  // single whitespace before payload
  const std::size_t c = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h) * c);
  f.read(reinterpret_cast<char*>(raw.data()),
         static_cast<std::streamsize>(raw.size()));
  if (!f) throw IoError(path + ": truncated pixel data");
  return from_bytes<T>(raw, c, static_cast<std::size_t>(h),
                       static_cast<std::size_t>(w));
}

template <typename T>
void save_pnm(const Tensor<T>& img, const std::string& path) {
  const std::size_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  auto raw = to_bytes(img);
  f.write(reinterpret_cast<const char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
}

template <typename T>
Tensor<T> load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_stdio(&image, fp)) {
    std::fclose(fp);
    throw IoError(path + ": " + image.message);
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t c = gray ? 1 : 3;
  std::vector<unsigned char> raw(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raw.data(), 0, nullptr)) {
    std::fclose(fp);
    throw IoError(path + ": " + image.message);
  }
  std::fclose(fp);
  return from_bytes<T>(raw, c, image.height, image.width);
}

template <typename T>
void save_png(const Tensor<T>& img, const std::string& path) {
  const std::size_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  auto raw = to_bytes(img);
  if (!png_image_write_to_file(&image, path.c_str(), 0, raw.data(), 0,
                               nullptr)) {
    throw IoError(path + ": " + image.message);
  }
}

}  // namespace

template <typename T>
Tensor<T> load_image(const std::string& path) {
  if (has_suffix(path, ".png")) return load_png<T>(path);
  if (has_suffix(path, ".pgm") || has_suffix(path, ".ppm")) {
    return load_pnm<T>(path);
  }
  throw IoError(path + ": unsupported image extension");
}

template <typename T>
void save_image(const Tensor<T>& img, const std::string& path) {
  if (img.rank() != 4 || img.dim(0) != 1 ||
      (img.dim(1) != 1 && img.dim(1) != 3)) {
    throw ShapeError("save_image: expected [1,1|3,H,W], got " +
                     shape_str(img.shape()));
  }
  if (has_suffix(path, ".png")) {
    save_png(img, path);
  } else if (has_suffix(path, ".pgm") || has_suffix(path, ".ppm")) {
    save_pnm(img, path);
  } else {
    throw IoError(path + ": unsupported image extension");
  }
}

std::vector<std::string> list_images(const std::string& dir) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string p = e.path().string();
    if (has_suffix(p, ".png") || has_suffix(p, ".pgm") ||
        has_suffix(p, ".ppm")) {
      out.push_back(p);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

template void save_tensor_stream(const Tensor<float>&, std::string&);
template void save_tensor_stream(const Tensor<double>&, std::string&);
template void save_tensor(const Tensor<float>&, const std::string&);
template void save_tensor(const Tensor<double>&, const std::string&);
template Tensor<float> load_tensor(const std::string&);
template Tensor<double> load_tensor(const std::string&);
template void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor<float>>>&,
    const std::string&);
template void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor<double>>>&,
    const std::string&);
template std::map<std::string, Tensor<float>> load_checkpoint(
    const std::string&);
template std::map<std::string, Tensor<double>> load_checkpoint(
    const std::string&);
template Tensor<float> load_image(const std::string&);
template Tensor<double> load_image(const std::string&);
template void save_image(const Tensor<float>&, const std::string&);
template void save_image(const Tensor<double>&, const std::string&);

}  // namespace luser
