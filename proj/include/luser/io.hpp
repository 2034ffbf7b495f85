#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "luser/tensor.hpp"

namespace luser {

/// Tensor container: magic "ULT1", u32 LE rank, rank u64 LE extents, u8
/// dtype tag (0=f32, 1=f64), then the raw little-endian row-major payload.
template <typename T>
void save_tensor(const Tensor<T>& t, const std::string& path);

template <typename T>
void save_tensor_stream(const Tensor<T>& t, std::string& out);

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

AnyTensor load_tensor_any(const std::string& path);

/// Loads and converts to T if the stored tag differs.
template <typename T>
Tensor<T> load_tensor(const std::string& path);

/// Named-tensor checkpoint: u32 entry count, then per entry a u16 name
/// length, the UTF-8 name, and a ULT1 tensor. Names are hierarchical dotted
/// paths such as stage3.mix.conv2.weight.
template <typename T>
void save_checkpoint(const std::vector<std::pair<std::string, Tensor<T>>>& entries,
                     const std::string& path);

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path);

/// 8-bit grayscale or RGB image scaled to [0,1], shaped [1,C,H,W].
/// Dispatches on extension: .png via libpng, .pgm/.ppm natively.
template <typename T>
Tensor<T> load_image(const std::string& path);

template <typename T>
void save_image(const Tensor<T>& img, const std::string& path);

std::vector<std::string> list_images(const std::string& dir);

extern template void save_tensor(const Tensor<float>&, const std::string&);
extern template void save_tensor(const Tensor<double>&, const std::string&);
extern template Tensor<float> load_tensor(const std::string&);
extern template Tensor<double> load_tensor(const std::string&);
extern template void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor<float>>>&,
    const std::string&);
extern template void save_checkpoint(
    const std::vector<std::pair<std::string, Tensor<double>>>&,
    const std::string&);
extern template std::map<std::string, Tensor<float>> load_checkpoint(
    const std::string&);
extern template std::map<std::string, Tensor<double>> load_checkpoint(
    const std::string&);
extern template Tensor<float> load_image(const std::string&);
extern template Tensor<double> load_image(const std::string&);
extern template void save_image(const Tensor<float>&, const std::string&);
extern template void save_image(const Tensor<double>&, const std::string&);

}  // namespace luser
