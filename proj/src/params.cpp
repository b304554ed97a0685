#include "sgdc/params.hpp"

#include <cmath>

namespace sgdc {

std::uint64_t param_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

template <typename T>
Tensor<T> he_normal(std::uint64_t seed, const std::string& name, const Shape& shape, int fan_in) {
  Rng rng(param_seed(seed, name));
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, std));
  return t;
}

template <typename T>
ConvParams make_conv(ParamStore<T>& store, std::uint64_t seed, const std::string& name, const ConvSpec& spec) {
  if (spec.groups < 1 || spec.in_ch % spec.groups != 0 || spec.out_ch % spec.groups != 0) {
    throw ConfigError(name + ": channels not divisible by groups");
  }
  ConvParams p;
  const int fan_in = spec.in_ch / spec.groups * spec.kernel * spec.kernel;
  const std::string wname = name + ".weight";
  p.weight = store.add(wname, he_normal<T>(seed, wname, Shape{spec.out_ch, spec.in_ch / spec.groups, spec.kernel,
                                                               spec.kernel}, fan_in));
  if (spec.bias) p.bias = store.add(name + ".bias", Tensor<T>(Shape{spec.out_ch}));
  p.stride = spec.stride;
  p.padding = spec.kernel / 2;
  p.groups = spec.groups;
  return p;
}

template Tensor<float> he_normal<float>(std::uint64_t, const std::string&, const Shape&, int);
template Tensor<double> he_normal<double>(std::uint64_t, const std::string&, const Shape&, int);
template ConvParams make_conv<float>(ParamStore<float>&, std::uint64_t, const std::string&, const ConvSpec&);
template ConvParams make_conv<double>(ParamStore<double>&, std::uint64_t, const std::string&, const ConvSpec&);

}  // namespace sgdc
