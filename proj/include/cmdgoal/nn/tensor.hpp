#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cmdgoal/error.hpp"

namespace cmdgoal::nn {

/// Dense C x H x W activation map (row-major within a channel).
template <typename T>
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int channels, int height, int width)
      : c(channels), h(height), w(width), v(static_cast<std::size_t>(channels) * height * width, T(0)) {}

  std::size_t size() const noexcept { return v.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  T* data() noexcept { return v.data(); }
  const T* data() const noexcept { return v.data(); }
  T* channel(int i) noexcept { return v.data() + i * plane(); }
  const T* channel(int i) const noexcept { return v.data() + i * plane(); }
  T& at(int ch, int y, int x) noexcept { return v[(ch * static_cast<std::size_t>(h) + y) * w + x]; }
  T at(int ch, int y, int x) const noexcept { return v[(ch * static_cast<std::size_t>(h) + y) * w + x]; }

  void resize(int channels, int height, int width) {
    c = channels;
    h = height;
    w = width;
    v.assign(static_cast<std::size_t>(channels) * height * width, T(0));
  }
  bool same_shape(const Tensor& o) const noexcept { return c == o.c && h == o.h && w == o.w; }
};

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Named slices of one flat parameter vector.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    for (const auto& s : specs_) {
      if (s.name == name) throw InvalidArgument("duplicate parameter name '" + name + "'");
    }
    specs_.push_back({std::move(name), std::move(shape), total_, n});
    total_ += n;
    return specs_.back().offset;
  }

  const std::vector<ParamSpec>& specs() const noexcept { return specs_; }
  std::size_t total() const noexcept { return total_; }

  const ParamSpec& find(const std::string& name) const {
    for (const auto& s : specs_) {
      if (s.name == name) return s;
    }
    throw InvalidArgument("unknown parameter '" + name + "'");
  }

 private:
  std::vector<ParamSpec> specs_;
  std::size_t total_ = 0;
};

}  // namespace cmdgoal::nn
