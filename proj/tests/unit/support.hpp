#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "prag/autograd.hpp"
#include "prag/rng.hpp"
#include "prag/tensor.hpp"

namespace testing {

using prag::num::Shape;
using prag::num::Tape;
using prag::num::Tensor;
using prag::num::Var;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float scale = 1.0f) {
  prag::Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& x : t.values()) x = static_cast<float>(rng.normal()) * scale;
  return t;
}

/// Builds a graph on `tape` from leaves.
using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Temporary directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("prag_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  static int& counter() {
    static int n = 0;
    return n;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing
