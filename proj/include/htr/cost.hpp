#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "htr/layers.hpp"

namespace htr {

// Closed-form parameter counts, biases included. These must agree with the
// number of scalars the layer structs actually allocate; a test enumerates
// and compares.

inline std::uint64_t conv_param_count(const ConvGeometry& g) {
  return static_cast<std::uint64_t>(g.kernel_area()) * g.in_ch * g.out_ch + g.out_ch;
}

inline std::uint64_t dwsep_param_count(const ConvGeometry& g) {
  const std::uint64_t depth = static_cast<std::uint64_t>(g.kernel_area()) * g.in_ch + g.in_ch;
  const std::uint64_t point = static_cast<std::uint64_t>(g.in_ch) * g.out_ch + g.out_ch;
  return depth + point;
}

inline std::uint64_t gated_conv_param_count(const ConvGeometry& g) {
  return 2 * conv_param_count(g);
}

inline std::uint64_t gru_param_count(std::size_t in_dim, std::size_t units) {
  const std::uint64_t d = in_dim, u = units;
  return 3 * (d * u + u * u + u);
}

inline std::uint64_t bgru_param_count(std::size_t in_dim, std::size_t units) {
  return 2 * gru_param_count(in_dim, units);
}

inline std::uint64_t dense_param_count(std::size_t in_dim, std::size_t out_dim) {
  return static_cast<std::uint64_t>(in_dim) * out_dim + out_dim;
}

inline std::uint64_t batchnorm_param_count(std::size_t channels) { return 2ull * channels; }

inline std::uint64_t prelu_param_count(std::size_t channels) { return channels; }

// Multiplication counts of one forward pass over the conv kernels, biases
// excluded. Pp spans the output map, Pk the kernel.
enum class ConvKind { Standard, DWSep };

inline std::uint64_t count_mults(const ConvGeometry& g, ConvKind kind) {
  g.validate();
  const std::uint64_t pp = static_cast<std::uint64_t>(g.out_h()) * g.out_w();
  const std::uint64_t pk = g.kernel_area();
  if (kind == ConvKind::Standard) return static_cast<std::uint64_t>(g.out_ch) * pp * pk * g.in_ch;
  return static_cast<std::uint64_t>(g.in_ch) * pp * (pk + g.out_ch);
}

inline std::uint64_t gated_conv_mults(const ConvGeometry& g) {
  return 2 * count_mults(g, ConvKind::Standard);
}

// One row per layer; mults == 0 marks layers outside the conv cost model.
struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t mults = 0;
};

struct CostReport {
  std::vector<LayerCost> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_mults = 0;

  void add(LayerCost row) {
    total_params += row.params;
    total_mults += row.mults;
    rows.push_back(std::move(row));
  }
};

}  // namespace htr
