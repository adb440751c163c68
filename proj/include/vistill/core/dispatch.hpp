#pragma once

// String-keyed op dispatch. Model code calls the typed functions directly;
// this uniform entry point exists for the gradient-check harness and any
// table-driven callers.

#include <string>
#include <vector>

#include "vistill/core/ops.hpp"

namespace vistill {

struct OpAttrs {
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t kh = 0, kw = 0;
  int64_t axis = 0;
  int64_t begin = 0, end = 0;
  int64_t groups = 1;
  std::vector<int64_t> perm;
  Dims shape;
  std::vector<int64_t> indices;
  double eps = 1e-5;
};

inline const std::vector<std::string>& op_kinds() {
  static const std::vector<std::string> kinds = {
      "matmul",    "conv2d",    "add",        "mul",   "relu",       "gelu",
      "softmax",   "layer_norm", "group_norm", "mean",  "sum",        "reshape",
      "transpose", "concat",    "slice",      "avg_pool2d", "scaled_dot_product_attention",
      "embedding_lookup"};
  return kinds;
}

template <class T>
Var<T> forward_op(Graph<T>& g, const std::string& kind, const std::vector<Var<T>>& in, const OpAttrs& attrs = {}) {
  auto want = [&](size_t n) {
    if (in.size() != n)
      throw ShapeError(kind + ": expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  if (kind == "matmul") {
    want(2);
    return matmul(g, in[0], in[1]);
  }
  if (kind == "conv2d") {
    want(2);
    return conv2d(g, in[0], in[1], attrs.stride, attrs.pad);
  }
  if (kind == "add") {
    want(2);
    return add(g, in[0], in[1]);
  }
  if (kind == "mul") {
    want(2);
    return mul(g, in[0], in[1]);
  }
  if (kind == "relu") {
    want(1);
    return relu(g, in[0]);
  }
  if (kind == "gelu") {
    want(1);
    return gelu(g, in[0]);
  }
  if (kind == "softmax") {
    want(1);
    return softmax(g, in[0]);
  }
  if (kind == "layer_norm") {
    want(3);
    return layer_norm(g, in[0], in[1], in[2], static_cast<T>(attrs.eps));
  }
  if (kind == "group_norm") {
    want(3);
    return group_norm(g, in[0], in[1], in[2], attrs.groups, static_cast<T>(attrs.eps));
  }
  if (kind == "mean") {
    want(1);
    return mean_all(g, in[0]);
  }
  if (kind == "sum") {
    want(1);
    return sum_all(g, in[0]);
  }
  if (kind == "reshape") {
    want(1);
    return reshape(g, in[0], attrs.shape);
  }
  if (kind == "transpose") {
    want(1);
    return transpose(g, in[0], attrs.perm);
  }
  if (kind == "concat") {
    return concat(g, in, attrs.axis);
  }
  if (kind == "slice") {
    want(1);
    return slice(g, in[0], attrs.axis, attrs.begin, attrs.end);
  }
  if (kind == "avg_pool2d") {
    want(1);
    return avg_pool2d(g, in[0], attrs.kh, attrs.kw);
  }
  if (kind == "scaled_dot_product_attention") {
    want(3);
    return scaled_dot_product_attention(g, in[0], in[1], in[2]);
  }
  if (kind == "embedding_lookup") {
    want(1);
    return embedding_lookup(g, in[0], attrs.indices);
  }
  throw ShapeError("forward_op: unsupported kind '" + kind + "'");
}

}  // namespace vistill
