#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "rcm/tensor.hpp"

namespace rcm {

// Reverse-mode tape for the handful of fixed architectures used here.
// Ops append nodes; backward() walks the recorded nodes in reverse and
// accumulates exact gradients into every node, including parameter leaves.
// Not a general graph compiler: only the ops the models need.
class Tape {
 public:
  using NodeId = int32_t;

  NodeId input(Tensor value);
  const Tensor& val(NodeId id) const { return nodes_[id].value; }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }

  // dense algebra
  NodeId matmul(NodeId a, NodeId b);        // [m,k] x [k,n] -> [m,n]
  NodeId add_row(NodeId a, NodeId bias);    // [m,n] + [n]
  NodeId relu(NodeId a);
  NodeId reshape(NodeId a, std::vector<size_t> shape);
  NodeId concat_cols(NodeId a, NodeId b);   // [m,p] ++ [m,q] -> [m,p+q]

  // convolutions over [B,H,W,C] grids (channels last)
  NodeId conv2x2(NodeId x, NodeId w, NodeId b);       // valid, -1 spatial
  NodeId conv3x3_same(NodeId x, NodeId w, NodeId b);  // zero padded

  // embedding support
  NodeId gather_rows(NodeId table, std::vector<int32_t> idx);
  // adds emb[b,:] into channels [off,off+E) of every cell with validity 1
  NodeId add_cell_channels(NodeId grid, NodeId emb, size_t channel_offset,
                           std::vector<uint8_t> cell_valid);

  // heads and losses
  NodeId masked_log_softmax(NodeId logits, std::vector<uint8_t> mask);
  NodeId pick(NodeId a, std::vector<int32_t> idx);  // [m,n] -> [m]

  // elementwise
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId exp_(NodeId a);
  NodeId scale(NodeId a, double c);
  NodeId add_const(NodeId a, double c);
  NodeId add_constvec(NodeId a, std::vector<double> c);
  NodeId sub_constvec(NodeId a, std::vector<double> c);    // a - c
  NodeId constvec_minus(std::vector<double> c, NodeId a);  // c - a
  NodeId mul_constvec(NodeId a, std::vector<double> c);
  NodeId logaddexp_constvec(NodeId a, std::vector<double> c);
  NodeId clip(NodeId a, double lo, double hi);
  NodeId min_(NodeId a, NodeId b);

  // reductions
  NodeId sum_all(NodeId a);
  NodeId mean_all(NodeId a);

  // Runs reverse-mode accumulation from a scalar loss node.
  void backward(NodeId loss);

  void reserve(size_t n) { nodes_.reserve(n); }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&, NodeId)> back;  // empty for leaves
  };
  std::vector<Node> nodes_;

  NodeId push(Tensor value, std::function<void(Tape&, NodeId)> back);
  Tensor& grad_mut(NodeId id) { return nodes_[id].grad; }
};

}  // namespace rcm
