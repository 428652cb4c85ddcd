#include "rcm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "rcm/common.hpp"

namespace rcm {

namespace {
void check(bool ok, const char* what) {
  if (!ok) throw ContractError(std::string("tape: ") + what);
}
}  // namespace

Tape::NodeId Tape::push(Tensor value, std::function<void(Tape&, NodeId)> back) {
  nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back)});
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::input(Tensor value) { return push(std::move(value), {}); }

void Tape::backward(NodeId loss) {
  check(val(loss).size() == 1, "backward requires a scalar loss");
  for (NodeId id = 0; id <= loss; ++id)
    nodes_[id].grad = Tensor::zeros(nodes_[id].value.shape);
  nodes_[loss].grad.data[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id)
    if (nodes_[id].back) nodes_[id].back(*this, id);
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  check(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0],
        "matmul shape mismatch");
  const size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out = Tensor::zeros({m, n});
  {
    const double* pa = A.data.data();
    const double* pb = B.data.data();
    double* po = out.data.data();
    for (size_t i = 0; i < m; ++i) {
      const double* arow = pa + i * k;
      double* orow = po + i * n;
      for (size_t l = 0; l < k; ++l) {
        const double av = arow[l];
        const double* brow = pb + l * n;
        for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return push(std::move(out), [a, b, m, k, n](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    const double* pa = t.nodes_[a].value.data.data();
    const double* pb = t.nodes_[b].value.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t i = 0; i < m; ++i) {
      const double* __restrict grow = g + i * n;
      const double* __restrict arow = pa + i * k;
      double* __restrict darow = da + i * k;
      for (size_t l = 0; l < k; ++l) {
        const double* __restrict brow = pb + l * n;
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        darow[l] += acc;
        const double av = arow[l];
        double* __restrict dbrow = db + l * n;
        for (size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
      }
    }
  });
}

Tape::NodeId Tape::add_row(NodeId a, NodeId bias) {
  const Tensor& A = val(a);
  const Tensor& B = val(bias);
  check(A.shape.size() == 2 && B.size() == A.shape[1], "add_row shape");
  Tensor out = A;
  const size_t m = A.shape[0], n = A.shape[1];
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data[i * n + j] += B.data[j];
  return push(std::move(out), [a, bias, m, n](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[bias].grad.data.data();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) {
        da[i * n + j] += g[i * n + j];
        db[j] += g[i * n + j];
      }
  });
}

Tape::NodeId Tape::relu(NodeId a) {
  Tensor out = val(a);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), [a](Tape& t, NodeId self) {
    const Tensor& o = t.nodes_[self].value;
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < o.size(); ++i)
      if (o.data[i] > 0.0) da[i] += g[i];
  });
}

Tape::NodeId Tape::reshape(NodeId a, std::vector<size_t> shape) {
  check(Tensor::numel(shape) == val(a).size(), "reshape numel");
  Tensor out(std::move(shape), val(a).data);
  return push(std::move(out), [a](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) da[i] += g[i];
  });
}

Tape::NodeId Tape::concat_cols(NodeId a, NodeId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  check(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[0] == B.shape[0],
        "concat_cols shape");
  const size_t m = A.shape[0], p = A.shape[1], q = B.shape[1];
  Tensor out = Tensor::zeros({m, p + q});
  for (size_t i = 0; i < m; ++i) {
    std::memcpy(&out.data[i * (p + q)], &A.data[i * p], p * sizeof(double));
    std::memcpy(&out.data[i * (p + q) + p], &B.data[i * q],
                q * sizeof(double));
  }
  return push(std::move(out), [a, b, m, p, q](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < p; ++j) da[i * p + j] += g[i * (p + q) + j];
      for (size_t j = 0; j < q; ++j) db[i * q + j] += g[i * (p + q) + p + j];
    }
  });
}

// x: [B,H,W,C], w: [OC, 2*2*C] with kernel laid out (kr,kc,c), b: [OC]
Tape::NodeId Tape::conv2x2(NodeId x, NodeId w, NodeId b) {
  const Tensor& X = val(x);
  const Tensor& W = val(w);
  const Tensor& Bb = val(b);
  check(X.shape.size() == 4, "conv2x2 input rank");
  const size_t Bn = X.shape[0], H = X.shape[1], Wd = X.shape[2],
               C = X.shape[3];
  check(H >= 2 && Wd >= 2, "conv2x2 input too small");
  const size_t OC = W.shape[0];
  check(W.shape.size() == 2 && W.shape[1] == 4 * C && Bb.size() == OC,
        "conv2x2 weight shape");
  const size_t OH = H - 1, OW = Wd - 1;
  Tensor out = Tensor::zeros({Bn, OH, OW, OC});
  const double* px = X.data.data();
  const double* pw = W.data.data();
  double* po = out.data.data();
  const size_t seg = 2 * C;
  for (size_t bi = 0; bi < Bn; ++bi)
    for (size_t r = 0; r < OH; ++r)
      for (size_t c = 0; c < OW; ++c) {
        const double* row0 = px + ((bi * H + r) * Wd + c) * C;
        const double* row1 = px + ((bi * H + r + 1) * Wd + c) * C;
        double* ocell = po + ((bi * OH + r) * OW + c) * OC;
        for (size_t oc = 0; oc < OC; ++oc) {
          const double* wr = pw + oc * 4 * C;
          double acc = Bb.data[oc];
          for (size_t i = 0; i < seg; ++i) acc += row0[i] * wr[i];
          for (size_t i = 0; i < seg; ++i) acc += row1[i] * wr[seg + i];
          ocell[oc] = acc;
        }
      }
  return push(std::move(out),
              [x, w, b, Bn, H, Wd, C, OH, OW, OC](Tape& t, NodeId self) {
                const double* g = t.nodes_[self].grad.data.data();
                const double* px = t.nodes_[x].value.data.data();
                const double* pw = t.nodes_[w].value.data.data();
                double* dx = t.nodes_[x].grad.data.data();
                double* dw = t.nodes_[w].grad.data.data();
                double* db = t.nodes_[b].grad.data.data();
                const size_t seg = 2 * C;
                for (size_t bi = 0; bi < Bn; ++bi)
                  for (size_t r = 0; r < OH; ++r)
                    for (size_t c = 0; c < OW; ++c) {
                      const size_t o0 = ((bi * OH + r) * OW + c) * OC;
                      const double* __restrict row0 =
                          px + ((bi * H + r) * Wd + c) * C;
                      const double* __restrict row1 =
                          px + ((bi * H + r + 1) * Wd + c) * C;
                      double* __restrict drow0 =
                          dx + ((bi * H + r) * Wd + c) * C;
                      double* __restrict drow1 =
                          dx + ((bi * H + r + 1) * Wd + c) * C;
                      for (size_t oc = 0; oc < OC; ++oc) {
                        const double go = g[o0 + oc];
                        if (go == 0.0) continue;
                        db[oc] += go;
                        double* __restrict dwr = dw + oc * 4 * C;
                        for (size_t i = 0; i < seg; ++i) dwr[i] += go * row0[i];
                        for (size_t i = 0; i < seg; ++i)
                          dwr[seg + i] += go * row1[i];
                      }
                      for (size_t oc = 0; oc < OC; ++oc) {
                        const double go = g[o0 + oc];
                        if (go == 0.0) continue;
                        const double* __restrict wr = pw + oc * 4 * C;
                        for (size_t i = 0; i < seg; ++i)
                          drow0[i] += go * wr[i];
                        for (size_t i = 0; i < seg; ++i)
                          drow1[i] += go * wr[seg + i];
                      }
                    }
              });
}

// Same-padded 3x3 convolution (pad 1). w: [OC, 3*3*C] laid out (kr,kc,c).
Tape::NodeId Tape::conv3x3_same(NodeId x, NodeId w, NodeId b) {
  const Tensor& X = val(x);
  const Tensor& W = val(w);
  const Tensor& Bb = val(b);
  check(X.shape.size() == 4, "conv3x3 input rank");
  const size_t Bn = X.shape[0], H = X.shape[1], Wd = X.shape[2],
               C = X.shape[3];
  const size_t OC = W.shape[0];
  check(W.shape.size() == 2 && W.shape[1] == 9 * C && Bb.size() == OC,
        "conv3x3 weight shape");
  Tensor out = Tensor::zeros({Bn, H, Wd, OC});
  const double* px = X.data.data();
  const double* pw = W.data.data();
  double* po = out.data.data();
  for (size_t bi = 0; bi < Bn; ++bi)
    for (size_t r = 0; r < H; ++r)
      for (size_t c = 0; c < Wd; ++c) {
        double* ocell = po + ((bi * H + r) * Wd + c) * OC;
        for (size_t oc = 0; oc < OC; ++oc) ocell[oc] = Bb.data[oc];
        for (int kr = -1; kr <= 1; ++kr) {
          const int rr = static_cast<int>(r) + kr;
          if (rr < 0 || rr >= static_cast<int>(H)) continue;
          for (int kc = -1; kc <= 1; ++kc) {
            const int cc = static_cast<int>(c) + kc;
            if (cc < 0 || cc >= static_cast<int>(Wd)) continue;
            const double* cell = px + ((bi * H + rr) * Wd + cc) * C;
            const size_t koff = ((kr + 1) * 3 + (kc + 1)) * C;
            for (size_t oc = 0; oc < OC; ++oc) {
              const double* wr = pw + oc * 9 * C + koff;
              double acc = 0.0;
              for (size_t i = 0; i < C; ++i) acc += cell[i] * wr[i];
              ocell[oc] += acc;
            }
          }
        }
      }
  return push(std::move(out), [x, w, b, Bn, H, Wd, C, OC](Tape& t,
                                                          NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    const double* px = t.nodes_[x].value.data.data();
    const double* pw = t.nodes_[w].value.data.data();
    double* dx = t.nodes_[x].grad.data.data();
    double* dw = t.nodes_[w].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t bi = 0; bi < Bn; ++bi)
      for (size_t r = 0; r < H; ++r)
        for (size_t c = 0; c < Wd; ++c) {
          const size_t o0 = ((bi * H + r) * Wd + c) * OC;
          for (size_t oc = 0; oc < OC; ++oc) {
            const double go = g[o0 + oc];
            if (go == 0.0) continue;
            db[oc] += go;
            for (int kr = -1; kr <= 1; ++kr) {
              const int rr = static_cast<int>(r) + kr;
              if (rr < 0 || rr >= static_cast<int>(H)) continue;
              for (int kc = -1; kc <= 1; ++kc) {
                const int cc = static_cast<int>(c) + kc;
                if (cc < 0 || cc >= static_cast<int>(Wd)) continue;
                const double* cell = px + ((bi * H + rr) * Wd + cc) * C;
                double* dcell = dx + ((bi * H + rr) * Wd + cc) * C;
                const size_t koff = ((kr + 1) * 3 + (kc + 1)) * C;
                const double* wr = pw + oc * 9 * C + koff;
                double* dwr = dw + oc * 9 * C + koff;
                for (size_t i = 0; i < C; ++i) {
                  dwr[i] += go * cell[i];
                  dcell[i] += go * wr[i];
                }
              }
            }
          }
        }
  });
}

Tape::NodeId Tape::gather_rows(NodeId table, std::vector<int32_t> idx) {
  const Tensor& T = val(table);
  check(T.shape.size() == 2, "gather_rows table rank");
  const size_t E = T.shape[1], m = idx.size();
  Tensor out = Tensor::zeros({m, E});
  for (size_t i = 0; i < m; ++i) {
    check(idx[i] >= 0 && static_cast<size_t>(idx[i]) < T.shape[0],
          "gather_rows index");
    std::memcpy(&out.data[i * E], &T.data[static_cast<size_t>(idx[i]) * E],
                E * sizeof(double));
  }
  return push(std::move(out),
              [table, idx = std::move(idx), E](Tape& t, NodeId self) {
                const double* g = t.nodes_[self].grad.data.data();
                double* dt = t.nodes_[table].grad.data.data();
                for (size_t i = 0; i < idx.size(); ++i)
                  for (size_t j = 0; j < E; ++j)
                    dt[static_cast<size_t>(idx[i]) * E + j] += g[i * E + j];
              });
}

Tape::NodeId Tape::add_cell_channels(NodeId grid, NodeId emb,
                                     size_t channel_offset,
                                     std::vector<uint8_t> cell_valid) {
  const Tensor& G = val(grid);
  const Tensor& Em = val(emb);
  check(G.shape.size() == 4 && Em.shape.size() == 2 &&
            G.shape[0] == Em.shape[0],
        "add_cell_channels shape");
  const size_t Bn = G.shape[0], H = G.shape[1], Wd = G.shape[2],
               C = G.shape[3], E = Em.shape[1];
  check(channel_offset + E <= C, "add_cell_channels channel range");
  check(cell_valid.size() == Bn * H * Wd, "add_cell_channels validity size");
  Tensor out = G;
  for (size_t bi = 0; bi < Bn; ++bi)
    for (size_t cell = 0; cell < H * Wd; ++cell) {
      if (!cell_valid[bi * H * Wd + cell]) continue;
      double* dst = &out.data[(bi * H * Wd + cell) * C + channel_offset];
      const double* src = &Em.data[bi * E];
      for (size_t j = 0; j < E; ++j) dst[j] += src[j];
    }
  return push(std::move(out), [grid, emb, channel_offset,
                               cv = std::move(cell_valid), Bn, H, Wd, C,
                               E](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* dg = t.nodes_[grid].grad.data.data();
    double* de = t.nodes_[emb].grad.data.data();
    const size_t n = t.nodes_[self].grad.size();
    for (size_t i = 0; i < n; ++i) dg[i] += g[i];
    for (size_t bi = 0; bi < Bn; ++bi)
      for (size_t cell = 0; cell < H * Wd; ++cell) {
        if (!cv[bi * H * Wd + cell]) continue;
        const double* gr = g + (bi * H * Wd + cell) * C + channel_offset;
        for (size_t j = 0; j < E; ++j) de[bi * E + j] += gr[j];
      }
  });
}

Tape::NodeId Tape::masked_log_softmax(NodeId logits,
                                      std::vector<uint8_t> mask) {
  const Tensor& L = val(logits);
  check(L.shape.size() == 2 && mask.size() == L.size(),
        "masked_log_softmax shape");
  const size_t m = L.shape[0], n = L.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (size_t i = 0; i < m; ++i) {
    double mx = -HUGE_VAL;
    for (size_t j = 0; j < n; ++j)
      if (mask[i * n + j] && L.data[i * n + j] > mx) mx = L.data[i * n + j];
    if (mx == -HUGE_VAL)
      throw ContractError("masked_log_softmax: all-invalid mask row");
    double s = 0.0;
    for (size_t j = 0; j < n; ++j)
      if (mask[i * n + j]) s += std::exp(L.data[i * n + j] - mx);
    const double lse = mx + std::log(s);
    for (size_t j = 0; j < n; ++j)
      out.data[i * n + j] =
          mask[i * n + j] ? L.data[i * n + j] - lse : -1e30;
  }
  return push(std::move(out),
              [logits, msk = std::move(mask), m, n](Tape& t, NodeId self) {
                const Tensor& o = t.nodes_[self].value;
                const double* g = t.nodes_[self].grad.data.data();
                double* dl = t.nodes_[logits].grad.data.data();
                for (size_t i = 0; i < m; ++i) {
                  double gs = 0.0;
                  for (size_t j = 0; j < n; ++j)
                    if (msk[i * n + j]) gs += g[i * n + j];
                  for (size_t j = 0; j < n; ++j)
                    if (msk[i * n + j])
                      dl[i * n + j] +=
                          g[i * n + j] - std::exp(o.data[i * n + j]) * gs;
                }
              });
}

Tape::NodeId Tape::pick(NodeId a, std::vector<int32_t> idx) {
  const Tensor& A = val(a);
  check(A.shape.size() == 2 && idx.size() == A.shape[0], "pick shape");
  const size_t n = A.shape[1];
  Tensor out = Tensor::zeros({idx.size()});
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && static_cast<size_t>(idx[i]) < n, "pick index");
    out.data[i] = A.data[i * n + static_cast<size_t>(idx[i])];
  }
  return push(std::move(out),
              [a, idx = std::move(idx), n](Tape& t, NodeId self) {
                const double* g = t.nodes_[self].grad.data.data();
                double* da = t.nodes_[a].grad.data.data();
                for (size_t i = 0; i < idx.size(); ++i)
                  da[i * n + static_cast<size_t>(idx[i])] += g[i];
              });
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  check(A.same_shape(B), "add shape");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += B.data[i];
  return push(std::move(out), [a, b](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) {
      da[i] += g[i];
      db[i] += g[i];
    }
  });
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  check(A.same_shape(B), "sub shape");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] -= B.data[i];
  return push(std::move(out), [a, b](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) {
      da[i] += g[i];
      db[i] -= g[i];
    }
  });
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  check(A.same_shape(B), "mul shape");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] *= B.data[i];
  return push(std::move(out), [a, b](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    const double* va = t.nodes_[a].value.data.data();
    const double* vb = t.nodes_[b].value.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) {
      da[i] += g[i] * vb[i];
      db[i] += g[i] * va[i];
    }
  });
}

Tape::NodeId Tape::exp_(NodeId a) {
  Tensor out = val(a);
  for (double& v : out.data) v = std::exp(v);
  return push(std::move(out), [a](Tape& t, NodeId self) {
    const Tensor& o = t.nodes_[self].value;
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < o.size(); ++i) da[i] += g[i] * o.data[i];
  });
}

Tape::NodeId Tape::scale(NodeId a, double c) {
  Tensor out = val(a);
  for (double& v : out.data) v *= c;
  return push(std::move(out), [a, c](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) da[i] += c * g[i];
  });
}

Tape::NodeId Tape::add_const(NodeId a, double c) {
  Tensor out = val(a);
  for (double& v : out.data) v += c;
  return push(std::move(out), [a](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) da[i] += g[i];
  });
}

Tape::NodeId Tape::add_constvec(NodeId a, std::vector<double> c) {
  Tensor out = val(a);
  check(c.size() == out.size(), "add_constvec size");
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += c[i];
  return push(std::move(out), [a](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) da[i] += g[i];
  });
}

Tape::NodeId Tape::sub_constvec(NodeId a, std::vector<double> c) {
  for (double& v : c) v = -v;
  return add_constvec(a, std::move(c));
}

Tape::NodeId Tape::constvec_minus(std::vector<double> c, NodeId a) {
  const Tensor& A = val(a);
  check(c.size() == A.size(), "constvec_minus size");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = c[i] - A.data[i];
  return push(std::move(out), [a](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i) da[i] -= g[i];
  });
}

Tape::NodeId Tape::mul_constvec(NodeId a, std::vector<double> c) {
  const Tensor& A = val(a);
  check(c.size() == A.size(), "mul_constvec size");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] *= c[i];
  return push(std::move(out), [a, c = std::move(c)](Tape& t, NodeId self) {
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[self].grad.size(); ++i)
      da[i] += g[i] * c[i];
  });
}

Tape::NodeId Tape::logaddexp_constvec(NodeId a, std::vector<double> c) {
  const Tensor& A = val(a);
  check(c.size() == A.size(), "logaddexp size");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) {
    const double hi = std::max(A.data[i], c[i]);
    const double lo = std::min(A.data[i], c[i]);
    out.data[i] = hi + std::log1p(std::exp(lo - hi));
  }
  return push(std::move(out), [a, c = std::move(c)](Tape& t, NodeId self) {
    const Tensor& o = t.nodes_[self].value;
    const Tensor& A = t.nodes_[a].value;
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < o.size(); ++i)
      da[i] += g[i] * std::exp(A.data[i] - o.data[i]);
  });
}

Tape::NodeId Tape::clip(NodeId a, double lo, double hi) {
  const Tensor& A = val(a);
  Tensor out = A;
  for (double& v : out.data) v = std::min(hi, std::max(lo, v));
  return push(std::move(out), [a, lo, hi](Tape& t, NodeId self) {
    const Tensor& A = t.nodes_[a].value;
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < A.size(); ++i)
      if (A.data[i] > lo && A.data[i] < hi) da[i] += g[i];
  });
}

Tape::NodeId Tape::min_(NodeId a, NodeId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  check(A.same_shape(B), "min shape");
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i)
    out.data[i] = std::min(A.data[i], B.data[i]);
  return push(std::move(out), [a, b](Tape& t, NodeId self) {
    const Tensor& A = t.nodes_[a].value;
    const Tensor& B = t.nodes_[b].value;
    const double* g = t.nodes_[self].grad.data.data();
    double* da = t.nodes_[a].grad.data.data();
    double* db = t.nodes_[b].grad.data.data();
    for (size_t i = 0; i < A.size(); ++i) {
      if (A.data[i] <= B.data[i])
        da[i] += g[i];
      else
        db[i] += g[i];
    }
  });
}

Tape::NodeId Tape::sum_all(NodeId a) {
  double s = 0.0;
  for (double v : val(a).data) s += v;
  return push(Tensor::scalar(s), [a](Tape& t, NodeId self) {
    const double g = t.nodes_[self].grad.data[0];
    double* da = t.nodes_[a].grad.data.data();
    for (size_t i = 0; i < t.nodes_[a].grad.size(); ++i) da[i] += g;
  });
}

Tape::NodeId Tape::mean_all(NodeId a) {
  const size_t n = val(a).size();
  check(n > 0, "mean of empty tensor");
  double s = 0.0;
  for (double v : val(a).data) s += v;
  return push(Tensor::scalar(s / static_cast<double>(n)),
              [a, n](Tape& t, NodeId self) {
                const double g =
                    t.nodes_[self].grad.data[0] / static_cast<double>(n);
                double* da = t.nodes_[a].grad.data.data();
                for (size_t i = 0; i < n; ++i) da[i] += g;
              });
}

}  // namespace rcm
