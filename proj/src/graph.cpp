#include "cqfuse/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace cqf::ad {

namespace {

void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

}  // namespace

NodeId Graph::emplace(Tensor value, std::function<void(Graph&)> back) {
  Node n;
  n.grad = Tensor(value.rows(), value.cols());
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Graph::input(Tensor v) { return emplace(std::move(v), {}); }
NodeId Graph::param(Tensor v) { return emplace(std::move(v), {}); }

NodeId Graph::add(NodeId a, NodeId b) {
  Tensor v = nn::add(nodes_[a].value, nodes_[b].value);
  NodeId out = emplace(std::move(v), nullptr);
  nodes_[out].back = [a, b, out](Graph& g) {
    accumulate(g.grad_ref(a), g.nodes_[out].grad);
    accumulate(g.grad_ref(b), g.nodes_[out].grad);
  };
  return out;
}

NodeId Graph::scale(NodeId a, double c) {
  Tensor v = nodes_[a].value;
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] *= c;
  NodeId out = emplace(std::move(v), nullptr);
  nodes_[out].back = [a, c, out](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += c * go.data()[i];
  };
  return out;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  NodeId out = emplace(nn::matmul(nodes_[a].value, nodes_[b].value), nullptr);
  nodes_[out].back = [a, b, out](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    accumulate(g.grad_ref(a), nn::matmul(go, nn::transpose(g.nodes_[b].value)));
    accumulate(g.grad_ref(b), nn::matmul(nn::transpose(g.nodes_[a].value), go));
  };
  return out;
}

NodeId Graph::transpose(NodeId a) {
  NodeId out = emplace(nn::transpose(nodes_[a].value), nullptr);
  nodes_[out].back = [a, out](Graph& g) {
    accumulate(g.grad_ref(a), nn::transpose(g.nodes_[out].grad));
  };
  return out;
}

NodeId Graph::relu(NodeId a) {
  NodeId out = emplace(nn::relu(nodes_[a].value), nullptr);
  nodes_[out].back = [a, out](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    const Tensor& x = g.nodes_[a].value;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x.data()[i] > 0.0) ga.data()[i] += go.data()[i];
  };
  return out;
}

NodeId Graph::linear(NodeId x, NodeId weight, NodeId bias) {
  nn::LinearParams p{nodes_[weight].value, nodes_[bias].value};
  NodeId out = emplace(nn::linear(nodes_[x].value, p), nullptr);
  nodes_[out].back = [x, weight, bias, out](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;   // n x out_d
    const Tensor& xv = g.nodes_[x].value;    // n x in_d
    const Tensor& wv = g.nodes_[weight].value;
    accumulate(g.grad_ref(x), nn::matmul(go, wv));
    accumulate(g.grad_ref(weight), nn::matmul(nn::transpose(go), xv));
    Tensor& gb = g.grad_ref(bias);
    for (std::size_t i = 0; i < go.rows(); ++i)
      for (std::size_t j = 0; j < go.cols(); ++j) gb(0, j) += go(i, j);
  };
  return out;
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double epsilon) {
  const Tensor& xv = nodes_[x].value;
  const std::size_t n = xv.rows(), d = xv.cols();
  // cache normalized rows and inverse stddevs for the backward pass
  auto xhat = std::make_shared<Tensor>(n, d);
  auto inv = std::make_shared<std::vector<double>>(n);
  nn::LayerNormParams p{nodes_[gamma].value, nodes_[beta].value, epsilon};
  Tensor y = nn::layer_norm(xv, p);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(d);
    (*inv)[i] = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t j = 0; j < d; ++j) (*xhat)(i, j) = (xv(i, j) - mu) * (*inv)[i];
  }
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [x, gamma, beta, out, xhat, inv, n, d](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    const Tensor& gv = g.nodes_[gamma].value;
    Tensor& ggamma = g.grad_ref(gamma);
    Tensor& gbeta = g.grad_ref(beta);
    Tensor& gx = g.grad_ref(x);
    for (std::size_t i = 0; i < n; ++i) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dxh = go(i, j) * gv(0, j);
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * (*xhat)(i, j);
        ggamma(0, j) += go(i, j) * (*xhat)(i, j);
        gbeta(0, j) += go(i, j);
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const double dxh = go(i, j) * gv(0, j);
        gx(i, j) += (*inv)[i] * (dxh - mean_dxhat - (*xhat)(i, j) * mean_dxhat_xhat);
      }
    }
  };
  return out;
}

NodeId Graph::row_affine(NodeId x, NodeId gamma, NodeId beta) {
  const Tensor& xv = nodes_[x].value;
  const Tensor& gv = nodes_[gamma].value;
  const Tensor& bv = nodes_[beta].value;
  if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols())
    throw std::invalid_argument("row_affine: gamma/beta must be 1 x cols(x)");
  Tensor y(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j)
      y(i, j) = gv(0, j) * xv(i, j) + bv(0, j);
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [x, gamma, beta, out](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    const Tensor& xv2 = g.nodes_[x].value;
    const Tensor& gv2 = g.nodes_[gamma].value;
    Tensor& gx = g.grad_ref(x);
    Tensor& gg = g.grad_ref(gamma);
    Tensor& gb = g.grad_ref(beta);
    for (std::size_t i = 0; i < xv2.rows(); ++i)
      for (std::size_t j = 0; j < xv2.cols(); ++j) {
        gx(i, j) += go(i, j) * gv2(0, j);
        gg(0, j) += go(i, j) * xv2(i, j);
        gb(0, j) += go(i, j);
      }
  };
  return out;
}

NodeId Graph::softmax_masked(NodeId logits, Tensor additive_mask) {
  NodeId out = emplace(nn::softmax_masked(nodes_[logits].value, additive_mask), nullptr);
  nodes_[out].back = [logits, out](Graph& g) {
    const Tensor& w = g.nodes_[out].value;
    const Tensor& go = g.nodes_[out].grad;
    Tensor& gl = g.grad_ref(logits);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) dot += go(i, j) * w(i, j);
      for (std::size_t j = 0; j < w.cols(); ++j)
        gl(i, j) += w(i, j) * (go(i, j) - dot);
    }
  };
  return out;
}

NodeId Graph::attention_core(NodeId q, NodeId k, NodeId v, Tensor additive_mask) {
  auto res = nn::masked_attention(nodes_[q].value, nodes_[k].value, nodes_[v].value,
                                  additive_mask);
  auto w = std::make_shared<Tensor>(std::move(res.weights));
  NodeId out = emplace(std::move(res.output), nullptr);
  nodes_[out].back = [q, k, v, out, w](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;  // n x dv
    const Tensor& qv = g.nodes_[q].value;
    const Tensor& kv = g.nodes_[k].value;
    const Tensor& vv = g.nodes_[v].value;
    const double scale = 1.0 / std::sqrt(static_cast<double>(qv.cols()));

    accumulate(g.grad_ref(v), nn::matmul(nn::transpose(*w), go));
    Tensor dw = nn::matmul(go, nn::transpose(vv));  // n x m
    // softmax backward row-wise into logits, then into q and k
    Tensor dz(dw.rows(), dw.cols());
    for (std::size_t i = 0; i < dw.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dw.cols(); ++j) dot += dw(i, j) * (*w)(i, j);
      for (std::size_t j = 0; j < dw.cols(); ++j)
        dz(i, j) = (*w)(i, j) * (dw(i, j) - dot) * scale;
    }
    accumulate(g.grad_ref(q), nn::matmul(dz, kv));
    accumulate(g.grad_ref(k), nn::matmul(nn::transpose(dz), qv));
  };
  return out;
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const std::size_t c = nodes_[parts[0]].value.cols();
  std::size_t total = 0;
  for (NodeId p : parts) {
    if (nodes_[p].value.cols() != c)
      throw std::invalid_argument("concat_rows: column mismatch");
    total += nodes_[p].value.rows();
  }
  Tensor y(total, c);
  std::size_t r = 0;
  for (NodeId p : parts) {
    const Tensor& pv = nodes_[p].value;
    for (std::size_t i = 0; i < pv.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) y(r + i, j) = pv(i, j);
    r += pv.rows();
  }
  std::vector<NodeId> owned(parts.begin(), parts.end());
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [owned, out, c](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    std::size_t r2 = 0;
    for (NodeId p : owned) {
      Tensor& gp = g.grad_ref(p);
      for (std::size_t i = 0; i < gp.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) gp(i, j) += go(r2 + i, j);
      r2 += gp.rows();
    }
  };
  return out;
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
  const Tensor& av = nodes_[a].value;
  const Tensor& bv = nodes_[b].value;
  if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Tensor y(av.rows(), av.cols() + bv.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t j = 0; j < av.cols(); ++j) y(i, j) = av(i, j);
    for (std::size_t j = 0; j < bv.cols(); ++j) y(i, av.cols() + j) = bv(i, j);
  }
  const std::size_t ac = av.cols();
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [a, b, out, ac](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    Tensor& ga = g.grad_ref(a);
    Tensor& gb = g.grad_ref(b);
    for (std::size_t i = 0; i < ga.rows(); ++i) {
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += go(i, j);
      for (std::size_t j = 0; j < gb.cols(); ++j) gb(i, j) += go(i, ac + j);
    }
  };
  return out;
}

NodeId Graph::slice_rows(NodeId a, std::size_t r0, std::size_t n) {
  const Tensor& av = nodes_[a].value;
  if (r0 + n > av.rows()) throw std::invalid_argument("slice_rows: out of range");
  Tensor y(n, av.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) y(i, j) = av(r0 + i, j);
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [a, out, r0, n](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(r0 + i, j) += go(i, j);
  };
  return out;
}

NodeId Graph::slice_cols(NodeId a, std::size_t c0, std::size_t n) {
  const Tensor& av = nodes_[a].value;
  if (c0 + n > av.cols()) throw std::invalid_argument("slice_cols: out of range");
  Tensor y(av.rows(), n);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y(i, j) = av(i, c0 + j);
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [a, out, c0, n](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) ga(i, c0 + j) += go(i, j);
  };
  return out;
}

NodeId Graph::gather_rows(NodeId a, std::vector<std::size_t> idx) {
  const Tensor& av = nodes_[a].value;
  for (std::size_t i : idx)
    if (i >= av.rows()) throw std::invalid_argument("gather_rows: index out of range");
  Tensor y(idx.size(), av.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) y(i, j) = av(idx[i], j);
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [a, out, idx = std::move(idx)](Graph& g) {
    const Tensor& go = g.nodes_[out].grad;
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(idx[i], j) += go(i, j);
  };
  return out;
}

NodeId Graph::sum(NodeId a) {
  const Tensor& av = nodes_[a].value;
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av.data()[i];
  Tensor y(1, 1);
  y(0, 0) = s;
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [a, out](Graph& g) {
    const double go = g.nodes_[out].grad(0, 0);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += go;
  };
  return out;
}

NodeId Graph::weighted_sum(NodeId a, Tensor w) {
  const Tensor& av = nodes_[a].value;
  check_same_shape(av, w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av.data()[i] * w.data()[i];
  Tensor y(1, 1);
  y(0, 0) = s;
  auto wp = std::make_shared<Tensor>(std::move(w));
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [a, out, wp](Graph& g) {
    const double go = g.nodes_[out].grad(0, 0);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += go * wp->data()[i];
  };
  return out;
}

NodeId Graph::bce_with_logits_mean(NodeId logits, Tensor targets) {
  const Tensor& z = nodes_[logits].value;
  check_same_shape(z, targets, "bce_with_logits_mean");
  const double n = static_cast<double>(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = z.data()[i], ti = targets.data()[i];
    s += std::max(zi, 0.0) - zi * ti + std::log1p(std::exp(-std::abs(zi)));
  }
  Tensor y(1, 1);
  y(0, 0) = z.size() == 0 ? 0.0 : s / n;
  auto tp = std::make_shared<Tensor>(std::move(targets));
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [logits, out, tp, n](Graph& g) {
    if (n == 0.0) return;
    const double go = g.nodes_[out].grad(0, 0);
    const Tensor& zv = g.nodes_[logits].value;
    const Tensor sig = nn::sigmoid(zv);
    Tensor& gl = g.grad_ref(logits);
    for (std::size_t i = 0; i < zv.size(); ++i)
      gl.data()[i] += go * (sig.data()[i] - tp->data()[i]) / n;
  };
  return out;
}

NodeId Graph::l1_mean_rows(NodeId pred, Tensor target) {
  const Tensor& p = nodes_[pred].value;
  check_same_shape(p, target, "l1_mean_rows");
  const double n = static_cast<double>(p.rows());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p.data()[i] - target.data()[i]);
  Tensor y(1, 1);
  y(0, 0) = p.rows() == 0 ? 0.0 : s / n;
  auto tp = std::make_shared<Tensor>(std::move(target));
  NodeId out = emplace(std::move(y), nullptr);
  nodes_[out].back = [pred, out, tp, n](Graph& g) {
    if (n == 0.0) return;
    const double go = g.nodes_[out].grad(0, 0);
    const Tensor& pv = g.nodes_[pred].value;
    Tensor& gp = g.grad_ref(pred);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double d = pv.data()[i] - tp->data()[i];
      if (d != 0.0) gp.data()[i] += go * (d > 0.0 ? 1.0 : -1.0) / n;
    }
  };
  return out;
}

void Graph::backward(NodeId loss) {
  if (nodes_[loss].value.rows() != 1 || nodes_[loss].value.cols() != 1)
    throw std::invalid_argument("backward: loss must be a 1x1 scalar");
  nodes_[loss].grad(0, 0) = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;)
    if (nodes_[i].back) nodes_[i].back(*this);
}

FdReport finite_diff_check(std::span<const std::pair<std::string, Tensor*>> params,
                           const std::function<double()>& eval,
                           const std::map<std::string, Tensor>& analytic, double h) {
  FdReport report;
  for (const auto& [name, tensor] : params) {
    const auto it = analytic.find(name);
    if (it == analytic.end())
      throw std::invalid_argument("finite_diff_check: missing analytic grad for " + name);
    const Tensor& a = it->second;
    if (!a.same_shape(*tensor))
      throw std::invalid_argument("finite_diff_check: grad shape mismatch for " + name);
    FdEntry entry{name, 0.0, 0.0, 0};
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double saved = tensor->data()[i];
      tensor->data()[i] = saved + h;
      const double fp = eval();
      tensor->data()[i] = saved - h;
      const double fm = eval();
      tensor->data()[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_check: non-finite loss at " + name);
      const double fd = (fp - fm) / (2.0 * h);
      const double av = a.data()[i];
      const double abs_diff = std::abs(av - fd);
      const double rel = abs_diff / std::max({std::abs(av), std::abs(fd), 1e-4});
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.max_abs_diff = abs_diff;
        entry.worst_index = i;
      }
    }
    if (entry.max_rel_err > report.worst_rel_err) {
      report.worst_rel_err = entry.max_rel_err;
      report.worst_name = name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cqf::ad
