#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cqfuse/graph.hpp"
#include "cqfuse/nn.hpp"
#include "cqfuse/rng.hpp"
#include "doctest.h"

using namespace cqf;

namespace {

Tensor rand_t(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-scale, scale);
  return t;
}

// Builds a fresh graph from the current parameter tensors, reduces the
// op output to a scalar through a fixed random probe, and checks every
// parameter gradient against central differences.
struct OpCheck {
  std::vector<std::pair<std::string, Tensor>> params;
  std::function<ad::NodeId(ad::Graph&, const std::vector<ad::NodeId>&)> build;

  void run(Rng& probe_rng) {
    std::vector<std::pair<std::string, Tensor*>> ptrs;
    for (auto& [name, t] : params) ptrs.emplace_back(name, &t);

    Tensor probe;  // fixed after first evaluation so eval() is pure
    auto forward = [&](ad::Graph& g) {
      std::vector<ad::NodeId> ids;
      for (auto& [name, t] : params) ids.push_back(g.param(t));
      ad::NodeId out = build(g, ids);
      if (probe.size() == 0) probe = rand_t(probe_rng, g.value(out).rows(), g.value(out).cols());
      return std::pair{g.weighted_sum(out, probe), ids};
    };

    auto eval = [&]() {
      ad::Graph g;
      return g.value(forward(g).first)(0, 0);
    };

    ad::Graph g;
    auto [loss, ids] = forward(g);
    g.backward(loss);
    std::map<std::string, Tensor> analytic;
    for (std::size_t i = 0; i < params.size(); ++i) analytic[params[i].first] = g.grad(ids[i]);

    const auto report = ad::finite_diff_check(ptrs, eval, analytic, 1e-6);
    CAPTURE(report.worst_name);
    CHECK(report.worst_rel_err < 1e-4);
  }
};

}  // namespace

TEST_CASE("graph forward matches the plain kernels bit-for-bit") {
  Rng rng(61);
  const Tensor x = rand_t(rng, 5, 8);
  const Tensor w = rand_t(rng, 6, 8);
  const Tensor b = rand_t(rng, 1, 6);
  nn::LinearParams lp{w, b};
  const Tensor direct = nn::relu(nn::linear(x, lp));

  ad::Graph g;
  const auto out = g.relu(g.linear(g.input(x), g.param(w), g.param(b)));
  for (std::size_t i = 0; i < direct.size(); ++i)
    CHECK(g.value(out).data()[i] == direct.data()[i]);
}

TEST_CASE("backward rejects non-scalar roots") {
  ad::Graph g;
  const auto a = g.param(Tensor(2, 2));
  CHECK_THROWS_AS(g.backward(a), std::invalid_argument);
}

TEST_CASE("gradcheck: add / scale / transpose / sum") {
  Rng rng(62);
  OpCheck{{{"a", rand_t(rng, 3, 4)}, {"b", rand_t(rng, 3, 4)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) { return g.add(p[0], p[1]); }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 3, 4)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) { return g.scale(p[0], -2.7); }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 3, 4)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) { return g.transpose(p[0]); }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 3, 4)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) { return g.sum(p[0]); }}
      .run(rng);
}

TEST_CASE("gradcheck: matmul and linear") {
  Rng rng(63);
  OpCheck{{{"a", rand_t(rng, 4, 3)}, {"b", rand_t(rng, 3, 5)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) { return g.matmul(p[0], p[1]); }}
      .run(rng);
  OpCheck{{{"x", rand_t(rng, 4, 6)}, {"w", rand_t(rng, 5, 6)}, {"b", rand_t(rng, 1, 5)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.linear(p[0], p[1], p[2]);
          }}
      .run(rng);
}

TEST_CASE("gradcheck: relu away from the kink") {
  Rng rng(64);
  Tensor a = rand_t(rng, 4, 4, 2.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a.data()[i]) < 1e-3) a.data()[i] = 0.5;  // keep clear of 0
  OpCheck{{{"a", a}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) { return g.relu(p[0]); }}
      .run(rng);
}

TEST_CASE("gradcheck: layer_norm and row_affine") {
  Rng rng(65);
  OpCheck{{{"x", rand_t(rng, 3, 6, 2.0)},
           {"gamma", rand_t(rng, 1, 6)},
           {"beta", rand_t(rng, 1, 6)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.layer_norm(p[0], p[1], p[2]);
          }}
      .run(rng);
  OpCheck{{{"x", rand_t(rng, 3, 6)},
           {"gamma", rand_t(rng, 1, 6)},
           {"beta", rand_t(rng, 1, 6)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.row_affine(p[0], p[1], p[2]);
          }}
      .run(rng);
}

TEST_CASE("gradcheck: softmax_masked and attention_core") {
  Rng rng(66);
  Tensor mask(4, 4);
  mask(0, 2) = nn::kNegBlock;
  mask(3, 1) = nn::kNegBlock;
  OpCheck{{{"z", rand_t(rng, 4, 4, 2.0)}},
          [mask](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.softmax_masked(p[0], mask);
          }}
      .run(rng);
  OpCheck{{{"q", rand_t(rng, 4, 5)}, {"k", rand_t(rng, 4, 5)}, {"v", rand_t(rng, 4, 5)}},
          [mask](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.attention_core(p[0], p[1], p[2], mask);
          }}
      .run(rng);
}

TEST_CASE("gradcheck: concat / slice / gather") {
  Rng rng(67);
  OpCheck{{{"a", rand_t(rng, 2, 3)}, {"b", rand_t(rng, 4, 3)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.concat_rows(std::vector<ad::NodeId>{p[0], p[1]});
          }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 3, 2)}, {"b", rand_t(rng, 3, 4)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.concat_cols(p[0], p[1]);
          }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 6, 4)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.slice_rows(p[0], 1, 3);
          }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 4, 6)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.slice_cols(p[0], 2, 3);
          }}
      .run(rng);
  OpCheck{{{"a", rand_t(rng, 5, 3)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.gather_rows(p[0], {4, 0, 4, 2});  // repeated index accumulates
          }}
      .run(rng);
}

TEST_CASE("gradcheck: losses") {
  Rng rng(68);
  const Tensor targets = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 0}, {1, 1, 0}});
  OpCheck{{{"z", rand_t(rng, 4, 3, 2.0)}},
          [targets](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.bce_with_logits_mean(p[0], targets);
          }}
      .run(rng);

  Tensor l1_target = rand_t(rng, 4, 8);
  Tensor pred0 = rand_t(rng, 4, 8);
  // keep every coordinate at least 1e-3 from the |.| kink
  for (std::size_t i = 0; i < pred0.size(); ++i)
    if (std::abs(pred0.data()[i] - l1_target.data()[i]) < 1e-3) pred0.data()[i] += 0.1;
  OpCheck{{{"p", pred0}},
          [l1_target](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            return g.l1_mean_rows(p[0], l1_target);
          }}
      .run(rng);
}

TEST_CASE("bce matches the closed form on known values") {
  // z=0,t=1 -> log 2; z large,t=1 -> ~0; z large,t=0 -> ~z
  ad::Graph g;
  const Tensor z = Tensor::from_rows({{0.0, 30.0, 30.0}});
  const Tensor t = Tensor::from_rows({{1.0, 1.0, 0.0}});
  const auto loss = g.bce_with_logits_mean(g.input(z), t);
  const double want = (std::log(2.0) + std::log1p(std::exp(-30.0)) + 30.0) / 3.0;
  CHECK(g.value(loss)(0, 0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("l1_mean_rows known value and empty case") {
  ad::Graph g;
  const Tensor p = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor t = Tensor::from_rows({{0, 0}, {0, 0}});
  CHECK(g.value(g.l1_mean_rows(g.input(p), t))(0, 0) == doctest::Approx(5.0));

  const auto empty = g.l1_mean_rows(g.input(Tensor(0, 8)), Tensor(0, 8));
  CHECK(g.value(empty)(0, 0) == 0.0);
}

TEST_CASE("chained composite gradcheck") {
  // two-layer MLP with layer norm, probing a realistic composition
  Rng rng(69);
  OpCheck{{{"x", rand_t(rng, 3, 5)},
           {"w1", rand_t(rng, 6, 5)},
           {"b1", rand_t(rng, 1, 6)},
           {"gamma", rand_t(rng, 1, 6)},
           {"beta", rand_t(rng, 1, 6)},
           {"w2", rand_t(rng, 2, 6)},
           {"b2", rand_t(rng, 1, 2)}},
          [](ad::Graph& g, const std::vector<ad::NodeId>& p) {
            auto h = g.relu(g.linear(p[0], p[1], p[2]));
            h = g.layer_norm(h, p[3], p[4]);
            return g.linear(h, p[5], p[6]);
          }}
      .run(rng);
}
