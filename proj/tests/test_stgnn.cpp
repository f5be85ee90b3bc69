#include "doctest.h"

#include <cmath>
#include <numbers>

#include "common/error.hpp"
#include "numcore/ops.hpp"
#include "numcore/rng.hpp"
#include "stgnn/stgnn.hpp"
#include "support/gradcheck.hpp"

using namespace tel2veh;
using namespace tel2veh::stgnn;
using num::Tensor;

namespace {

StgnnConfig small_config(std::size_t n) {
  StgnnConfig c;
  c.n_nodes = n;
  c.in_steps = 6;
  c.out_steps = 3;
  c.channels = 3;
  c.layers = 2;
  c.dilations = {1, 2};
  c.embedding_dim = 2;
  c.head_hidden = 4;
  return c;
}

// Days of 156 five-minute rows; node n follows a phase-shifted sinusoid.
flow::FlowMatrix sinusoid_flows(std::size_t nodes, std::size_t days, double noise, std::uint64_t seed) {
  num::Rng rng(seed);
  std::vector<flow::Timestamp> times;
  std::vector<std::string> ids;
  std::vector<double> values;
  for (std::size_t n = 0; n < nodes; ++n) ids.push_back(std::to_string(n + 1));
  for (std::size_t d = 0; d < days; ++d) {
    for (std::size_t k = 0; k < 156; ++k) {
      times.push_back(flow::make_timestamp(2022, 9, 1 + static_cast<int>(d), 6, 0) + 300 * static_cast<int>(k));
      for (std::size_t n = 0; n < nodes; ++n) {
        const double phase = 2.0 * std::numbers::pi * (static_cast<double>(k) / 36.0 + 0.3 * static_cast<double>(n));
        values.push_back(std::max(0.0, 60.0 + 30.0 * std::sin(phase) + noise * rng.normal()));
      }
    }
  }
  return flow::FlowMatrix(flow::FlowKind::gct, 5, times, ids, values);
}

}  // namespace

TEST_CASE("receptive field and feature width") {
  StgnnConfig c;
  c.n_nodes = 5;
  CHECK(c.receptive_field() == 10);
  CHECK(c.feature_width() == 3);
  CHECK_NOTHROW(c.validate());
  c.dilations = {1, 2, 4, 8};
  CHECK_THROWS_AS(c.validate(), Error);
  c.dilations = {1, 2};
  CHECK_THROWS_AS(c.validate(), Error);
  const auto back = StgnnConfig::parse(small_config(4).serialize());
  CHECK(back.serialize() == small_config(4).serialize());
}

TEST_CASE("forward shapes and input validation") {
  const auto cfg = small_config(4);
  const StgnnModel m(cfg, t2v_test::ring_graph(4), 1);
  num::Rng rng(2);
  const Tensor x = t2v_test::away_from_zero({3, 1, 4, 6}, rng);
  const auto out = m.forward(x);
  CHECK(out.prediction.shape() == num::Shape{3, 4, 3});
  CHECK(out.features.shape() == num::Shape{3, 3, 4, cfg.feature_width()});
  CHECK_THROWS_AS(m.forward(t2v_test::away_from_zero({3, 1, 5, 6}, rng)), Error);
  CHECK_THROWS_AS(StgnnModel(cfg, t2v_test::ring_graph(5), 1), Error);
  const Tensor adp = m.adaptive_adjacency();
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 4; ++j) total += adp.at({i, j});
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("relabelling nodes permutes the forecast") {
  const auto cfg = small_config(5);
  const auto g = t2v_test::ring_graph(5);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  StgnnModel a(cfg, g, 7);
  StgnnModel b(cfg, g.permuted(perm), 7);
  // Same seed gives the same weights; node embeddings follow the relabelling.
  const Tensor e1a = a.params().get("adp.e1"), e2a = a.params().get("adp.e2");
  Tensor e1b = b.params().get("adp.e1"), e2b = b.params().get("adp.e2");
  const std::size_t e = cfg.embedding_dim;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < e; ++k) {
      e1b.mutable_values()[i * e + k] = e1a.values()[perm[i] * e + k];
      e2b.mutable_values()[k * 5 + i] = e2a.values()[k * 5 + perm[i]];
    }
  }
  num::Rng rng(3);
  const Tensor x = t2v_test::away_from_zero({2, 1, 5, 6}, rng);
  const Tensor ya = a.predict(x);
  const Tensor yb = b.predict(num::index_select(x, 2, perm));
  const Tensor expect = num::index_select(ya, 1, perm);
  for (std::size_t i = 0; i < ya.size(); ++i) CHECK(yb.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
}

TEST_CASE("end-to-end gradients match central differences") {
  for (bool adaptive : {true, false}) {
    auto cfg = small_config(4);
    cfg.use_adaptive_adjacency = adaptive;
    StgnnModel m(cfg, t2v_test::ring_graph(4), 11);
    m.set_output_affine({1.0, 2.0, 3.0, 4.0}, {2.0, 1.0, 0.5, 3.0});
    num::Rng rng(12);
    // Non-zero biases so relu kinks are not hit at the origin.
    for (auto& [name, t] : m.params().items()) {
      Tensor p = t;
      if (name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2")) {
        for (auto& v : p.mutable_values()) v = rng.uniform(-0.3, 0.3);
      }
    }
    const Tensor x = t2v_test::away_from_zero({2, 1, 4, 6}, rng);
    std::vector<std::pair<std::string, Tensor>> ps(m.params().items().begin(), m.params().items().end());
    const auto r = t2v_test::check_gradients(ps, [&] { return t2v_test::weighted_sum(m.predict(x)); });
    CAPTURE(adaptive);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("a frozen model refuses gradient recording") {
  StgnnModel m(small_config(4), t2v_test::ring_graph(4), 1);
  num::Rng rng(2);
  const Tensor x = t2v_test::away_from_zero({1, 1, 4, 6}, rng);
  CHECK_THROWS_AS(m.extract_features(x), Error);
  m.freeze();
  CHECK(m.frozen());
  num::Tape tape;
  {
    num::TapeScope scope(tape);
    CHECK_THROWS_AS(m.forward(x), Error);
    // Extraction is allowed and records nothing.
    const Tensor f = m.extract_features(x);
    CHECK(f.shape()[3] == m.config().feature_width());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("checkpoint round trip reproduces forecasts bit for bit") {
  StgnnModel m(small_config(4), t2v_test::ring_graph(4), 4);
  m.set_output_affine({10.0}, {3.0});
  m.freeze();
  num::Rng rng(5);
  const Tensor x = t2v_test::away_from_zero({2, 1, 4, 6}, rng);
  const auto bytes = m.to_checkpoint("stage=1").serialize();
  const auto back = StgnnModel::from_checkpoint(num::Checkpoint::parse(bytes));
  CHECK(back.frozen());
  CHECK(back.node_ids() == m.node_ids());
  CHECK(back.to_checkpoint("stage=1").serialize() == bytes);
  num::NoTapeScope off;
  const Tensor a = m.predict(x), b = back.predict(x);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("window sets drop windows touching gaps or day changes") {
  auto flows = sinusoid_flows(2, 2, 0.0, 1);
  std::vector<double> v(flows.values().begin(), flows.values().end());
  v[20 * 2 + 1] = std::numeric_limits<double>::quiet_NaN();
  const flow::FlowMatrix gappy(flow::FlowKind::gct, 5, flows.times(), flows.node_ids(), v);
  const auto starts = clean_window_starts({&gappy}, {0, 312}, 12, 12);
  // Row 20 kills starts 0..20 on day one: 133 - 21 left, plus day two.
  CHECK(starts.size() == (133 - 21) + 133);
  for (auto s : starts) CHECK((s + 24 <= 20 || s > 20));
  const auto norm = flow::fit_normalizer(gappy, {0, 156});
  const WindowSet ws(gappy, norm, starts, 12, 12, {"gct"});
  CHECK(ws.inputs({0, 1}).shape() == num::Shape{2, 1, 2, 12});
  CHECK(ws.targets({0}).shape() == num::Shape{1, 2, 12});
  CHECK(ws.target(0, 0, 0) == gappy.at(starts[0] + 12, 0));
  CHECK(ws.lineage().count("gct") == 1);
}

TEST_CASE("training beats persistence on a noisy sinusoid and is deterministic") {
  const auto flows = sinusoid_flows(3, 5, 3.0, 9);
  const auto norm = flow::fit_normalizer(flows, {0, 468});
  const auto train_starts = clean_window_starts({&flows}, {0, 468}, 12, 12);
  const auto val_starts = clean_window_starts({&flows}, {468, 780}, 12, 12);
  const WindowSet train(flows, norm, train_starts, 12, 12, {"gct"});
  const WindowSet val(flows, norm, val_starts, 12, 12, {"gct"});
  StgnnConfig cfg;
  cfg.channels = 6;
  cfg.head_hidden = 16;
  cfg.embedding_dim = 3;
  num::TrainOptions opt;
  opt.epochs = 8;
  opt.batch_size = 32;
  opt.patience = 4;
  opt.adam.lr = 3e-3;
  const auto a = train_stage1(train, val, t2v_test::ring_graph(3), cfg, opt, 21);
  const double model_mae = evaluate_mae(a.model, val);
  const double naive = persistence_mae(val);
  MESSAGE("model MAE " << model_mae << " vs persistence " << naive);
  CHECK(model_mae < 0.7 * naive);
  CHECK(a.model.frozen());
  const auto b = train_stage1(train, val, t2v_test::ring_graph(3), cfg, opt, 21);
  CHECK(a.model.params().checksum() == b.model.params().checksum());
  CHECK(a.log.best_val == b.log.best_val);
}
