// End-to-end acceptance gate. Each test checks one shipped guarantee, in
// order: gradient integrity, routing invariants, balance-loss algebra,
// retrieval oracle equivalence, gate calibration, trace conformance, cost
// model accuracy, savings bands, full-task learning, corpus updatability,
// and CLI reproducibility. A09 trains the default configuration once and
// A10 reuses that run, so this binary is the slow suite.

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "xrag/cost.hpp"
#include "xrag/eval.hpp"
#include "xrag/train.hpp"

namespace {

namespace fs = std::filesystem;

using xrag::Corpus;
using xrag::CostParams;
using xrag::EvalMode;
using xrag::Example;
using xrag::Fact;
using xrag::FactTask;
using xrag::GateMode;
using xrag::GateOverride;
using xrag::HeldoutFact;
using xrag::InferOptions;
using xrag::Rng;
using xrag::Settings;
using xrag::SystemState;
using xrag::Tape;
using xrag::Tensor;
using xrag::Vocab;

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch())
      .count();
}

// gtest stores numeric properties as integers; route doubles through text.
std::string prop(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

Settings tiny_settings() {
  Settings s;
  s.model_d_model = 16;
  s.model_n_layers = 2;
  s.model_n_heads = 2;
  s.model_d_ff = 32;
  s.model_n_experts = 2;
  s.model_k_experts = 1;
  s.model_moe_layers = {1};
  s.model_max_seq_len = 48;
  s.task_n_entities = 6;
  s.task_n_relations = 4;
  s.task_n_values = 8;
  s.task_n_decoy_values = 0;
  s.task_n_facts = 10;
  s.task_external_fraction = 0.5;
  s.task_n_heldout = 2;
  s.task_min_repeats = 2;
  s.train_epochs = 2;
  s.train_warmup_epochs = 1;
  s.train_batch_size = 4;
  s.eval_max_answer_tokens = 3;
  s.validate();
  return s;
}

Vocab vocab_of(const Settings& s) {
  return Vocab(s.task_n_entities, s.task_n_relations, s.total_values());
}

Corpus corpus_of(const FactTask& t, const Vocab& v, const Tensor& table) {
  Corpus c;
  int i = 0;
  for (const Fact& f : t.facts) {
    if (!f.external) continue;
    c.add(xrag::detail::padded_id("x", i++),
          {v.entity(f.entity), v.relation(f.relation), v.value(f.value)},
          table);
  }
  return c;
}

struct Bundle {
  Settings settings;
  FactTask task;
  SystemState sys;
  Corpus corpus;

  explicit Bundle(const Settings& s, std::uint64_t seed)
      : settings(s), task(xrag::gen_task(s, seed)), sys(s) {
    Rng rng(seed);
    sys.init_params(rng);
    corpus = corpus_of(task, vocab_of(s), sys.model.token_embedding());
  }
};

// Repeats the task's test queries until the stream holds n entries.
std::vector<Example> tiled_queries(const FactTask& task, int n) {
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(out.size()) < n)
    for (const Example& ex : task.test) {
      if (static_cast<int>(out.size()) == n) break;
      out.push_back(ex);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient integrity: at least 100 random graphs, spanning every graph op
// plus full training-step losses (answer cross-entropy, load-balance term,
// and the straight-through gate term with a sampled decision), all matching
// central finite differences to 1e-6 inside a minute.
// ---------------------------------------------------------------------------

TEST(Acceptance, A01GradientsMatchFiniteDifferences) {
  const double t0 = now_seconds();
  int graphs = 0;
  double worst = 0.0;
  std::set<std::string> ops_used;

  for (int g = 0; g < 94; ++g) {
    Rng rng(Rng::mix(0xa01, static_cast<std::uint64_t>(g)));
    Tape tape;
    std::vector<Tensor> leaves;
    auto fresh = [&](int r, int c, double scale, double shift) {
      std::vector<double> v(static_cast<std::size_t>(r) * c);
      for (auto& x : v) x = shift + scale * rng.next_gaussian();
      Tensor t = Tensor::param(r, c, std::move(v));
      leaves.push_back(t);
      return t;
    };

    Tensor x = fresh(2 + static_cast<int>(rng.below(3)),
                     2 + static_cast<int>(rng.below(4)), 0.6, 0.0);
    const int n_ops = 4 + static_cast<int>(rng.below(4));
    for (int o = 0; o < n_ops; ++o) {
      switch (rng.below(14)) {
        case 0: {
          const int c2 = 2 + static_cast<int>(rng.below(4));
          x = matmul(x, fresh(x.cols(), c2, 0.6, 0.0), &tape);
          ops_used.insert("matmul");
          break;
        }
        case 1:
          x = add(x, fresh(x.rows(), x.cols(), 0.6, 0.0), &tape);
          ops_used.insert("add");
          break;
        case 2:
          x = add_row(x, fresh(1, x.cols(), 0.6, 0.0), &tape);
          ops_used.insert("add_row");
          break;
        case 3:
          x = mul(x, fresh(x.rows(), x.cols(), 0.5, 1.0), &tape);
          ops_used.insert("mul");
          break;
        case 4:
          x = scale(x, fresh(1, 1, 0.3, 1.0), &tape);
          ops_used.insert("scale");
          break;
        case 5:
          x = scale_rows(x, fresh(x.rows(), 1, 0.3, 1.0), &tape);
          ops_used.insert("scale_rows");
          break;
        case 6:
          x = cmul(sigmoid(x, &tape), 2.0, &tape);
          ops_used.insert("sigmoid");
          ops_used.insert("cmul");
          break;
        case 7:
          // The +3 shift keeps every relu input far from the kink, so the
          // finite-difference probe never straddles it.
          x = relu(add(x, Tensor::filled(x.rows(), x.cols(), 3.0), &tape),
                   &tape);
          ops_used.insert("relu");
          break;
        case 8:
          x = layer_norm(x, fresh(1, x.cols(), 0.2, 1.0),
                         fresh(1, x.cols(), 0.2, 0.0), &tape);
          ops_used.insert("layer_norm");
          break;
        case 9:
          x = softmax_rows(x, &tape);
          ops_used.insert("softmax_rows");
          break;
        case 10: {
          if (x.cols() < 2) break;
          const int keep = 1 + static_cast<int>(
                                   rng.below(static_cast<std::uint64_t>(
                                       x.cols() - 1)));
          x = xrag::slice(x, 0, x.rows(), 0, keep, &tape);
          ops_used.insert("slice");
          break;
        }
        case 11:
          x = concat_cols({x, fresh(x.rows(), 2, 0.6, 0.0)}, &tape);
          ops_used.insert("concat_cols");
          break;
        case 12:
          x = concat_rows({x, fresh(1, x.cols(), 0.6, 0.0)}, &tape);
          ops_used.insert("concat_rows");
          break;
        case 13: {
          // Round trip through a row subset and back into place.
          std::vector<int> idx;
          for (int r = 0; r < x.rows(); ++r)
            if (rng.below(2) == 0) idx.push_back(r);
          if (idx.empty()) idx.push_back(0);
          Tensor sub = take_rows(x, idx, &tape);
          x = add(x, scatter_rows(sub, idx, x.rows(), &tape), &tape);
          ops_used.insert("take_rows");
          ops_used.insert("scatter_rows");
          break;
        }
      }
    }

    // Every third graph trains an embedding table through a gather; every
    // fourth adds a sampled straight-through branch on top.
    if (g % 3 == 0) {
      Tensor table = fresh(6, x.cols(), 0.6, 0.0);
      std::vector<int> ids;
      for (int r = 0; r < x.rows(); ++r)
        ids.push_back(static_cast<int>(rng.below(6)));
      x = add(x, embedding_rows(table, ids, &tape), &tape);
      ops_used.insert("embedding_rows");
    }
    if (g % 5 == 0) {
      std::vector<int> rows_idx, cols_idx;
      for (int r = 0; r < x.rows(); ++r) {
        rows_idx.push_back(r);
        cols_idx.push_back(static_cast<int>(
            rng.below(static_cast<std::uint64_t>(x.cols()))));
      }
      Tensor picked = gather_entries(x, rows_idx, cols_idx, &tape);
      x = scale_rows(x, sigmoid(picked, &tape), &tape);
      ops_used.insert("gather_entries");
    }

    Tensor loss;
    if (g % 4 == 0) {
      std::vector<int> targets(static_cast<std::size_t>(x.rows()));
      for (auto& t : targets)
        t = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.cols())));
      targets[0] = -1;  // one unscored row
      loss = cross_entropy(x, targets, &tape);
      ops_used.insert("cross_entropy");
    } else {
      Tensor col = fresh(x.cols(), 1, 0.6, 0.0);
      loss = matmul(xrag::pool_rows(x, &tape), col, &tape);
      ops_used.insert("pool_rows");
    }
    if (g % 4 == 1) {
      Tensor p = sigmoid(cmul(loss, 0.3, &tape), &tape);
      const double z = rng.below(2) ? 1.0 : 0.0;
      loss = add(loss, cmul(xrag::straight_through(p, z, &tape), 0.7, &tape),
                 &tape);
      ops_used.insert("straight_through");
    }

    tape.backward(loss);
    auto rep = gradcheck::check(tape, loss, leaves, rng, 2);
    worst = std::max(worst, rep.max_err);
    ASSERT_LT(rep.max_err, 1e-6) << "graph " << g;
    ++graphs;
  }

  const std::vector<std::string> required = {
      "matmul", "add", "add_row", "mul", "scale", "scale_rows", "cmul",
      "sigmoid", "relu", "layer_norm", "softmax_rows", "slice",
      "concat_cols", "concat_rows", "take_rows", "scatter_rows",
      "embedding_rows", "gather_entries", "cross_entropy", "pool_rows",
      "straight_through"};
  for (const auto& op : required)
    EXPECT_TRUE(ops_used.count(op)) << "op never exercised: " << op;

  // Full training-step graphs: answer loss plus balance loss, with the
  // sampled hard decision entering through the straight-through surrogate.
  Settings s = tiny_settings();
  s.gate_mode = "sample";
  for (int variant = 0; variant < 2; ++variant) {
    if (variant == 1) s.fusion_mode = "augment";
    Bundle b(s, 47 + variant);
    const Vocab v = vocab_of(s);
    const Example* parametric = nullptr;
    const Example* external = nullptr;
    for (const Example& ex : b.task.train) {
      if (ex.label == 0 && !parametric) parametric = &ex;
      if (ex.label == 1 && !external) external = &ex;
    }
    ASSERT_TRUE(parametric && external);
    struct Case {
      const Example* ex;
      int z;
    };
    const std::vector<Case> cases = {
        {parametric, 1}, {parametric, 0}, {external, 1}};
    for (const auto& c : cases) {
      std::vector<double> hq =
          xrag::pooled_query(b.sys.model, c.ex->query).value();
      const int decoy = c.ex->label == 1 ? v.value(0) : -1;
      Tape tape;
      xrag::StepGraph sg = xrag::build_step(
          b.sys, b.corpus, {c.ex, c.z, true, decoy, hq}, &tape);
      ASSERT_FALSE(sg.skipped);
      tape.backward(sg.loss);
      std::vector<Tensor> leaves = {b.sys.gate.weight(), b.sys.gate.bias()};
      for (const auto& [name, t] : b.sys.model.named_params())
        leaves.push_back(t);
      if (variant == 1)
        for (const auto& [name, t] : b.sys.augment.named_params())
          leaves.push_back(t);
      Rng probe(Rng::mix(900, static_cast<std::uint64_t>(graphs)));
      auto rep = gradcheck::check(tape, sg.loss, leaves, probe, 2);
      worst = std::max(worst, rep.max_err);
      ASSERT_LT(rep.max_err, 1e-6)
          << "model step, label " << c.ex->label << " z " << c.z;
      b.sys.zero_grad();
      ++graphs;
    }
  }

  EXPECT_GE(graphs, 100);
  const double elapsed = now_seconds() - t0;
  EXPECT_LT(elapsed, 60.0) << "gradient sweep took " << elapsed << "s";
  RecordProperty("graphs", graphs);
  RecordProperty("max_rel_err", prop(worst));
}

// ---------------------------------------------------------------------------
// Routing invariants: top-k equals an independent argsort oracle with ties
// to the lowest index, a single-expert layer reproduces the dense FFN bit
// for bit, and shifting all of a token's router scores by a constant moves
// neither the selection nor the combine weights.
// ---------------------------------------------------------------------------

TEST(Acceptance, A02RoutingMatchesArgsortOracle) {
  Rng rng(0xa02);
  for (int i = 0; i < 10000; ++i) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const int k = 1 + static_cast<int>(rng.below(
                          static_cast<std::uint64_t>(n)));
    std::vector<double> scores(static_cast<std::size_t>(n));
    // A third of the vectors draw from three levels only, forcing ties.
    const bool coarse = i % 3 == 0;
    for (auto& s : scores)
      s = coarse ? static_cast<double>(rng.below(3)) : rng.next_gaussian();

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores[static_cast<std::size_t>(a)] >
             scores[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(k));

    ASSERT_EQ(xrag::top_k_indices(scores, k), order) << "vector " << i;
  }

  // Tie handling pinned on exact duplicates.
  EXPECT_EQ(xrag::top_k_indices({1.0, 1.0, 1.0, 1.0}, 2),
            (std::vector<int>{0, 1}));
  EXPECT_EQ(xrag::top_k_indices({2.0, 5.0, 5.0, 2.0}, 3),
            (std::vector<int>{1, 2, 0}));
  EXPECT_THROW(xrag::top_k_indices({1.0, 2.0}, 0), xrag::ContractError);
  EXPECT_THROW(xrag::top_k_indices({1.0, 2.0}, 3), xrag::ContractError);

  // One expert: routed output equals the expert applied directly, bitwise.
  const int d = 8, ff = 16, T = 5;
  xrag::MoeLayer single = xrag::MoeLayer::make(d, ff, 1);
  for (auto& [name, t] : std::vector<std::pair<std::string, Tensor>>{
           {"w1", single.experts[0].w1},
           {"b1", single.experts[0].b1},
           {"w2", single.experts[0].w2},
           {"b2", single.experts[0].b2},
           {"rw", single.router_w},
           {"rb", single.router_b}})
    for (auto& v : t.value()) v = 0.4 * rng.next_gaussian();
  std::vector<double> xv(static_cast<std::size_t>(T) * d);
  for (auto& v : xv) v = rng.next_gaussian();
  Tensor x = Tensor::from(T, d, xv);

  xrag::RouterDecision dec;
  Tensor aux;
  Tensor routed = single.forward(x, 1, 0.01, nullptr, {}, dec, aux);
  Tensor direct = single.experts[0].forward(x, nullptr);
  EXPECT_EQ(routed.value(), direct.value());
  EXPECT_EQ(dec.dispatch, (std::vector<int>{T}));

  // Constant shift of every router score: selection identical, combine
  // weights equal to floating-point noise.
  auto make_routed = [&](double bias_shift, Rng& init) {
    xrag::MoeLayer m = xrag::MoeLayer::make(d, ff, 4);
    Rng local = init;
    for (auto& v : m.router_w.value()) v = local.next_gaussian();
    for (auto& v : m.router_b.value()) v = local.next_gaussian() + bias_shift;
    for (auto& e : m.experts)
      for (Tensor* t : {&e.w1, &e.b1, &e.w2, &e.b2})
        for (auto& v : t->value()) v = 0.3 * local.next_gaussian();
    return m;
  };
  Rng init(0xbead);
  xrag::MoeLayer base = make_routed(0.0, init);
  xrag::MoeLayer shifted = make_routed(7.25, init);

  xrag::RouterDecision d0, d1;
  Tensor a0, a1;
  Tensor y0 = base.forward(x, 2, 0.01, nullptr, {}, d0, a0);
  Tensor y1 = shifted.forward(x, 2, 0.01, nullptr, {}, d1, a1);
  ASSERT_EQ(d0.selected, d1.selected);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < 2; ++j)
      EXPECT_NEAR(d0.weights[static_cast<std::size_t>(t)]
                            [static_cast<std::size_t>(j)],
                  d1.weights[static_cast<std::size_t>(t)]
                            [static_cast<std::size_t>(j)],
                  1e-12);
  for (std::size_t i = 0; i < y0.value().size(); ++i)
    EXPECT_NEAR(y0.value()[i], y1.value()[i], 1e-9);
}

// ---------------------------------------------------------------------------
// Balance-loss algebra at its two analytic operating points. The input is
// built so dispatch fractions and mean router probabilities are uniform
// (symmetric per-token preferences) or fully concentrated on expert 0.
// ---------------------------------------------------------------------------

TEST(Acceptance, A03BalanceLossHitsAnalyticOperatingPoints) {
  const int E = 4, T = 8;
  const double alpha = 0.37;
  xrag::MoeLayer layer = xrag::MoeLayer::make(E, 6, E);
  for (int i = 0; i < E; ++i) layer.router_w.at(i, i) = 1.0;

  // Token t prefers expert t mod E by a huge margin: dispatch is exactly
  // uniform and the mean router probability is 1/E per expert by symmetry,
  // so the loss collapses to alpha * E * (1/E) = alpha.
  Tensor uniform = Tensor::zeros(T, E);
  for (int t = 0; t < T; ++t) uniform.at(t, t % E) = 80.0;
  Tape tape_u;
  xrag::RouterDecision dec_u;
  Tensor aux_u;
  layer.forward(uniform, 1, alpha, &tape_u, {}, dec_u, aux_u);
  ASSERT_TRUE(aux_u.defined());
  EXPECT_EQ(dec_u.dispatch, std::vector<int>(E, T / E));
  EXPECT_NEAR(aux_u.item(), alpha, 1e-12);

  // Every token prefers expert 0: dispatch and probability mass are both
  // one-hot, so the loss reaches its alpha * E ceiling.
  Tensor hot = Tensor::zeros(T, E);
  for (int t = 0; t < T; ++t) hot.at(t, 0) = 80.0;
  Tape tape_h;
  xrag::RouterDecision dec_h;
  Tensor aux_h;
  layer.forward(hot, 1, alpha, &tape_h, {}, dec_h, aux_h);
  ASSERT_TRUE(aux_h.defined());
  EXPECT_EQ(dec_h.dispatch[0], T);
  EXPECT_NEAR(aux_h.item(), alpha * E, 1e-12);
}

// ---------------------------------------------------------------------------
// Retrieval oracle equivalence: repeated-max search against an independent
// stable-sort oracle on 100 random corpora, scores compared bitwise.
// ---------------------------------------------------------------------------

TEST(Acceptance, A04SearchMatchesExhaustiveSort) {
  Rng rng(0xa04);
  for (int c = 0; c < 100; ++c) {
    const int n_vocab = 12 + static_cast<int>(rng.below(40));
    const int d = 4 + static_cast<int>(rng.below(12));
    const int M = 1 + static_cast<int>(rng.below(1000));
    std::vector<double> tv(static_cast<std::size_t>(n_vocab) * d);
    for (auto& v : tv) v = rng.next_gaussian();
    const Tensor table = Tensor::from(n_vocab, d, std::move(tv));

    Corpus corpus;
    std::vector<std::vector<int>> docs;
    for (int i = 0; i < M; ++i) {
      std::vector<int> tokens;
      if (i > 0 && rng.below(8) == 0) {
        tokens = docs[rng.below(docs.size())];  // duplicate: forces a tie
      } else {
        const int len = static_cast<int>(rng.below(5));  // empty allowed
        for (int j = 0; j < len; ++j)
          tokens.push_back(static_cast<int>(rng.below(
              static_cast<std::uint64_t>(n_vocab))));
      }
      docs.push_back(tokens);
      corpus.add(xrag::detail::padded_id("d", i), tokens, table);
    }

    std::vector<int> q_tokens;
    const int qlen = 1 + static_cast<int>(rng.below(4));
    for (int j = 0; j < qlen; ++j)
      q_tokens.push_back(static_cast<int>(rng.below(
          static_cast<std::uint64_t>(n_vocab))));
    const std::vector<double> q = xrag::embed_tokens(q_tokens, table);
    const int k = 1 + static_cast<int>(rng.below(8));

    // Oracle: score every non-empty document with the same dot-product
    // loop, then stable-sort descending so ties keep insertion order.
    struct Scored {
      int index;
      double score;
    };
    std::vector<Scored> oracle;
    for (int i = 0; i < M; ++i) {
      const auto& emb = corpus.doc(i).embedding;
      bool zero = true;
      for (double v : emb) zero = zero && v == 0.0;
      if (zero) continue;
      double dot = 0.0;
      for (int j = 0; j < d; ++j)
        dot += emb[static_cast<std::size_t>(j)] * q[static_cast<std::size_t>(j)];
      oracle.push_back({i, dot});
    }
    std::stable_sort(oracle.begin(), oracle.end(),
                     [](const Scored& a, const Scored& b) {
                       return a.score > b.score;
                     });

    const auto result = corpus.search(q, k);
    const std::size_t want =
        std::min(static_cast<std::size_t>(k), oracle.size());
    ASSERT_EQ(result.entries.size(), want) << "corpus " << c;
    for (std::size_t j = 0; j < want; ++j) {
      EXPECT_EQ(result.entries[j].index, oracle[j].index)
          << "corpus " << c << " rank " << j;
      EXPECT_EQ(result.entries[j].score, oracle[j].score)
          << "corpus " << c << " rank " << j;
    }
  }

  Corpus empty;
  EXPECT_THROW(empty.search({0.0}, 1), xrag::EmptyCorpusError);
}

// ---------------------------------------------------------------------------
// Gate calibration: sampled retrieval frequency tracks p_ret to within a
// hundredth over 100,000 draws, and threshold decisions are pure functions
// of p_ret.
// ---------------------------------------------------------------------------

TEST(Acceptance, A05GateSamplingCalibratedThresholdDeterministic) {
  xrag::RetrievalGate gate(4, 0.5);
  const int n_draws = 100000;
  int which = 0;
  for (double p : {0.05, 0.3, 0.5, 0.82}) {
    Rng rng(Rng::mix(0xa05, static_cast<std::uint64_t>(which++)));
    int hits = 0;
    for (int i = 0; i < n_draws; ++i) {
      auto d = gate.decide(p, GateMode::Sample, &rng);
      hits += d.z_ret;
      ASSERT_GE(d.draw, 0.0);
      ASSERT_LT(d.draw, 1.0);
    }
    EXPECT_NEAR(static_cast<double>(hits) / n_draws, p, 0.01)
        << "p_ret " << p;
  }

  // Threshold mode: no randomness consumed, stable across repetition,
  // boundary decided by >=.
  for (double p : {0.0, 0.2, 0.499, 0.5, 0.7, 1.0}) {
    const auto first = gate.decide(p, GateMode::Threshold);
    for (int i = 0; i < 100; ++i) {
      const auto again = gate.decide(p, GateMode::Threshold);
      ASSERT_EQ(again.z_ret, first.z_ret);
    }
    EXPECT_EQ(first.z_ret, p >= 0.5 ? 1 : 0) << "p_ret " << p;
  }

  // Identical generator state reproduces the identical decision stream.
  Rng ra(77), rb(77);
  for (int i = 0; i < 1000; ++i)
    ASSERT_EQ(gate.decide(0.42, GateMode::Sample, &ra).z_ret,
              gate.decide(0.42, GateMode::Sample, &rb).z_ret);
}

// ---------------------------------------------------------------------------
// Forced-gate trace conformance: with the gate pinned off the model sees
// exactly the bare query; pinned on it sees the query plus the top-k
// documents in rank order with per-document segment ids. Traces are a pure
// function of (query, seed).
// ---------------------------------------------------------------------------

TEST(Acceptance, A06ForcedTracesMatchBothBranchesDeterministically) {
  Settings s = tiny_settings();
  Bundle b(s, 0xa06);
  const Vocab v = vocab_of(s);
  const Example* ext = nullptr;
  for (const Example& ex : b.task.test)
    if (ex.label == 1) {
      ext = &ex;
      break;
    }
  ASSERT_TRUE(ext);
  const std::uint64_t seed = 11;

  InferOptions off;
  off.gate_override = GateOverride::ForceOff;
  const auto t_off = xrag::infer(ext->query, b.sys, b.corpus, seed, off);
  EXPECT_EQ(t_off.gate.z_ret, 0);
  EXPECT_TRUE(t_off.retrieved.entries.empty());
  EXPECT_EQ(t_off.fused.tokens, ext->query);
  EXPECT_EQ(t_off.fused.segments,
            std::vector<int>(ext->query.size(), 0));
  EXPECT_FALSE(t_off.cost.retrieved);
  EXPECT_EQ(t_off.cost.search_mults, 0.0);
  EXPECT_EQ(t_off.cost.doc_tokens_read, 0.0);

  InferOptions on;
  on.gate_override = GateOverride::ForceOn;
  const auto t_on = xrag::infer(ext->query, b.sys, b.corpus, seed, on);
  EXPECT_EQ(t_on.gate.z_ret, 1);
  const int want_k =
      std::min(s.fusion_k_docs, b.corpus.searchable());
  ASSERT_EQ(static_cast<int>(t_on.retrieved.entries.size()), want_k);

  std::vector<int> want_tokens = ext->query;
  std::vector<int> want_segments(ext->query.size(), 0);
  int rank = 0;
  for (const auto& entry : t_on.retrieved.entries) {
    ++rank;
    want_tokens.push_back(Vocab::kSep);
    want_segments.push_back(rank);
    for (int tok : b.corpus.doc(entry.index).tokens) {
      want_tokens.push_back(tok);
      want_segments.push_back(rank);
    }
  }
  EXPECT_EQ(t_on.fused.tokens, want_tokens);
  EXPECT_EQ(t_on.fused.segments, want_segments);
  EXPECT_EQ(t_on.fused.answer_start,
            static_cast<int>(want_tokens.size()));
  EXPECT_TRUE(t_on.cost.retrieved);
  EXPECT_GT(t_on.cost.search_mults, 0.0);

  // Determinism: identical (query, seed) reproduces the entire trace, under
  // both forced branches and the sampled gate.
  const auto t_off2 = xrag::infer(ext->query, b.sys, b.corpus, seed, off);
  const auto t_on2 = xrag::infer(ext->query, b.sys, b.corpus, seed, on);
  EXPECT_EQ(xrag::trace_line(t_off, v), xrag::trace_line(t_off2, v));
  EXPECT_EQ(xrag::trace_line(t_on, v), xrag::trace_line(t_on2, v));
  EXPECT_EQ(t_off.answer, t_off2.answer);
  EXPECT_EQ(t_on.answer, t_on2.answer);

  Settings sampled = s;
  sampled.gate_mode = "sample";
  Bundle bs(sampled, 0xa06);
  for (std::uint64_t probe_seed : {3u, 4u, 5u}) {
    const auto p1 = xrag::infer(ext->query, bs.sys, bs.corpus, probe_seed, {});
    const auto p2 = xrag::infer(ext->query, bs.sys, bs.corpus, probe_seed, {});
    ASSERT_EQ(xrag::trace_line(p1, v), xrag::trace_line(p2, v));
  }
}

// ---------------------------------------------------------------------------
// Cost-model validation: the measured mean multiply count over 1000 queries
// sits within 5% of the analytic expectation at the observed retrieval
// fraction, and the expectation is affine and non-decreasing in that
// fraction.
// ---------------------------------------------------------------------------

TEST(Acceptance, A07MeasuredCostWithinFivePercentOfModel) {
  Settings s = tiny_settings();
  s.gate_mode = "sample";  // untrained gate: p_ret = 0.5 exactly
  s.eval_max_answer_tokens = 2;
  Bundle b(s, 0xa07);
  const Vocab v = vocab_of(s);
  const auto queries = tiled_queries(b.task, 1000);

  // Per-token generator cost calibrated on both forced streams together,
  // which mirrors the deployment mixture without consulting the gate. Doc
  // tokens count as processed tokens: the generator reads them too.
  const auto calib_off =
      xrag::evaluate(b.sys, b.corpus, queries, v, EvalMode::NoRetrieve, 1);
  const auto calib_on =
      xrag::evaluate(b.sys, b.corpus, queries, v, EvalMode::ForceRetrieve, 1);
  double mults = 0.0, tokens = 0.0;
  for (const auto* m : {&calib_off, &calib_on})
    for (const auto& r : m->reports) {
      mults += r.generator_mults();
      tokens += r.query_tokens + r.answer_tokens + r.doc_tokens_read;
    }
  ASSERT_GT(tokens, 0.0);

  CostParams params;
  params.per_token = mults / tokens;
  params.corpus_size = b.corpus.searchable();
  params.embed_width = s.model_d_model;
  params.search = xrag::SearchKind::Brute;

  const auto normal =
      xrag::evaluate(b.sys, b.corpus, queries, v, EvalMode::Normal, 2);
  EXPECT_NEAR(normal.f_hat, 0.5, 0.06);
  const auto validation =
      xrag::validate_against_measurement(normal.reports, params);
  EXPECT_LT(validation.deviation, 0.05);
  RecordProperty("deviation", prop(validation.deviation));

  // Affinity and monotonicity in the retrieval fraction.
  CostParams sweep = params;
  sweep.query_tokens = 2.0;
  sweep.answer_tokens = 3.0;
  sweep.doc_tokens = 8.0;
  std::vector<double> costs;
  for (double f : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    sweep.retrieval_fraction = f;
    costs.push_back(xrag::expected_cost(sweep));
  }
  for (std::size_t i = 1; i < costs.size(); ++i)
    EXPECT_GE(costs[i], costs[i - 1]);
  const double slope = costs[1] - costs[0];
  for (std::size_t i = 2; i < costs.size(); ++i)
    EXPECT_NEAR(costs[i] - costs[i - 1], slope, 1e-9 * std::abs(slope));
}

// ---------------------------------------------------------------------------
// Savings bands. With retrieval tuned to about half of the per-query cost
// and a half-open gate, the measured saving against always-retrieving lands
// in the 20-35% window. Separately, a query that skips retrieval on the
// sparse model needs at least 5x fewer multiplies than a dense
// configuration carrying ten times the parameters.
// ---------------------------------------------------------------------------

TEST(Acceptance, A08SavingsVsAlwaysRetrieveAndDenseBaseline) {
  Settings s = tiny_settings();
  s.gate_mode = "sample";  // untrained gate: retrieval on half the queries
  s.eval_max_answer_tokens = 7;
  Bundle b(s, 0xa08);
  const Vocab v = vocab_of(s);
  const auto queries = tiled_queries(b.task, 400);

  const auto base =
      xrag::evaluate(b.sys, b.corpus, queries, v, EvalMode::NoRetrieve, 3);
  const auto always =
      xrag::evaluate(b.sys, b.corpus, queries, v, EvalMode::ForceRetrieve, 3);
  const double extra_share = always.mean_cost / base.mean_cost - 1.0;
  // Premise of the band: retrieval adds roughly as much again as the bare
  // query, i.e. it is about half of an always-retrieve query's cost.
  ASSERT_GT(extra_share, 0.70);
  ASSERT_LT(extra_share, 1.60);

  const auto gated =
      xrag::evaluate(b.sys, b.corpus, queries, v, EvalMode::Normal, 4);
  EXPECT_NEAR(gated.f_hat, 0.5, 0.08);
  const double savings = 1.0 - gated.mean_cost / always.mean_cost;
  EXPECT_GE(savings, 0.20);
  EXPECT_LE(savings, 0.35);
  RecordProperty("savings_vs_always", prop(savings));

  // Dense comparison: same depth, no sparse layers, width chosen so the
  // checkpoint holds ~10x the parameters of the sparse model.
  const auto sparse_cfg = b.sys.model_config;
  const std::int64_t sparse_total = xrag::Model::n_total_params(sparse_cfg);
  Settings dense = s;
  dense.model_n_experts = 1;
  dense.model_k_experts = 1;
  dense.model_d_model = 2 * s.model_d_model;
  dense.model_n_heads = s.model_n_heads;
  std::int64_t dense_total = 0;
  for (int ff = dense.model_d_ff;; ff += 8) {
    dense.model_d_ff = ff;
    dense_total = xrag::Model::n_total_params(dense.model_config());
    if (dense_total >= 10 * sparse_total) break;
    ASSERT_LT(ff, 1 << 20);
  }
  const double param_ratio =
      static_cast<double>(dense_total) / static_cast<double>(sparse_total);
  EXPECT_GE(param_ratio, 10.0);
  EXPECT_LE(param_ratio, 11.0);

  dense.validate();
  SystemState dense_sys(dense);
  Rng dense_rng(0xa08);
  dense_sys.init_params(dense_rng);

  const auto sparse_off =
      xrag::evaluate(b.sys, b.corpus, b.task.test, v, EvalMode::NoRetrieve, 5);
  const auto dense_off = xrag::evaluate(dense_sys, b.corpus, b.task.test, v,
                                        EvalMode::NoRetrieve, 5);
  const double mult_ratio = dense_off.mean_cost / sparse_off.mean_cost;
  EXPECT_GE(mult_ratio, 5.0);
  RecordProperty("dense_mult_ratio", prop(mult_ratio));
}

// ---------------------------------------------------------------------------
// Full default run, shared by the two slow criteria below. Training wall
// time is captured for the budget check.
// ---------------------------------------------------------------------------

struct TrainedRun {
  Settings settings;
  FactTask task;
  SystemState sys;
  Corpus corpus;
  xrag::TrainResult result;
  double train_seconds = 0.0;

  TrainedRun()
      : settings(Settings{}),
        task(xrag::gen_task(settings, settings.seed)),
        sys(settings) {
    Rng rng(settings.seed);
    sys.init_params(rng);
    corpus = corpus_of(task, vocab_of(settings), sys.model.token_embedding());
    const double t0 = now_seconds();
    result = xrag::train(sys, corpus, task, settings.seed);
    train_seconds = now_seconds() - t0;
  }
};

const TrainedRun& trained_run() {
  static const TrainedRun run;
  return run;
}

TEST(Acceptance, A09DefaultTaskLearnsGateAndAnswers) {
  const TrainedRun& r = trained_run();
  ASSERT_FALSE(r.result.diverged);
  EXPECT_LT(r.train_seconds, 600.0)
      << "training took " << r.train_seconds << "s";

  const Vocab v = vocab_of(r.settings);
  const std::uint64_t seed = r.settings.seed;

  const auto forced = xrag::evaluate(r.sys, r.corpus, r.task.test, v,
                                     EvalMode::ForceRetrieve, seed);
  EXPECT_GE(forced.accuracy_external, 0.9);

  const double chance = 1.0 / r.settings.task_n_values;
  const auto off = xrag::evaluate(r.sys, r.corpus, r.task.test, v,
                                  EvalMode::NoRetrieve, seed);
  EXPECT_LE(off.accuracy_external, 3.0 * chance);

  const auto learned = xrag::evaluate(r.sys, r.corpus, r.task.test, v,
                                      EvalMode::Normal, seed);
  EXPECT_GE(learned.accuracy_external, 0.8);
  EXPECT_GE(learned.gate_recall, 0.8);
  EXPECT_GE(learned.gate_specificity, 0.8);
  const double true_fraction =
      static_cast<double>(learned.n_external) / learned.n_queries;
  EXPECT_NEAR(learned.f_hat, true_fraction, 0.15);

  RecordProperty("train_seconds", prop(r.train_seconds));
  RecordProperty("external_forced", prop(forced.accuracy_external));
  RecordProperty("external_learned", prop(learned.accuracy_external));
  RecordProperty("f_hat", prop(learned.f_hat));
}

// ---------------------------------------------------------------------------
// Corpus updatability: inserting the held-out document flips its query from
// wrong to right while the parameter checkpoint hashes identically on both
// sides of the probe.
// ---------------------------------------------------------------------------

TEST(Acceptance, A10CorpusInsertionFlipsHeldoutAnswer) {
  const TrainedRun& r = trained_run();
  ASSERT_FALSE(r.task.heldout.empty());
  const Vocab v = vocab_of(r.settings);

  const Fact& f = r.task.heldout.front();
  HeldoutFact h;
  h.id = xrag::detail::padded_id("h", 0);
  h.query = {v.entity(f.entity), v.relation(f.relation)};
  h.answer = {v.value(f.value)};
  h.doc_tokens = h.query;
  h.doc_tokens.push_back(v.value(f.value));

  Corpus probe_corpus = r.corpus;  // keep the shared corpus pristine
  const std::string prefix =
      (fs::path(::testing::TempDir()) / "acceptance_probe").string();
  const auto probe = xrag::corpus_update_probe(r.sys, probe_corpus, h, prefix,
                                               r.settings.seed);
  EXPECT_FALSE(probe.correct_before);
  EXPECT_TRUE(probe.correct_after);
  EXPECT_TRUE(probe.flipped());
  EXPECT_TRUE(probe.weights_untouched());
  EXPECT_GT(probe.prob_after, probe.prob_before);
  RecordProperty("prob_before", prop(probe.prob_before));
  RecordProperty("prob_after", prop(probe.prob_after));
}

// ---------------------------------------------------------------------------
// CLI reproducibility: two end-to-end runs from the same config and seed
// leave byte-identical artifacts, captured stdout included. Timing lines go
// to stderr by design and are excluded.
// ---------------------------------------------------------------------------

TEST(Acceptance, A11CliRunsAreByteIdentical) {
  const std::string cli = XRAG_CLI_PATH;
  ASSERT_TRUE(fs::exists(cli)) << cli;

  const fs::path root = fs::path(::testing::TempDir()) / "acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path cfg = root / "tiny.cfg";
  {
    std::ofstream out(cfg);
    out << "model.d_model = 16\nmodel.n_layers = 2\nmodel.n_heads = 2\n"
        << "model.d_ff = 32\nmodel.n_experts = 2\nmodel.k_experts = 1\n"
        << "model.moe_layers = 1\nmodel.max_seq_len = 48\n"
        << "task.n_entities = 6\ntask.n_relations = 4\ntask.n_values = 8\n"
        << "task.n_decoy_values = 6\ntask.n_facts = 10\n"
        << "task.n_heldout = 2\ntrain.epochs = 3\ntrain.warmup_epochs = 1\n"
        << "eval.max_answer_tokens = 3\nseed = 7\n";
  }

  auto run_pipeline = [&](const fs::path& dir) {
    fs::create_directories(dir);
    auto sh = [&](const std::string& args, const std::string& capture) {
      const std::string cmd = cli + " " + args + " > " +
                              (dir / capture).string() + " 2>/dev/null";
      ASSERT_EQ(std::system(cmd.c_str()), 0) << cmd;
    };
    const std::string base =
        " --config " + cfg.string() + " --data " + dir.string() + " --out " +
        dir.string();
    sh("gen --config " + cfg.string() + " --out " + dir.string(), "gen.out");
    sh("train" + base, "train.out");
    sh("eval" + base + " --ckpt " + (dir / "model.ckpt").string() +
           " --mode normal",
       "eval.out");
    sh("infer" + base + " --ckpt " + (dir / "model.ckpt").string() +
           " --query \"e0 r0\"",
       "infer.out");
    sh("bench" + base + " --ckpt " + (dir / "model.ckpt").string() +
           " --queries 40",
       "bench.out");
  };

  const fs::path da = root / "a", db = root / "b";
  run_pipeline(da);
  run_pipeline(db);
  if (HasFatalFailure()) return;

  auto listing = [](const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
      names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
  };
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
  };

  const auto names = listing(da);
  ASSERT_EQ(names, listing(db));
  ASSERT_GE(names.size(), 9u);  // task files, checkpoint, logs, captures
  for (const auto& name : names) {
    const std::string a = slurp(da / name), b = slurp(db / name);
    ASSERT_FALSE(a.empty()) << name;
    EXPECT_EQ(a, b) << "artifact differs between runs: " << name;
  }
}

}  // namespace
