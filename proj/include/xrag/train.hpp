#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "xrag/checkpoint.hpp"
#include "xrag/pipeline.hpp"
#include "xrag/task.hpp"

namespace xrag {

// External facts are never supervised on their stored value: every retrieved
// document gets its value slot swapped for an independent random token drawn
// from the whole answer pool, and the swap in the document whose (entity,
// relation) prefix matches the query becomes the target. The model can only
// fit that target by locating the matching document and copying its slot;
// no stored value leaves the corpus, and because every slot is drawn from
// the same pool, no token-identity shortcut separates the matching document
// from its distractors. Each external example also schedules one copy drill
// on a randomly drawn (entity, relation) pair with a synthetic document at
// a random rank, so the copy circuit generalizes across pairs and ranks
// rather than binding to the trained fact set.
//
// The straight-through gate signal is a branch contrast. For each example
// both gate branches are evaluated once without a tape, and the gate's
// differentiable term is z_ste * (L_retrieve - L_skip + lambda): the gate
// probability rises exactly where retrieved context lowers the answer loss
// by more than the retrieval penalty. The branch losses enter as detached
// constants, so the generator itself trains only on the branch the sampled
// decision actually took.

struct TrainOptions {
  // Frozen-decision ablations; Learned runs warmup then the configured
  // trainer.
  GateOverride gate_override = GateOverride::Learned;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;            // answer + balance loss, model steps only
  double f_hat = 0.0;                // fraction of examples that retrieved
  std::vector<long long> dispatch;   // expert token counts, summed
  int skipped = 0;                   // examples contributing no gradient
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<std::string> log_lines;  // epoch TAB loss TAB f_hat TAB counts
  bool diverged = false;
  double final_loss = 0.0;
};

// One example's loss graph, reusable for gradient checking.
struct StepInput {
  const Example* example = nullptr;
  int z = 0;
  bool ste_gate = false;   // put p_ret and the branch-contrast term on the tape
  // Replacement tokens for external examples, one per retrieval rank; the
  // matched rank's entry is the training target.
  std::vector<int> slot_tokens;
  std::vector<double> h_q;  // pooled query, detached from the embeddings
  // Gate-branch evaluation: lets an external example run context-free with
  // a replacement target, so both branches of the contrast are always
  // defined.
  bool branch_eval = false;
  // Bypasses search with a pre-built result; the corpus handed to the step
  // must contain the referenced documents.
  const RetrievalResult* forced_retrieval = nullptr;
};

struct StepGraph {
  bool skipped = false;   // no loss at all (neither model nor gate term)
  double p_ret = 0.0;
  Tensor loss;
  // Answer + balance loss value when a model step ran; NaN for gate-only
  // steps (external example whose sampled decision skipped retrieval).
  double model_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<RouterDecision> routers;
  bool exact_match = false;  // greedy agreement on every answer position
};

namespace detail {

constexpr std::uint64_t kEpochStream = 0x747261696e;

// Rank of the retrieved document that starts with the query tokens, or -1.
inline int matching_rank(const RetrievalResult& retrieved,
                         const Corpus& corpus,
                         const std::vector<int>& query) {
  for (std::size_t i = 0; i < retrieved.entries.size(); ++i) {
    const auto& tokens = corpus.doc(retrieved.entries[i].index).tokens;
    if (tokens.size() <= query.size()) continue;
    if (std::equal(query.begin(), query.end(), tokens.begin()))
      return static_cast<int>(i);
  }
  return -1;
}

// Language + balance loss for one example under a fixed gate decision.
inline StepGraph model_step(const SystemState& sys, const Corpus& corpus,
                            const StepInput& in, Tape* tape) {
  const Example& ex = *in.example;
  StepGraph g;

  RetrievalResult retrieved;
  if (in.z == 1) {
    if (in.forced_retrieval)
      retrieved = *in.forced_retrieval;
    else if (corpus.size() > 0)
      retrieved = corpus.search(
          embed_tokens(ex.query, sys.model.token_embedding()),
          sys.model_config.k_docs);
  }

  std::vector<int> answer = ex.answer;
  int rank = -1;
  if (ex.label == 1) {
    rank = matching_rank(retrieved, corpus, ex.query);
    // Without its document in context the decoy target is pure noise, so
    // the model step is skipped; branch evaluation still wants the loss of
    // exactly that context-free situation.
    if ((in.z == 1 && rank < 0) || (in.z == 0 && !in.branch_eval)) {
      g.skipped = true;
      return g;
    }
    if (in.decoy_token < 0)
      throw ContractError("external example needs a decoy value token");
    answer = {in.decoy_token};
  }
  if (answer.empty())
    throw ContractError("training example " + ex.id + " has no answer");

  FusedInput fused;
  ForwardOptions fopts;
  if (sys.fusion == FusionMode::Concat) {
    fused = concat_context(ex.query, retrieved, corpus, context_budget(sys));
    if (rank >= 0) {
      const std::size_t pos =
          value_position(retrieved, corpus, ex.query.size(), rank);
      if (pos >= fused.tokens.size()) {
        g.skipped = true;  // the value slot fell off the truncated tail
        return g;
      }
      fused.tokens[pos] = in.decoy_token;
    }
  } else {
    fused = concat_context(ex.query, RetrievalResult{}, corpus,
                           context_budget(sys));
    std::vector<Tensor> doc_embeds;
    for (std::size_t i = 0; i < retrieved.entries.size(); ++i) {
      std::vector<int> tokens =
          corpus.doc(retrieved.entries[i].index).tokens;
      if (static_cast<int>(i) == rank)
        tokens[ex.query.size()] = in.decoy_token;
      doc_embeds.push_back(
          pool_rows(embedding_rows(sys.model.token_embedding(), tokens, tape),
                    tape));
    }
    Tensor h_graph = pooled_query(sys.model, ex.query, tape);
    fopts.prefix = sys.augment.fuse(h_graph, doc_embeds, tape);
  }

  std::vector<int> ids = fused.tokens;
  std::vector<int> segs = fused.segments;
  const int n_ctx = static_cast<int>(ids.size());
  ids.push_back(Vocab::kAns);
  segs.push_back(0);
  for (int a : answer) {
    ids.push_back(a);
    segs.push_back(0);
  }
  ids.push_back(Vocab::kEos);
  segs.push_back(0);
  const int T = static_cast<int>(ids.size());

  ForwardResult fr = sys.model.forward(ids, segs, tape, fopts);
  g.routers = fr.routers;

  const int offset = fopts.prefix.defined() ? 1 : 0;
  std::vector<int> targets(static_cast<std::size_t>(T + offset), -1);
  const int n_scored = static_cast<int>(answer.size()) + 1;  // answer + eos
  for (int j = 0; j < n_scored; ++j)
    targets[static_cast<std::size_t>(offset + n_ctx + j)] = ids[n_ctx + 1 + j];

  g.exact_match = true;
  for (int j = 0; j < n_scored; ++j)
    if (argmax_row(fr.logits, offset + n_ctx + j) != ids[n_ctx + 1 + j])
      g.exact_match = false;

  Tensor loss = cross_entropy(fr.logits, targets, tape);
  if (fr.aux_loss.defined()) loss = add(loss, fr.aux_loss, tape);
  g.loss = loss;
  g.model_loss = loss.item();
  return g;
}

}  // namespace detail

inline StepGraph build_step(const SystemState& sys, const Corpus& corpus,
                            const StepInput& in, Tape* tape) {
  StepGraph g = detail::model_step(sys, corpus, in, tape);

  if (!in.ste_gate) {
    g.p_ret = sys.gate.score_value(in.h_q);
    return g;
  }

  Tensor h_const = Tensor::from(1, static_cast<int>(in.h_q.size()), in.h_q);
  Tensor p_node = sys.gate.score(h_const, tape);
  Tensor z_ste = straight_through(p_node, in.z, tape);
  g.p_ret = p_node.item();

  StepInput branch = in;
  branch.ste_gate = false;
  branch.branch_eval = true;
  branch.z = 1;
  const StepGraph take = detail::model_step(sys, corpus, branch, nullptr);
  branch.z = 0;
  const StepGraph skip = detail::model_step(sys, corpus, branch, nullptr);

  if (!take.skipped && !skip.skipped) {
    const double cost =
        sys.settings.gate_lambda_ret +
        (in.example->label == 0 ? sys.settings.gate_parametric_penalty : 0.0);
    const double raw = (take.model_loss - skip.model_loss) + cost;
    // The measured benefit is capped at the configured cost scale. Copying
    // an answer from context is worth several nats while skipping useless
    // context is worth only lambda, and without the cap that imbalance
    // drives the gate bias to retrieve-always before the query features can
    // separate the two populations.
    const double coeff = std::max(-cost, std::min(cost, raw));
    if (coeff != 0.0) {
      Tensor gate_term = cmul(z_ste, coeff, tape);
      g.loss = g.skipped ? gate_term : add(g.loss, gate_term, tape);
      g.skipped = false;
    }
  }
  return g;
}

// Joint loop: SGD with a global-norm clip over all trainable tensors, a
// separate learning rate for the gate, and the corpus re-embedded from the
// current token table at each epoch boundary. The warmup epochs force
// retrieval and train only the generator; gate training starts afterwards,
// once retrieved context is worth something. A non-finite loss aborts the
// run and restores the last completed epoch's parameters.
inline TrainResult train(SystemState& sys, Corpus& corpus,
                         const FactTask& task, std::uint64_t seed,
                         const TrainOptions& topt = {}) {
  const Settings& s = sys.settings;
  const Vocab vocab(s.task_n_entities, s.task_n_relations, s.total_values());
  const bool ste = s.gate_trainer == "ste";
  const bool learned = topt.gate_override == GateOverride::Learned;

  TrainResult out;
  auto params = sys.named_params();
  sys.zero_grad();
  Checkpoint last_good = Checkpoint::capture(sys.model_config, params);
  ReinforceBaseline baseline;
  std::vector<GateEpisode> episodes;

  // The token table stays at its random initialization. With a tied output
  // head, every softmax step pushes the embedding of each unsupervised token
  // away from the states that predict answers, so value tokens that exist
  // only in retrieved context would become unreadable at the output. Fixed
  // embeddings keep those rows decodable and force the in-context copy path
  // itself to carry the skill.
  auto frozen = [](const std::string& name) { return name == "tok_embed"; };

  auto apply_step = [&](int n_examples) {
    if (n_examples == 0) return;
    const double inv = 1.0 / n_examples;
    double norm2 = 0.0;
    for (auto& [name, t] : params) {
      if (frozen(name)) continue;
      for (double gv : t.grad()) norm2 += gv * inv * gv * inv;
    }
    const double norm = std::sqrt(norm2);
    const double trim = norm > s.train_clip ? s.train_clip / norm : 1.0;
    for (auto& [name, t] : params) {
      if (frozen(name)) {
        t.zero_grad();
        continue;
      }
      const bool gate_param = name.rfind("gate.", 0) == 0;
      const double step = (gate_param ? s.train_gate_lr : s.train_lr) *
                          inv * trim;
      auto& v = t.value();
      auto& gr = t.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= step * gr[i];
      t.zero_grad();
    }
  };

  auto flush_episodes = [&] {
    if (episodes.empty()) return;
    GateGradient gg =
        reinforce_update(episodes, baseline, s.gate_lambda_ret);
    const double lr = s.train_gate_lr / episodes.size();
    Tensor w = sys.gate.weight(), b = sys.gate.bias();
    for (std::size_t i = 0; i < gg.w.size(); ++i)
      w.value()[i] += lr * gg.w[i];
    b.value()[0] += lr * gg.b;
    episodes.clear();
  };

  for (int epoch = 0; epoch < s.train_epochs; ++epoch) {
    corpus.reembed(sys.model.token_embedding());
    Rng rng(Rng::mix(seed, Rng::mix(detail::kEpochStream,
                                    static_cast<std::uint64_t>(epoch))));
    std::vector<int> order(task.train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);

    EpochStats stats;
    stats.epoch = epoch;
    stats.dispatch.assign(s.model_n_experts, 0);
    double loss_sum = 0.0;
    int loss_n = 0, z_sum = 0, decided = 0, batch_n = 0;
    bool bad = false;

    for (int idx : order) {
      const Example& ex = task.train[static_cast<std::size_t>(idx)];
      std::vector<double> hq = pooled_query(sys.model, ex.query).value();
      const double p = sys.gate.score_value(hq);
      const bool warm = epoch < s.train_warmup_epochs;
      int z = 0;
      switch (topt.gate_override) {
        case GateOverride::ForceOn:
          z = 1;
          break;
        case GateOverride::ForceOff:
          z = 0;
          break;
        case GateOverride::Learned:
          // Warmup teacher-forces retrieval where the target depends on it
          // and splits parametric examples evenly across both context
          // regimes, so neither branch of the later contrast is foreign.
          if (warm)
            z = ex.label == 1 || rng.next_double() < 0.5 ? 1 : 0;
          else
            z = rng.next_double() < p ? 1 : 0;
          break;
      }
      ++decided;
      z_sum += z;
      int decoy = -1;
      if (ex.label == 1) {
        // Prefer the dedicated decoy pool; without one, fall back to the
        // parametric value pool (still disjoint from external values).
        const int pool = s.task_n_decoy_values > 0 ? s.task_n_decoy_values
                                                   : task.n_parametric_values;
        const int base = s.task_n_decoy_values > 0 ? s.task_n_values : 0;
        decoy = vocab.value(
            base +
            static_cast<int>(rng.below(static_cast<std::uint64_t>(pool))));
      }

      const bool train_gate = learned && !warm;
      Tape tape;
      StepGraph g = build_step(sys, corpus,
                               {&ex, z, ste && train_gate, decoy, hq}, &tape);
      if (g.skipped) {
        ++stats.skipped;
        continue;
      }
      const double lv = g.loss.item();
      if (!std::isfinite(lv)) {
        bad = true;
        break;
      }
      tape.backward(g.loss);
      if (std::isfinite(g.model_loss)) {
        loss_sum += g.model_loss;
        ++loss_n;
      }
      ++batch_n;
      for (const auto& rd : g.routers)
        for (std::size_t e = 0; e < rd.dispatch.size(); ++e)
          stats.dispatch[e] += rd.dispatch[e];
      if (!ste && train_gate) {
        const double reward =
            (g.exact_match ? 1.0 : 0.0) -
            (ex.label == 0 ? s.gate_parametric_penalty * z : 0.0);
        episodes.push_back({z, p, reward, hq});
      }
      if (batch_n == s.train_batch_size) {
        apply_step(batch_n);
        batch_n = 0;
        flush_episodes();
      }

      // Copy drill on a freshly drawn (entity, relation) pair: a synthetic
      // document plus a real distractor, decoy target, retrieval forced.
      // Real examples reuse a fixed pair set, which lets attention key on
      // specific pairs; the drill's pairs never repeat often enough for
      // that, so value transport must stay pair-agnostic and keeps working
      // for queries first seen after training. Generator-only: the drill
      // carries no gate label and contributes nothing to gate statistics.
      if (ex.label == 1 && s.task_n_decoy_values > 0 &&
          topt.gate_override != GateOverride::ForceOff) {
        const int se = static_cast<int>(
            rng.below(static_cast<std::uint64_t>(s.task_n_entities)));
        const int sr = static_cast<int>(
            rng.below(static_cast<std::uint64_t>(s.task_n_relations)));
        const int sdecoy = vocab.value(
            s.task_n_values +
            static_cast<int>(rng.below(
                static_cast<std::uint64_t>(s.task_n_decoy_values))));
        Example sex;
        sex.id = "drill";
        sex.label = 1;
        sex.query = {vocab.entity(se), vocab.relation(sr)};
        std::vector<int> sdoc = sex.query;
        sdoc.push_back(sdecoy);
        Corpus synth;
        synth.add("s0", sdoc, sys.model.token_embedding());
        RetrievalResult sret;
        sret.entries.push_back({"s0", 0, 1.0});
        if (corpus.size() > 0) {
          const Document& dist = corpus.doc(static_cast<int>(
              rng.below(static_cast<std::uint64_t>(corpus.size()))));
          synth.add("s1", dist.tokens, sys.model.token_embedding());
          sret.entries.push_back({"s1", 1, 0.5});
        }
        StepInput sin;
        sin.example = &sex;
        sin.z = 1;
        sin.decoy_token = sdecoy;
        sin.forced_retrieval = &sret;
        Tape stape;
        StepGraph sg = detail::model_step(sys, synth, sin, &stape);
        if (!sg.skipped) {
          if (!std::isfinite(sg.loss.item())) {
            bad = true;
            break;
          }
          stape.backward(sg.loss);
          loss_sum += sg.model_loss;
          ++loss_n;
          ++batch_n;
          for (const auto& rd : sg.routers)
            for (std::size_t e = 0; e < rd.dispatch.size(); ++e)
              stats.dispatch[e] += rd.dispatch[e];
          if (batch_n == s.train_batch_size) {
            apply_step(batch_n);
            batch_n = 0;
            flush_episodes();
          }
        }
      }
    }

    if (bad) {
      last_good.restore(params);
      sys.zero_grad();
      out.diverged = true;
      out.log_lines.push_back(
          std::to_string(epoch) +
          "\tdiverged; parameters restored to last completed epoch");
      break;
    }
    apply_step(batch_n);
    flush_episodes();

    stats.mean_loss = loss_n > 0 ? loss_sum / loss_n : 0.0;
    stats.f_hat =
        decided > 0 ? static_cast<double>(z_sum) / decided : 0.0;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f\t%.4f", stats.mean_loss,
                  stats.f_hat);
    std::string counts;
    for (long long c : stats.dispatch) {
      if (!counts.empty()) counts += ',';
      counts += std::to_string(c);
    }
    out.log_lines.push_back(std::to_string(epoch) + "\t" + buf + "\t" +
                            counts);
    out.epochs.push_back(std::move(stats));
    out.final_loss = out.epochs.back().mean_loss;
    last_good = Checkpoint::capture(sys.model_config, params);
  }
  return out;
}

}  // namespace xrag
