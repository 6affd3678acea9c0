#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "xrag/config.hpp"
#include "xrag/errors.hpp"
#include "xrag/rng.hpp"
#include "xrag/tensor.hpp"

namespace xrag {

// Largest-first index selection with ties going to the lowest index.
// Implemented as k max scans so tests can compare it against an
// independently sorted oracle.
inline std::vector<int> top_k_indices(const std::vector<double>& scores,
                                      int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 1 || k > n)
    throw ContractError("top_k: k = " + std::to_string(k) + " with " +
                        std::to_string(n) + " scores");
  std::vector<bool> used(n, false);
  std::vector<int> out;
  out.reserve(k);
  for (int pass = 0; pass < k; ++pass) {
    int best = -1;
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      if (best < 0 || scores[i] > scores[best]) best = i;
    }
    used[best] = true;
    out.push_back(best);
  }
  return out;
}

// Record of one MoE layer's routing choices for a forward pass.
struct RouterDecision {
  Tensor scores;  // seq x E; undefined when routing was overridden
  std::vector<std::vector<int>> selected;      // per token, k expert ids
  std::vector<std::vector<double>> weights;    // per token, sums to 1
  std::vector<int> dispatch;                   // per expert token counts
};

struct ForwardOptions {
  // Route every token to expert 0, bypassing the router entirely.
  bool dense_override = false;
  // Optional per-row multiplier on the input embeddings (rows match the
  // final sequence length including any prefix). Carries the gate's
  // straight-through factor into the graph during training.
  Tensor row_scale;
  // Optional single fused-context row prepended at position 0.
  Tensor prefix;
  // Draws router noise when the config enables it; silent otherwise.
  Rng* noise_rng = nullptr;
};

struct ForwardResult {
  Tensor logits;    // seq x vocab
  Tensor aux_loss;  // 1x1 load-balance loss; defined only when taped and
                    // at least one MoE layer ran un-overridden
  std::vector<RouterDecision> routers;  // one per MoE layer, in layer order
};

// Two-layer relu FFN; used both as the dense block body and as one expert.
struct ExpertFFN {
  Tensor w1, b1, w2, b2;

  static ExpertFFN make(int d_model, int d_ff) {
    ExpertFFN f;
    f.w1 = Tensor::param(d_model, d_ff,
                         std::vector<double>(
                             static_cast<std::size_t>(d_model) * d_ff, 0.0));
    f.b1 = Tensor::param(1, d_ff, std::vector<double>(d_ff, 0.0));
    f.w2 = Tensor::param(d_ff, d_model,
                         std::vector<double>(
                             static_cast<std::size_t>(d_model) * d_ff, 0.0));
    f.b2 = Tensor::param(1, d_model, std::vector<double>(d_model, 0.0));
    return f;
  }

  Tensor forward(const Tensor& x, Tape* tape) const {
    Tensor h = relu(add_row(matmul(x, w1, tape), b1, tape), tape);
    return add_row(matmul(h, w2, tape), b2, tape);
  }
};

struct AttentionBlock {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionBlock make(int d) {
    auto mat = [d] {
      return Tensor::param(
          d, d, std::vector<double>(static_cast<std::size_t>(d) * d, 0.0));
    };
    auto vec = [d] { return Tensor::param(1, d, std::vector<double>(d, 0.0)); };
    return AttentionBlock{mat(), vec(), mat(), vec(), mat(), vec(), mat(),
                          vec()};
  }

  Tensor forward(const Tensor& x, const Tensor& causal_mask, int n_heads,
                 Tape* tape) const {
    CategoryScope scope(CostCategory::Attention);
    const int d = x.cols();
    const int dh = d / n_heads;
    Tensor q = add_row(matmul(x, wq, tape), bq, tape);
    Tensor k = add_row(matmul(x, wk, tape), bk, tape);
    Tensor v = add_row(matmul(x, wv, tape), bv, tape);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
      Tensor qh = slice(q, 0, x.rows(), h * dh, (h + 1) * dh, tape);
      Tensor kh = slice(k, 0, x.rows(), h * dh, (h + 1) * dh, tape);
      Tensor vh = slice(v, 0, x.rows(), h * dh, (h + 1) * dh, tape);
      Tensor s = cmul(matmul(qh, kh, tape, false, true),
                      1.0 / std::sqrt(static_cast<double>(dh)), tape);
      Tensor p = softmax_rows(add(s, causal_mask, tape), tape);
      heads.push_back(matmul(p, vh, tape));
    }
    Tensor ctx = concat_cols(heads, tape);
    return add_row(matmul(ctx, wo, tape), bo, tape);
  }
};

struct MoeLayer {
  Tensor router_w, router_b;  // d x E, 1 x E
  std::vector<ExpertFFN> experts;

  static MoeLayer make(int d_model, int d_ff, int n_experts) {
    MoeLayer m;
    m.router_w = Tensor::param(
        d_model, n_experts,
        std::vector<double>(static_cast<std::size_t>(d_model) * n_experts,
                            0.0));
    m.router_b =
        Tensor::param(1, n_experts, std::vector<double>(n_experts, 0.0));
    for (int e = 0; e < n_experts; ++e)
      m.experts.push_back(ExpertFFN::make(d_model, d_ff));
    return m;
  }

  // Routed forward. aux_out is set to the load-balance loss when a tape is
  // given (training); left undefined otherwise.
  // Routing itself (scores, balance loss) counts as dense work; only the
  // expert FFNs count in the active-expert bucket, so that bucket tracks k,
  // not E.
  Tensor forward(const Tensor& x, int k_experts, double alpha_lb, Tape* tape,
                 const ForwardOptions& opts, RouterDecision& decision,
                 Tensor& aux_out) const {
    const int T = x.rows();
    const int E = static_cast<int>(experts.size());

    if (opts.dense_override) {
      decision.selected.assign(T, {0});
      decision.weights.assign(T, {1.0});
      decision.dispatch.assign(E, 0);
      decision.dispatch[0] = T;
      CategoryScope scope(CostCategory::Expert);
      return experts[0].forward(x, tape);
    }

    Tensor scores = add_row(matmul(x, router_w, tape), router_b, tape);
    if (opts.noise_rng) {
      Tensor noise = Tensor::zeros(T, E);
      for (auto& n : noise.value()) n = opts.noise_rng->next_gaussian();
      scores = add(scores, noise, tape);
    }
    decision.scores = scores;

    decision.selected.resize(T);
    decision.weights.resize(T);
    decision.dispatch.assign(E, 0);
    for (int t = 0; t < T; ++t) {
      std::vector<double> row(scores.value().begin() +
                                  static_cast<std::size_t>(t) * E,
                              scores.value().begin() +
                                  static_cast<std::size_t>(t + 1) * E);
      decision.selected[t] = top_k_indices(row, k_experts);
      for (int e : decision.selected[t]) ++decision.dispatch[e];
    }

    Tensor out;
    if (k_experts == 1) {
      // Single expert per token: the combine weight is exactly 1, so the
      // expert output passes through unscaled.
      for (int t = 0; t < T; ++t) decision.weights[t] = {1.0};
      out = combine_slot(x, 0, T, tape, decision);
    } else {
      std::vector<int> rows_idx(T);
      std::vector<int> col0(T), col1(T);
      for (int t = 0; t < T; ++t) {
        rows_idx[t] = t;
        col0[t] = decision.selected[t][0];
        col1[t] = decision.selected[t][1];
      }
      Tensor s0 = gather_entries(scores, rows_idx, col0, tape);
      Tensor s1 = gather_entries(scores, rows_idx, col1, tape);
      Tensor w = softmax_rows(concat_cols({s0, s1}, tape), tape);
      for (int t = 0; t < T; ++t)
        decision.weights[t] = {w.at(t, 0), w.at(t, 1)};
      Tensor o0 = scale_rows(combine_slot(x, 0, T, tape, decision),
                             slice(w, 0, T, 0, 1, tape), tape);
      Tensor o1 = scale_rows(combine_slot(x, 1, T, tape, decision),
                             slice(w, 0, T, 1, 2, tape), tape);
      out = add(o0, o1, tape);
    }

    if (tape) {
      // Switch-style balance loss alpha * E * sum_i f_i * P_i with f the
      // observed dispatch fractions (constants) and P the mean router
      // probability per expert (differentiable).
      Tensor probs = softmax_rows(scores, tape);
      Tensor pooler = Tensor::filled(1, T, 1.0 / T);
      Tensor mean_p = matmul(pooler, probs, tape);  // 1 x E
      std::vector<double> frac(E);
      const double total = static_cast<double>(T) * k_experts;
      for (int e = 0; e < E; ++e) frac[e] = decision.dispatch[e] / total;
      Tensor f = Tensor::from(E, 1, std::move(frac));
      aux_out = cmul(matmul(mean_p, f, tape), alpha_lb * E, tape);
    }
    return out;
  }

 private:
  // Runs every expert on its slot-j tokens and scatters results back into
  // sequence order. Experts with no tokens are skipped entirely.
  Tensor combine_slot(const Tensor& x, int slot, int T, Tape* tape,
                      const RouterDecision& decision) const {
    CategoryScope scope(CostCategory::Expert);
    Tensor out;
    for (int e = 0; e < static_cast<int>(experts.size()); ++e) {
      std::vector<int> idx;
      for (int t = 0; t < T; ++t)
        if (decision.selected[t][slot] == e) idx.push_back(t);
      if (idx.empty()) continue;
      Tensor part = scatter_rows(experts[e].forward(take_rows(x, idx, tape),
                                                    tape),
                                 idx, T, tape);
      out = out.defined() ? add(out, part, tape) : part;
    }
    return out;
  }
};

struct Block {
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  AttentionBlock attn;
  bool is_moe = false;
  ExpertFFN ffn;    // used when !is_moe
  MoeLayer moe;     // used when is_moe
};

// Decoder-only transformer: token + segment + sinusoidal position
// embeddings, pre-norm blocks (attention, then FFN or MoE), final norm, and
// an output projection tied to the token embedding.
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    tok_embed_ = Tensor::param(
        cfg.vocab_size, cfg.d_model,
        std::vector<double>(
            static_cast<std::size_t>(cfg.vocab_size) * cfg.d_model, 0.0));
    seg_embed_ = Tensor::param(
        cfg.k_docs + 1, cfg.d_model,
        std::vector<double>(
            static_cast<std::size_t>(cfg.k_docs + 1) * cfg.d_model, 0.0));
    pos_enc_ = sinusoidal_positions(cfg.max_seq_len, cfg.d_model);
    for (int l = 0; l < cfg.n_layers; ++l) {
      Block b;
      b.ln1_gain = Tensor::param(1, cfg.d_model,
                                 std::vector<double>(cfg.d_model, 1.0));
      b.ln1_bias = Tensor::param(1, cfg.d_model,
                                 std::vector<double>(cfg.d_model, 0.0));
      b.ln2_gain = Tensor::param(1, cfg.d_model,
                                 std::vector<double>(cfg.d_model, 1.0));
      b.ln2_bias = Tensor::param(1, cfg.d_model,
                                 std::vector<double>(cfg.d_model, 0.0));
      b.attn = AttentionBlock::make(cfg.d_model);
      b.is_moe = cfg.is_moe_layer(l);
      if (b.is_moe)
        b.moe = MoeLayer::make(cfg.d_model, cfg.d_ff, cfg.n_experts);
      else
        b.ffn = ExpertFFN::make(cfg.d_model, cfg.d_ff);
      blocks_.push_back(std::move(b));
    }
    lnf_gain_ =
        Tensor::param(1, cfg.d_model, std::vector<double>(cfg.d_model, 1.0));
    lnf_bias_ =
        Tensor::param(1, cfg.d_model, std::vector<double>(cfg.d_model, 0.0));
  }

  void init_params(Rng& rng, double w_scale, double embed_scale) {
    auto fill = [&rng](Tensor& t, double s) {
      for (auto& v : t.value()) v = rng.next_gaussian() * s;
    };
    fill(tok_embed_, embed_scale);
    fill(seg_embed_, embed_scale);
    for (auto& b : blocks_) {
      fill(b.attn.wq, w_scale);
      fill(b.attn.wk, w_scale);
      fill(b.attn.wv, w_scale);
      fill(b.attn.wo, w_scale);
      if (b.is_moe) {
        fill(b.moe.router_w, w_scale);
        for (auto& e : b.moe.experts) {
          fill(e.w1, w_scale);
          fill(e.w2, w_scale);
        }
      } else {
        fill(b.ffn.w1, w_scale);
        fill(b.ffn.w2, w_scale);
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const Tensor& token_embedding() const { return tok_embed_; }

  ForwardResult forward(const std::vector<int>& ids,
                        const std::vector<int>& segments, Tape* tape = nullptr,
                        const ForwardOptions& opts = {}) const {
    if (ids.empty()) throw ContractError("forward on empty sequence");
    if (ids.size() != segments.size())
      throw ContractError("segments length " +
                          std::to_string(segments.size()) + " vs " +
                          std::to_string(ids.size()) + " ids");
    const int prefix_rows = opts.prefix.defined() ? 1 : 0;
    const int T = static_cast<int>(ids.size()) + prefix_rows;
    if (T > cfg_.max_seq_len)
      throw LengthError("sequence of " + std::to_string(T) +
                        " exceeds max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
    for (int s : segments)
      if (s < 0 || s > cfg_.k_docs)
        throw ContractError("segment id " + std::to_string(s) +
                            " outside [0, " + std::to_string(cfg_.k_docs) +
                            "]");
    if (opts.prefix.defined() &&
        (opts.prefix.rows() != 1 || opts.prefix.cols() != cfg_.d_model))
      throw ShapeError("prefix row must be 1x" + std::to_string(cfg_.d_model));
    if (opts.row_scale.defined() &&
        (opts.row_scale.rows() != T || opts.row_scale.cols() != 1))
      throw ShapeError("row_scale must be " + std::to_string(T) + "x1");

    Tensor x = embedding_rows(tok_embed_, ids, tape);
    std::vector<int> segs = segments;
    if (prefix_rows) {
      x = concat_rows({opts.prefix, x}, tape);
      segs.insert(segs.begin(), 0);
    }
    x = add(x, embedding_rows(seg_embed_, segs, tape), tape);
    x = add(x, slice(pos_enc_, 0, T, 0, cfg_.d_model), tape);
    if (opts.row_scale.defined()) x = scale_rows(x, opts.row_scale, tape);

    Tensor mask = causal_mask(T);
    ForwardResult result;
    for (const auto& b : blocks_) {
      Tensor normed = layer_norm(x, b.ln1_gain, b.ln1_bias, tape);
      x = add(x, b.attn.forward(normed, mask, cfg_.n_heads, tape), tape);
      normed = layer_norm(x, b.ln2_gain, b.ln2_bias, tape);
      Tensor body;
      if (b.is_moe) {
        RouterDecision decision;
        Tensor aux;
        ForwardOptions layer_opts = opts;
        if (!cfg_.router_noise) layer_opts.noise_rng = nullptr;
        body = b.moe.forward(normed, cfg_.k_experts, cfg_.alpha_lb, tape,
                             layer_opts, decision, aux);
        result.routers.push_back(std::move(decision));
        if (aux.defined())
          result.aux_loss = result.aux_loss.defined()
                                ? add(result.aux_loss, aux, tape)
                                : aux;
      } else {
        CategoryScope scope(CostCategory::Dense);
        body = b.ffn.forward(normed, tape);
      }
      x = add(x, body, tape);
    }
    x = layer_norm(x, lnf_gain_, lnf_bias_, tape);
    result.logits = matmul(x, tok_embed_, tape, false, true);
    return result;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed_);
    out.emplace_back("seg_embed", seg_embed_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gain", b.ln1_gain);
      out.emplace_back(p + "ln1.bias", b.ln1_bias);
      out.emplace_back(p + "attn.wq", b.attn.wq);
      out.emplace_back(p + "attn.bq", b.attn.bq);
      out.emplace_back(p + "attn.wk", b.attn.wk);
      out.emplace_back(p + "attn.bk", b.attn.bk);
      out.emplace_back(p + "attn.wv", b.attn.wv);
      out.emplace_back(p + "attn.bv", b.attn.bv);
      out.emplace_back(p + "attn.wo", b.attn.wo);
      out.emplace_back(p + "attn.bo", b.attn.bo);
      out.emplace_back(p + "ln2.gain", b.ln2_gain);
      out.emplace_back(p + "ln2.bias", b.ln2_bias);
      auto add_ffn = [&out](const std::string& q, const ExpertFFN& f) {
        out.emplace_back(q + "w1", f.w1);
        out.emplace_back(q + "b1", f.b1);
        out.emplace_back(q + "w2", f.w2);
        out.emplace_back(q + "b2", f.b2);
      };
      if (b.is_moe) {
        out.emplace_back(p + "router.w", b.moe.router_w);
        out.emplace_back(p + "router.b", b.moe.router_b);
        for (std::size_t e = 0; e < b.moe.experts.size(); ++e)
          add_ffn(p + "expert" + std::to_string(e) + ".", b.moe.experts[e]);
      } else {
        add_ffn(p + "ffn.", b.ffn);
      }
    }
    out.emplace_back("lnf.gain", lnf_gain_);
    out.emplace_back("lnf.bias", lnf_bias_);
    return out;
  }

  void zero_grad() const {
    for (auto& [name, t] : named_params()) t.zero_grad();
  }

  // Whole parameter store, as persisted by a checkpoint (generator only;
  // gate and fusion module parameters are counted by their own classes).
  static std::int64_t n_total_params(const ModelConfig& c) {
    const std::int64_t d = c.d_model, ff = c.d_ff, v = c.vocab_size;
    const std::int64_t ffn = d * ff + ff + ff * d + d;
    std::int64_t total = v * d + (c.k_docs + 1) * d;
    for (int l = 0; l < c.n_layers; ++l) {
      total += 4 * d;                 // two layer norms
      total += 4 * (d * d + d);       // attention projections
      if (c.is_moe_layer(l))
        total += d * c.n_experts + c.n_experts + c.n_experts * ffn;
      else
        total += ffn;
    }
    total += 2 * d;  // final norm
    return total;
  }

  // Parameter elements touched per token on the forward path: one embedding
  // row each from the token and segment tables, every shared weight, and
  // only the k selected experts at MoE layers. Matches the instrumented
  // param_elements counter for a single-token forward.
  static std::int64_t n_active_params(const ModelConfig& c) {
    const std::int64_t d = c.d_model, ff = c.d_ff, v = c.vocab_size;
    const std::int64_t ffn = d * ff + ff + ff * d + d;
    std::int64_t active = d + d;  // one token row, one segment row
    for (int l = 0; l < c.n_layers; ++l) {
      active += 4 * d;
      active += 4 * (d * d + d);
      if (c.is_moe_layer(l))
        active += d * c.n_experts + c.n_experts + c.k_experts * ffn;
      else
        active += ffn;
    }
    active += 2 * d;
    active += v * d;  // tied output projection
    return active;
  }

 private:
  static Tensor sinusoidal_positions(int max_len, int d) {
    Tensor p = Tensor::zeros(max_len, d);
    for (int pos = 0; pos < max_len; ++pos) {
      for (int i = 0; i < d; i += 2) {
        const double rate = std::pow(10000.0, -static_cast<double>(i) / d);
        p.at(pos, i) = std::sin(pos * rate);
        if (i + 1 < d) p.at(pos, i + 1) = std::cos(pos * rate);
      }
    }
    return p;
  }

  static Tensor causal_mask(int T) {
    Tensor m = Tensor::zeros(T, T);
    for (int i = 0; i < T; ++i)
      for (int j = i + 1; j < T; ++j) m.at(i, j) = -1e9;
    return m;
  }

  ModelConfig cfg_;
  Tensor tok_embed_, seg_embed_, pos_enc_;
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_;
};

}  // namespace xrag
