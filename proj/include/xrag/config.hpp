#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "xrag/errors.hpp"

namespace xrag {

// Architecture hyperparameters. This struct is what a checkpoint serializes,
// so a saved model can be rebuilt without its original config file.
struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 4;
  std::vector<int> moe_layers = {1, 3};
  int n_experts = 4;
  int k_experts = 1;
  int d_ff = 128;
  int max_seq_len = 128;
  int n_heads = 4;
  int k_docs = 2;
  double gate_threshold = 0.5;
  double alpha_lb = 0.01;
  double lambda_ret = 0.05;
  bool router_noise = false;
  double router_noise_std = 1.0;

  bool is_moe_layer(int layer) const {
    return std::find(moe_layers.begin(), moe_layers.end(), layer) !=
           moe_layers.end();
  }

  void validate() const {
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (d_model <= 0 || n_layers <= 0 || d_ff <= 0 || max_seq_len <= 0)
      throw ConfigError("model dimensions must be positive");
    if (n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " +
                        std::to_string(n_heads));
    if (k_experts < 1 || k_experts > n_experts)
      throw ConfigError("k_experts must lie in [1, n_experts]");
    if (k_experts > 2)
      throw ConfigError("k_experts supports 1 or 2");
    for (int l : moe_layers)
      if (l < 0 || l >= n_layers)
        throw ConfigError("moe layer index " + std::to_string(l) +
                          " outside [0, " + std::to_string(n_layers) + ")");
    if (k_docs < 1) throw ConfigError("k_docs must be at least 1");
    if (gate_threshold < 0.0 || gate_threshold > 1.0)
      throw ConfigError("gate threshold must lie in [0, 1]");
    if (router_noise_std < 0.0)
      throw ConfigError("router noise stddev must be nonnegative");
  }
};

// Every run option, loadable from a flat `key = value` file. Lines may carry
// `#` comments; unknown keys are rejected with the full list of valid keys.
struct Settings {
  // model.*
  int model_d_model = 64;
  int model_n_layers = 4;
  int model_n_heads = 4;
  int model_d_ff = 128;
  int model_n_experts = 4;
  int model_k_experts = 1;
  std::vector<int> model_moe_layers = {1, 3};
  int model_max_seq_len = 128;
  double model_alpha_lb = 0.01;
  int model_router_noise = 0;
  double model_router_noise_std = 1.0;
  double model_init_scale = 0.08;
  double model_embed_init_scale = 0.3;
  // gate.*
  std::string gate_mode = "threshold";  // threshold | sample
  double gate_threshold = 0.5;
  double gate_lambda_ret = 0.05;
  std::string gate_trainer = "ste";  // ste | reinforce
  double gate_parametric_penalty = 0.0;
  // fusion.*
  std::string fusion_mode = "concat";  // concat | augment
  int fusion_k_docs = 2;
  // task.*
  int task_n_entities = 50;
  int task_n_relations = 10;
  int task_n_values = 50;
  // Extra value-shaped tokens used only as copy-training targets for
  // external examples. They are assigned to no fact, so swapping one into a
  // retrieved document teaches in-context copying without revealing any
  // stored value. Hundreds of distinct identities keep the model from
  // memorizing them individually, which is what makes the copying skill
  // carry over to the held-back external values.
  int task_n_decoy_values = 550;
  int task_n_facts = 300;
  double task_external_fraction = 0.5;
  int task_n_heldout = 8;
  int task_min_repeats = 4;
  // train.*
  int train_epochs = 30;
  double train_lr = 0.05;
  double train_gate_lr = 0.2;
  int train_batch_size = 8;
  int train_warmup_epochs = 2;
  double train_clip = 1.0;
  // eval.*
  int eval_max_answer_tokens = 16;

  std::uint64_t seed = 1;

  // ---- key registry ----

  struct Key {
    std::string name;
    std::function<void(Settings&, const std::string&)> apply;
  };

  static const std::vector<Key>& keys() {
    static const std::vector<Key> table = build_keys();
    return table;
  }

  static std::string valid_keys_joined() {
    std::string out;
    for (const auto& k : keys()) {
      if (!out.empty()) out += ", ";
      out += k.name;
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    for (const auto& k : keys()) {
      if (k.name == key) {
        k.apply(*this, value);
        return;
      }
    }
    throw ConfigError("unknown config key '" + key +
                      "'; valid keys: " + valid_keys_joined());
  }

  // Applies one file line: comments stripped, blank lines skipped.
  void apply_line(const std::string& raw, const std::string& where) {
    std::string line = raw.substr(0, raw.find('#'));
    const std::string trimmed = trim(line);
    if (trimmed.empty()) return;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected 'key = value', got '" + trimmed +
                        "'");
    try {
      set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }

  static Settings load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    Settings s;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line))
      s.apply_line(line, path + ":" + std::to_string(++lineno));
    s.validate();
    return s;
  }

  // Decoy tokens live at the top of the value range, so the vocabulary is
  // sized for both real and decoy values.
  int total_values() const { return task_n_values + task_n_decoy_values; }

  int vocab_size() const {
    return 3 + task_n_entities + task_n_relations + total_values();
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.vocab_size = vocab_size();
    m.d_model = model_d_model;
    m.n_layers = model_n_layers;
    m.moe_layers = model_moe_layers;
    m.n_experts = model_n_experts;
    m.k_experts = model_k_experts;
    m.d_ff = model_d_ff;
    m.max_seq_len = model_max_seq_len;
    m.n_heads = model_n_heads;
    m.k_docs = fusion_k_docs;
    m.gate_threshold = gate_threshold;
    m.alpha_lb = model_alpha_lb;
    m.lambda_ret = gate_lambda_ret;
    m.router_noise = model_router_noise != 0;
    m.router_noise_std = model_router_noise_std;
    return m;
  }

  void validate() const {
    model_config().validate();
    if (gate_mode != "threshold" && gate_mode != "sample")
      throw ConfigError("gate.mode must be 'threshold' or 'sample'");
    if (gate_trainer != "ste" && gate_trainer != "reinforce")
      throw ConfigError("gate.trainer must be 'ste' or 'reinforce'");
    if (fusion_mode != "concat" && fusion_mode != "augment")
      throw ConfigError("fusion.mode must be 'concat' or 'augment'");
    if (task_n_entities <= 0 || task_n_relations <= 0 || task_n_values <= 0)
      throw ConfigError("task vocabulary sizes must be positive");
    if (task_n_decoy_values < 0)
      throw ConfigError("task.n_decoy_values must be >= 0");
    if (task_n_facts <= 0) throw ConfigError("task.n_facts must be positive");
    if (task_external_fraction <= 0.0 || task_external_fraction >= 1.0)
      throw ConfigError(
          "task.external_fraction must lie strictly inside (0, 1) so both "
          "fact populations exist");
    if (task_n_heldout < 0) throw ConfigError("task.n_heldout must be >= 0");
    if (task_min_repeats < 1)
      throw ConfigError("task.min_repeats must be >= 1");
    if (task_n_facts >
        task_n_entities * task_n_relations - task_n_heldout)
      throw ConfigError("not enough (entity, relation) pairs for n_facts + "
                        "n_heldout distinct facts");
    if (train_epochs < 0 || train_warmup_epochs < 0)
      throw ConfigError("epoch counts must be nonnegative");
    if (train_batch_size < 1)
      throw ConfigError("train.batch_size must be >= 1");
    if (train_lr < 0.0 || train_gate_lr < 0.0 || train_clip <= 0.0)
      throw ConfigError("learning rates must be >= 0 and clip > 0");
    if (eval_max_answer_tokens < 1)
      throw ConfigError("eval.max_answer_tokens must be >= 1");
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  template <typename T>
  static T parse_number(const std::string& v, const std::string& kind) {
    std::istringstream ss(v);
    T out;
    ss >> out;
    if (ss.fail() || !ss.eof())
      throw ConfigError("expected " + kind + ", got '" + v + "'");
    return out;
  }

  static std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty())
        out.push_back(parse_number<int>(item, "an integer"));
    }
    return out;
  }

  static std::vector<Key> build_keys() {
    std::vector<Key> t;
    auto int_key = [&t](const std::string& name, int Settings::* field) {
      t.push_back({name, [field](Settings& s, const std::string& v) {
                     s.*field = parse_number<int>(v, "an integer");
                   }});
    };
    auto dbl_key = [&t](const std::string& name, double Settings::* field) {
      t.push_back({name, [field](Settings& s, const std::string& v) {
                     s.*field = parse_number<double>(v, "a number");
                   }});
    };
    auto str_key = [&t](const std::string& name,
                        std::string Settings::* field) {
      t.push_back({name, [field](Settings& s, const std::string& v) {
                     s.*field = v;
                   }});
    };
    int_key("model.d_model", &Settings::model_d_model);
    int_key("model.n_layers", &Settings::model_n_layers);
    int_key("model.n_heads", &Settings::model_n_heads);
    int_key("model.d_ff", &Settings::model_d_ff);
    int_key("model.n_experts", &Settings::model_n_experts);
    int_key("model.k_experts", &Settings::model_k_experts);
    t.push_back({"model.moe_layers", [](Settings& s, const std::string& v) {
                   s.model_moe_layers = parse_int_list(v);
                 }});
    int_key("model.max_seq_len", &Settings::model_max_seq_len);
    dbl_key("model.alpha_lb", &Settings::model_alpha_lb);
    int_key("model.router_noise", &Settings::model_router_noise);
    dbl_key("model.router_noise_std", &Settings::model_router_noise_std);
    dbl_key("model.init_scale", &Settings::model_init_scale);
    dbl_key("model.embed_init_scale", &Settings::model_embed_init_scale);
    str_key("gate.mode", &Settings::gate_mode);
    dbl_key("gate.threshold", &Settings::gate_threshold);
    dbl_key("gate.lambda_ret", &Settings::gate_lambda_ret);
    str_key("gate.trainer", &Settings::gate_trainer);
    dbl_key("gate.parametric_penalty", &Settings::gate_parametric_penalty);
    str_key("fusion.mode", &Settings::fusion_mode);
    int_key("fusion.k_docs", &Settings::fusion_k_docs);
    int_key("task.n_entities", &Settings::task_n_entities);
    int_key("task.n_relations", &Settings::task_n_relations);
    int_key("task.n_values", &Settings::task_n_values);
    int_key("task.n_decoy_values", &Settings::task_n_decoy_values);
    int_key("task.n_facts", &Settings::task_n_facts);
    dbl_key("task.external_fraction", &Settings::task_external_fraction);
    int_key("task.n_heldout", &Settings::task_n_heldout);
    int_key("task.min_repeats", &Settings::task_min_repeats);
    int_key("train.epochs", &Settings::train_epochs);
    dbl_key("train.lr", &Settings::train_lr);
    dbl_key("train.gate_lr", &Settings::train_gate_lr);
    int_key("train.batch_size", &Settings::train_batch_size);
    int_key("train.warmup_epochs", &Settings::train_warmup_epochs);
    dbl_key("train.clip", &Settings::train_clip);
    int_key("eval.max_answer_tokens", &Settings::eval_max_answer_tokens);
    t.push_back({"seed", [](Settings& s, const std::string& v) {
                   s.seed = parse_number<std::uint64_t>(
                       v, "an unsigned integer");
                 }});
    return t;
  }
};

}  // namespace xrag
