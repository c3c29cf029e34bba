#include "samdkif/model.hpp"

#include <cmath>
#include <cstring>

#include "samdkif/errors.hpp"
#include "samdkif/optim.hpp"

namespace samdkif {

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ffn == 0 || vocab_size == 0 ||
      max_seq_len == 0) {
    throw ContractError("model config: every count must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ContractError("model config: d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size < static_cast<std::size_t>(kByteVocab)) {
    throw ContractError("model config: vocab_size must cover the byte vocabulary (260)");
  }
}

std::string_view target_name(Target target) {
  switch (target) {
    case Target::kQ:
      return "q";
    case Target::kK:
      return "k";
    case Target::kV:
      return "v";
    case Target::kF1:
      return "f1";
    case Target::kF2:
      return "f2";
    case Target::kO:
      return "o";
  }
  return "?";
}

Target parse_target(std::string_view name) {
  for (const Target t : kTargets) {
    if (target_name(t) == name) {
      return t;
    }
  }
  throw ContractError("unknown target matrix '" + std::string(name) + "'");
}

std::pair<std::size_t, std::size_t> target_shape(const ModelConfig& config, Target target) {
  switch (target) {
    case Target::kF1:
      return {config.d_model, config.d_ffn};
    case Target::kF2:
      return {config.d_ffn, config.d_model};
    default:
      return {config.d_model, config.d_model};
  }
}

template <typename T>
Tensor<T>& LayerWeights<T>::target(Target t) {
  switch (t) {
    case Target::kQ:
      return wq;
    case Target::kK:
      return wk;
    case Target::kV:
      return wv;
    case Target::kF1:
      return wf1;
    case Target::kF2:
      return wf2;
    case Target::kO:
      return wo;
  }
  return wq;
}

template <typename T>
const Tensor<T>& LayerWeights<T>::target(Target t) const {
  return const_cast<LayerWeights*>(this)->target(t);
}

template <typename T>
TransformerWeights<T> TransformerWeights<T>::init(const ModelConfig& config, Rng& rng, double sd) {
  config.validate();
  const std::size_t d = config.d_model;
  TransformerWeights w;
  w.config = config;
  w.token_embedding = Tensor<T>::randn(Shape{config.vocab_size, d}, rng, sd);
  w.position_embedding = Tensor<T>::randn(Shape{config.max_seq_len, d}, rng, sd);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights<T> layer;
    for (const Target t : kTargets) {
      const auto [rows, cols] = target_shape(config, t);
      layer.target(t) = Tensor<T>::randn(Shape{rows, cols}, rng, sd);
    }
    layer.ln1_gain = Tensor<T>::ones(Shape{d});
    layer.ln1_bias = Tensor<T>::zeros(Shape{d});
    layer.ln2_gain = Tensor<T>::ones(Shape{d});
    layer.ln2_bias = Tensor<T>::zeros(Shape{d});
    w.layers.push_back(std::move(layer));
  }
  w.lnf_gain = Tensor<T>::ones(Shape{d});
  w.lnf_bias = Tensor<T>::zeros(Shape{d});
  if (!config.tied_head) {
    w.lm_head = Tensor<T>::randn(Shape{d, config.vocab_size}, rng, sd);
  }
  return w;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> TransformerWeights<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "L" + std::to_string(l) + "/";
    for (const Target t : kTargets) {
      out.emplace_back(prefix + "W_" + std::string(target_name(t)), layers[l].target(t));
    }
    out.emplace_back(prefix + "ln1_gain", layers[l].ln1_gain);
    out.emplace_back(prefix + "ln1_bias", layers[l].ln1_bias);
    out.emplace_back(prefix + "ln2_gain", layers[l].ln2_gain);
    out.emplace_back(prefix + "ln2_bias", layers[l].ln2_bias);
  }
  out.emplace_back("lnf_gain", lnf_gain);
  out.emplace_back("lnf_bias", lnf_bias);
  if (!config.tied_head) {
    out.emplace_back("lm_head", lm_head);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> TransformerWeights<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named()) {
    out.push_back(t);
  }
  return out;
}

template <typename T>
std::size_t TransformerWeights<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) {
    n += t.size();
  }
  return n;
}

template <typename T>
void TransformerWeights<T>::set_requires_grad(bool flag) {
  for (auto& [name, t] : named()) {
    t.set_requires_grad(flag);
  }
}

template <typename T>
TransformerWeights<T> TransformerWeights<T>::clone() const {
  return from_checkpoint(to_checkpoint());
}

template <typename T>
template <typename U>
TransformerWeights<U> TransformerWeights<T>::cast() const {
  return TransformerWeights<U>::from_checkpoint(to_checkpoint());
}

template <typename T>
bool TransformerWeights<T>::bit_identical(const TransformerWeights& other) const {
  if (!(config == other.config)) {
    return false;
  }
  const auto a = named();
  const auto b = other.named();
  if (a.size() != b.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a[i].second;
    const auto& y = b[i].second;
    if (x.shape() != y.shape() ||
        std::memcmp(x.data().data(), y.data().data(), x.size() * sizeof(T)) != 0) {
      return false;
    }
  }
  return true;
}

template <typename T>
Checkpoint TransformerWeights<T>::to_checkpoint(const std::string& kind) const {
  Checkpoint ck(kind, config);
  for (const auto& [name, t] : named()) {
    ck.put(name, t);
  }
  return ck;
}

template <typename T>
TransformerWeights<T> TransformerWeights<T>::from_checkpoint(const Checkpoint& ck) {
  ck.config.validate();
  Rng unused(0);
  TransformerWeights w = init(ck.config, unused, 0.0);
  for (auto& [name, t] : w.named()) {
    const Tensor<T> loaded = ck.get<T>(name);
    if (loaded.shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(loaded.shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t.data().begin());
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
Tensor<T> project(const Tensor<T>& x, const LayerWeights<T>& layer, std::size_t index, Target t,
                  const AdapterSet<T>* adapters, Rng* dropout_rng) {
  Tensor<T> y = matmul(x, layer.target(t));
  if (adapters != nullptr && !adapters->empty()) {
    y = add(y, adapters->apply(index, t, x, dropout_rng));
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> forward(const TransformerWeights<T>& w, const AdapterSet<T>* adapters,
                  std::span<const int> ids, const ForwardOptions& options) {
  const ModelConfig& cfg = w.config;
  if (ids.empty()) {
    throw ContractError("forward: empty input");
  }
  if (ids.size() > cfg.max_seq_len) {
    throw ContractError("forward: sequence of " + std::to_string(ids.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  if (options.training && options.rng == nullptr) {
    throw ContractError("forward: training mode needs a random stream");
  }
  Rng* drop = options.training ? options.rng : nullptr;

  Tensor<T> x = add(embedding(w.token_embedding, ids), slice_rows(w.position_embedding, ids.size()));
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights<T>& layer = w.layers[l];
    const Tensor<T> h = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    const Tensor<T> q = project(h, layer, l, Target::kQ, adapters, drop);
    const Tensor<T> k = project(h, layer, l, Target::kK, adapters, drop);
    const Tensor<T> v = project(h, layer, l, Target::kV, adapters, drop);
    const Tensor<T> a = causal_attention(q, k, v, cfg.n_heads);
    x = add(x, project(a, layer, l, Target::kO, adapters, drop));
    const Tensor<T> h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    const Tensor<T> f = gelu(project(h2, layer, l, Target::kF1, adapters, drop));
    x = add(x, project(f, layer, l, Target::kF2, adapters, drop));
  }
  x = layer_norm(x, w.lnf_gain, w.lnf_bias);
  return cfg.tied_head ? matmul(x, transpose(w.token_embedding)) : matmul(x, w.lm_head);
}

template <typename T>
Tensor<T> nll_loss(const Tensor<T>& logits, const EncodedExample& example) {
  return masked_nll(logits, std::span<const int>(example.targets),
                    std::span<const std::uint8_t>(example.mask));
}

template <typename T>
std::vector<int> generate(const TransformerWeights<T>& w, const AdapterSet<T>* adapters,
                          std::span<const int> prompt, std::size_t max_new) {
  if (prompt.empty()) {
    throw ContractError("generate: empty prompt");
  }
  NoGradScope<T> no_grad;
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  const std::size_t vocab = w.config.vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    const Tensor<T> logits = forward(w, adapters, std::span<const int>(seq));
    const T* last = logits.data().data() + (seq.size() - 1) * vocab;
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j) {
      if (last[j] > last[best]) {
        best = j;
      }
    }
    const int token = static_cast<int>(best);
    if (token == kEos) {
      break;
    }
    out.push_back(token);
    seq.push_back(token);
  }
  return out;
}

template <typename T>
double sequence_logprob(const TransformerWeights<T>& w, const AdapterSet<T>* adapters,
                        const InstructionExample& example) {
  NoGradScope<T> no_grad;
  const EncodedExample enc = encode_example(example);
  const Tensor<T> logits = forward(w, adapters, std::span<const int>(enc.ids));
  return -static_cast<double>(nll_loss(logits, enc).item());
}

template <typename T>
double mean_token_nll(const TransformerWeights<T>& w, const AdapterSet<T>* adapters,
                      const std::vector<EncodedExample>& examples) {
  NoGradScope<T> no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    const Tensor<T> logits = forward(w, adapters, std::span<const int>(ex.ids));
    total += static_cast<double>(nll_loss(logits, ex).item());
    tokens += ex.answer_tokens();
  }
  if (tokens == 0) {
    throw ContractError("mean_token_nll: no scored tokens");
  }
  return total / static_cast<double>(tokens);
}

template <typename T>
PretrainResult<T> pretrain_base(const ModelConfig& config,
                                const std::vector<EncodedExample>& corpus,
                                const std::vector<EncodedExample>& holdout,
                                const PretrainConfig& cfg) {
  if (cfg.steps > 0 && corpus.empty()) {
    throw ContractError("pretrain_base: empty corpus");
  }
  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(1);
  Rng batch_rng = rng.fork(2);
  PretrainResult<T> result{TransformerWeights<T>::init(config, init_rng, cfg.init_sd), {}, 0.0, 0.0};
  TransformerWeights<T>& w = result.weights;
  if (!holdout.empty()) {
    result.initial_holdout_loss = mean_token_nll<T>(w, nullptr, holdout);
  }

  w.set_requires_grad(true);
  Adam<T> adam(w.parameters(), cfg.lr);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    std::vector<Tensor<T>> text_terms, instr_terms;
    std::size_t text_tokens = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const EncodedExample& ex = corpus[static_cast<std::size_t>(batch_rng.below(corpus.size()))];
      Tensor<T> nll = nll_loss(forward(w, static_cast<const AdapterSet<T>*>(nullptr),
                                       std::span<const int>(ex.ids)),
                               ex);
      if (ex.prompt_length <= 1) {
        text_tokens += ex.answer_tokens();
        text_terms.push_back(std::move(nll));
      } else {
        instr_terms.push_back(std::move(nll));
      }
    }
    std::vector<Tensor<T>> parts;
    if (!text_terms.empty()) {
      parts.push_back(scale(add_n(text_terms), T(1) / static_cast<T>(text_tokens)));
    }
    if (!instr_terms.empty()) {
      parts.push_back(scale(add_n(instr_terms), static_cast<T>(cfg.instruction_weight /
                                                               static_cast<double>(instr_terms.size()))));
    }
    const Tensor<T> loss = add_n(parts);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      throw DivergenceError("pretrain_base: loss became non-finite at step " + std::to_string(step));
    }
    adam.zero_grad();
    tape.backward(loss);
    adam.step();
    if (step % cfg.log_interval == 0 || step == 1 || step == cfg.steps) {
      result.log.push_back({step, value});
    }
  }
  w.set_requires_grad(false);
  for (auto& p : w.parameters()) {
    p.storage().grad.clear();
  }
  if (!holdout.empty()) {
    result.final_holdout_loss = mean_token_nll<T>(w, nullptr, holdout);
  }
  return result;
}

#define SAMDKIF_INSTANTIATE(T)                                                                  \
  template struct LayerWeights<T>;                                                              \
  template struct TransformerWeights<T>;                                                        \
  template Tensor<T> forward<T>(const TransformerWeights<T>&, const AdapterSet<T>*,             \
                                std::span<const int>, const ForwardOptions&);                   \
  template Tensor<T> nll_loss<T>(const Tensor<T>&, const EncodedExample&);                      \
  template std::vector<int> generate<T>(const TransformerWeights<T>&, const AdapterSet<T>*,     \
                                        std::span<const int>, std::size_t);                     \
  template double sequence_logprob<T>(const TransformerWeights<T>&, const AdapterSet<T>*,       \
                                      const InstructionExample&);                               \
  template double mean_token_nll<T>(const TransformerWeights<T>&, const AdapterSet<T>*,         \
                                    const std::vector<EncodedExample>&);                        \
  template PretrainResult<T> pretrain_base<T>(const ModelConfig&,                               \
                                              const std::vector<EncodedExample>&,               \
                                              const std::vector<EncodedExample>&,               \
                                              const PretrainConfig&);

SAMDKIF_INSTANTIATE(float)
SAMDKIF_INSTANTIATE(double)

#undef SAMDKIF_INSTANTIATE

template TransformerWeights<double> TransformerWeights<float>::cast<double>() const;
template TransformerWeights<float> TransformerWeights<double>::cast<float>() const;
template TransformerWeights<float> TransformerWeights<float>::cast<float>() const;
template TransformerWeights<double> TransformerWeights<double>::cast<double>() const;

}  // namespace samdkif
