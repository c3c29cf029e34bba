#pragma once

// Tiny pre-norm decoder-only transformer used as the frozen base model.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "samdkif/adapter.hpp"
#include "samdkif/checkpoint.hpp"
#include "samdkif/model_config.hpp"
#include "samdkif/rng.hpp"
#include "samdkif/tensor.hpp"
#include "samdkif/tokenizer.hpp"

namespace samdkif {

template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv, wo;  // d_model x d_model
  Tensor<T> wf1;             // d_model x d_ffn
  Tensor<T> wf2;             // d_ffn x d_model
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  Tensor<T>& target(Target t);
  const Tensor<T>& target(Target t) const;
};

template <typename T>
struct TransformerWeights {
  ModelConfig config;
  Tensor<T> token_embedding;     // vocab x d_model
  Tensor<T> position_embedding;  // max_seq_len x d_model
  std::vector<LayerWeights<T>> layers;
  Tensor<T> lnf_gain, lnf_bias;
  Tensor<T> lm_head;  // d_model x vocab; empty when tied

  /// Gaussian(0, sd^2) matrices, unit gains, zero biases.
  static TransformerWeights init(const ModelConfig& config, Rng& rng, double sd = 0.02);

  /// (name, tensor) pairs; the tensors alias this model's storage.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool flag);

  TransformerWeights clone() const;

  template <typename U>
  TransformerWeights<U> cast() const;

  /// True when every tensor holds exactly the same bits as `other`.
  bool bit_identical(const TransformerWeights& other) const;

  Checkpoint to_checkpoint(const std::string& kind = "base") const;
  static TransformerWeights from_checkpoint(const Checkpoint& checkpoint);
};

/// Train mode enables adapter dropout and needs a random stream.
struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
};

/// Logits [seq x vocab]. Throws ContractError when ids is empty or longer
/// than max_seq_len.
template <typename T>
Tensor<T> forward(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                  std::span<const int> ids, const ForwardOptions& options = {});

/// Summed answer-position NLL of one encoded example.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& logits, const EncodedExample& example);

/// Greedy decoding; returns only the continuation, without the EOS.
template <typename T>
std::vector<int> generate(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                          std::span<const int> prompt, std::size_t max_new);

/// log p(answer EOS | prompt) under the model.
template <typename T>
double sequence_logprob(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                        const InstructionExample& example);

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double init_sd = 0.02;
  std::uint64_t seed = 1;
  std::size_t log_interval = 50;
  /// Weight of the per-example instruction NLL next to the per-token text
  /// NLL. Instruction answers are short, so a plain token mean drowns them.
  double instruction_weight = 0.25;
};

struct PretrainLogRow {
  std::size_t step;
  double loss;
};

template <typename T>
struct PretrainResult {
  TransformerWeights<T> weights;
  std::vector<PretrainLogRow> log;
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
};

/// Mean per-token NLL over a set of encoded examples, no recording.
template <typename T>
double mean_token_nll(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                      const std::vector<EncodedExample>& examples);

/// Adam on mini-batches drawn from `corpus`: mean per-token NLL of the free
/// text examples (every token scored) plus instruction_weight times the mean
/// per-example NLL of the instruction examples. The
/// returned weights are frozen (requires_grad false). steps == 0 returns the
/// initialization. Throws DivergenceError on a non-finite loss.
template <typename T>
PretrainResult<T> pretrain_base(const ModelConfig& config,
                                const std::vector<EncodedExample>& corpus,
                                const std::vector<EncodedExample>& holdout,
                                const PretrainConfig& cfg);

}  // namespace samdkif
