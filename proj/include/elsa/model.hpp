/* Copyright 2026 The ELSA Simulator Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License
==============================================================================*/

// A small pre-layer-norm transformer with a frozen backbone and trainable
// low-rank adapters on the query and value projections. The block stack is
// cut into three contiguous parts: Part 1 (client), Part 2 (edge) and
// Part 3 plus the task head (client).
//
// Row convention: an activation is (seq_len x hidden_dim), one row per token.
// A projection weight W is stored (out x in) and applied as X * W^T. The
// adapter pair (A: rank x hidden, B: hidden x rank) adds X * A^T * B^T.

#ifndef ELSA_MODEL_HPP
#define ELSA_MODEL_HPP

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "elsa/common.hpp"

namespace elsa {

enum class Part : int { one = 0, two = 1, three = 2 };

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 8;
  std::size_t hidden_dim = 16;
  std::size_t n_blocks = 3;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 32;
  std::size_t lora_rank = 4;
  std::size_t part1_blocks = 1;
  std::size_t part2_blocks = 1;
  std::size_t part3_blocks = 1;
  std::size_t n_classes = 4;
  // Spectral decay of the frozen token embedding; < 1 concentrates token
  // energy in a few directions the way pretrained embeddings do.
  double embedding_decay = 0.7;
  // Scale of the residual branch outputs at initialization.
  double residual_scale = 0.3;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  /// Half-open global block range [first, last) owned by a part.
  [[nodiscard]] std::pair<std::size_t, std::size_t> block_range(Part part) const;
};

template <typename Scalar>
struct FrozenBlock {
  VectorX<Scalar> ln1_gain, ln1_bias;
  MatrixX<Scalar> w_query, w_key, w_value, w_out;  // hidden x hidden
  VectorX<Scalar> ln2_gain, ln2_bias;
  MatrixX<Scalar> w_ffn_in;   // ffn x hidden
  VectorX<Scalar> b_ffn_in;   // ffn
  MatrixX<Scalar> w_ffn_out;  // hidden x ffn
  VectorX<Scalar> b_ffn_out;  // hidden
};

template <typename Scalar>
struct Backbone {
  MatrixX<Scalar> token_embedding;     // vocab x hidden
  MatrixX<Scalar> position_embedding;  // seq_len x hidden
  std::vector<FrozenBlock<Scalar>> blocks;
  VectorX<Scalar> final_ln_gain, final_ln_bias;
};

template <typename Scalar>
struct LoraPair {
  MatrixX<Scalar> a;  // rank x hidden
  MatrixX<Scalar> b;  // hidden x rank
};

template <typename Scalar>
struct BlockAdapter {
  LoraPair<Scalar> query;
  LoraPair<Scalar> value;
};

template <typename Scalar>
struct TaskHead {
  MatrixX<Scalar> weight;  // classes x hidden
  VectorX<Scalar> bias;    // classes
};

/// Every trainable tensor: adapters of the three parts plus the task head.
/// Doubles as the gradient container.
template <typename Scalar>
struct AdapterParams {
  std::array<std::vector<BlockAdapter<Scalar>>, 3> parts;
  TaskHead<Scalar> head;

  std::vector<BlockAdapter<Scalar>>& part(Part p) { return parts[static_cast<int>(p)]; }
  const std::vector<BlockAdapter<Scalar>>& part(Part p) const { return parts[static_cast<int>(p)]; }

  [[nodiscard]] std::size_t size(bool include_head = true) const;
  [[nodiscard]] VectorX<Scalar> flatten(bool include_head = true) const;
  void assign(const VectorX<Scalar>& flat, bool include_head = true);
  [[nodiscard]] AdapterParams zeros_like() const;

  /// this += alpha * other, over every tensor.
  AdapterParams& axpy(Scalar alpha, const AdapterParams& other);
  AdapterParams& scale(Scalar alpha);
};

template <typename Scalar>
struct Activation {
  MatrixX<Scalar> values;  // seq_len x hidden
  Mask mask;               // true for real tokens
};

/// Frozen weights are shared between all parties that hold a copy of the
/// model; only `params` is per party.
template <typename Scalar>
struct SplitModelState {
  ModelConfig config;
  std::shared_ptr<const Backbone<Scalar>> backbone;
  AdapterParams<Scalar> params;
};

// Forward caches. A tape is filled by a forward call and consumed by the
// matching backward call.
template <typename Scalar>
struct LayerNormCache {
  MatrixX<Scalar> normalized;  // x_hat
  VectorX<Scalar> inv_std;
};

template <typename Scalar>
struct BlockCache {
  MatrixX<Scalar> input;
  LayerNormCache<Scalar> ln1;
  MatrixX<Scalar> ln1_out;
  MatrixX<Scalar> query_low, value_low;  // ln1_out * A^T
  MatrixX<Scalar> query, key, value;
  std::vector<MatrixX<Scalar>> probs;    // per head, seq x seq
  MatrixX<Scalar> context;               // concatenated heads
  LayerNormCache<Scalar> ln2;
  MatrixX<Scalar> ln2_out;
  MatrixX<Scalar> ffn_pre, ffn_act;
};

template <typename Scalar>
struct StageTape {
  bool recorded = false;
  std::size_t first_block = 0;
  Mask mask;
  std::vector<BlockCache<Scalar>> blocks;
  std::vector<TokenId> tokens;  // Part 1 only
};

template <typename Scalar>
struct HeadTape {
  LayerNormCache<Scalar> final_ln;
  VectorX<Scalar> pooled;
  VectorX<Scalar> probs;
  int label = 0;
  Scalar valid_count = 0;
};

/// Part 3 tape for one mini-batch: per-sample block caches and head caches.
template <typename Scalar>
struct Part3Tape {
  bool recorded = false;
  std::vector<StageTape<Scalar>> stages;
  std::vector<HeadTape<Scalar>> heads;
};

template <typename Scalar>
struct Part3Output {
  MatrixX<Scalar> logits;  // batch x classes
  Scalar loss = 0;         // mean cross-entropy over the batch
};

/// Gradients of Part 3 for a batch plus the boundary gradient for every
/// sample's Part 3 input.
template <typename Scalar>
struct Part3Grads {
  std::vector<BlockAdapter<Scalar>> adapters;
  TaskHead<Scalar> head;
  std::vector<MatrixX<Scalar>> input_grads;
};

template <typename Scalar>
struct StageGrads {
  std::vector<BlockAdapter<Scalar>> adapters;
  MatrixX<Scalar> input_grad;  // empty for Part 1 (embedding is frozen)
};

template <typename Scalar>
[[nodiscard]] SplitModelState<Scalar> init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Embeds tokens (padded to seq_len, padding masked out) and runs blocks
/// 1..p. Throws InputError for out-of-vocabulary ids or over-long input.
template <typename Scalar>
[[nodiscard]] Activation<Scalar> forward_part1(const SplitModelState<Scalar>& model,
                                               std::span<const TokenId> tokens,
                                               StageTape<Scalar>* tape = nullptr);

template <typename Scalar>
[[nodiscard]] Activation<Scalar> forward_part2(const SplitModelState<Scalar>& model,
                                               const Activation<Scalar>& input,
                                               StageTape<Scalar>* tape = nullptr);

/// Blocks p+q+1..M, final layer norm, masked mean pooling and the task head.
template <typename Scalar>
[[nodiscard]] Part3Output<Scalar> forward_part3_loss(const SplitModelState<Scalar>& model,
                                                     std::span<const Activation<Scalar>> inputs,
                                                     std::span<const int> labels,
                                                     Part3Tape<Scalar>* tape = nullptr);

template <typename Scalar>
[[nodiscard]] Part3Grads<Scalar> backward_part3(const SplitModelState<Scalar>& model,
                                                const Part3Tape<Scalar>& tape);

/// Backward through a Part 1 or Part 2 stage given dLoss/dOutput.
template <typename Scalar>
[[nodiscard]] StageGrads<Scalar> backward_stage(const SplitModelState<Scalar>& model,
                                                const StageTape<Scalar>& tape,
                                                const MatrixX<Scalar>& output_grad);

/// Tapes of one split forward over a batch, routed without any channel.
template <typename Scalar>
struct SplitTape {
  std::vector<StageTape<Scalar>> part1;
  std::vector<StageTape<Scalar>> part2;
  Part3Tape<Scalar> part3;
};

template <typename Scalar>
struct SplitGradients {
  AdapterParams<Scalar> params;
  std::vector<MatrixX<Scalar>> down_boundary;  // dLoss/dH_down per sample
  std::vector<MatrixX<Scalar>> up_boundary;    // dLoss/dH_up per sample
};

/// Runs Parts 1-3 on a batch with identity boundaries and records the tape.
template <typename Scalar>
Part3Output<Scalar> forward_split(const SplitModelState<Scalar>& model,
                                  std::span<const std::vector<TokenId>> batch,
                                  std::span<const int> labels, SplitTape<Scalar>& tape);

template <typename Scalar>
[[nodiscard]] SplitGradients<Scalar> backward_split(const SplitModelState<Scalar>& model,
                                                    const SplitTape<Scalar>& tape);

/// All blocks without the head; used for fingerprints (position 0 is the
/// sentence-level vector).
template <typename Scalar>
[[nodiscard]] MatrixX<Scalar> forward_hidden(const SplitModelState<Scalar>& model,
                                             std::span<const TokenId> tokens);

/// Logits of the full model for one sequence.
template <typename Scalar>
[[nodiscard]] VectorX<Scalar> predict_logits(const SplitModelState<Scalar>& model,
                                             std::span<const TokenId> tokens);

/// Mean loss and full gradient over a batch, evaluated as one monolithic
/// model (no boundaries).
template <typename Scalar>
struct LossAndGrad {
  Scalar loss = 0;
  AdapterParams<Scalar> grad;
};

template <typename Scalar>
[[nodiscard]] LossAndGrad<Scalar> loss_and_grad(const SplitModelState<Scalar>& model,
                                                std::span<const std::vector<TokenId>> batch,
                                                std::span<const int> labels);

/// params -= lr * grad over every tensor.
template <typename Scalar>
void sgd_step(AdapterParams<Scalar>& params, const AdapterParams<Scalar>& grad, Scalar lr);

}  // namespace elsa

#endif  // ELSA_MODEL_HPP
