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

#include "elsa/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include <Eigen/QR>

namespace elsa {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model: " + what); };
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (seq_len < 1) fail("seq_len must be >= 1");
  if (hidden_dim < 2) fail("hidden_dim must be >= 2");
  if (n_heads < 1 || hidden_dim % n_heads != 0) fail("hidden_dim must be divisible by n_heads");
  if (ffn_dim < 1) fail("ffn_dim must be >= 1");
  if (lora_rank < 1 || lora_rank >= hidden_dim) fail("lora_rank must satisfy 1 <= lora_rank < hidden_dim");
  if (part1_blocks < 1 || part2_blocks < 1 || part3_blocks < 1)
    fail("part1_blocks, part2_blocks and part3_blocks must each be >= 1");
  if (part1_blocks + part2_blocks + part3_blocks != n_blocks)
    fail("part1_blocks + part2_blocks + part3_blocks must equal n_blocks (" +
         std::to_string(part1_blocks) + " + " + std::to_string(part2_blocks) + " + " +
         std::to_string(part3_blocks) + " != " + std::to_string(n_blocks) + ")");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (!(embedding_decay > 0.0 && embedding_decay <= 1.0)) fail("embedding_decay must be in (0, 1]");
  if (!(residual_scale >= 0.0)) fail("residual_scale must be >= 0");
}

std::pair<std::size_t, std::size_t> ModelConfig::block_range(Part part) const {
  switch (part) {
    case Part::one:
      return {0, part1_blocks};
    case Part::two:
      return {part1_blocks, part1_blocks + part2_blocks};
    case Part::three:
      return {part1_blocks + part2_blocks, n_blocks};
  }
  return {0, 0};
}

// ---------------------------------------------------------------------------
// AdapterParams

namespace {

template <typename Scalar, typename Fn>
void for_each_tensor(AdapterParams<Scalar>& p, bool include_head, Fn&& fn) {
  for (auto& part : p.parts) {
    for (auto& blk : part) {
      fn(blk.query.a);
      fn(blk.query.b);
      fn(blk.value.a);
      fn(blk.value.b);
    }
  }
  if (include_head) {
    fn(p.head.weight);
    fn(p.head.bias);
  }
}

template <typename Scalar, typename Fn>
void for_each_tensor_pair(AdapterParams<Scalar>& p, const AdapterParams<Scalar>& q, bool include_head,
                          Fn&& fn) {
  for (std::size_t i = 0; i < 3; ++i) {
    if (p.parts[i].size() != q.parts[i].size()) throw AggregationError("adapter part shape mismatch");
    for (std::size_t b = 0; b < p.parts[i].size(); ++b) {
      auto& x = p.parts[i][b];
      const auto& y = q.parts[i][b];
      fn(x.query.a, y.query.a);
      fn(x.query.b, y.query.b);
      fn(x.value.a, y.value.a);
      fn(x.value.b, y.value.b);
    }
  }
  if (include_head) {
    fn(p.head.weight, q.head.weight);
    fn(p.head.bias, q.head.bias);
  }
}

}  // namespace

template <typename Scalar>
std::size_t AdapterParams<Scalar>::size(bool include_head) const {
  std::size_t n = 0;
  auto& self = const_cast<AdapterParams&>(*this);
  for_each_tensor(self, include_head, [&](auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <typename Scalar>
VectorX<Scalar> AdapterParams<Scalar>::flatten(bool include_head) const {
  VectorX<Scalar> out(static_cast<Eigen::Index>(size(include_head)));
  Eigen::Index off = 0;
  auto& self = const_cast<AdapterParams&>(*this);
  for_each_tensor(self, include_head, [&](auto& t) {
    out.segment(off, t.size()) = Eigen::Map<const VectorX<Scalar>>(t.data(), t.size());
    off += t.size();
  });
  return out;
}

template <typename Scalar>
void AdapterParams<Scalar>::assign(const VectorX<Scalar>& flat, bool include_head) {
  if (static_cast<std::size_t>(flat.size()) != size(include_head))
    throw AggregationError("flat parameter vector has wrong length");
  Eigen::Index off = 0;
  for_each_tensor(*this, include_head, [&](auto& t) {
    Eigen::Map<VectorX<Scalar>>(t.data(), t.size()) = flat.segment(off, t.size());
    off += t.size();
  });
}

template <typename Scalar>
AdapterParams<Scalar> AdapterParams<Scalar>::zeros_like() const {
  AdapterParams out = *this;
  for_each_tensor(out, true, [](auto& t) { t.setZero(); });
  return out;
}

template <typename Scalar>
AdapterParams<Scalar>& AdapterParams<Scalar>::axpy(Scalar alpha, const AdapterParams& other) {
  for_each_tensor_pair(*this, other, true, [&](auto& x, const auto& y) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) throw AggregationError("adapter tensor shape mismatch");
    x += alpha * y;
  });
  return *this;
}

template <typename Scalar>
AdapterParams<Scalar>& AdapterParams<Scalar>::scale(Scalar alpha) {
  for_each_tensor(*this, true, [&](auto& t) { t *= alpha; });
  return *this;
}

// ---------------------------------------------------------------------------
// Initialization

template <typename Scalar>
SplitModelState<Scalar> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(hash::combine(seed, 0x6d6f64656cULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(cfg.hidden_dim);
  const auto f = static_cast<Eigen::Index>(cfg.ffn_dim);
  const auto r = static_cast<Eigen::Index>(cfg.lora_rank);

  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * normal(rng);
    return m;
  };

  auto backbone = std::make_shared<Backbone<Scalar>>();

  // Token embedding with a decaying spectrum along a random orthonormal basis.
  Eigen::VectorXd spectrum(d);
  for (Eigen::Index i = 0; i < d; ++i) spectrum(i) = std::pow(cfg.embedding_decay, static_cast<double>(i));
  spectrum *= std::sqrt(static_cast<double>(d) / spectrum.squaredNorm());
  const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(d, d, 1.0)).householderQ();
  const Eigen::MatrixXd raw = gaussian(static_cast<Eigen::Index>(cfg.vocab_size), d, 1.0);
  backbone->token_embedding = (raw * spectrum.asDiagonal() * basis.transpose()).template cast<Scalar>();
  backbone->position_embedding = gaussian(static_cast<Eigen::Index>(cfg.seq_len), d, 0.1).template cast<Scalar>();

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    FrozenBlock<Scalar> blk;
    blk.ln1_gain = VectorX<Scalar>::Ones(d);
    blk.ln1_bias = VectorX<Scalar>::Zero(d);
    blk.w_query = gaussian(d, d, inv_sqrt_d).template cast<Scalar>();
    blk.w_key = gaussian(d, d, inv_sqrt_d).template cast<Scalar>();
    blk.w_value = gaussian(d, d, inv_sqrt_d).template cast<Scalar>();
    blk.w_out = gaussian(d, d, cfg.residual_scale * inv_sqrt_d).template cast<Scalar>();
    blk.ln2_gain = VectorX<Scalar>::Ones(d);
    blk.ln2_bias = VectorX<Scalar>::Zero(d);
    blk.w_ffn_in = gaussian(f, d, inv_sqrt_d).template cast<Scalar>();
    blk.b_ffn_in = VectorX<Scalar>::Zero(f);
    blk.w_ffn_out = gaussian(d, f, cfg.residual_scale * inv_sqrt_f).template cast<Scalar>();
    blk.b_ffn_out = VectorX<Scalar>::Zero(d);
    backbone->blocks.push_back(std::move(blk));
  }
  backbone->final_ln_gain = VectorX<Scalar>::Ones(d);
  backbone->final_ln_bias = VectorX<Scalar>::Zero(d);

  SplitModelState<Scalar> state;
  state.config = cfg;
  state.backbone = std::move(backbone);

  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  const double a_scale = 1.0 / static_cast<double>(r);
  auto adapter_a = [&]() {
    Eigen::MatrixXd m(r, d);
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = a_scale * uniform(rng);
    return m.template cast<Scalar>().eval();
  };
  for (Part part : {Part::one, Part::two, Part::three}) {
    const auto [first, last] = cfg.block_range(part);
    for (std::size_t b = first; b < last; ++b) {
      BlockAdapter<Scalar> ad;
      ad.query.a = adapter_a();
      ad.query.b = MatrixX<Scalar>::Zero(d, r);
      ad.value.a = adapter_a();
      ad.value.b = MatrixX<Scalar>::Zero(d, r);
      state.params.part(part).push_back(std::move(ad));
    }
  }
  const auto c = static_cast<Eigen::Index>(cfg.n_classes);
  state.params.head.weight = gaussian(c, d, 0.1).template cast<Scalar>();
  state.params.head.bias = VectorX<Scalar>::Zero(c);
  return state;
}

// ---------------------------------------------------------------------------
// Block math

namespace {

template <typename Scalar>
constexpr Scalar kLayerNormEps = Scalar(1e-5);

template <typename Scalar>
MatrixX<Scalar> layer_norm(const MatrixX<Scalar>& x, const VectorX<Scalar>& gain, const VectorX<Scalar>& bias,
                           LayerNormCache<Scalar>& cache) {
  const Eigen::Index d = x.cols();
  cache.normalized.resize(x.rows(), d);
  cache.inv_std.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(d);
    const Scalar inv = Scalar(1) / std::sqrt(var + kLayerNormEps<Scalar>);
    cache.inv_std(i) = inv;
    cache.normalized.row(i) = centered * inv;
  }
  MatrixX<Scalar> y = cache.normalized * gain.asDiagonal();
  y.rowwise() += bias.transpose();
  return y;
}

template <typename Scalar>
MatrixX<Scalar> layer_norm_backward(const MatrixX<Scalar>& dy, const VectorX<Scalar>& gain,
                                    const LayerNormCache<Scalar>& cache) {
  const Eigen::Index d = dy.cols();
  const MatrixX<Scalar> dxhat = dy * gain.asDiagonal();
  MatrixX<Scalar> dx(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto g = dxhat.row(i);
    const auto xh = cache.normalized.row(i);
    const Scalar sum_g = g.sum();
    const Scalar sum_gx = g.dot(xh);
    dx.row(i) = (cache.inv_std(i) / static_cast<Scalar>(d)) *
                (static_cast<Scalar>(d) * g.array() - sum_g - xh.array() * sum_gx).matrix();
  }
  return dx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
  return cdf + x * pdf;
}

template <typename Scalar>
MatrixX<Scalar> block_forward(const FrozenBlock<Scalar>& w, const BlockAdapter<Scalar>& ad,
                              const MatrixX<Scalar>& x, const Mask& mask, std::size_t n_heads,
                              BlockCache<Scalar>& c) {
  const Eigen::Index seq = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(n_heads);
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  c.input = x;
  c.ln1_out = layer_norm(x, w.ln1_gain, w.ln1_bias, c.ln1);
  c.query_low = c.ln1_out * ad.query.a.transpose();
  c.value_low = c.ln1_out * ad.value.a.transpose();
  c.query = c.ln1_out * w.w_query.transpose() + c.query_low * ad.query.b.transpose();
  c.key = c.ln1_out * w.w_key.transpose();
  c.value = c.ln1_out * w.w_value.transpose() + c.value_low * ad.value.b.transpose();

  c.context.resize(seq, d);
  c.probs.assign(n_heads, MatrixX<Scalar>());
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    MatrixX<Scalar> scores = c.query.middleCols(off, dh) * c.key.middleCols(off, dh).transpose() * inv_sqrt_dh;
    MatrixX<Scalar> p(seq, seq);
    for (Eigen::Index i = 0; i < seq; ++i) {
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Eigen::Index j = 0; j < seq; ++j)
        if (mask(j)) mx = std::max(mx, scores(i, j));
      Scalar total = 0;
      for (Eigen::Index j = 0; j < seq; ++j) {
        p(i, j) = mask(j) ? std::exp(scores(i, j) - mx) : Scalar(0);
        total += p(i, j);
      }
      p.row(i) /= total;
    }
    c.context.middleCols(off, dh) = p * c.value.middleCols(off, dh);
    c.probs[h] = std::move(p);
  }
  MatrixX<Scalar> mid = x + c.context * w.w_out.transpose();

  c.ln2_out = layer_norm(mid, w.ln2_gain, w.ln2_bias, c.ln2);
  c.ffn_pre = c.ln2_out * w.w_ffn_in.transpose();
  c.ffn_pre.rowwise() += w.b_ffn_in.transpose();
  c.ffn_act = c.ffn_pre.unaryExpr([](Scalar v) { return gelu(v); });
  MatrixX<Scalar> out = mid + c.ffn_act * w.w_ffn_out.transpose();
  out.rowwise() += w.b_ffn_out.transpose();
  return out;
}

template <typename Scalar>
MatrixX<Scalar> block_backward(const FrozenBlock<Scalar>& w, const BlockAdapter<Scalar>& ad,
                               const BlockCache<Scalar>& c, const MatrixX<Scalar>& dout, std::size_t n_heads,
                               BlockAdapter<Scalar>& grad) {
  const Eigen::Index seq = dout.rows();
  const Eigen::Index d = dout.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(n_heads);
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  // FFN branch.
  const MatrixX<Scalar> dact = dout * w.w_ffn_out;
  const MatrixX<Scalar> dpre = dact.cwiseProduct(c.ffn_pre.unaryExpr([](Scalar v) { return gelu_grad(v); }));
  const MatrixX<Scalar> dln2 = dpre * w.w_ffn_in;
  MatrixX<Scalar> dmid = dout + layer_norm_backward(dln2, w.ln2_gain, c.ln2);

  // Attention branch.
  const MatrixX<Scalar> dcontext = dmid * w.w_out;
  MatrixX<Scalar> dq(seq, d), dk(seq, d), dv(seq, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    const MatrixX<Scalar>& p = c.probs[h];
    const auto dctx_h = dcontext.middleCols(off, dh);
    const MatrixX<Scalar> dp = dctx_h * c.value.middleCols(off, dh).transpose();
    dv.middleCols(off, dh) = p.transpose() * dctx_h;
    MatrixX<Scalar> ds(seq, seq);
    for (Eigen::Index i = 0; i < seq; ++i) {
      const Scalar row_dot = p.row(i).dot(dp.row(i));
      ds.row(i) = p.row(i).array() * (dp.row(i).array() - row_dot);
    }
    ds *= inv_sqrt_dh;
    dq.middleCols(off, dh) = ds * c.key.middleCols(off, dh);
    dk.middleCols(off, dh) = ds.transpose() * c.query.middleCols(off, dh);
  }

  MatrixX<Scalar> dln1 = dq * w.w_query + dk * w.w_key + dv * w.w_value;
  grad.query.b = dq.transpose() * c.query_low;
  grad.value.b = dv.transpose() * c.value_low;
  const MatrixX<Scalar> dq_low = dq * ad.query.b;
  const MatrixX<Scalar> dv_low = dv * ad.value.b;
  grad.query.a = dq_low.transpose() * c.ln1_out;
  grad.value.a = dv_low.transpose() * c.ln1_out;
  dln1 += dq_low * ad.query.a + dv_low * ad.value.a;

  return dmid + layer_norm_backward(dln1, w.ln1_gain, c.ln1);
}

template <typename Scalar>
void check_activation(const ModelConfig& cfg, const Activation<Scalar>& h) {
  if (h.values.rows() != static_cast<Eigen::Index>(cfg.seq_len) ||
      h.values.cols() != static_cast<Eigen::Index>(cfg.hidden_dim) || h.mask.size() != h.values.rows())
    throw InputError("activation shape mismatch: expected (" + std::to_string(cfg.seq_len) + " x " +
                     std::to_string(cfg.hidden_dim) + ")");
  if (!h.mask.any()) throw InputError("activation mask has no valid position");
}

template <typename Scalar>
MatrixX<Scalar> run_stage(const SplitModelState<Scalar>& model, Part part, const MatrixX<Scalar>& x,
                          const Mask& mask, StageTape<Scalar>* tape) {
  const auto [first, last] = model.config.block_range(part);
  const auto& adapters = model.params.part(part);
  if (adapters.size() != last - first) throw InputError("adapter count does not match the part's block range");
  MatrixX<Scalar> h = x;
  std::vector<BlockCache<Scalar>> caches(last - first);
  for (std::size_t b = first; b < last; ++b)
    h = block_forward(model.backbone->blocks[b], adapters[b - first], h, mask, model.config.n_heads,
                      caches[b - first]);
  if (tape) {
    tape->recorded = true;
    tape->first_block = first;
    tape->mask = mask;
    tape->blocks = std::move(caches);
  }
  return h;
}

template <typename Scalar>
MatrixX<Scalar> embed(const SplitModelState<Scalar>& model, std::span<const TokenId> tokens, Mask& mask) {
  const auto& cfg = model.config;
  if (tokens.empty()) throw InputError("empty token sequence");
  if (tokens.size() > cfg.seq_len)
    throw InputError("token sequence longer than seq_len (" + std::to_string(tokens.size()) + " > " +
                     std::to_string(cfg.seq_len) + ")");
  const auto seq = static_cast<Eigen::Index>(cfg.seq_len);
  MatrixX<Scalar> x = model.backbone->position_embedding;
  mask = Mask::Constant(seq, false);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= cfg.vocab_size)
      throw InputError("token id " + std::to_string(tokens[i]) + " out of vocabulary (size " +
                       std::to_string(cfg.vocab_size) + ")");
    x.row(static_cast<Eigen::Index>(i)) += model.backbone->token_embedding.row(tokens[i]);
    mask(static_cast<Eigen::Index>(i)) = true;
  }
  return x;
}

template <typename Scalar>
VectorX<Scalar> head_forward(const SplitModelState<Scalar>& model, const MatrixX<Scalar>& h, const Mask& mask,
                             HeadTape<Scalar>& t) {
  const auto& bb = *model.backbone;
  const MatrixX<Scalar> normed = layer_norm(h, bb.final_ln_gain, bb.final_ln_bias, t.final_ln);
  t.pooled = VectorX<Scalar>::Zero(h.cols());
  t.valid_count = 0;
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    if (mask(i)) {
      t.pooled += normed.row(i).transpose();
      t.valid_count += 1;
    }
  }
  t.pooled /= t.valid_count;
  return model.params.head.weight * t.pooled + model.params.head.bias;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public forward/backward

template <typename Scalar>
Activation<Scalar> forward_part1(const SplitModelState<Scalar>& model, std::span<const TokenId> tokens,
                                 StageTape<Scalar>* tape) {
  Activation<Scalar> out;
  const MatrixX<Scalar> x = embed(model, tokens, out.mask);
  out.values = run_stage(model, Part::one, x, out.mask, tape);
  if (tape) tape->tokens.assign(tokens.begin(), tokens.end());
  return out;
}

template <typename Scalar>
Activation<Scalar> forward_part2(const SplitModelState<Scalar>& model, const Activation<Scalar>& input,
                                 StageTape<Scalar>* tape) {
  check_activation(model.config, input);
  return {run_stage(model, Part::two, input.values, input.mask, tape), input.mask};
}

template <typename Scalar>
Part3Output<Scalar> forward_part3_loss(const SplitModelState<Scalar>& model,
                                       std::span<const Activation<Scalar>> inputs, std::span<const int> labels,
                                       Part3Tape<Scalar>* tape) {
  if (inputs.size() != labels.size()) throw InputError("batch size and label count differ");
  if (inputs.empty()) throw InputError("empty batch");
  const auto classes = static_cast<Eigen::Index>(model.config.n_classes);
  Part3Output<Scalar> out;
  out.logits.resize(static_cast<Eigen::Index>(inputs.size()), classes);
  Part3Tape<Scalar> local;
  local.stages.resize(inputs.size());
  local.heads.resize(inputs.size());
  Scalar total = 0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    if (labels[s] < 0 || labels[s] >= classes)
      throw InputError("label " + std::to_string(labels[s]) + " out of range [0, " + std::to_string(classes) + ")");
    check_activation(model.config, inputs[s]);
    const MatrixX<Scalar> h = run_stage(model, Part::three, inputs[s].values, inputs[s].mask, &local.stages[s]);
    auto& ht = local.heads[s];
    const VectorX<Scalar> logits = head_forward(model, h, inputs[s].mask, ht);
    out.logits.row(static_cast<Eigen::Index>(s)) = logits.transpose();
    const Scalar mx = logits.maxCoeff();
    const VectorX<Scalar> e = (logits.array() - mx).exp().matrix();
    const Scalar z = e.sum();
    ht.probs = e / z;
    ht.label = labels[s];
    total += -(logits(labels[s]) - mx - std::log(z));
  }
  out.loss = total / static_cast<Scalar>(inputs.size());
  if (tape) {
    local.recorded = true;
    *tape = std::move(local);
  }
  return out;
}

template <typename Scalar>
Part3Grads<Scalar> backward_part3(const SplitModelState<Scalar>& model, const Part3Tape<Scalar>& tape) {
  if (!tape.recorded) throw UsageError("backward_part3 called without a recorded forward pass");
  const auto& bb = *model.backbone;
  const auto& adapters = model.params.part(Part::three);
  const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(tape.heads.size());

  Part3Grads<Scalar> g;
  g.head.weight = MatrixX<Scalar>::Zero(model.params.head.weight.rows(), model.params.head.weight.cols());
  g.head.bias = VectorX<Scalar>::Zero(model.params.head.bias.size());
  g.adapters = adapters;
  for (auto& ad : g.adapters) {
    ad.query.a.setZero();
    ad.query.b.setZero();
    ad.value.a.setZero();
    ad.value.b.setZero();
  }

  for (std::size_t s = 0; s < tape.heads.size(); ++s) {
    const auto& ht = tape.heads[s];
    const auto& st = tape.stages[s];
    VectorX<Scalar> dlogits = ht.probs;
    dlogits(ht.label) -= Scalar(1);
    dlogits *= inv_batch;
    g.head.weight += dlogits * ht.pooled.transpose();
    g.head.bias += dlogits;
    const VectorX<Scalar> dpooled = model.params.head.weight.transpose() * dlogits;
    MatrixX<Scalar> dnormed = MatrixX<Scalar>::Zero(st.mask.size(), dpooled.size());
    for (Eigen::Index i = 0; i < st.mask.size(); ++i)
      if (st.mask(i)) dnormed.row(i) = dpooled.transpose() / ht.valid_count;
    MatrixX<Scalar> dh = layer_norm_backward(dnormed, bb.final_ln_gain, ht.final_ln);
    for (std::size_t b = st.blocks.size(); b-- > 0;) {
      BlockAdapter<Scalar> bg;
      dh = block_backward(bb.blocks[st.first_block + b], adapters[b], st.blocks[b], dh, model.config.n_heads, bg);
      g.adapters[b].query.a += bg.query.a;
      g.adapters[b].query.b += bg.query.b;
      g.adapters[b].value.a += bg.value.a;
      g.adapters[b].value.b += bg.value.b;
    }
    g.input_grads.push_back(std::move(dh));
  }
  return g;
}

template <typename Scalar>
StageGrads<Scalar> backward_stage(const SplitModelState<Scalar>& model, const StageTape<Scalar>& tape,
                                  const MatrixX<Scalar>& output_grad) {
  if (!tape.recorded) throw UsageError("backward_stage called without a recorded forward pass");
  const auto& bb = *model.backbone;
  const Part part = tape.first_block == 0 ? Part::one : Part::two;
  const auto& adapters = model.params.part(part);
  if (output_grad.rows() != static_cast<Eigen::Index>(model.config.seq_len) ||
      output_grad.cols() != static_cast<Eigen::Index>(model.config.hidden_dim))
    throw InputError("boundary gradient shape mismatch");
  StageGrads<Scalar> g;
  g.adapters.resize(tape.blocks.size());
  MatrixX<Scalar> dh = output_grad;
  for (std::size_t b = tape.blocks.size(); b-- > 0;)
    dh = block_backward(bb.blocks[tape.first_block + b], adapters[b], tape.blocks[b], dh, model.config.n_heads,
                        g.adapters[b]);
  if (part == Part::two) g.input_grad = std::move(dh);
  return g;
}

template <typename Scalar>
Part3Output<Scalar> forward_split(const SplitModelState<Scalar>& model,
                                  std::span<const std::vector<TokenId>> batch, std::span<const int> labels,
                                  SplitTape<Scalar>& tape) {
  tape.part1.assign(batch.size(), {});
  tape.part2.assign(batch.size(), {});
  std::vector<Activation<Scalar>> down(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto up = forward_part1(model, std::span<const TokenId>(batch[s]), &tape.part1[s]);
    down[s] = forward_part2(model, up, &tape.part2[s]);
  }
  return forward_part3_loss(model, std::span<const Activation<Scalar>>(down), labels, &tape.part3);
}

template <typename Scalar>
SplitGradients<Scalar> backward_split(const SplitModelState<Scalar>& model, const SplitTape<Scalar>& tape) {
  if (!tape.part3.recorded) throw UsageError("backward_split called without a recorded forward pass");
  SplitGradients<Scalar> out;
  out.params = model.params.zeros_like();
  auto p3 = backward_part3(model, tape.part3);
  out.params.part(Part::three) = std::move(p3.adapters);
  out.params.head = std::move(p3.head);
  auto accumulate = [](std::vector<BlockAdapter<Scalar>>& dst, const std::vector<BlockAdapter<Scalar>>& src) {
    for (std::size_t b = 0; b < dst.size(); ++b) {
      dst[b].query.a += src[b].query.a;
      dst[b].query.b += src[b].query.b;
      dst[b].value.a += src[b].value.a;
      dst[b].value.b += src[b].value.b;
    }
  };
  for (std::size_t s = 0; s < tape.part2.size(); ++s) {
    auto g2 = backward_stage(model, tape.part2[s], p3.input_grads[s]);
    accumulate(out.params.part(Part::two), g2.adapters);
    auto g1 = backward_stage(model, tape.part1[s], g2.input_grad);
    accumulate(out.params.part(Part::one), g1.adapters);
    out.down_boundary.push_back(p3.input_grads[s]);
    out.up_boundary.push_back(std::move(g2.input_grad));
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> forward_hidden(const SplitModelState<Scalar>& model, std::span<const TokenId> tokens) {
  Mask mask;
  MatrixX<Scalar> h = embed(model, tokens, mask);
  for (Part part : {Part::one, Part::two, Part::three}) h = run_stage(model, part, h, mask, static_cast<StageTape<Scalar>*>(nullptr));
  return h;
}

template <typename Scalar>
VectorX<Scalar> predict_logits(const SplitModelState<Scalar>& model, std::span<const TokenId> tokens) {
  Mask mask;
  MatrixX<Scalar> h = embed(model, tokens, mask);
  for (Part part : {Part::one, Part::two, Part::three}) h = run_stage(model, part, h, mask, static_cast<StageTape<Scalar>*>(nullptr));
  HeadTape<Scalar> t;
  return head_forward(model, h, mask, t);
}

template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const SplitModelState<Scalar>& model,
                                  std::span<const std::vector<TokenId>> batch, std::span<const int> labels) {
  SplitTape<Scalar> tape;
  const auto out = forward_split(model, batch, labels, tape);
  return {out.loss, backward_split(model, tape).params};
}

template <typename Scalar>
void sgd_step(AdapterParams<Scalar>& params, const AdapterParams<Scalar>& grad, Scalar lr) {
  params.axpy(-lr, grad);
}

#define ELSA_INSTANTIATE_MODEL(S)                                                                              \
  template struct AdapterParams<S>;                                                                            \
  template SplitModelState<S> init_model<S>(const ModelConfig&, std::uint64_t);                                \
  template Activation<S> forward_part1<S>(const SplitModelState<S>&, std::span<const TokenId>, StageTape<S>*); \
  template Activation<S> forward_part2<S>(const SplitModelState<S>&, const Activation<S>&, StageTape<S>*);     \
  template Part3Output<S> forward_part3_loss<S>(const SplitModelState<S>&, std::span<const Activation<S>>,     \
                                                std::span<const int>, Part3Tape<S>*);                          \
  template Part3Grads<S> backward_part3<S>(const SplitModelState<S>&, const Part3Tape<S>&);                    \
  template StageGrads<S> backward_stage<S>(const SplitModelState<S>&, const StageTape<S>&, const MatrixX<S>&); \
  template Part3Output<S> forward_split<S>(const SplitModelState<S>&, std::span<const std::vector<TokenId>>,   \
                                           std::span<const int>, SplitTape<S>&);                               \
  template SplitGradients<S> backward_split<S>(const SplitModelState<S>&, const SplitTape<S>&);                \
  template MatrixX<S> forward_hidden<S>(const SplitModelState<S>&, std::span<const TokenId>);                  \
  template VectorX<S> predict_logits<S>(const SplitModelState<S>&, std::span<const TokenId>);                  \
  template LossAndGrad<S> loss_and_grad<S>(const SplitModelState<S>&, std::span<const std::vector<TokenId>>,   \
                                           std::span<const int>);                                              \
  template void sgd_step<S>(AdapterParams<S>&, const AdapterParams<S>&, S);

ELSA_INSTANTIATE_MODEL(double)
ELSA_INSTANTIATE_MODEL(float)

#undef ELSA_INSTANTIATE_MODEL

}  // namespace elsa
