#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "distil/random.hpp"
#include "distil/tensor.hpp"

// Differentiable tensor operations. Every op accumulates reductions in double
// and records a backward closure when an input requires gradients.
namespace distil::ops {

inline constexpr std::int32_t kIgnoreIndex = -100;

// a [m, k] x b [k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [n, in] x w [in, out] + bias [out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// Normalizes each row of x [n, h] then applies gamma/beta [h].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Rows of table [v, h] selected by ids -> [ids.size(), h].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// Rows of x [n, h] selected by index -> [rows.size(), h].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
};

// Multi-head scaled dot-product self-attention over q, k, v [batch*seq, hidden]
// already projected. key_mask [batch*seq] is nonzero at real tokens; masked
// positions neither attend nor are attended to, and their output rows are zero.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout,
                 std::span<const std::uint8_t> key_mask);

// softmax(logits / temperature) over the last axis.
Tensor softmax_with_temperature(const Tensor& logits, double temperature);

// Mean over rows of KL(p || q), p = softmax(p_logits / T), q = softmax(q_logits / T).
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits, double temperature);

// Mean over rows of -sum_i q_i log p_i with p, q softened by temperature.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_logits, double temperature);

// logits [n, c]; rows whose target equals ignore_index are skipped. Throws
// NoSupervisedPositions when every row is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_index = kIgnoreIndex);

// logits [batch, seq, vocab]; averages only over positions where mask != 0.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask);

}  // namespace distil::ops
