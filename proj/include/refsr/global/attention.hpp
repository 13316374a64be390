#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"

namespace refsr::global {

/// Floor applied to log(mask) so that excluded keys get a finite but
/// overwhelming negative score.
inline constexpr double kLogMaskFloor = -1e9;

namespace detail {

/// Reshape a key mask of shape (M) or (B, M) so it broadcasts against
/// scores of shape (B, ..., L, M).
inline torch::Tensor broadcast_key_mask(const torch::Tensor& mask, const torch::Tensor& scores) {
  const int64_t M = scores.size(-1);
  if (mask.size(-1) != M) throw ShapeError("attention mask length " + std::to_string(mask.size(-1)) +
                                           " does not match key count " + std::to_string(M));
  if (mask.dim() == 1) return mask;
  if (mask.dim() != 2 || scores.dim() < 3 || mask.size(0) != scores.size(0))
    throw ShapeError("attention mask must be (M) or (B, M), got " + shape_str(mask));
  std::vector<int64_t> shape(scores.dim(), 1);
  shape.front() = mask.size(0);
  shape.back() = M;
  return mask.view(shape);
}

}  // namespace detail

/// Softmax(Q K^T / sqrt(d_k) + log m) V over the last two dims.
/// q: (..., L, d), k: (..., M, d), v: (..., M, dv), mask: (M) or (B, M) in [0,1].
/// Rows whose mask is entirely zero produce a zero attention term.
inline torch::Tensor masked_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                      const std::optional<torch::Tensor>& mask = std::nullopt) {
  const int64_t d = q.size(-1);
  if (d <= 0) throw ParameterError("attention needs d_k > 0");
  if (k.size(-1) != d) throw ShapeError("query/key dims differ: " + shape_str(q) + " vs " + shape_str(k));
  if (k.size(-2) != v.size(-2)) throw ShapeError("key/value counts differ: " + shape_str(k) + " vs " + shape_str(v));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d));
  if (!mask) return torch::softmax(scores, -1).matmul(v);

  auto m = detail::broadcast_key_mask(mask->to(scores.scalar_type()), scores);
  scores = scores + m.log().clamp_min(kLogMaskFloor);
  auto out = torch::softmax(scores, -1).matmul(v);
  auto keep = (m.sum(-1, /*keepdim=*/true) > 0).to(out.scalar_type());
  return out * keep;
}

/// Residual cross-attention with reference strength: Q + s * Attn(Q, K, V, m).
inline torch::Tensor masked_cross_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                            const std::optional<torch::Tensor>& mask, double s) {
  if (s < 0.0 || s > 1.0) throw ParameterError("reference strength s must lie in [0,1]");
  if (v.size(-1) != q.size(-1)) throw ShapeError("residual cross-attention needs dv == dq");
  if (s == 0.0) return q.clone();
  return q + s * masked_attention(q, k, v, mask);
}

/// Attention cost model: B * H * N_q * N_k * (4 d_h + 5).
inline int64_t flops_cross_attention(int64_t batch, int64_t heads, int64_t n_q, int64_t n_k, int64_t d_head) {
  if (batch < 0 || heads < 0 || n_q < 0 || n_k < 0 || d_head < 0) throw ParameterError("flops: negative size");
  return batch * heads * n_q * n_k * (4 * d_head + 5);
}

/// Relative saving from shrinking the key count, everything else fixed.
inline double flops_reduction(int64_t n_k_before, int64_t n_k_after, int64_t heads = 1, int64_t n_q = 1,
                              int64_t d_head = 64) {
  const auto before = flops_cross_attention(1, heads, n_q, n_k_before, d_head);
  const auto after = flops_cross_attention(1, heads, n_q, n_k_after, d_head);
  return 1.0 - static_cast<double>(after) / static_cast<double>(before);
}

/// Multi-head attention with separate query and context streams. Returns
/// the attention term only; callers own the residual.
struct MultiHeadAttentionImpl : torch::nn::Module {
  MultiHeadAttentionImpl(int64_t dim, int64_t context_dim, int64_t heads) : heads(heads) {
    if (dim <= 0 || context_dim <= 0) throw ParameterError("attention needs positive widths");
    if (heads <= 0 || dim % heads != 0) throw ConfigError("attention width must be divisible by heads");
    to_q = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(dim, dim).bias(false)));
    to_k = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(context_dim, dim).bias(false)));
    to_v = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, dim).bias(false)));
    to_out = register_module("to_out", torch::nn::Linear(dim, dim));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context,
                        const std::optional<torch::Tensor>& mask = std::nullopt) {
    const int64_t B = x.size(0), L = x.size(1), M = context.size(1), C = to_q->options.out_features();
    const int64_t dh = C / heads;
    auto split = [&](const torch::Tensor& t, int64_t n) { return t.view({B, n, heads, dh}).transpose(1, 2); };
    auto q = split(to_q(x), L);
    auto k = split(to_k(context), M);
    auto v = split(to_v(context), M);
    auto o = masked_attention(q, k, v, mask);
    return to_out(o.transpose(1, 2).reshape({B, L, C}));
  }

  int64_t heads;
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

}  // namespace refsr::global
