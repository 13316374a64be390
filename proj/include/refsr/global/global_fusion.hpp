#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/global/attention.hpp"

namespace refsr::global {

namespace nn = torch::nn;

/// Encoder output: tokens (B, M, C_enc) laid out row-major on a gh x gw grid.
struct GlobalFeatures {
  torch::Tensor tokens;
  int64_t gh = 0;
  int64_t gw = 0;

  int64_t count() const { return tokens.size(1); }

  void validate() const {
    if (tokens.dim() != 3) throw ShapeError("global tokens must be (B,M,C), got " + shape_str(tokens));
    if (gh * gw != tokens.size(1) || tokens.size(1) < 1) throw ShapeError("token grid does not match token count");
  }
};

/// Plug-in contract for frozen reference encoders.
class GlobalEncoder {
 public:
  virtual ~GlobalEncoder() = default;
  /// Expected square input size in pixels.
  virtual int64_t input_size() const = 0;
  virtual int64_t token_dim() const = 0;
  /// Signed-range (B,3,S,S) image -> token grid.
  virtual GlobalFeatures encode(const torch::Tensor& image) = 0;
  virtual std::shared_ptr<nn::Module> module() = 0;
};

/// Default encoder: non-overlapping patch embedding followed by per-token
/// residual MLPs. Tokens only see their own patch.
struct PatchEncoderImpl : nn::Module {
  PatchEncoderImpl(int64_t input_size, int64_t patch, int64_t dim, int64_t depth = 2)
      : input_size(input_size), patch(patch), dim(dim) {
    if (patch <= 0 || input_size % patch != 0) throw ConfigError("encoder input size must be a multiple of the patch");
    embed = register_module("embed", nn::Conv2d(nn::Conv2dOptions(3, dim, patch).stride(patch)));
    for (int64_t i = 0; i < depth; ++i) {
      auto s = std::to_string(i);
      norms->push_back(register_module("norm" + s, nn::LayerNorm(nn::LayerNormOptions({dim}))));
      fc1->push_back(register_module("fc1_" + s, nn::Linear(dim, 2 * dim)));
      fc2->push_back(register_module("fc2_" + s, nn::Linear(2 * dim, dim)));
    }
    out_norm = register_module("out_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
  }

  GlobalFeatures forward(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 3 || image.size(2) != input_size || image.size(3) != input_size)
      throw ShapeError("encoder expects (B,3," + std::to_string(input_size) + "," + std::to_string(input_size) +
                       "), got " + shape_str(image));
    auto g = embed(image);  // (B, dim, gh, gw)
    const int64_t gh = g.size(2), gw = g.size(3);
    auto x = g.flatten(2).transpose(1, 2);
    for (size_t i = 0; i < norms->size(); ++i) {
      auto h = norms[i]->as<nn::LayerNorm>()->forward(x);
      h = fc2[i]->as<nn::Linear>()->forward(torch::gelu(fc1[i]->as<nn::Linear>()->forward(h)));
      x = x + h;
    }
    return {out_norm(x), gh, gw};
  }

  int64_t input_size, patch, dim;
  nn::Conv2d embed{nullptr};
  nn::ModuleList norms, fc1, fc2;
  nn::LayerNorm out_norm{nullptr};
};
TORCH_MODULE(PatchEncoder);

class PatchGlobalEncoder final : public GlobalEncoder {
 public:
  PatchGlobalEncoder(int64_t input_size, int64_t patch, int64_t dim) : net_(input_size, patch, dim) {}

  int64_t input_size() const override { return net_->input_size; }
  int64_t token_dim() const override { return net_->dim; }
  GlobalFeatures encode(const torch::Tensor& image) override { return net_->forward(image); }
  std::shared_ptr<nn::Module> module() override { return net_.ptr(); }
  PatchEncoder& net() { return net_; }

 private:
  PatchEncoder net_;
};

/// Named encoder factories; "patch" is always registered.
class EncoderRegistry {
 public:
  using Factory = std::function<std::unique_ptr<GlobalEncoder>(int64_t input_size, int64_t patch, int64_t dim)>;

  static EncoderRegistry& instance() {
    static EncoderRegistry r;
    return r;
  }

  void add(const std::string& name, Factory f) { factories_[name] = std::move(f); }

  std::unique_ptr<GlobalEncoder> create(const std::string& name, int64_t input_size, int64_t patch, int64_t dim) const {
    auto it = factories_.find(name);
    if (it == factories_.end()) throw ConfigError("unknown global encoder '" + name + "'");
    return it->second(input_size, patch, dim);
  }

 private:
  EncoderRegistry() {
    add("patch", [](int64_t s, int64_t p, int64_t d) { return std::make_unique<PatchGlobalEncoder>(s, p, d); });
  }
  std::map<std::string, Factory> factories_;
};

/// Resize a signed-range reference to the encoder's input size and encode it.
inline GlobalFeatures extract_global(const ImageTensor& ref, GlobalEncoder& encoder) {
  auto x = ref.to_signed().data;
  const int64_t s = encoder.input_size();
  if (x.size(2) != s || x.size(3) != s) x = image::resize_bicubic(x, s, s);
  auto g = encoder.encode(x);
  g.validate();
  return g;
}

/// Two affine maps with a GELU between them, C_enc -> C.
struct ProjectorImpl : nn::Module {
  ProjectorImpl(int64_t in_dim, int64_t out_dim) {
    fc1 = register_module("fc1", nn::Linear(in_dim, out_dim));
    fc2 = register_module("fc2", nn::Linear(out_dim, out_dim));
  }
  torch::Tensor forward(const torch::Tensor& tokens) { return fc2(torch::gelu(fc1(tokens))); }
  nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Projector);

/// Learnable queries distilled against projected reference tokens:
/// self-attention, masked cross-attention, feed-forward, each residual.
struct SemanticAggregatorImpl : nn::Module {
  SemanticAggregatorImpl(int64_t num_queries, int64_t dim, int64_t heads) : num_queries(num_queries), dim(dim) {
    if (num_queries < 1) throw ConfigError("aggregator needs at least one query");
    queries = register_parameter("queries", torch::randn({num_queries, dim}) * 0.02);
    norm_self = register_module("norm_self", nn::LayerNorm(nn::LayerNormOptions({dim})));
    self_attn = register_module("self_attn", MultiHeadAttention(dim, dim, heads));
    norm_cross = register_module("norm_cross", nn::LayerNorm(nn::LayerNormOptions({dim})));
    norm_ctx = register_module("norm_ctx", nn::LayerNorm(nn::LayerNormOptions({dim})));
    cross_attn = register_module("cross_attn", MultiHeadAttention(dim, dim, heads));
    norm_ffn = register_module("norm_ffn", nn::LayerNorm(nn::LayerNormOptions({dim})));
    ffn1 = register_module("ffn1", nn::Linear(dim, 4 * dim));
    ffn2 = register_module("ffn2", nn::Linear(4 * dim, dim));
  }

  /// f_proj: (B, M, C); token_mask: (B, M) or undefined. Returns (B, N, C).
  torch::Tensor forward(const torch::Tensor& f_proj, const torch::Tensor& token_mask = {}) {
    if (f_proj.dim() != 3 || f_proj.size(2) != dim || f_proj.size(1) < 1)
      throw ShapeError("aggregator expects (B,M," + std::to_string(dim) + "), got " + shape_str(f_proj));
    const int64_t B = f_proj.size(0);
    auto q = queries.unsqueeze(0).expand({B, num_queries, dim});
    auto h = norm_self(q);
    q = q + self_attn(h, h);
    std::optional<torch::Tensor> mask;
    if (token_mask.defined()) mask = token_mask;
    q = q + cross_attn(norm_cross(q), norm_ctx(f_proj), mask);
    q = q + ffn2(torch::gelu(ffn1(norm_ffn(q))));
    return q;
  }

  int64_t num_queries, dim;
  torch::Tensor queries;
  nn::LayerNorm norm_self{nullptr}, norm_cross{nullptr}, norm_ctx{nullptr}, norm_ffn{nullptr};
  MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  nn::Linear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(SemanticAggregator);

}  // namespace refsr::global
