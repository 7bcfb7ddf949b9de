#pragma once

// The four architecture families with grid constraints on depth and width,
// a uniform ParamSet representation, and forward passes built entirely from
// tape ops so that meta-gradients flow through every family.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "metabias/ops.hpp"
#include "metabias/represent.hpp"
#include "metabias/tensor.hpp"

namespace metabias {

enum class InputKind { FlatVector, Image, TokenSequence };

inline const char* to_string(InputKind k) {
  switch (k) {
    case InputKind::FlatVector: return "flat";
    case InputKind::Image: return "image";
    case InputKind::TokenSequence: return "tokens";
  }
  return "?";
}

enum class TransformerReadout { MeanPool, FirstToken };

struct ArchSpec {
  Family family = Family::MLP;
  int num_layers = 2;
  // MLP/LSTM/Transformer: hidden width. CNN: width of the first conv layer
  // (16, 32, 64 or 128); later conv widths halve per layer.
  int hidden_width = 8;

  InputKind input_kind = InputKind::FlatVector;
  int flat_dim = 0;      // FlatVector
  int channels = 0;      // Image (32x32 spatial extent is fixed)
  int token_dim = 0;     // TokenSequence
  int seq_len = 0;       // TokenSequence (informational; forward infers T)
  int output_dim = 1;

  bool positional_encoding = true;  // transformer only
  TransformerReadout readout = TransformerReadout::MeanPool;

  static constexpr int kAttentionHeads = 4;

  void validate() const {
    auto fail = [&](const std::string& why) {
      throw SpecError("invalid architecture: " + why);
    };
    switch (family) {
      case Family::MLP:
      case Family::CNN:
        if (num_layers != 2 && num_layers != 4 && num_layers != 6 &&
            num_layers != 8)
          fail("depth " + std::to_string(num_layers) +
               " not in {2,4,6,8} for " + to_string(family));
        break;
      case Family::LSTM:
      case Family::Transformer:
        if (num_layers < 1 || num_layers > 4)
          fail("depth " + std::to_string(num_layers) +
               " not in {1,2,3,4} for " + to_string(family));
        break;
    }
    if (family == Family::CNN) {
      if (hidden_width != 16 && hidden_width != 32 && hidden_width != 64 &&
          hidden_width != 128)
        fail("CNN first conv width " + std::to_string(hidden_width) +
             " not in {16,32,64,128}");
      if (input_kind != InputKind::Image)
        fail("CNNs operate on image inputs only");
    } else {
      if (hidden_width != 8 && hidden_width != 16 && hidden_width != 32 &&
          hidden_width != 64)
        fail("hidden width " + std::to_string(hidden_width) +
             " not in {8,16,32,64}");
    }
    switch (input_kind) {
      case InputKind::FlatVector:
        if (family != Family::MLP) fail("flat input requires MLP");
        if (flat_dim <= 0) fail("flat_dim not set");
        break;
      case InputKind::Image:
        if (family != Family::CNN) fail("raw image input requires CNN");
        if (channels <= 0) fail("channels not set");
        break;
      case InputKind::TokenSequence:
        if (family != Family::LSTM && family != Family::Transformer)
          fail("token input requires LSTM or Transformer");
        if (token_dim <= 0) fail("token_dim not set");
        break;
    }
    if (family == Family::Transformer && hidden_width % kAttentionHeads != 0)
      fail("hidden width " + std::to_string(hidden_width) +
           " not divisible by " + std::to_string(kAttentionHeads) + " heads");
    if (output_dim <= 0) fail("output_dim not set");
  }

  // Conv widths per the grid: depth 2 uses two conv layers, deeper variants
  // four, halving the width each layer.
  std::vector<int> conv_widths() const {
    int n_conv = num_layers == 2 ? 2 : 4;
    std::vector<int> widths;
    for (int i = 0; i < n_conv; ++i) widths.push_back(hidden_width >> i);
    return widths;
  }
  int conv_layers() const { return num_layers == 2 ? 2 : 4; }
  int fc_hidden_layers() const { return num_layers <= 4 ? 0 : num_layers - 4; }

  std::string id() const {
    return std::string(to_string(family)) + "-d" +
           std::to_string(num_layers) + "-w" + std::to_string(hidden_width);
  }
};

// Named parameter collection with fixed insertion order.
class ParamSet {
 public:
  void add(std::string name, Tensor t) {
    if (index_.count(name))
      throw SpecError("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(std::move(name), std::move(t));
  }

  const Tensor& at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end())
      throw SpecError("unknown parameter: " + std::string(name));
    return items_[it->second].second;
  }

  bool has(std::string_view name) const {
    return index_.count(std::string(name)) > 0;
  }

  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  bool same_structure(const ParamSet& other) const {
    if (items_.size() != other.items_.size()) return false;
    for (size_t i = 0; i < items_.size(); ++i)
      if (items_[i].first != other.items_[i].first ||
          items_[i].second.shape() != other.items_[i].second.shape())
        return false;
    return true;
  }

  std::vector<double> flatten_values() const {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total_params()));
    for (const auto& [name, t] : items_)
      out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  }

  // Rebuilds a ParamSet with this set's names/shapes from flat values.
  ParamSet unflatten(std::span<const double> values) const {
    if (static_cast<int64_t>(values.size()) != total_params())
      throw ShapeError("unflatten: got " + std::to_string(values.size()) +
                       " values for " + std::to_string(total_params()) +
                       " parameters");
    ParamSet out;
    size_t off = 0;
    for (const auto& [name, t] : items_) {
      size_t n = static_cast<size_t>(t.numel());
      out.add(name, Tensor(t.shape(),
                           std::vector<double>(values.begin() + off,
                                               values.begin() + off + n)));
      off += n;
    }
    return out;
  }

  // Registers every tensor as a leaf on the tape.
  ParamSet watched(Tape& tape) const {
    ParamSet out;
    for (const auto& [name, t] : items_) out.add(name, tape.watch(t));
    return out;
  }

  // Copy with one tensor replaced (shape-checked).
  ParamSet with(std::string_view name, Tensor t) const {
    ParamSet out;
    bool found = false;
    for (const auto& [n, v] : items_) {
      if (n == name) {
        if (v.shape() != t.shape())
          throw ShapeError("with: shape " + shape_str(t.shape()) +
                           " does not match parameter " + n + " " +
                           shape_str(v.shape()));
        out.add(n, t);
        found = true;
      } else {
        out.add(n, v);
      }
    }
    if (!found) throw SpecError("unknown parameter: " + std::string(name));
    return out;
  }

  // Elementwise map over aligned parameter sets.
  template <typename Fn>
  static ParamSet zip(const ParamSet& a, const ParamSet& b, Fn fn) {
    if (!a.same_structure(b))
      throw ShapeError("parameter sets have different structure");
    ParamSet out;
    for (size_t i = 0; i < a.items_.size(); ++i)
      out.add(a.items_[i].first,
              fn(a.items_[i].second, b.items_[i].second));
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Initialization: Kaiming-uniform ahead of ReLU, Xavier-uniform elsewhere,
// zero biases, BN/LN gamma=1 beta=0. Parameters are drawn in insertion
// order from one seeded stream.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor kaiming_uniform(Rng& rng, Shape shape, int64_t fan_in) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = uniform_real(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor xavier_uniform(Rng& rng, Shape shape, int64_t fan_in,
                             int64_t fan_out) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = uniform_real(rng, -bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

inline void add_norm(ParamSet& p, const std::string& prefix, int64_t dim) {
  p.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
  p.add(prefix + ".beta", Tensor::zeros({dim}));
}

}  // namespace detail

inline ParamSet build(const ArchSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "build", static_cast<uint64_t>(spec.family),
                      static_cast<uint64_t>(spec.num_layers * 1000 +
                                            spec.hidden_width)));
  ParamSet p;
  int64_t w = spec.hidden_width, out = spec.output_dim;

  switch (spec.family) {
    case Family::MLP: {
      int64_t in = spec.flat_dim;
      for (int i = 0; i + 1 < spec.num_layers; ++i) {
        std::string prefix = "layer" + std::to_string(i);
        p.add(prefix + ".weight",
              detail::kaiming_uniform(rng, {in, w}, in));
        p.add(prefix + ".bias", Tensor::zeros({w}));
        detail::add_norm(p, prefix + ".bn", w);
        in = w;
      }
      p.add("head.weight", detail::xavier_uniform(rng, {in, out}, in, out));
      p.add("head.bias", Tensor::zeros({out}));
      break;
    }
    case Family::CNN: {
      auto widths = spec.conv_widths();
      int64_t cin = spec.channels;
      for (size_t i = 0; i < widths.size(); ++i) {
        std::string prefix = "conv" + std::to_string(i);
        int64_t cout = widths[i];
        p.add(prefix + ".kernel",
              detail::kaiming_uniform(rng, {cout, cin, 3, 3}, cin * 9));
        p.add(prefix + ".bias", Tensor::zeros({cout}));
        detail::add_norm(p, prefix + ".bn", cout);
        cin = cout;
      }
      int side = kImageSize >> widths.size();  // one 2x pool per conv
      int64_t flat = cin * side * side;
      for (int i = 0; i < spec.fc_hidden_layers(); ++i) {
        std::string prefix = "fc" + std::to_string(i);
        p.add(prefix + ".weight",
              detail::kaiming_uniform(rng, {flat, flat}, flat));
        p.add(prefix + ".bias", Tensor::zeros({flat}));
        detail::add_norm(p, prefix + ".bn", flat);
      }
      p.add("head.weight",
            detail::xavier_uniform(rng, {flat, out}, flat, out));
      p.add("head.bias", Tensor::zeros({out}));
      break;
    }
    case Family::LSTM: {
      int64_t d = spec.token_dim;
      p.add("proj.weight", detail::xavier_uniform(rng, {d, w}, d, w));
      p.add("proj.bias", Tensor::zeros({w}));
      for (int i = 0; i < spec.num_layers; ++i) {
        std::string prefix = "layer" + std::to_string(i);
        detail::add_norm(p, prefix + ".ln", w);
        // gates packed (input, forget, cell, output) along the last axis
        p.add(prefix + ".w_ih",
              detail::xavier_uniform(rng, {w, 4 * w}, w, 4 * w));
        p.add(prefix + ".w_hh",
              detail::xavier_uniform(rng, {w, 4 * w}, w, 4 * w));
        p.add(prefix + ".bias", Tensor::zeros({4 * w}));
      }
      p.add("head.weight", detail::xavier_uniform(rng, {w, out}, w, out));
      p.add("head.bias", Tensor::zeros({out}));
      break;
    }
    case Family::Transformer: {
      int64_t d = spec.token_dim;
      p.add("proj.weight", detail::xavier_uniform(rng, {d, w}, d, w));
      p.add("proj.bias", Tensor::zeros({w}));
      for (int i = 0; i < spec.num_layers; ++i) {
        std::string prefix = "layer" + std::to_string(i);
        detail::add_norm(p, prefix + ".ln1", w);
        for (const char* role : {"wq", "wk", "wv", "wo"}) {
          p.add(prefix + ".attn." + std::string(role),
                detail::xavier_uniform(rng, {w, w}, w, w));
          p.add(prefix + ".attn.b" + std::string(role + 1),
                Tensor::zeros({w}));
        }
        detail::add_norm(p, prefix + ".ln2", w);
        p.add(prefix + ".ffn.w1",
              detail::kaiming_uniform(rng, {w, 2 * w}, w));
        p.add(prefix + ".ffn.b1", Tensor::zeros({2 * w}));
        p.add(prefix + ".ffn.w2",
              detail::xavier_uniform(rng, {2 * w, w}, 2 * w, w));
        p.add(prefix + ".ffn.b2", Tensor::zeros({w}));
      }
      detail::add_norm(p, "final_ln", w);
      p.add("head.weight", detail::xavier_uniform(rng, {w, out}, w, out));
      p.add("head.bias", Tensor::zeros({out}));
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes.
// ---------------------------------------------------------------------------

struct ForwardTrace {
  // attention weights per layer, each [B*heads, T, T]
  std::vector<Tensor> attention;
};

namespace detail {

inline Tensor forward_mlp(const ArchSpec& spec, const ParamSet& p,
                          const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != spec.flat_dim)
    throw ShapeError("mlp forward: expected [B," +
                     std::to_string(spec.flat_dim) + "], got " +
                     shape_str(x.shape()));
  Tensor h = x;
  for (int i = 0; i + 1 < spec.num_layers; ++i) {
    std::string prefix = "layer" + std::to_string(i);
    h = linear(h, p.at(prefix + ".weight"), p.at(prefix + ".bias"));
    h = batchnorm(h, p.at(prefix + ".bn.gamma"), p.at(prefix + ".bn.beta"));
    h = relu(h);
  }
  return linear(h, p.at("head.weight"), p.at("head.bias"));
}

inline Tensor forward_cnn(const ArchSpec& spec, const ParamSet& p,
                          const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != spec.channels ||
      x.dim(2) != kImageSize || x.dim(3) != kImageSize)
    throw ShapeError("cnn forward: expected [B," +
                     std::to_string(spec.channels) + ",32,32], got " +
                     shape_str(x.shape()));
  Tensor h = x;
  for (int i = 0; i < spec.conv_layers(); ++i) {
    std::string prefix = "conv" + std::to_string(i);
    h = conv2d(h, p.at(prefix + ".kernel"), p.at(prefix + ".bias"));
    h = batchnorm_nchw(h, p.at(prefix + ".bn.gamma"),
                       p.at(prefix + ".bn.beta"));
    h = relu(h);
    h = avgpool2d(h);
  }
  h = flatten(h);
  for (int i = 0; i < spec.fc_hidden_layers(); ++i) {
    std::string prefix = "fc" + std::to_string(i);
    h = linear(h, p.at(prefix + ".weight"), p.at(prefix + ".bias"));
    h = batchnorm(h, p.at(prefix + ".bn.gamma"), p.at(prefix + ".bn.beta"));
    h = relu(h);
  }
  return linear(h, p.at("head.weight"), p.at("head.bias"));
}

inline Tensor forward_lstm(const ArchSpec& spec, const ParamSet& p,
                           const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != spec.token_dim)
    throw ShapeError("lstm forward: expected [B,T," +
                     std::to_string(spec.token_dim) + "], got " +
                     shape_str(x.shape()));
  int64_t b = x.dim(0), tlen = x.dim(1), w = spec.hidden_width;
  if (tlen < 1) throw ShapeError("lstm forward: empty sequence");

  Tensor seq = reshape(
      linear(reshape(x, {b * tlen, spec.token_dim}), p.at("proj.weight"),
             p.at("proj.bias")),
      {b, tlen, w});

  Tensor last_h;
  for (int layer = 0; layer < spec.num_layers; ++layer) {
    std::string prefix = "layer" + std::to_string(layer);
    Tensor normed = layernorm(seq, p.at(prefix + ".ln.gamma"),
                              p.at(prefix + ".ln.beta"));
    const Tensor& w_ih = p.at(prefix + ".w_ih");
    const Tensor& w_hh = p.at(prefix + ".w_hh");
    const Tensor& bias = p.at(prefix + ".bias");
    Tensor h = Tensor::zeros({b, w});
    Tensor c = Tensor::zeros({b, w});
    std::vector<Tensor> outputs;
    for (int64_t t = 0; t < tlen; ++t) {
      Tensor xt = reshape(slice(normed, 1, t, 1), {b, w});
      Tensor gates = add(add(matmul(xt, w_ih), matmul(h, w_hh)),
                         expand_leading(bias, b));
      Tensor ig = sigmoid(slice(gates, 1, 0, w));
      Tensor fg = sigmoid(slice(gates, 1, w, w));
      Tensor gg = tanh(slice(gates, 1, 2 * w, w));
      Tensor og = sigmoid(slice(gates, 1, 3 * w, w));
      c = add(mul(fg, c), mul(ig, gg));
      h = mul(og, tanh(c));
      outputs.push_back(reshape(h, {b, 1, w}));
    }
    seq = concat(outputs, 1);
    last_h = h;
  }
  return linear(last_h, p.at("head.weight"), p.at("head.bias"));
}

inline Tensor sinusoidal_encoding(int64_t tlen, int64_t width) {
  std::vector<double> pe(static_cast<size_t>(tlen * width));
  for (int64_t pos = 0; pos < tlen; ++pos)
    for (int64_t i = 0; i < width; ++i) {
      double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) /
                                          static_cast<double>(width));
      double angle = static_cast<double>(pos) * rate;
      pe[static_cast<size_t>(pos * width + i)] =
          (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return Tensor(Shape{tlen, width}, std::move(pe));
}

inline Tensor attention_block(const ParamSet& p, const std::string& prefix,
                              const Tensor& x, int heads,
                              ForwardTrace* trace) {
  int64_t b = x.dim(0), tlen = x.dim(1), w = x.dim(2);
  int64_t hd = w / heads;
  auto project = [&](const char* wname, const char* bname) {
    return reshape(linear(reshape(x, {b * tlen, w}),
                          p.at(prefix + ".attn." + wname),
                          p.at(prefix + ".attn." + bname)),
                   {b, tlen, w});
  };
  auto split_heads = [&](const Tensor& v) {
    // [B,T,W] -> [B*heads, T, hd]
    return reshape(permute(reshape(v, {b, tlen, heads, hd}), {0, 2, 1, 3}),
                   {b * heads, tlen, hd});
  };
  Tensor q = split_heads(project("wq", "bq"));
  Tensor k = split_heads(project("wk", "bk"));
  Tensor v = split_heads(project("wv", "bv"));
  Tensor scores =
      mul_scalar(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(double(hd)));
  Tensor attn = softmax(scores);  // [B*heads, T, T]
  if (trace) trace->attention.push_back(attn.detached());
  Tensor ctx = bmm(attn, v);  // [B*heads, T, hd]
  Tensor merged = reshape(
      permute(reshape(ctx, {b, heads, tlen, hd}), {0, 2, 1, 3}),
      {b * tlen, w});
  Tensor out = linear(merged, p.at(prefix + ".attn.wo"),
                      p.at(prefix + ".attn.bo"));
  return reshape(out, {b, tlen, w});
}

inline Tensor forward_transformer(const ArchSpec& spec, const ParamSet& p,
                                  const Tensor& x, ForwardTrace* trace) {
  if (x.rank() != 3 || x.dim(2) != spec.token_dim)
    throw ShapeError("transformer forward: expected [B,T," +
                     std::to_string(spec.token_dim) + "], got " +
                     shape_str(x.shape()));
  int64_t b = x.dim(0), tlen = x.dim(1), w = spec.hidden_width;
  Tensor h = reshape(
      linear(reshape(x, {b * tlen, spec.token_dim}), p.at("proj.weight"),
             p.at("proj.bias")),
      {b, tlen, w});
  if (spec.positional_encoding)
    h = add(h, expand_leading(sinusoidal_encoding(tlen, w), b));

  for (int layer = 0; layer < spec.num_layers; ++layer) {
    std::string prefix = "layer" + std::to_string(layer);
    Tensor normed = layernorm(h, p.at(prefix + ".ln1.gamma"),
                              p.at(prefix + ".ln1.beta"));
    h = add(h, attention_block(p, prefix, normed, ArchSpec::kAttentionHeads,
                               trace));
    Tensor normed2 = layernorm(h, p.at(prefix + ".ln2.gamma"),
                               p.at(prefix + ".ln2.beta"));
    Tensor ff = linear(reshape(normed2, {b * tlen, w}),
                       p.at(prefix + ".ffn.w1"), p.at(prefix + ".ffn.b1"));
    ff = linear(relu(ff), p.at(prefix + ".ffn.w2"), p.at(prefix + ".ffn.b2"));
    h = add(h, reshape(ff, {b, tlen, w}));
  }
  h = layernorm(h, p.at("final_ln.gamma"), p.at("final_ln.beta"));

  Tensor pooled;
  if (spec.readout == TransformerReadout::MeanPool)
    pooled = mul_scalar(sum_last(permute(h, {0, 2, 1})),
                        1.0 / static_cast<double>(tlen));
  else
    pooled = reshape(slice(h, 1, 0, 1), {b, w});
  return linear(pooled, p.at("head.weight"), p.at("head.bias"));
}

}  // namespace detail

// Maps a batch in the family's input layout to [B, output_dim].
inline Tensor forward(const ArchSpec& spec, const ParamSet& params,
                      const Tensor& x, ForwardTrace* trace = nullptr) {
  switch (spec.family) {
    case Family::MLP: return detail::forward_mlp(spec, params, x);
    case Family::CNN: return detail::forward_cnn(spec, params, x);
    case Family::LSTM: return detail::forward_lstm(spec, params, x);
    case Family::Transformer:
      return detail::forward_transformer(spec, params, x, trace);
  }
  throw SpecError("forward: unhandled family");
}

// Architecture description for a task/representation pair.
inline ArchSpec make_arch_spec(Family family, int num_layers, int hidden_width,
                               Representation repr, int image_channels,
                               int bits_len, int output_dim) {
  ArchSpec s;
  s.family = family;
  s.num_layers = num_layers;
  s.hidden_width = hidden_width;
  s.output_dim = output_dim;
  bool image = repr == Representation::Image;
  switch (family) {
    case Family::MLP:
      s.input_kind = InputKind::FlatVector;
      s.flat_dim = image ? image_channels * kImageSize * kImageSize : bits_len;
      break;
    case Family::CNN:
      if (!image)
        throw SpecError("CNNs operate on image inputs only");
      s.input_kind = InputKind::Image;
      s.channels = image_channels;
      break;
    case Family::LSTM:
    case Family::Transformer:
      s.input_kind = InputKind::TokenSequence;
      if (image) {
        s.token_dim = kPatch * kPatch * image_channels;
        s.seq_len = kTokensPerImage;
      } else {
        s.token_dim = 1;
        s.seq_len = bits_len;
      }
      break;
  }
  s.validate();
  return s;
}

}  // namespace metabias
