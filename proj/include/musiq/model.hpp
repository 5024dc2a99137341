#pragma once

#include <limits>
#include <string>
#include <vector>

#include "musiq/config.hpp"
#include "musiq/embeddings.hpp"
#include "musiq/graph.hpp"
#include "musiq/heads.hpp"
#include "musiq/optim.hpp"
#include "musiq/params.hpp"
#include "musiq/tokenizer.hpp"

namespace musiq {

// Per-layer, per-head attention weight matrices captured during a forward
// pass (only when requested; rollout and tests consume them).
template <typename T>
struct AttentionRecord {
  std::vector<std::vector<Tensor<T>>> layers;
  bool empty() const { return layers.empty(); }
};

template <typename T>
struct ForwardResult {
  Var<T> cls;     // (1, D) final LayerNorm of the CLS state
  Var<T> output;  // (1, 1) scalar or (1, B) softmax-normalized distribution
  AttentionRecord<T> attention;
};

// Additive attention mask: column j is -inf on every row iff slot j is
// padded. The CLS column is always valid.
template <typename T>
Tensor<T> attention_mask(const TokenLayout& layout) {
  int s = layout.total_slots();
  Tensor<T> m({s, s});
  T neg_inf = -std::numeric_limits<T>::infinity();
  for (int j = 0; j < s; ++j) {
    if (layout.slots[j].valid) continue;
    for (int i = 0; i < s; ++i) m[static_cast<int64_t>(i) * s + j] = neg_inf;
  }
  return m;
}

// The full network: patch encoder, spatial/scale/CLS embeddings, masked
// pre-LN Transformer encoder, quality head. Templated on the scalar type so
// float64 gradient verification runs the exact same code path as float32
// training.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg, uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    build_params(rng);
    if (cfg_.spatial == SpatialMode::HseSinusoidal)
      sinus_table_ = sinusoidal_hse_table<T>(cfg_.grid_size, cfg_.hidden_dim);
  }

  // Rebuild around externally provided parameters (checkpoint loading).
  Model(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(0);
    build_params(rng);
    for (const auto& e : params_.entries()) {
      if (!params.has(e.name)) throw Error("checkpoint is missing parameter " + e.name);
      const Tensor<T>& src = params.at(e.name);
      if (!src.same_shape(e.value))
        throw ShapeError("checkpoint parameter " + e.name + " has shape " +
                         shape_str(src.shape()) + ", expected " + shape_str(e.value.shape()));
      params_.at(e.name) = src;
    }
    if (params.size() != params_.size())
      throw Error("checkpoint carries extra parameters");
    if (cfg_.spatial == SpatialMode::HseSinusoidal)
      sinus_table_ = sinusoidal_hse_table<T>(cfg_.grid_size, cfg_.hidden_dim);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  TokenizedImage tokenize_input(const MultiScaleRepresentation& ms, bool padded) const {
    return tokenize(ms, cfg_.patch_size, cfg_.max_patches, cfg_.capacities(), padded,
                    cfg_.include_native);
  }

  ForwardResult<T> forward(Graph<T>& g, const TokenizedImage& input,
                           bool record_attention = false) const {
    ParamBinder<T> bind(g, const_cast<ParamStore<T>&>(params_));
    return forward_bound(g, bind, input, record_attention);
  }

  ForwardResult<T> forward_bound(Graph<T>& g, ParamBinder<T>& bind,
                                 const TokenizedImage& input,
                                 bool record_attention = false) const {
    const TokenLayout& layout = input.layout;
    Var<T> patch_vecs = encode_patches(g, bind, input);
    Var<T> tokens = assemble_tokens(g, bind, layout, patch_vecs);
    Var<T> cls_tok = bind.use("cls");
    Var<T> z = ops::concat_rows<T>({cls_tok, tokens});

    Tensor<T> mask = attention_mask<T>(layout);
    AttentionRecord<T> record;
    T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(cfg_.head_dim()));
    for (int q = 0; q < cfg_.depth; ++q) {
      std::string p = "enc." + std::to_string(q) + ".";
      Var<T> h = ops::layernorm(z, bind.use(p + "ln1.gamma"), bind.use(p + "ln1.beta"));
      Var<T> qm = ops::affine(h, bind.use(p + "attn.wq"), bind.use(p + "attn.bq"));
      Var<T> km = ops::affine(h, bind.use(p + "attn.wk"), bind.use(p + "attn.bk"));
      Var<T> vm = ops::affine(h, bind.use(p + "attn.wv"), bind.use(p + "attn.bv"));
      std::vector<Var<T>> head_outs;
      std::vector<Tensor<T>> head_weights;
      int dh = cfg_.head_dim();
      for (int hd = 0; hd < cfg_.heads; ++hd) {
        Var<T> qh = ops::slice_cols(qm, hd * dh, dh);
        Var<T> kh = ops::slice_cols(km, hd * dh, dh);
        Var<T> vh = ops::slice_cols(vm, hd * dh, dh);
        Var<T> logits = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt_dh);
        logits = ops::add_const(logits, mask);
        Var<T> weights = ops::softmax_lastdim(logits);
        if (record_attention) head_weights.push_back(weights.val());
        head_outs.push_back(ops::matmul(weights, vh));
      }
      if (record_attention) record.layers.push_back(std::move(head_weights));
      Var<T> msa = ops::affine(ops::concat_cols(head_outs), bind.use(p + "attn.wo"),
                               bind.use(p + "attn.bo"));
      z = ops::add(z, msa);

      Var<T> h2 = ops::layernorm(z, bind.use(p + "ln2.gamma"), bind.use(p + "ln2.beta"));
      Var<T> m1 = ops::gelu(ops::affine(h2, bind.use(p + "mlp.w1"), bind.use(p + "mlp.b1")));
      Var<T> m2 = ops::affine(m1, bind.use(p + "mlp.w2"), bind.use(p + "mlp.b2"));
      z = ops::add(z, m2);
      if (!z.val().all_finite())
        throw NumericError("encoder produced non-finite values in layer " + std::to_string(q));
    }
    Var<T> cls_row = ops::slice_rows(z, 0, 1);
    Var<T> y = ops::layernorm(cls_row, bind.use("enc.final_ln.gamma"),
                              bind.use("enc.final_ln.beta"));
    Var<T> out = ops::affine(y, bind.use("head.w"), bind.use("head.b"));
    if (cfg_.head == HeadKind::Distribution) out = ops::softmax_lastdim(out);
    return {y, out, std::move(record)};
  }

  // Loss against a scalar MOS (scalar head) or a normalized distribution.
  Var<T> loss(Graph<T>& g, const ForwardResult<T>& fwd, double mos) const {
    if (cfg_.head != HeadKind::Scalar)
      throw ConfigError("scalar label requires the scalar head");
    (void)g;
    return ops::l1_to_target(fwd.output, Tensor<T>::scalar(static_cast<T>(mos)));
  }

  Var<T> loss(Graph<T>& g, const ForwardResult<T>& fwd, const std::vector<double>& dist,
              double emd_r) const {
    if (cfg_.head != HeadKind::Distribution)
      throw ConfigError("distribution label requires the distribution head");
    if (static_cast<int>(dist.size()) != cfg_.buckets)
      throw ShapeError("label bucket count differs from the head");
    check_distribution(dist, "emd target");
    Tensor<T> target({cfg_.buckets});
    for (int i = 0; i < cfg_.buckets; ++i) target[i] = static_cast<T>(dist[i]);
    Var<T> flat = ops::reshape(fwd.output, {cfg_.buckets});
    (void)g;
    return ops::emd_to_target(flat, target, static_cast<T>(emd_r));
  }

  // Scalar quality estimate: head output, or the distribution mean (1..B).
  double score_from(const ForwardResult<T>& fwd) const {
    if (cfg_.head == HeadKind::Scalar) return static_cast<double>(fwd.output.val()[0]);
    std::vector<double> p(cfg_.buckets);
    for (int i = 0; i < cfg_.buckets; ++i) p[i] = static_cast<double>(fwd.output.val()[i]);
    return distribution_mean_score(p);
  }

  double score(const MultiScaleRepresentation& ms, bool padded = false) const {
    Graph<T> g(false);
    TokenizedImage input = tokenize_input(ms, padded);
    return score_from(forward(g, input));
  }

  const Tensor<T>& sinusoidal_table() const { return sinus_table_; }

  // The spatial table actually in use (learned or sinusoidal).
  Tensor<T> spatial_table() const {
    if (cfg_.spatial == SpatialMode::HseLearned) return params_.at("hse.table");
    if (cfg_.spatial == SpatialMode::HseSinusoidal) return sinus_table_;
    throw ConfigError("model has no spatial embedding table");
  }

  template <typename U>
  Model<U> cast() const {
    return Model<U>(cfg_, params_.template cast<U>());
  }

 private:
  void build_params(Rng& rng) {
    int d = cfg_.hidden_dim;
    int p2c = cfg_.patch_size * cfg_.patch_size * 3;
    int c = cfg_.conv_channels;
    params_.create("cls", {1, d}, Init::TruncNormal02, rng);
    switch (cfg_.spatial) {
      case SpatialMode::HseLearned:
        params_.create("hse.table", {cfg_.grid_size * cfg_.grid_size, d},
                       Init::TruncNormal02, rng);
        break;
      case SpatialMode::FixedLength:
        params_.create("fixed_pos.table", {cfg_.total_slots() - 1, d},
                       Init::TruncNormal02, rng);
        break;
      default:
        break;
    }
    params_.create("sce.table", {cfg_.num_scales() + 1, d}, Init::TruncNormal02, rng);

    switch (cfg_.patch_encoder) {
      case PatchEncoderKind::Linear:
        params_.create("patch.proj.w", {p2c, d}, Init::TruncNormal02, rng);
        params_.create("patch.proj.b", {d}, Init::Zeros, rng);
        break;
      case PatchEncoderKind::ResNet5:
      case PatchEncoderKind::SimpleConv:
        params_.create("patch.conv1.w", {7, 7, 3, c}, Init::TruncNormal02, rng);
        params_.create("patch.conv1.b", {c}, Init::Zeros, rng);
        params_.create("patch.gn1.gamma", {c}, Init::Ones, rng);
        params_.create("patch.gn1.beta", {c}, Init::Zeros, rng);
        params_.create("patch.conv2.w", {3, 3, c, c}, Init::TruncNormal02, rng);
        params_.create("patch.conv2.b", {c}, Init::Zeros, rng);
        params_.create("patch.gn2.gamma", {c}, Init::Ones, rng);
        params_.create("patch.gn2.beta", {c}, Init::Zeros, rng);
        if (cfg_.patch_encoder == PatchEncoderKind::ResNet5) {
          for (int i = 1; i <= 2; ++i) {
            std::string p = "patch.res.conv" + std::to_string(i) + ".";
            params_.create(p + "w", {3, 3, c, c}, Init::TruncNormal02, rng);
            params_.create(p + "b", {c}, Init::Zeros, rng);
            params_.create("patch.res.gn" + std::to_string(i) + ".gamma", {c}, Init::Ones, rng);
            params_.create("patch.res.gn" + std::to_string(i) + ".beta", {c}, Init::Zeros, rng);
          }
        }
        params_.create("patch.fc.w", {c, d}, Init::TruncNormal02, rng);
        params_.create("patch.fc.b", {d}, Init::Zeros, rng);
        break;
    }

    for (int q = 0; q < cfg_.depth; ++q) {
      std::string p = "enc." + std::to_string(q) + ".";
      params_.create(p + "ln1.gamma", {d}, Init::Ones, rng);
      params_.create(p + "ln1.beta", {d}, Init::Zeros, rng);
      params_.create(p + "attn.wq", {d, d}, Init::TruncNormal02, rng);
      params_.create(p + "attn.bq", {d}, Init::Zeros, rng);
      params_.create(p + "attn.wk", {d, d}, Init::TruncNormal02, rng);
      params_.create(p + "attn.bk", {d}, Init::Zeros, rng);
      params_.create(p + "attn.wv", {d, d}, Init::TruncNormal02, rng);
      params_.create(p + "attn.bv", {d}, Init::Zeros, rng);
      params_.create(p + "attn.wo", {d, d}, Init::TruncNormal02, rng);
      params_.create(p + "attn.bo", {d}, Init::Zeros, rng);
      params_.create(p + "ln2.gamma", {d}, Init::Ones, rng);
      params_.create(p + "ln2.beta", {d}, Init::Zeros, rng);
      params_.create(p + "mlp.w1", {d, cfg_.mlp_dim}, Init::TruncNormal02, rng);
      params_.create(p + "mlp.b1", {cfg_.mlp_dim}, Init::Zeros, rng);
      params_.create(p + "mlp.w2", {cfg_.mlp_dim, d}, Init::TruncNormal02, rng);
      params_.create(p + "mlp.b2", {d}, Init::Zeros, rng);
    }
    params_.create("enc.final_ln.gamma", {d}, Init::Ones, rng);
    params_.create("enc.final_ln.beta", {d}, Init::Zeros, rng);

    int out = cfg_.head == HeadKind::Scalar ? 1 : cfg_.buckets;
    params_.create("head.w", {d, out}, Init::TruncNormal02, rng);
    params_.create("head.b", {out}, Init::Zeros, rng);
  }

  Var<T> encode_patches(Graph<T>& g, ParamBinder<T>& bind, const TokenizedImage& input) const {
    int v = input.layout.valid_patches;
    int p = cfg_.patch_size;
    int d = cfg_.hidden_dim;
    if (v == 0) return make_leaf(g, Tensor<T>({0, d}));
    std::vector<T> pixels(input.patch_pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<T>(input.patch_pixels[i]);

    if (cfg_.patch_encoder == PatchEncoderKind::Linear) {
      Var<T> x = make_leaf(g, Tensor<T>({v, p * p * 3}, std::move(pixels)));
      return ops::affine(x, bind.use("patch.proj.w"), bind.use("patch.proj.b"));
    }

    Var<T> x = make_leaf(g, Tensor<T>({v, p, p, 3}, std::move(pixels)));
    int groups = cfg_.gn_groups;
    x = ops::conv2d(x, bind.use("patch.conv1.w"), bind.use("patch.conv1.b"), 2, 3);
    x = ops::relu(ops::groupnorm(x, bind.use("patch.gn1.gamma"), bind.use("patch.gn1.beta"), groups));
    x = ops::conv2d(x, bind.use("patch.conv2.w"), bind.use("patch.conv2.b"), 1, 1);
    x = ops::relu(ops::groupnorm(x, bind.use("patch.gn2.gamma"), bind.use("patch.gn2.beta"), groups));
    if (cfg_.patch_encoder == PatchEncoderKind::ResNet5) {
      Var<T> r = ops::conv2d(x, bind.use("patch.res.conv1.w"), bind.use("patch.res.conv1.b"), 1, 1);
      r = ops::relu(ops::groupnorm(r, bind.use("patch.res.gn1.gamma"),
                                   bind.use("patch.res.gn1.beta"), groups));
      r = ops::conv2d(r, bind.use("patch.res.conv2.w"), bind.use("patch.res.conv2.b"), 1, 1);
      r = ops::groupnorm(r, bind.use("patch.res.gn2.gamma"), bind.use("patch.res.gn2.beta"),
                         groups);
      x = ops::relu(ops::add(x, r));
    }
    Var<T> pooled = ops::global_avg_pool(x);
    return ops::affine(pooled, bind.use("patch.fc.w"), bind.use("patch.fc.b"));
  }

  // E_p + spatial + scale embeddings over the non-CLS slots; padded slots
  // stay exact zero rows so masking plus zero tokens keeps them inert.
  Var<T> assemble_tokens(Graph<T>& g, ParamBinder<T>& bind, const TokenLayout& layout,
                         Var<T> patch_vecs) const {
    int n = layout.total_slots() - 1;
    std::vector<int> src(n, -1), spatial_idx(n, -1), scale_idx(n, -1);
    std::vector<int> padded_base = fixed_position_bases();
    for (int i = 0; i < n; ++i) {
      const TokenSlot& slot = layout.slots[i + 1];
      if (!slot.valid) continue;
      src[i] = slot.patch_index;
      scale_idx[i] = slot.scale;
      switch (cfg_.spatial) {
        case SpatialMode::HseLearned:
        case SpatialMode::HseSinusoidal: {
          const LayoutSegment& seg = segment_of(layout, slot.scale);
          auto [ti, tj] = hse_index(slot.row, slot.col, seg.rows, seg.cols, cfg_.grid_size);
          spatial_idx[i] = ti * cfg_.grid_size + tj;
          break;
        }
        case SpatialMode::FixedLength: {
          const LayoutSegment& seg = segment_of(layout, slot.scale);
          int seg_ord = slot.scale == 0 ? 0 : (cfg_.include_native ? slot.scale : slot.scale - 1);
          spatial_idx[i] = padded_base[seg_ord] + (i + 1 - seg.offset);
          break;
        }
        case SpatialMode::None:
          break;
      }
    }
    Var<T> tokens = ops::scatter_rows(patch_vecs, std::move(src), n);
    if (cfg_.spatial == SpatialMode::HseLearned) {
      tokens = ops::add(tokens, ops::gather_rows(bind.use("hse.table"), spatial_idx));
    } else if (cfg_.spatial == SpatialMode::HseSinusoidal) {
      Var<T> table = make_leaf(g, sinus_table_);
      tokens = ops::add(tokens, ops::gather_rows(table, spatial_idx));
    } else if (cfg_.spatial == SpatialMode::FixedLength) {
      tokens = ops::add(tokens, ops::gather_rows(bind.use("fixed_pos.table"), spatial_idx));
    }
    tokens = ops::add(tokens, ops::gather_rows(bind.use("sce.table"), scale_idx));
    return tokens;
  }

  // Fixed-length positions index the padded layout even when the actual
  // layout is tight, so padded and single-input runs look up the same rows.
  std::vector<int> fixed_position_bases() const {
    std::vector<int> bases;
    int off = 0;
    if (cfg_.include_native) {
      bases.push_back(off);
      off += cfg_.max_patches;
    }
    for (int cap : cfg_.capacities()) {
      bases.push_back(off);
      off += cap;
    }
    return bases;
  }

  static const LayoutSegment& segment_of(const TokenLayout& layout, int scale) {
    for (const LayoutSegment& seg : layout.segments)
      if (seg.scale == scale) return seg;
    throw ShapeError("layout has no segment for scale " + std::to_string(scale));
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  Tensor<T> sinus_table_;
};

// Head-averaged attention mixed with identity (0.5 A + 0.5 I), row-normalized
// over valid slots, multiplied through the layers; returns the CLS row.
// Padded slots come out exactly zero.
template <typename T>
std::vector<double> attention_rollout(const AttentionRecord<T>& record,
                                      const TokenLayout& layout) {
  int s = layout.total_slots();
  std::vector<double> result(s, 0.0);
  std::vector<double> rollup(static_cast<size_t>(s) * s, 0.0);
  for (int i = 0; i < s; ++i) rollup[static_cast<size_t>(i) * s + i] = 1.0;

  std::vector<double> mixed(static_cast<size_t>(s) * s);
  std::vector<double> next(static_cast<size_t>(s) * s);
  for (const auto& heads : record.layers) {
    if (heads.empty()) throw ShapeError("attention_rollout: empty layer record");
    std::fill(mixed.begin(), mixed.end(), 0.0);
    for (const Tensor<T>& a : heads)
      for (int64_t i = 0; i < a.numel(); ++i) mixed[i] += static_cast<double>(a[i]);
    double inv_heads = 1.0 / static_cast<double>(heads.size());
    for (int i = 0; i < s; ++i) {
      if (!layout.slots[i].valid) {
        // inert row: keep the identity so padded slots never mix in
        for (int j = 0; j < s; ++j) mixed[static_cast<size_t>(i) * s + j] = i == j ? 1.0 : 0.0;
        continue;
      }
      double sum = 0.0;
      for (int j = 0; j < s; ++j) {
        double v = 0.5 * mixed[static_cast<size_t>(i) * s + j] * inv_heads +
                   (i == j ? 0.5 : 0.0);
        mixed[static_cast<size_t>(i) * s + j] = v;
        if (layout.slots[j].valid) sum += v;
      }
      for (int j = 0; j < s; ++j) mixed[static_cast<size_t>(i) * s + j] /= sum;
    }
    // rollup <- mixed * rollup
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        double acc = 0.0;
        for (int k = 0; k < s; ++k)
          acc += mixed[static_cast<size_t>(i) * s + k] * rollup[static_cast<size_t>(k) * s + j];
        next[static_cast<size_t>(i) * s + j] = acc;
      }
    std::swap(rollup, next);
  }
  for (int j = 0; j < s; ++j)
    result[j] = layout.slots[j].valid ? rollup[static_cast<size_t>(j)] : 0.0;
  return result;
}

}  // namespace musiq
