#include "stpc/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace stpc {

ArchConfig ArchConfig::small() {
  ArchConfig c;
  c.stage_widths = {16, 32, 64, 128};
  return c;
}

void ArchConfig::validate() const {
  if (in_channels <= 0) throw ConfigError("arch: in_channels must be positive");
  for (int w : stage_widths)
    if (w <= 0) throw ConfigError("arch: stage widths must be positive");
  if (blocks_per_stage != 1 && blocks_per_stage != 2)
    throw ConfigError("arch: blocks_per_stage must be 1 or 2");
  if (head_classes < 1) throw ConfigError("arch: head_classes must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("arch: dropout_p must lie in [0, 1)");
  if (!(input.voxel_size > 0)) throw ConfigError("arch: voxel_size must be positive");
  if (!(input.charge_scale > 0) || !(input.coord_scale > 0))
    throw ConfigError("arch: feature scales must be positive");
}

namespace {

template <class T>
void fill_kaiming(std::vector<T>& w, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w) v = static_cast<T>(dist(rng));
}

template <class T>
SparseTensor<T> with_features(const SparseTensor<T>& like, Matrix<T> features) {
  SparseTensor<T> t;
  t.coords = like.coords;
  t.tensor_stride = like.tensor_stride;
  t.batch_size = like.batch_size;
  t.features = std::move(features);
  return t;
}

template <class T>
void require_all_events(const SparseTensor<T>& t, const char* layer) {
  std::vector<bool> seen(static_cast<std::size_t>(t.batch_size), false);
  for (const auto& c : t.coords) seen[static_cast<std::size_t>(c.b)] = true;
  for (std::size_t b = 0; b < seen.size(); ++b)
    if (!seen[b])
      throw EmptyEvent(std::string("event ") + std::to_string(b) + " has no sites after layer '" +
                       layer + "'");
}

template <class T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  add_into(dst.data, src.data);
}

template <class T>
void assign_bn_grads(BNParams<T>& dst, BNGrads<T>& g) {
  dst.gamma = std::move(g.d_gamma);
  dst.beta = std::move(g.d_beta);
}

template <class T>
ForwardTrace<T> run_forward(ModelState<T>& model, const SparseTensor<T>& batch,
                            const ForwardOptions& opt) {
  if (batch.size() == 0 || batch.batch_size == 0) throw EmptyEvent("forward: empty batch");
  require_all_events(batch, "input");
  const Mode mode = opt.mode;
  ForwardTrace<T> tr;
  tr.options = opt;
  tr.input = batch;

  // stem
  tr.stem_map = build_kernel_map(batch, 3, 2);
  auto h = sparse_conv_fwd(batch, model.stem_conv, tr.stem_map);
  h = batchnorm_fwd(h, model.stem_bn, mode, &tr.stem_bn);
  tr.stem_bn_out = h.features;
  tr.stem_act = with_features(h, relu_fwd(h.features));
  tr.stem_pool_map = pool_map(tr.stem_act);
  tr.stem_pool = sparse_maxpool_fwd(tr.stem_act, tr.stem_pool_map);
  SparseTensor<T> x = tr.stem_pool.out;
  require_all_events(x, "stem");

  // residual stages
  tr.blocks.resize(model.blocks.size());
  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    auto& blk = model.blocks[bi];
    auto& bt = tr.blocks[bi];
    bt.input = std::move(x);
    bt.map1 = build_kernel_map(bt.input, 3, blk.stride);
    auto a = sparse_conv_fwd(bt.input, blk.conv1, bt.map1);
    a = batchnorm_fwd(a, blk.bn1, mode, &bt.bn1);
    bt.bn1_out = a.features;
    bt.act1 = with_features(a, relu_fwd(a.features));
    bt.map2 = build_kernel_map(bt.act1, 3, 1);
    auto y = sparse_conv_fwd(bt.act1, blk.conv2, bt.map2);
    y = batchnorm_fwd(y, blk.bn2, mode, &bt.bn2);

    Matrix<T> shortcut;
    if (blk.ds_conv) {
      bt.ds_map = build_kernel_map(bt.input, 1, blk.stride);
      auto s = sparse_conv_fwd(bt.input, *blk.ds_conv, bt.ds_map);
      s = batchnorm_fwd(s, *blk.ds_bn, mode, &bt.ds_bn);
      if (s.coords != y.coords) throw ShapeError("residual branches disagree on coordinates");
      shortcut = std::move(s.features);
    } else {
      if (bt.input.coords != y.coords) throw ShapeError("residual branches disagree on coordinates");
      shortcut = bt.input.features;
    }
    bt.sum = y.features;
    add_into(bt.sum, shortcut);
    x = with_features(y, relu_fwd(bt.sum));
  }

  // pre-pooling block
  tr.pre_input = std::move(x);
  tr.dropout = dropout_fwd(tr.pre_input.features, model.config.dropout_p,
                           DropoutKey{opt.seed, 1, opt.step}, mode);
  tr.dropped = with_features(tr.pre_input, tr.dropout.out);
  tr.pre_map = build_kernel_map(tr.dropped, 3, 3);
  auto p = sparse_conv_fwd(tr.dropped, model.pre_conv, tr.pre_map);
  require_all_events(p, "pre-pooling conv");
  p = batchnorm_fwd(p, model.pre_bn, mode, &tr.pre_bn);
  tr.pre_bn_out = p.features;
  tr.pre_act = with_features(p, gelu_fwd(p.features));

  tr.global_pool = global_maxpool_fwd(tr.pre_act);
  tr.embedding = tr.global_pool.out;
  tr.logits = linear_fwd(tr.embedding, model.head);
  return tr;
}

}  // namespace

template <class T>
ModelState<T> init_model(const ArchConfig& config, InitMode mode) {
  config.validate();
  ModelState<T> m;
  m.config = config;
  std::mt19937_64 rng(config.seed);
  const bool random = mode == InitMode::Random;
  auto make_conv = [&](int cin, int cout, int kvol) {
    ConvParams<T> c(cin, cout, kvol);
    if (random) fill_kaiming(c.weights, cin * kvol, rng);
    return c;
  };
  auto make_bn = [&](int ch) {
    BNParams<T> b(ch);
    if (!random) {
      std::fill(b.gamma.begin(), b.gamma.end(), T(0));
      std::fill(b.running_var.begin(), b.running_var.end(), T(0));
    }
    return b;
  };

  const auto& w = config.stage_widths;
  m.stem_conv = make_conv(config.in_channels, w[0], 27);
  m.stem_bn = make_bn(w[0]);
  int cin = w[0];
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      BasicBlock<T> blk;
      blk.stride = b == 0 ? 2 : 1;
      blk.conv1 = make_conv(cin, w[s], 27);
      blk.bn1 = make_bn(w[s]);
      blk.conv2 = make_conv(w[s], w[s], 27);
      blk.bn2 = make_bn(w[s]);
      if (blk.stride != 1 || cin != w[s]) {
        blk.ds_conv = make_conv(cin, w[s], 1);
        blk.ds_bn = make_bn(w[s]);
      }
      m.blocks.push_back(std::move(blk));
      cin = w[s];
    }
  }
  m.pre_conv = make_conv(cin, w[3], 27);
  m.pre_bn = make_bn(w[3]);
  m.head = LinearParams<T>(w[3], config.head_classes);
  if (random) fill_kaiming(m.head.weights, w[3], rng);
  return m;
}

template <class T>
std::vector<NamedTensor<T>> parameters(ModelState<T>& m) {
  std::vector<NamedTensor<T>> out;
  auto bn = [&](const std::string& p, BNParams<T>& b) {
    const std::vector<std::uint32_t> shape{static_cast<std::uint32_t>(b.channels())};
    out.push_back({p + ".gamma", &b.gamma, shape});
    out.push_back({p + ".beta", &b.beta, shape});
  };
  auto conv = [&](const std::string& p, ConvParams<T>& c) {
    out.push_back({p, &c.weights,
                   {static_cast<std::uint32_t>(c.kernel_volume),
                    static_cast<std::uint32_t>(c.in_channels),
                    static_cast<std::uint32_t>(c.out_channels)}});
  };
  conv("stem.conv", m.stem_conv);
  bn("stem.bn", m.stem_bn);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i);
    conv(p + ".conv1", b.conv1);
    bn(p + ".bn1", b.bn1);
    conv(p + ".conv2", b.conv2);
    bn(p + ".bn2", b.bn2);
    if (b.ds_conv) {
      conv(p + ".ds_conv", *b.ds_conv);
      bn(p + ".ds_bn", *b.ds_bn);
    }
  }
  conv("pre.conv", m.pre_conv);
  bn("pre.bn", m.pre_bn);
  const auto d = static_cast<std::uint32_t>(m.head.in_features);
  const auto k = static_cast<std::uint32_t>(m.head.out_features);
  out.push_back({"head.weight", &m.head.weights, {d, k}});
  out.push_back({"head.bias", &m.head.bias, {k}});
  return out;
}

template <class T>
std::vector<NamedTensor<T>> buffers(ModelState<T>& m) {
  std::vector<NamedTensor<T>> out;
  auto bn = [&](const std::string& p, BNParams<T>& b) {
    const std::vector<std::uint32_t> shape{static_cast<std::uint32_t>(b.channels())};
    out.push_back({p + ".running_mean", &b.running_mean, shape});
    out.push_back({p + ".running_var", &b.running_var, shape});
  };
  bn("stem.bn", m.stem_bn);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i);
    bn(p + ".bn1", b.bn1);
    bn(p + ".bn2", b.bn2);
    if (b.ds_bn) bn(p + ".ds_bn", *b.ds_bn);
  }
  bn("pre.bn", m.pre_bn);
  return out;
}

template <class T>
int count_3x3_convs(const ModelState<T>& m) {
  int n = m.stem_conv.kernel_volume == 27 ? 1 : 0;
  for (const auto& b : m.blocks) n += (b.conv1.kernel_volume == 27) + (b.conv2.kernel_volume == 27);
  n += m.pre_conv.kernel_volume == 27 ? 1 : 0;
  return n;
}

template <class T>
ForwardTrace<T> forward(ModelState<T>& model, const SparseTensor<T>& batch,
                        const ForwardOptions& options) {
  return run_forward(model, batch, options);
}

template <class T>
ForwardTrace<T> forward_eval(const ModelState<T>& model, const SparseTensor<T>& batch) {
  // Eval-mode batch norm reads but never writes the running statistics.
  return run_forward(const_cast<ModelState<T>&>(model), batch, ForwardOptions{Mode::Eval, 0, 0});
}

template <class T>
ModelGrads<T> backward(const ModelState<T>& model, const ForwardTrace<T>& tr,
                       const Matrix<T>& grad_logits) {
  ModelGrads<T> g;
  g.params = init_model<T>(model.config, InitMode::Zero);
  auto& gp = g.params;

  auto head = linear_bwd(tr.embedding, model.head, grad_logits);
  gp.head.weights = std::move(head.d_weights);
  gp.head.bias = std::move(head.d_bias);

  auto d = global_maxpool_bwd(tr.global_pool, tr.pre_act.size(), head.d_input);
  d = gelu_bwd(tr.pre_bn_out, d);
  auto pbn = batchnorm_bwd(model.pre_bn, tr.pre_bn, d);
  assign_bn_grads(gp.pre_bn, pbn);
  auto pconv = sparse_conv_bwd(tr.dropped, model.pre_conv, tr.pre_map, pbn.d_input);
  gp.pre_conv.weights = std::move(pconv.d_weights);
  d = dropout_bwd(tr.dropout, pconv.d_input);

  for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
    const auto& blk = model.blocks[bi];
    const auto& bt = tr.blocks[bi];
    auto& gb = gp.blocks[bi];
    const Matrix<T> d_sum = relu_bwd(bt.sum, d);

    auto bn2 = batchnorm_bwd(blk.bn2, bt.bn2, d_sum);
    assign_bn_grads(gb.bn2, bn2);
    auto c2 = sparse_conv_bwd(bt.act1, blk.conv2, bt.map2, bn2.d_input);
    gb.conv2.weights = std::move(c2.d_weights);
    const Matrix<T> d_bn1 = relu_bwd(bt.bn1_out, c2.d_input);
    auto bn1 = batchnorm_bwd(blk.bn1, bt.bn1, d_bn1);
    assign_bn_grads(gb.bn1, bn1);
    auto c1 = sparse_conv_bwd(bt.input, blk.conv1, bt.map1, bn1.d_input);
    gb.conv1.weights = std::move(c1.d_weights);
    Matrix<T> d_in = std::move(c1.d_input);

    if (blk.ds_conv) {
      auto dbn = batchnorm_bwd(*blk.ds_bn, bt.ds_bn, d_sum);
      assign_bn_grads(*gb.ds_bn, dbn);
      auto dc = sparse_conv_bwd(bt.input, *blk.ds_conv, bt.ds_map, dbn.d_input);
      gb.ds_conv->weights = std::move(dc.d_weights);
      add_into(d_in, dc.d_input);
    } else {
      add_into(d_in, d_sum);
    }
    d = std::move(d_in);
  }

  d = sparse_maxpool_bwd(tr.stem_pool, tr.stem_act.size(), d);
  d = relu_bwd(tr.stem_bn_out, d);
  auto sbn = batchnorm_bwd(model.stem_bn, tr.stem_bn, d);
  assign_bn_grads(gp.stem_bn, sbn);
  auto sc = sparse_conv_bwd(tr.input, model.stem_conv, tr.stem_map, sbn.d_input);
  gp.stem_conv.weights = std::move(sc.d_weights);
  g.d_input = std::move(sc.d_input);
  return g;
}

template <class T>
Matrix<double> embed(const ModelState<T>& model, std::span<const EventSites<T>> events,
                     std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("embed: batch size must be positive");
  const std::size_t d = static_cast<std::size_t>(model.config.embedding_dim());
  Matrix<double> out(events.size(), d);
  for (std::size_t start = 0; start < events.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, events.size() - start);
    const auto b = batch(events.subspan(start, n));
    const auto tr = forward_eval(model, b);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) out(start + r, c) = static_cast<double>(tr.embedding(r, c));
  }
  return out;
}

#define STPC_INSTANTIATE_MODEL(T)                                                               \
  template ModelState<T> init_model<T>(const ArchConfig&, InitMode);                            \
  template std::vector<NamedTensor<T>> parameters(ModelState<T>&);                              \
  template std::vector<NamedTensor<T>> buffers(ModelState<T>&);                                 \
  template int count_3x3_convs(const ModelState<T>&);                                           \
  template ForwardTrace<T> forward(ModelState<T>&, const SparseTensor<T>&, const ForwardOptions&); \
  template ForwardTrace<T> forward_eval(const ModelState<T>&, const SparseTensor<T>&);          \
  template ModelGrads<T> backward(const ModelState<T>&, const ForwardTrace<T>&, const Matrix<T>&); \
  template Matrix<double> embed(const ModelState<T>&, std::span<const EventSites<T>>, std::size_t);

STPC_INSTANTIATE_MODEL(float)
STPC_INSTANTIATE_MODEL(double)

#undef STPC_INSTANTIATE_MODEL

}  // namespace stpc
