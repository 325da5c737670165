#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "dcg/autodiff.hpp"
#include "dcg/graph.hpp"
#include "dcg/kv.hpp"
#include "dcg/nn.hpp"
#include "dcg/positional.hpp"
#include "dcg/sketch.hpp"

namespace dcg {

constexpr double kLogVarMin = -20.0;
constexpr double kLogVarMax = 20.0;
constexpr double kBatchNormMomentum = 0.9;

// Architecture. Everything here is part of the checkpoint fingerprint.
struct ModelConfig {
  std::size_t patches = 20;  // M
  std::size_t input_size = 256;
  std::vector<std::size_t> channels{8, 32, 64, 128, 256, 512, 512};
  std::size_t embed_dim = 512;
  std::size_t latent_dim = 128;
  std::size_t mlp_hidden = 512;
  std::size_t decoder_hidden = 512;
  std::size_t mixtures = 20;
  std::size_t max_seq_len = 200;
  double offset_scale = 64.0;  // canvas units per decoder unit
  bool use_absolute_pe = true;
  bool use_relative_pe = true;
  bool pe_in_edges = false;

  static ModelConfig paper() { return {}; }

  static ModelConfig toy() {
    ModelConfig c;
    c.patches = 4;
    c.input_size = 32;
    c.channels = {8, 16};
    c.embed_dim = 16;
    c.latent_dim = 8;
    c.mlp_hidden = 64;
    c.decoder_hidden = 32;
    c.mixtures = 3;
    c.max_seq_len = 20;
    return c;
  }

  // Smallest configuration exercised by the end-to-end gradient check.
  static ModelConfig gradcheck() {
    ModelConfig c = toy();
    c.patches = 3;
    c.input_size = 8;
    c.channels = {4, 8};
    c.mlp_hidden = 16;
    c.decoder_hidden = 8;
    c.mixtures = 2;
    c.max_seq_len = 5;
    return c;
  }

  std::size_t emission_width() const { return 6 * mixtures + 3; }

  // Spatial extent after the conv stages (2x2 valid conv, then 2x2 max pool).
  std::size_t encoder_output_extent() const {
    std::size_t s = input_size;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (s < 3) throw std::invalid_argument("ModelConfig: input_size " + std::to_string(input_size) + " too small for " + std::to_string(channels.size()) + " conv stages");
      s = (s - 1) / 2;
    }
    return s;
  }

  void validate() const {
    if (patches < 1) throw std::invalid_argument("ModelConfig: patches must be >= 1");
    if (embed_dim == 0 || embed_dim % 2) throw std::invalid_argument("ModelConfig: embed_dim must be even and positive");
    if (channels.empty()) throw std::invalid_argument("ModelConfig: need at least one conv stage");
    if (latent_dim == 0 || decoder_hidden == 0 || mixtures == 0 || max_seq_len < 2)
      throw std::invalid_argument("ModelConfig: latent, decoder and mixture sizes must be positive");
    if (!(offset_scale > 0)) throw std::invalid_argument("ModelConfig: offset_scale must be positive");
    (void)encoder_output_extent();
  }

  std::string describe() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "patches = " << patches << "\ninput_size = " << input_size << "\nchannels = ";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << "\nembed_dim = " << embed_dim << "\nlatent_dim = " << latent_dim << "\nmlp_hidden = " << mlp_hidden
       << "\ndecoder_hidden = " << decoder_hidden << "\nmixtures = " << mixtures << "\nmax_seq_len = " << max_seq_len
       << "\noffset_scale = " << offset_scale << "\nabs_pe = " << use_absolute_pe << "\nrel_pe = " << use_relative_pe
       << "\npe_in_edges = " << pe_in_edges << "\n";
    return os.str();
  }

  std::uint64_t fingerprint() const { return fnv1a(describe()); }

  // Keys absent from `text` keep the values of `base`.
  static ModelConfig from_text(const std::string& text) { return from_keys(KeyValues::parse(text), paper()); }
  static ModelConfig from_text(const std::string& text, const ModelConfig& base) { return from_keys(KeyValues::parse(text), base); }

  static ModelConfig from_keys(const KeyValues& kv, const ModelConfig& base) {
    ModelConfig c = base;
    auto num = [&](const char* key, std::size_t& dst) {
      if (auto* v = kv.find(key)) dst = std::stoul(*v);
    };
    auto flag = [&](const char* key, bool& dst) {
      if (auto* v = kv.find(key)) dst = *v == "1" || *v == "true";
    };
    num("patches", c.patches);
    num("input_size", c.input_size);
    num("embed_dim", c.embed_dim);
    num("latent_dim", c.latent_dim);
    num("mlp_hidden", c.mlp_hidden);
    num("decoder_hidden", c.decoder_hidden);
    num("mixtures", c.mixtures);
    num("max_seq_len", c.max_seq_len);
    if (auto* v = kv.find("offset_scale")) c.offset_scale = std::stod(*v);
    if (auto* v = kv.find("channels")) {
      c.channels.clear();
      std::istringstream is(*v);
      std::string tok;
      while (std::getline(is, tok, ',')) c.channels.push_back(std::stoul(tok));
    }
    flag("abs_pe", c.use_absolute_pe);
    flag("rel_pe", c.use_relative_pe);
    flag("pe_in_edges", c.pe_in_edges);
    return c;
  }
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    init_parameters(rng);
    build_tables();
  }

  Model(ModelConfig cfg, ParameterStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    Model reference(cfg_, 0);
    for (auto& [name, p] : reference.params_) {
      if (!params_.contains(name)) throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
      if (params_.value(name).shape() != p.value.shape())
        throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_str(params_.value(name).shape()) + ", expected " + shape_str(p.value.shape()));
    }
    if (params_.size() != reference.params_.size()) throw std::runtime_error("checkpoint has unexpected parameters");
    build_tables();
  }

  template <class U>
  Model<U> cast() const {
    return Model<U>(cfg_, params_.template cast<U>());
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  // P̃ with the placeholder row 0; never trained.
  const Tensor<T>& absolute_table() const { return abs_table_; }
  const RelativeSelectors<T>& selectors() const { return selectors_; }
  RelativePEBank<T> relative_bank() const { return {params_.value("rel_pe.offsets"), params_.value("rel_pe.placeholder")}; }

  std::size_t stages() const { return cfg_.channels.size(); }

  // Folds observed batch statistics into the running estimates.
  void update_running_stats(const std::vector<BatchNormStats<T>>& observed) {
    for (std::size_t i = 0; i < observed.size(); ++i) {
      auto& rm = params_.value("enc.bn" + std::to_string(i) + ".running_mean");
      auto& rv = params_.value("enc.bn" + std::to_string(i) + ".running_var");
      for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = static_cast<T>(kBatchNormMomentum * rm[c] + (1 - kBatchNormMomentum) * observed[i].mean[c]);
        rv[c] = static_cast<T>(kBatchNormMomentum * rv[c] + (1 - kBatchNormMomentum) * observed[i].var[c]);
      }
    }
  }

 private:
  void init_parameters(Rng& rng) {
    const std::size_t dim = cfg_.embed_dim;
    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      const std::size_t out = cfg_.channels[i];
      const std::string s = std::to_string(i);
      params_.add("enc.conv" + s + ".w", normal_tensor<T>({out, in_ch, 2, 2}, std::sqrt(2.0 / (4.0 * in_ch)), rng));
      params_.add("enc.bn" + s + ".gamma", Tensor<T>(Shape{out}, T{1}));
      params_.add("enc.bn" + s + ".beta", Tensor<T>(Shape{out}));
      params_.add("enc.bn" + s + ".running_mean", Tensor<T>(Shape{out}), false);
      params_.add("enc.bn" + s + ".running_var", Tensor<T>(Shape{out}, T{1}), false);
      in_ch = out;
    }
    const std::size_t e = cfg_.encoder_output_extent();
    add_linear(params_, "enc.proj", in_ch * e * e, dim, rng);

    params_.add("rel_pe.offsets", normal_tensor<T>({cfg_.patches, dim}, 0.02, rng));
    params_.add("rel_pe.placeholder", Tensor<T>(Shape{dim}), false);
    params_.add("abs_pe.placeholder", Tensor<T>(Shape{dim}), false);

    add_linear(params_, "head.fc1", (cfg_.patches + 1) * dim, cfg_.mlp_hidden, rng);
    add_linear(params_, "head.fc2", cfg_.mlp_hidden, 2 * cfg_.latent_dim, rng);

    const std::size_t h = cfg_.decoder_hidden;
    add_linear(params_, "dec.init", cfg_.latent_dim, 2 * h, rng);
    params_.add("dec.lstm.wx", normal_tensor<T>({5 + cfg_.latent_dim, 4 * h}, 1.0 / std::sqrt(5.0 + cfg_.latent_dim), rng));
    params_.add("dec.lstm.wh", normal_tensor<T>({h, 4 * h}, 1.0 / std::sqrt(static_cast<double>(h)), rng));
    Tensor<T> bias(Shape{4 * h});
    for (std::size_t i = h; i < 2 * h; ++i) bias[i] = T{1};  // forget gate
    params_.add("dec.lstm.b", std::move(bias));
    add_linear(params_, "dec.out", h, cfg_.emission_width(), rng);
  }

  void build_tables() {
    abs_table_ = pe_table_for_graph<T>(cfg_.patches, cfg_.embed_dim);
    const auto& delta0 = params_.value("abs_pe.placeholder");
    std::copy(delta0.data(), delta0.data() + delta0.size(), abs_table_.data());
    selectors_ = relative_selectors<T>(cfg_.patches);
  }

  ModelConfig cfg_;
  ParameterStore<T> params_;
  Tensor<T> abs_table_;
  RelativeSelectors<T> selectors_;
};

// ---------------------------------------------------------------------------
// Encoder input

// [(M+1), 1, S, S]: row 0 is the resized full sketch, rows 1..M the patches.
template <class T>
Tensor<T> encoder_input(const PatchSet& ps, std::size_t input_size) {
  const std::size_t n = ps.patches.size() + 1;
  const std::size_t s = input_size;
  Tensor<T> out(Shape{n, 1, s, s});
  auto put = [&](std::size_t row, const Image& img) {
    const Image small = downsample_max(img, static_cast<int>(s));
    std::copy(small.pixels.begin(), small.pixels.end(), out.data() + row * s * s);
  };
  put(0, ps.full);
  for (std::size_t m = 0; m < ps.patches.size(); ++m) put(m + 1, ps.patches[m]);
  return out;
}

// Full image pipeline for an already normalized sequence. `mask->applied`
// receives the masked center indices.
template <class T>
Tensor<T> sketch_images(const StrokeSequence& seq, const ModelConfig& cfg, MaskSpec* mask = nullptr, RasterCanvas* masked_out = nullptr) {
  RasterCanvas canvas = rasterize(seq);
  const auto centers = select_patch_centers(seq, cfg.patches);
  if (mask) canvas = apply_masks(canvas, centers, *mask);
  if (masked_out) *masked_out = canvas;
  return encoder_input<T>(crop_patches(canvas, centers), cfg.input_size);
}

// ---------------------------------------------------------------------------
// Stroke-5 targets: (dx, dy, p_down, p_lift, p_end) with offsets divided by
// the offset scale. The first point is placed at the origin, so its offset is
// zero. Inputs are the targets shifted right behind a start token.

template <class T>
struct Stroke5 {
  Tensor<T> inputs;   // [N+1, 5]
  Tensor<T> targets;  // [N+1, 5]; last row is the end token
  std::size_t points = 0;
};

template <class T>
Stroke5<T> to_stroke5(const StrokeSequence& seq, double offset_scale) {
  const std::size_t n = seq.size();
  Stroke5<T> s{Tensor<T>(Shape{n + 1, 5}), Tensor<T>(Shape{n + 1, 5}), n};
  for (std::size_t t = 1; t < n; ++t) {
    const auto& p = seq.points[t];
    s.targets(t, 0) = static_cast<T>(p.dx / offset_scale);
    s.targets(t, 1) = static_cast<T>(p.dy / offset_scale);
  }
  for (std::size_t t = 0; t < n; ++t) s.targets(t, seq.points[t].pen == Pen::down ? 2 : 3) = T{1};
  s.targets(n, 4) = T{1};
  s.inputs(0, 2) = T{1};
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < 5; ++c) s.inputs(t + 1, c) = s.targets(t, c);
  return s;
}

// ---------------------------------------------------------------------------
// Forward pieces

// images: [N, 1, S, S] -> embeddings [N, dim]. Each stage: conv 2x2 (no bias;
// the batch-norm shift plays that role), ReLU, max pool 2x2, batch norm.
template <class T>
Var<T> encode_images(const Model<T>& model, Binder<T>& p, Var<T> images, NormMode mode,
                     std::vector<BatchNormStats<T>>* observed = nullptr) {
  const auto& cfg = model.config();
  const Shape s = images.value().shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg.input_size || s[3] != cfg.input_size)
    throw ShapeError("encode_patches: expected [N, 1, " + std::to_string(cfg.input_size) + ", " + std::to_string(cfg.input_size) + "], got " + shape_str(s));
  Var<T> x = images;
  if (observed) observed->clear();
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string n = std::to_string(i);
    x = conv2d(x, p("enc.conv" + n + ".w"), p.constant(Tensor<T>(Shape{cfg.channels[i]})));
    x = maxpool2d(relu(x), 2);
    BatchNormStats<T> running{model.params().value("enc.bn" + n + ".running_mean"), model.params().value("enc.bn" + n + ".running_var")};
    BatchNormStats<T> seen;
    x = batchnorm(x, p("enc.bn" + n + ".gamma"), p("enc.bn" + n + ".beta"), mode, running, &seen);
    if (observed && mode == NormMode::train) observed->push_back(std::move(seen));
  }
  const std::size_t batch = s[0];
  x = reshape(x, {batch, x.value().size() / batch});
  return linear(p, "enc.proj", x);
}

template <class T>
struct GraphVars {
  Var<T> adjacency;   // A or A' (M x M)
  Var<T> extended;    // Ã, after the support softmax in the edge-PE ablation
  Var<T> normalized;  // Â
  TopTwo selection;
};

// nodes: Ṽ [(M+1), dim] with row 0 the full-sketch embedding.
template <class T>
GraphVars<T> build_graph(const Model<T>& model, Var<T> nodes) {
  const auto& cfg = model.config();
  const std::size_t m = cfg.patches;
  Var<T> patches = slice(nodes, 0, 1, m);
  GraphVars<T> g;
  if (!cfg.pe_in_edges) {
    g.adjacency = build_masked_adjacency(patches, &g.selection);
    g.extended = extend_with_global(g.adjacency);
  } else {
    Tensor<T> pe_rows(Shape{m, cfg.embed_dim});
    const auto& tab = model.absolute_table();
    std::copy(tab.data() + cfg.embed_dim, tab.data() + tab.size(), pe_rows.data());
    g.adjacency = pe_in_edges_adjacency(patches, pe_rows, &g.selection);
    const auto support = extend_support(adjacency_support<T>(g.selection));
    g.extended = softmax_over_support(extend_with_global(g.adjacency), support);
  }
  g.normalized = sym_normalize(g.extended);
  return g;
}

// H_i = Σ_j Â(i,j) (Ṽ_j + R̃(i,j)) + P̃_i.
template <class T>
Var<T> aggregate_nodes(const Model<T>& model, Binder<T>& p, Var<T> nodes, Var<T> normalized) {
  const auto& cfg = model.config();
  const std::size_t n = cfg.patches + 1;
  Tape<T>& tape = p.tape();
  Var<T> h = matmul(normalized, nodes);
  if (cfg.use_relative_pe) {
    Var<T> flat = reshape(normalized, {1, n * n});
    Var<T> per_offset = reshape(matmul(flat, tape.constant(model.selectors().offsets)), {n, cfg.patches});
    h = add(h, matmul(per_offset, p("rel_pe.offsets")));
    Var<T> per_global = reshape(matmul(flat, tape.constant(model.selectors().placeholder)), {n, 1});
    h = add(h, matmul(per_global, reshape(p("rel_pe.placeholder"), {1, cfg.embed_dim})));
  }
  if (cfg.use_absolute_pe) h = add(h, tape.constant(model.absolute_table()));
  return h;
}

template <class T>
struct LatentVars {
  Var<T> mu;
  Var<T> logvar;
  Var<T> y;
};

// `eps` null means deterministic evaluation (y = μ).
template <class T>
LatentVars<T> latent_head(const Model<T>& model, Binder<T>& p, Var<T> aggregated, std::type_identity_t<const Tensor<T>*> eps) {
  const auto& cfg = model.config();
  const std::size_t nz = cfg.latent_dim;
  Var<T> x = reshape(aggregated, {1, aggregated.value().size()});
  x = relu(linear(p, "head.fc1", x));
  Var<T> out = linear(p, "head.fc2", x);
  LatentVars<T> lv;
  lv.mu = reshape(slice(out, 1, 0, nz), {nz});
  lv.logvar = clamp(reshape(slice(out, 1, nz, nz), {nz}), T(kLogVarMin), T(kLogVarMax));
  if (!eps) {
    lv.y = lv.mu;
  } else {
    if (eps->shape() != Shape{nz}) shape_fail("latent_head", Shape{nz}, eps->shape());
    lv.y = add(lv.mu, mul(exp(scale(lv.logvar, T(0.5))), p.tape().constant(*eps)));
  }
  return lv;
}

template <class T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

template <class T>
LstmState<T> decoder_initial_state(const Model<T>& model, Binder<T>& p, Var<T> y) {
  const std::size_t h = model.config().decoder_hidden;
  Var<T> hc = tanh(linear(p, "dec.init", reshape(y, {1, y.value().size()})));
  return {slice(hc, 1, 0, h), slice(hc, 1, h, h)};
}

// One LSTM step given the precomputed input projection row [1, 4H].
template <class T>
LstmState<T> lstm_step(Binder<T>& p, std::size_t hidden, Var<T> input_proj, const LstmState<T>& s) {
  Var<T> gates = add(input_proj, matmul(s.h, p("dec.lstm.wh")));
  Var<T> i = sigmoid(slice(gates, 1, 0, hidden));
  Var<T> f = sigmoid(slice(gates, 1, hidden, hidden));
  Var<T> g = tanh(slice(gates, 1, 2 * hidden, hidden));
  Var<T> o = sigmoid(slice(gates, 1, 3 * hidden, hidden));
  Var<T> c = add(mul(f, s.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

template <class T>
Var<T> decoder_inputs(Binder<T>& p, Var<T> y, const Tensor<T>& stroke_inputs) {
  const std::size_t steps = stroke_inputs.extent(0);
  const std::size_t nz = y.value().size();
  std::vector<Var<T>> rows(steps, reshape(y, {1, nz}));
  Var<T> ys = concat(rows, 0);
  return concat<T>({p.constant(stroke_inputs), ys}, 1);
}

// Teacher-forced decoding: raw emissions [T, 6K+3], one row per input step.
template <class T>
std::optional<Var<T>> decode_sequence(const Model<T>& model, Binder<T>& p, Var<T> y, const Tensor<T>& stroke_inputs) {
  const auto& cfg = model.config();
  if (stroke_inputs.rank() != 2 || stroke_inputs.extent(1) != 5) throw ShapeError("decode_sequence: expected [T, 5] inputs, got " + shape_str(stroke_inputs.shape()));
  const std::size_t steps = stroke_inputs.extent(0);
  if (steps == 0) return std::nullopt;
  if (steps > cfg.max_seq_len)
    throw std::length_error("decode_sequence: " + std::to_string(steps) + " steps exceed max_seq_len " + std::to_string(cfg.max_seq_len));
  Var<T> proj = add(matmul(decoder_inputs(p, y, stroke_inputs), p("dec.lstm.wx")), p("dec.lstm.b"));
  LstmState<T> s = decoder_initial_state(model, p, y);
  std::vector<Var<T>> hs;
  for (std::size_t t = 0; t < steps; ++t) {
    s = lstm_step(p, cfg.decoder_hidden, slice(proj, 0, t, 1), s);
    hs.push_back(s.h);
  }
  return linear(p, "dec.out", concat(hs, 0));
}

// Emission parameters of one step, after the output transforms.
struct MixtureParams {
  std::vector<double> weights, mu_x, mu_y, sigma_x, sigma_y, rho;
  std::array<double, 3> pen_logits{};
  std::array<double, 3> pen_probs{};
};

template <class T>
MixtureParams mixture_params(const Tensor<T>& emissions, std::size_t step, std::size_t k, double temperature = 1.0) {
  const std::size_t w = emissions.extent(1);
  if (w != 6 * k + 3) throw ShapeError("mixture_params: width " + std::to_string(w) + " does not match K = " + std::to_string(k));
  const T* row = emissions.data() + step * w;
  MixtureParams mp;
  auto softmax_into = [](const T* x, std::size_t n, double tau, auto& out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(x[i]) / tau);
    double z = 0;
    for (std::size_t i = 0; i < n; ++i) z += (out[i] = std::exp(static_cast<double>(x[i]) / tau - mx));
    for (std::size_t i = 0; i < n; ++i) out[i] /= z;
  };
  mp.weights.resize(k);
  softmax_into(row, k, temperature, mp.weights);
  for (std::size_t i = 0; i < k; ++i) {
    mp.mu_x.push_back(row[k + i]);
    mp.mu_y.push_back(row[2 * k + i]);
    mp.sigma_x.push_back(std::exp(static_cast<double>(row[3 * k + i])));
    mp.sigma_y.push_back(std::exp(static_cast<double>(row[4 * k + i])));
    mp.rho.push_back(std::tanh(static_cast<double>(row[5 * k + i])));
  }
  for (std::size_t i = 0; i < 3; ++i) mp.pen_logits[i] = row[6 * k + i];
  softmax_into(row + 6 * k, 3, 1.0, mp.pen_probs);
  return mp;
}

template <class T>
struct NllTerms {
  Var<T> total;
  Var<T> offsets;
  Var<T> pen;
};

// −Σ_t log Σ_k π_k N(Δx_t, Δy_t | k) over drawn points − Σ_t log p(pen_t) over
// every step including the end token. No KL term.
template <class T>
NllTerms<T> reconstruction_nll_terms(Var<T> emissions, const Tensor<T>& targets, std::size_t k) {
  Tape<T>& tape = *emissions.tape;
  const std::size_t steps = targets.extent(0);
  if (emissions.value().shape() != Shape{steps, 6 * k + 3})
    shape_fail("reconstruction_nll", emissions.value().shape(), Shape{steps, 6 * k + 3});
  Tensor<T> tx(Shape{steps, k}), ty(Shape{steps, k}), pen(Shape{steps, 3});
  std::size_t drawn = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      tx(t, i) = targets(t, 0);
      ty(t, i) = targets(t, 1);
    }
    for (std::size_t c = 0; c < 3; ++c) pen(t, c) = targets(t, 2 + c);
    if (targets(t, 4) == T{0}) ++drawn;
  }
  Var<T> logit_pi = slice(emissions, 1, 0, k);
  Var<T> mu_x = slice(emissions, 1, k, k);
  Var<T> mu_y = slice(emissions, 1, 2 * k, k);
  Var<T> log_sx = slice(emissions, 1, 3 * k, k);
  Var<T> log_sy = slice(emissions, 1, 4 * k, k);
  Var<T> rho = tanh(slice(emissions, 1, 5 * k, k));
  Var<T> pen_logits = slice(emissions, 1, 6 * k, 3);

  Var<T> zx = mul(sub(tape.constant(tx), mu_x), exp(scale(log_sx, T{-1})));
  Var<T> zy = mul(sub(tape.constant(ty), mu_y), exp(scale(log_sy, T{-1})));
  Var<T> one_minus = add_scalar(scale(square(rho), T{-1}), T{1});
  Var<T> z = sub(add(square(zx), square(zy)), scale(mul(rho, mul(zx, zy)), T{2}));
  Var<T> log_norm = add_scalar(scale(add(add(log_sx, log_sy), scale(log(one_minus), T(0.5))), T{-1}), T(-std::log(2 * std::numbers::pi)));
  log_norm = sub(log_norm, div(z, scale(one_minus, T{2})));
  Var<T> log_mix = logsumexp(add(log_softmax(logit_pi), log_norm));

  NllTerms<T> out;
  out.offsets = drawn > 0 ? scale(sum(slice(log_mix, 0, 0, drawn)), T{-1}) : tape.constant(Tensor<T>::scalar(T{0}));
  out.pen = scale(sum(mul(log_softmax(pen_logits), tape.constant(pen))), T{-1});
  out.total = add(out.offsets, out.pen);
  return out;
}

template <class T>
Var<T> reconstruction_nll(Var<T> emissions, const Tensor<T>& targets, std::size_t k) {
  return reconstruction_nll_terms(emissions, targets, k).total;
}

// ---------------------------------------------------------------------------
// Whole-model passes

template <class T>
struct Example {
  std::size_t id = 0;
  std::size_t label = 0;
  Tensor<T> images;  // [(M+1), 1, S, S]
  Stroke5<T> strokes;
};

template <class T>
Example<T> make_example(const StrokeSequence& normalized, const ModelConfig& cfg, std::size_t id = 0, std::size_t label = 0) {
  Example<T> ex;
  ex.id = id;
  ex.label = label;
  ex.images = sketch_images<T>(normalized, cfg);
  ex.strokes = to_stroke5<T>(normalized, cfg.offset_scale);
  if (ex.strokes.targets.extent(0) > cfg.max_seq_len)
    throw std::length_error("sketch " + std::to_string(id) + " needs " + std::to_string(ex.strokes.targets.extent(0)) + " steps, max_seq_len is " + std::to_string(cfg.max_seq_len));
  return ex;
}

template <class T>
struct SketchPass {
  GraphVars<T> graph;
  Var<T> nodes;
  Var<T> aggregated;
  LatentVars<T> latent;
  Var<T> nll;
};

// Graph, latent and decoder for one sketch given its node embeddings.
template <class T>
SketchPass<T> sketch_pass(const Model<T>& model, Binder<T>& p, Var<T> nodes, const Stroke5<T>& strokes, std::type_identity_t<const Tensor<T>*> eps) {
  SketchPass<T> s;
  s.nodes = nodes;
  s.graph = build_graph(model, nodes);
  s.aggregated = aggregate_nodes(model, p, nodes, s.graph.normalized);
  s.latent = latent_head(model, p, s.aggregated, eps);
  auto em = decode_sequence(model, p, s.latent.y, strokes.inputs);
  s.nll = em ? reconstruction_nll(*em, strokes.targets, model.config().mixtures) : p.constant(Tensor<T>::scalar(T{0}));
  return s;
}

template <class T>
struct BatchPass {
  Var<T> loss;  // mean NLL over the batch
  std::vector<double> nll;
  std::vector<BatchNormStats<T>> bn_stats;
};

// All images of the batch go through the encoder together, so batch-norm
// statistics are taken over every patch of every sketch in the batch.
template <class T>
BatchPass<T> forward_batch(const Model<T>& model, Binder<T>& p, const std::vector<const Example<T>*>& batch, NormMode mode,
                           std::type_identity_t<const std::vector<Tensor<T>>*> eps) {
  if (batch.empty()) throw std::invalid_argument("forward_batch: empty batch");
  const auto& cfg = model.config();
  const std::size_t n = cfg.patches + 1;
  const std::size_t per = n * cfg.input_size * cfg.input_size;
  Tensor<T> images(Shape{batch.size() * n, 1, cfg.input_size, cfg.input_size});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b]->images.size() != per) shape_fail("forward_batch", batch[b]->images.shape(), Shape{n, 1, cfg.input_size, cfg.input_size});
    std::copy_n(batch[b]->images.data(), per, images.data() + b * per);
  }
  BatchPass<T> out;
  Var<T> emb = encode_images(model, p, p.constant(std::move(images)), mode, &out.bn_stats);
  std::vector<Var<T>> losses;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto pass = sketch_pass(model, p, slice(emb, 0, b * n, n), batch[b]->strokes, eps ? &(*eps)[b] : nullptr);
    out.nll.push_back(static_cast<double>(pass.nll.value().item()));
    losses.push_back(reshape(pass.nll, {1}));
  }
  out.loss = mean(concat(losses, 0));
  return out;
}

// Deterministic eval-mode code (μ, logvar) of one sketch.
template <class T>
struct LatentCode {
  std::vector<double> mu;
  std::vector<double> logvar;
};

template <class T>
LatentCode<T> encode_sketch(const Model<T>& model, const Tensor<T>& images) {
  Tape<T> tape;
  Binder<T> p(tape, model.params(), true);
  Var<T> emb = encode_images(model, p, tape.constant(images), NormMode::eval);
  Var<T> h = aggregate_nodes(model, p, emb, build_graph(model, emb).normalized);
  auto lv = latent_head(model, p, h, nullptr);
  LatentCode<T> code;
  for (T v : lv.mu.value().values()) code.mu.push_back(v);
  for (T v : lv.logvar.value().values()) code.logvar.push_back(v);
  return code;
}

template <class T>
struct GraphSnapshot {
  Tensor<T> adjacency;
  Tensor<T> extended;
  Tensor<T> normalized;
};

// Eval-mode graph of one sketch, for inspection.
template <class T>
GraphSnapshot<T> inspect_graph(const Model<T>& model, const Tensor<T>& images) {
  Tape<T> tape;
  Binder<T> p(tape, model.params(), true);
  auto g = build_graph(model, encode_images(model, p, tape.constant(images), NormMode::eval));
  return {g.adjacency.value(), g.extended.value(), g.normalized.value()};
}

// Autoregressive sampling from code y. Temperature divides the mixture logits
// and scales the Gaussian variances; pen states are sampled from the unscaled
// pen distribution. Stops at the end state or max_seq_len.
template <class T>
StrokeSequence generate(const Model<T>& model, const std::vector<double>& y, double temperature, Rng& rng) {
  const auto& cfg = model.config();
  if (!(temperature > 0 && temperature <= 1)) throw std::invalid_argument("generate: temperature must lie in (0, 1]");
  if (y.size() != cfg.latent_dim) shape_fail("generate", Shape{cfg.latent_dim}, Shape{y.size()});
  Tape<T> tape;
  Binder<T> p(tape, model.params(), true);
  Var<T> yv = tape.constant(Tensor<T>(Shape{y.size()}, std::vector<T>(y.begin(), y.end())));
  LstmState<T> s = decoder_initial_state(model, p, yv);
  Tensor<T> prev(Shape{1, 5});
  prev(0, 2) = T{1};
  StrokeSequence out;
  const double sq = std::sqrt(temperature);
  for (std::size_t t = 0; t < cfg.max_seq_len; ++t) {
    Var<T> proj = add(matmul(decoder_inputs(p, yv, prev), p("dec.lstm.wx")), p("dec.lstm.b"));
    s = lstm_step(p, cfg.decoder_hidden, proj, s);
    const auto mp = mixture_params(linear(p, "dec.out", s.h).value(), 0, cfg.mixtures, temperature);
    const std::size_t k = std::discrete_distribution<std::size_t>(mp.weights.begin(), mp.weights.end())(rng);
    const double n1 = standard_normal(rng), n2 = standard_normal(rng);
    const double dx = mp.mu_x[k] + mp.sigma_x[k] * sq * n1;
    const double dy = mp.mu_y[k] + mp.sigma_y[k] * sq * (mp.rho[k] * n1 + std::sqrt(1 - mp.rho[k] * mp.rho[k]) * n2);
    const std::size_t pen = std::discrete_distribution<std::size_t>(mp.pen_probs.begin(), mp.pen_probs.end())(rng);
    if (pen == 2) break;
    out.points.push_back({dx * cfg.offset_scale, dy * cfg.offset_scale, pen == 0 ? Pen::down : Pen::lift});
    prev = Tensor<T>(Shape{1, 5});
    prev(0, 0) = static_cast<T>(dx);
    prev(0, 1) = static_cast<T>(dy);
    prev(0, 2 + pen) = T{1};
  }
  if (!out.points.empty()) out.points.back().pen = Pen::lift;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "DCK1", u32 version, header text, u64 fingerprint of the header,
// u32 count, then (name, u8 trainable, tensor snapshot) per parameter.

constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_parameters(std::ostream& os, const std::string& header, const ParameterStore<T>& params) {
  os.write("DCK1", 4);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put_string(os, header);
  io::put<std::uint64_t>(os, fnv1a(header));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, p] : params) {
    io::put_string(os, name);
    io::put<std::uint8_t>(os, p.trainable ? 1 : 0);
    write_snapshot(os, p.value);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

template <class T>
struct StoredParameters {
  std::string header;
  ParameterStore<T> params;
};

template <class T>
StoredParameters<T> load_parameters(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DCK1") throw std::runtime_error("checkpoint: bad magic");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  StoredParameters<T> out;
  out.header = io::get_string(is);
  if (io::get<std::uint64_t>(is) != fnv1a(out.header)) throw std::runtime_error("checkpoint: fingerprint does not match stored config");
  const auto count = io::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = io::get_string(is);
    const bool trainable = io::get<std::uint8_t>(is) != 0;
    out.params.add(name, read_snapshot<T>(is), trainable);
  }
  return out;
}

template <class T>
void save_checkpoint(std::ostream& os, const Model<T>& model) {
  save_parameters(os, model.config().describe(), model.params());
}

template <class T>
Model<T> load_checkpoint(std::istream& is) {
  auto st = load_parameters<T>(is);
  return Model<T>(ModelConfig::from_text(st.header), std::move(st.params));
}

// Loads and refuses a checkpoint whose architecture differs from `expected`.
template <class T>
Model<T> load_model(std::istream& is, const ModelConfig& expected) {
  auto st = load_parameters<T>(is);
  const auto stored = ModelConfig::from_text(st.header);
  if (stored.fingerprint() != expected.fingerprint())
    throw std::runtime_error("checkpoint architecture does not match the requested configuration:\n--- checkpoint\n" + stored.describe() + "--- requested\n" + expected.describe());
  return Model<T>(stored, std::move(st.params));
}

}  // namespace dcg
