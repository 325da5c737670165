#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "dcg/gradcheck.hpp"
#include "dcg/training.hpp"

using namespace dcg;

namespace {

std::vector<double> vec(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

StrokeSequence toy_sketch(SyntheticShape shape, std::uint64_t seed) {
  Rng rng(seed);
  return normalize(generate_synthetic(shape, rng));
}

double loss_of(const Model<double>& model, const Example<double>& ex) {
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  std::vector<const Example<double>*> one{&ex};
  return forward_batch(model, p, one, NormMode::eval, nullptr).loss.value().item();
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

TEST(Encoder, IdenticalPatchesGiveIdenticalRows) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 1);
  Rng rng(2);
  auto images = random_tensor({cfg.patches + 1, 1, cfg.input_size, cfg.input_size}, rng, 0, 1);
  const std::size_t per = cfg.input_size * cfg.input_size;
  std::copy_n(images.data() + per, per, images.data() + 2 * per);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto emb = encode_images(model, p, tape.constant(images), NormMode::eval).value();
  ASSERT_EQ(emb.shape(), (Shape{cfg.patches + 1, cfg.embed_dim}));
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) EXPECT_EQ(emb(1, c), emb(2, c));
}

TEST(Encoder, BlankPatchesGiveConstantRow) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 3);
  const auto images = sketch_images<double>(StrokeSequence::from_absolute({{320, 320}}, {Pen::lift}), cfg);
  auto run = [&] {
    Tape<double> tape;
    Binder<double> p(tape, model.params(), true);
    return encode_images(model, p, tape.constant(images), NormMode::eval).value();
  };
  const auto a = run(), b = run();
  EXPECT_EQ(vec(a), vec(b));
  Tensor<double> zeros(Shape{2, 1, cfg.input_size, cfg.input_size});
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto z = encode_images(model, p, tape.constant(zeros), NormMode::eval).value();
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) EXPECT_EQ(z(0, c), z(1, c));
}

TEST(Encoder, ShapePropagationOnSmallInput) {
  auto cfg = ModelConfig::toy();
  cfg.input_size = 8;  // 8 -> 3 -> 1 through two stages
  Model<double> model(cfg, 0);
  EXPECT_EQ(cfg.encoder_output_extent(), 1u);
  EXPECT_EQ(model.params().value("enc.proj.w").shape(), (Shape{16, 16}));
  Rng rng(1);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto emb = encode_images(model, p, tape.constant(random_tensor({cfg.patches + 1, 1, 8, 8}, rng)), NormMode::eval);
  EXPECT_EQ(emb.value().shape(), (Shape{cfg.patches + 1, 16}));
  EXPECT_THROW(encode_images(model, p, tape.constant(Tensor<double>(Shape{2, 1, 9, 9})), NormMode::eval), ShapeError);
}

TEST(Encoder, PaperScaleStages) {
  const auto cfg = ModelConfig::paper();
  EXPECT_EQ(cfg.channels, (std::vector<std::size_t>{8, 32, 64, 128, 256, 512, 512}));
  EXPECT_EQ(cfg.input_size, 256u);
  EXPECT_EQ(cfg.embed_dim, 512u);
  EXPECT_EQ(cfg.encoder_output_extent(), 1u);
}

TEST(Encoder, TrainModeUsesBatchStatisticsAndUpdatesRunningStats) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 4);
  Rng rng(5);
  const auto images = random_tensor({cfg.patches + 1, 1, cfg.input_size, cfg.input_size}, rng, 0, 1);
  Tape<double> tape;
  Binder<double> p(tape, model.params());
  std::vector<BatchNormStats<double>> seen;
  encode_images(model, p, tape.constant(images), NormMode::train, &seen);
  ASSERT_EQ(seen.size(), cfg.channels.size());
  const auto before = vec(model.params().value("enc.bn0.running_mean"));
  model.update_running_stats(seen);
  const auto after = vec(model.params().value("enc.bn0.running_mean"));
  for (std::size_t c = 0; c < after.size(); ++c) EXPECT_NEAR(after[c], 0.9 * before[c] + 0.1 * seen[0].mean[c], 1e-15);
}

// ---------------------------------------------------------------------------
// Aggregation

TEST(Aggregation, MatchesPerPairOracle) {
  auto cfg = ModelConfig::toy();
  cfg.patches = 5;
  Model<double> model(cfg, 7);
  Rng rng(8);
  for (auto& v : model.params().value("rel_pe.offsets").values()) v = standard_normal(rng);
  const std::size_t n = cfg.patches + 1, d = cfg.embed_dim;
  const auto nodes = random_tensor({n, d}, rng);
  const auto norm = random_tensor({n, n}, rng, 0, 1);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto h = aggregate_nodes(model, p, tape.constant(nodes), tape.constant(norm)).value();
  const auto bank = model.relative_bank();
  const auto& table = model.absolute_table();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      long double want = table(i, c);
      for (std::size_t j = 0; j < n; ++j) want += norm(i, j) * (nodes(j, c) + bank.lookup(i, j)[c]);
      ASSERT_NEAR(h(i, c), static_cast<double>(want), 1e-12) << i << "," << c;
    }
}

TEST(Aggregation, IdentityGraphWithoutPEsPassesNodesThrough) {
  auto cfg = ModelConfig::toy();
  cfg.use_absolute_pe = cfg.use_relative_pe = false;
  Model<double> model(cfg, 1);
  Rng rng(2);
  const auto nodes = random_tensor({cfg.patches + 1, cfg.embed_dim}, rng);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto h = aggregate_nodes(model, p, tape.constant(nodes), tape.constant(identity<double>(cfg.patches + 1))).value();
  EXPECT_EQ(vec(h), vec(nodes));
}

TEST(Aggregation, ZeroPEsGivePlainPropagation) {
  auto cfg = ModelConfig::toy();
  cfg.use_absolute_pe = false;
  Model<double> model(cfg, 1);
  for (auto& v : model.params().value("rel_pe.offsets").values()) v = 0;
  Rng rng(3);
  const std::size_t n = cfg.patches + 1;
  const auto nodes = random_tensor({n, cfg.embed_dim}, rng);
  const auto norm = random_tensor({n, n}, rng, 0, 1);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto h = aggregate_nodes(model, p, tape.constant(nodes), tape.constant(norm)).value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
      double want = 0;
      for (std::size_t j = 0; j < n; ++j) want += norm(i, j) * nodes(j, c);
      EXPECT_NEAR(h(i, c), want, 1e-12);
    }
}

TEST(Aggregation, SinglePatchSelfLoop) {
  auto cfg = ModelConfig::toy();
  cfg.patches = 1;
  Model<double> model(cfg, 5);
  Rng rng(6);
  const auto nodes = random_tensor({2, cfg.embed_dim}, rng);
  Tensor<double> norm(Shape{2, 2});
  norm(1, 1) = 0.8;
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto h = aggregate_nodes(model, p, tape.constant(nodes), tape.constant(norm)).value();
  const auto& r0 = model.params().value("rel_pe.offsets");
  const auto pe1 = absolute_pe(1, cfg.embed_dim);
  for (std::size_t c = 0; c < cfg.embed_dim; ++c) EXPECT_NEAR(h(1, c), 0.8 * (nodes(1, c) + r0(0, c)) + pe1[c], 1e-12);
}

// ---------------------------------------------------------------------------
// Latent head

class LatentHeadTest : public ::testing::Test {
 protected:
  ModelConfig cfg = ModelConfig::toy();
  Model<double> model{cfg, 11};
  Tensor<double> h;
  void SetUp() override {
    Rng rng(12);
    h = random_tensor({cfg.patches + 1, cfg.embed_dim}, rng);
  }
  LatentVars<double> run(const Tensor<double>* eps) {
    tape_ = std::make_unique<Tape<double>>();
    Binder<double> p(*tape_, model.params(), true);
    return latent_head(model, p, tape_->constant(h), eps);
  }
  std::unique_ptr<Tape<double>> tape_;
};

TEST_F(LatentHeadTest, ZeroNoiseGivesMean) {
  Tensor<double> zero(Shape{cfg.latent_dim});
  const auto lv = run(&zero);
  EXPECT_EQ(vec(lv.y.value()), vec(lv.mu.value()));
  const auto det = run(nullptr);
  EXPECT_EQ(vec(det.y.value()), vec(det.mu.value()));
}

TEST_F(LatentHeadTest, ClampedLogVarCollapsesToMean) {
  auto& b = model.params().value("head.fc2.b");
  for (std::size_t i = cfg.latent_dim; i < 2 * cfg.latent_dim; ++i) b[i] = -1e6;
  Tensor<double> ones(Shape{cfg.latent_dim}, 1.0);
  const auto lv = run(&ones);
  for (std::size_t i = 0; i < cfg.latent_dim; ++i) {
    EXPECT_EQ(lv.logvar.value()[i], -20.0);
    EXPECT_NEAR(lv.y.value()[i], lv.mu.value()[i], std::exp(-10.0) * 1.0001);
  }
}

TEST_F(LatentHeadTest, UnitSigmaPassesNoiseThrough) {
  for (auto& v : model.params().value("head.fc2.w").values()) v = 0;
  for (auto& v : model.params().value("head.fc2.b").values()) v = 0;
  Rng rng(3);
  const auto e = random_tensor({cfg.latent_dim}, rng);
  const auto lv = run(&e);
  for (std::size_t i = 0; i < cfg.latent_dim; ++i) EXPECT_DOUBLE_EQ(lv.y.value()[i], e[i]);
}

TEST_F(LatentHeadTest, ReparameterizationFormula) {
  Rng rng(4);
  const auto e = random_tensor({cfg.latent_dim}, rng);
  const auto lv = run(&e);
  for (std::size_t i = 0; i < cfg.latent_dim; ++i)
    EXPECT_NEAR(lv.y.value()[i], lv.mu.value()[i] + std::exp(0.5 * lv.logvar.value()[i]) * e[i], 1e-12);
}

// ---------------------------------------------------------------------------
// Stroke-5 and decoding

TEST(Stroke5, LayoutAndShift) {
  const auto s = StrokeSequence::from_absolute({{100, 100}, {164, 36}, {200, 100}}, {Pen::down, Pen::lift, Pen::lift});
  const auto st = to_stroke5<double>(s, 64.0);
  ASSERT_EQ(st.targets.shape(), (Shape{4, 5}));
  const std::vector<double> want = {0, 0, 1, 0, 0,  //
                                    1, -1, 0, 1, 0,
                                    36.0 / 64, 1, 0, 1, 0,
                                    0, 0, 0, 0, 1};
  EXPECT_EQ(vec(st.targets), want);
  EXPECT_EQ(st.inputs(0, 2), 1.0);
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(st.inputs(t, c), st.targets(t - 1, c));
}

TEST(Decoder, ZeroLengthTargetGivesNoEmissions) {
  Model<double> model(ModelConfig::toy(), 0);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  EXPECT_FALSE(decode_sequence(model, p, tape.constant(Tensor<double>(Shape{8})), Tensor<double>(Shape{0, 5})).has_value());
}

TEST(Decoder, EmissionsDependOnCode) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 1);
  const auto st = to_stroke5<double>(toy_sketch(SyntheticShape::zigzag, 1), cfg.offset_scale);
  Rng rng(2);
  auto emit = [&](const Tensor<double>& y) {
    Tape<double> tape;
    Binder<double> p(tape, model.params(), true);
    return vec(decode_sequence(model, p, tape.constant(y), st.inputs)->value());
  };
  const auto a = emit(random_tensor({cfg.latent_dim}, rng)), b = emit(random_tensor({cfg.latent_dim}, rng));
  ASSERT_EQ(a.size(), st.inputs.extent(0) * cfg.emission_width());
  EXPECT_NE(a, b);
}

TEST(Decoder, TooLongTargetRejected) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 1);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  EXPECT_THROW(decode_sequence(model, p, tape.constant(Tensor<double>(Shape{8})), Tensor<double>(Shape{cfg.max_seq_len + 1, 5})), std::length_error);
  std::vector<Point2> pts;
  std::vector<Pen> pens;
  for (std::size_t i = 0; i < cfg.max_seq_len; ++i) pts.push_back({10.0 * i, 5.0 * (i % 2)}), pens.push_back(Pen::down);
  EXPECT_THROW(make_example<double>(normalize(StrokeSequence::from_absolute(pts, pens)), cfg), std::length_error);
}

TEST(Decoder, EmissionTransformsStayValid) {
  Rng rng(9);
  const std::size_t k = 4;
  for (int trial = 0; trial < 200; ++trial) {
    const auto em = random_tensor({1, 6 * k + 3}, rng, -15, 15);
    for (double tau : {1.0, 0.3, 1e-3}) {
      const auto mp = mixture_params(em, 0, k, tau);
      double total = 0;
      for (std::size_t i = 0; i < k; ++i) {
        ASSERT_GE(mp.weights[i], 0.0);
        ASSERT_GT(mp.sigma_x[i], 0.0);
        ASSERT_GT(mp.sigma_y[i], 0.0);
        ASSERT_LT(std::abs(mp.rho[i]), 1.0);
        total += mp.weights[i];
      }
      ASSERT_NEAR(total, 1.0, 1e-6);
      ASSERT_NEAR(mp.pen_probs[0] + mp.pen_probs[1] + mp.pen_probs[2], 1.0, 1e-12);
    }
  }
  EXPECT_THROW(mixture_params(Tensor<double>(Shape{1, 10}), 0, k), ShapeError);
}

TEST(Decoder, TrainedModelEmissionsStayOnSimplex) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 2);
  const auto ex = make_example<double>(toy_sketch(SyntheticShape::circle, 3), cfg);
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  Rng rng(4);
  const auto em = decode_sequence(model, p, tape.constant(random_tensor({cfg.latent_dim}, rng)), ex.strokes.inputs)->value();
  for (std::size_t t = 0; t < em.extent(0); ++t) {
    const auto mp = mixture_params(em, t, cfg.mixtures);
    double total = 0;
    for (double w : mp.weights) total += w;
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Reconstruction NLL

namespace {

// Three drawn points and the end token; K = 1 component centred on each target.
struct CenteredFixture {
  Tensor<double> targets{Shape{4, 5}};
  Tensor<double> emissions{Shape{4, 9}};
  CenteredFixture() {
    const double dx[] = {0, 0.5, -1.25}, dy[] = {0, 2, 0.75};
    for (std::size_t t = 0; t < 3; ++t) {
      targets(t, 0) = dx[t];
      targets(t, 1) = dy[t];
      targets(t, t == 2 ? 3 : 2) = 1;
      emissions(t, 1) = dx[t];
      emissions(t, 2) = dy[t];
    }
    targets(3, 4) = 1;
  }
};

}  // namespace

TEST(ReconstructionNll, CenteredUnitGaussianAndUniformPen) {
  CenteredFixture f;
  Tape<double> tape;
  const auto terms = reconstruction_nll_terms(tape.constant(f.emissions), f.targets, 1);
  EXPECT_NEAR(terms.offsets.value().item() / 3, std::log(2 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(std::log(2 * std::numbers::pi), 1.8379, 1e-4);
  EXPECT_NEAR(terms.pen.value().item() / 4, std::log(3.0), 1e-12);
  EXPECT_NEAR(std::log(3.0), 1.0986, 1e-4);
  EXPECT_NEAR(terms.total.value().item(), 3 * std::log(2 * std::numbers::pi) + 4 * std::log(3.0), 1e-12);
}

TEST(ReconstructionNll, DisplacedMassCostsMore) {
  CenteredFixture f;
  Tape<double> tape;
  const double centered = reconstruction_nll(tape.constant(f.emissions), f.targets, 1).value().item();
  auto far = f.emissions;
  for (std::size_t t = 0; t < 3; ++t) far(t, 1) += 3.0;
  const double displaced = reconstruction_nll(tape.constant(far), f.targets, 1).value().item();
  EXPECT_GT(displaced, centered);
  EXPECT_NEAR(displaced - centered, 3 * 4.5, 1e-12);
}

TEST(ReconstructionNll, MatchesDirectDensityOracle) {
  Rng rng(15);
  const std::size_t k = 3, steps = 6;
  const auto em = random_tensor({steps, 6 * k + 3}, rng, -1.5, 1.5);
  Tensor<double> targets(Shape{steps, 5});
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    targets(t, 0) = 2 * uniform01(rng) - 1;
    targets(t, 1) = 2 * uniform01(rng) - 1;
    targets(t, 2 + (t % 2)) = 1;
  }
  targets(steps - 1, 4) = 1;
  long double want = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    const auto mp = mixture_params(em, t, k);
    if (t + 1 < steps) {
      long double mix = 0;
      for (std::size_t i = 0; i < k; ++i) {
        const long double zx = (targets(t, 0) - mp.mu_x[i]) / mp.sigma_x[i], zy = (targets(t, 1) - mp.mu_y[i]) / mp.sigma_y[i];
        const long double r = mp.rho[i], q = 1 - r * r;
        mix += mp.weights[i] * std::exp(-(zx * zx + zy * zy - 2 * r * zx * zy) / (2 * q)) / (2 * std::numbers::pi * mp.sigma_x[i] * mp.sigma_y[i] * std::sqrt(q));
      }
      want -= std::log(mix);
    }
    for (std::size_t c = 0; c < 3; ++c)
      if (targets(t, 2 + c) == 1) want -= std::log(static_cast<long double>(mp.pen_probs[c]));
  }
  Tape<double> tape;
  EXPECT_NEAR(reconstruction_nll(tape.constant(em), targets, k).value().item(), static_cast<double>(want), 1e-10);
}

TEST(ReconstructionNll, GradientMatchesFiniteDifferences) {
  Rng rng(16);
  const std::size_t k = 2;
  CenteredFixture f;
  Tensor<double> targets = f.targets;
  const auto point = random_tensor({4, 6 * k + 3}, rng);
  auto fn = [&](Tape<double>&, Var<double> e) { return reconstruction_nll(e, targets, k); };
  // some pen-logit gradients are ~1e-7, so a smaller step drowns in rounding
  const auto rep = finite_difference_check(fn, point, 1e-4);
  EXPECT_TRUE(rep.passed(1e-5)) << rep.max_rel_error;
}

// ---------------------------------------------------------------------------
// Generation

TEST(Generate, SameCodeSameSeedIsIdentical) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 3);
  Rng code_rng(1);
  std::vector<double> y(cfg.latent_dim);
  for (auto& v : y) v = standard_normal(code_rng);
  Rng a(42), b(42);
  const auto sa = generate(model, y, 0.5, a), sb = generate(model, y, 0.5, b);
  EXPECT_EQ(sa, sb);
  EXPECT_LE(sa.size(), cfg.max_seq_len);
  if (!sa.empty()) {
    EXPECT_EQ(sa.points.back().pen, Pen::lift);
  }
  EXPECT_THROW(generate(model, y, 0.0, a), std::invalid_argument);
  EXPECT_THROW(generate(model, y, 1.5, a), std::invalid_argument);
  EXPECT_THROW(generate(model, std::vector<double>(3), 0.5, a), ShapeError);
}

TEST(Generate, LowTemperatureFollowsTopComponentMeans) {
  auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 8);
  // make the end state unlikely so the sequence has several steps
  model.params().value("dec.out.b")[6 * cfg.mixtures + 2] = -30;
  Rng code_rng(2);
  std::vector<double> y(cfg.latent_dim);
  for (auto& v : y) v = standard_normal(code_rng);
  Rng rng(5);
  const auto seq = generate(model, y, 1e-8, rng);
  ASSERT_GE(seq.size(), 3u);

  // teacher-force the sampled sequence back through the decoder
  const std::size_t n = seq.size();
  Tensor<double> inputs(Shape{n, 5});
  inputs(0, 2) = 1;
  for (std::size_t t = 0; t + 1 < n; ++t) {
    inputs(t + 1, 0) = seq.points[t].dx / cfg.offset_scale;
    inputs(t + 1, 1) = seq.points[t].dy / cfg.offset_scale;
    inputs(t + 1, seq.points[t].pen == Pen::down ? 2 : 3) = 1;
  }
  Tape<double> tape;
  Binder<double> p(tape, model.params(), true);
  const auto em = decode_sequence(model, p, tape.constant(Tensor<double>(Shape{y.size()}, y)), inputs)->value();
  for (std::size_t t = 0; t < n; ++t) {
    const auto mp = mixture_params(em, t, cfg.mixtures);
    const std::size_t top = static_cast<std::size_t>(std::max_element(mp.weights.begin(), mp.weights.end()) - mp.weights.begin());
    const double tol = 1e-3 * (1 + std::max(mp.sigma_x[top], mp.sigma_y[top]));
    EXPECT_NEAR(seq.points[t].dx / cfg.offset_scale, mp.mu_x[top], tol) << "step " << t;
    EXPECT_NEAR(seq.points[t].dy / cfg.offset_scale, mp.mu_y[top], tol) << "step " << t;
  }
}

TEST(Generate, DistantCodesOfTrainedModelDrawDifferently) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 1);
  const auto ds = synthetic_dataset(2, {SyntheticShape::circle, SyntheticShape::zigzag}, 3, cfg.max_seq_len);
  const auto data = make_examples<double>(ds, cfg);
  TrainConfig tc;
  tc.batch = 2;
  tc.epochs = 60;
  tc.lr0 = 5e-3;
  tc.decay = 1.0;
  train(model, data, tc);
  const auto ya = encode_sketch(model, data[0].images).mu, yb = encode_sketch(model, data[1].images).mu;
  EXPECT_GT(squared_distance(ya, yb), 0.0);
  Rng ra(7), rb(7);
  const auto ga = generate(model, ya, 0.1, ra), gb = generate(model, yb, 0.1, rb);
  ASSERT_FALSE(ga.empty());
  ASSERT_FALSE(gb.empty());
  const auto ca = rasterize(normalize(ga)), cb = rasterize(normalize(gb));
  std::size_t diff = 0;
  for (std::size_t i = 0; i < ca.pixels.size(); ++i) diff += ca.pixels[i] != cb.pixels[i];
  EXPECT_GT(diff, 100u);
}

// ---------------------------------------------------------------------------
// Ablations and PE isolation

TEST(Ablation, DisabledRelativePEIsUnreachable) {
  auto cfg = ModelConfig::toy();
  cfg.use_relative_pe = false;
  Model<double> model(cfg, 2);
  const auto ex = make_example<double>(toy_sketch(SyntheticShape::two_strokes, 4), cfg);
  Tape<double> tape;
  Binder<double> p(tape, model.params());
  std::vector<const Example<double>*> one{&ex};
  auto pass = forward_batch(model, p, one, NormMode::train, nullptr);
  const auto grads = p.named(tape.gradient(pass.loss));
  EXPECT_FALSE(grads.contains("rel_pe.offsets"));
  EXPECT_TRUE(grads.contains("head.fc1.w"));
}

TEST(Ablation, DisabledAbsolutePEIgnoresTable) {
  for (bool abs_on : {false, true}) {
    auto cfg = ModelConfig::toy();
    cfg.use_absolute_pe = abs_on;
    Model<double> model(cfg, 6);
    const auto ex = make_example<double>(toy_sketch(SyntheticShape::circle, 6), cfg);
    auto params = model.params();
    for (auto& v : params.value("abs_pe.placeholder").values()) v = 0.75;
    Model<double> shifted(cfg, params);
    ASSERT_NE(shifted.absolute_table()(0, 0), model.absolute_table()(0, 0));
    if (abs_on)
      EXPECT_NE(loss_of(model, ex), loss_of(shifted, ex));
    else
      EXPECT_EQ(loss_of(model, ex), loss_of(shifted, ex));
  }
}

TEST(Ablation, GraphIdenticalWithAndWithoutPEs) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 9);
  auto bare_cfg = cfg;
  bare_cfg.use_absolute_pe = bare_cfg.use_relative_pe = false;
  Model<double> bare(bare_cfg, model.params());
  const auto images = sketch_images<double>(toy_sketch(SyntheticShape::zigzag, 2), cfg);
  const auto a = inspect_graph(model, images), b = inspect_graph(bare, images);
  EXPECT_EQ(vec(a.adjacency), vec(b.adjacency));
  EXPECT_EQ(vec(a.extended), vec(b.extended));
  EXPECT_EQ(vec(a.normalized), vec(b.normalized));
  // the codes do differ
  EXPECT_NE(encode_sketch(model, images).mu, encode_sketch(bare, images).mu);
}

TEST(Ablation, PeInEdgesSoftmaxesExtendedRows) {
  auto cfg = ModelConfig::toy();
  cfg.pe_in_edges = true;
  Model<double> model(cfg, 3);
  const auto g = inspect_graph(model, sketch_images<double>(toy_sketch(SyntheticShape::square, 1), cfg));
  for (std::size_t i = 0; i <= cfg.patches; ++i) {
    double total = 0;
    for (std::size_t j = 0; j <= cfg.patches; ++j) total += g.extended(i, j);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripPreservesBehaviour) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 13);
  std::stringstream buf;
  save_checkpoint(buf, model);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "DCK1");
  auto loaded = load_checkpoint<double>(buf);
  EXPECT_EQ(loaded.config().fingerprint(), cfg.fingerprint());
  for (auto& [name, prm] : model.params()) {
    EXPECT_EQ(vec(loaded.params().value(name)), vec(prm.value)) << name;
    EXPECT_EQ(loaded.params().at(name).trainable, prm.trainable) << name;
  }
  const auto images = sketch_images<double>(toy_sketch(SyntheticShape::circle, 1), cfg);
  const auto y = encode_sketch(model, images).mu;
  EXPECT_EQ(encode_sketch(loaded, images).mu, y);
  Rng a(1), b(1);
  EXPECT_EQ(generate(model, y, 0.3, a), generate(loaded, y, 0.3, b));
  std::stringstream again;
  save_checkpoint(again, loaded);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RefusesMismatchedArchitecture) {
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 1);
  std::stringstream buf;
  save_checkpoint(buf, model);
  auto other = cfg;
  other.use_relative_pe = false;
  EXPECT_NE(other.fingerprint(), cfg.fingerprint());
  std::stringstream copy(buf.str());
  EXPECT_THROW(load_model<double>(copy, other), std::runtime_error);
  std::stringstream ok(buf.str());
  EXPECT_NO_THROW(load_model<double>(ok, cfg));
}

TEST(Checkpoint, RejectsCorruption) {
  Model<double> model(ModelConfig::toy(), 1);
  std::stringstream buf;
  save_checkpoint(buf, model);
  std::string bytes = buf.str();
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream a(bad_magic);
  EXPECT_THROW(load_checkpoint<double>(a), std::runtime_error);
  // flip a digit inside the config header: fingerprint no longer matches
  std::string bad_header = bytes;
  const auto pos = bad_header.find("patches = 4");
  ASSERT_NE(pos, std::string::npos);
  bad_header[pos + 10] = '5';
  std::stringstream b(bad_header);
  EXPECT_THROW(load_checkpoint<double>(b), std::runtime_error);
  std::stringstream c(bytes.substr(0, bytes.size() / 2));
  EXPECT_ANY_THROW(load_checkpoint<double>(c));
}

TEST(Config, FromKeysAndFingerprint) {
  const auto toy = ModelConfig::toy();
  EXPECT_EQ(toy.embed_dim, 16u);
  EXPECT_EQ(toy.latent_dim, 8u);
  EXPECT_EQ(toy.decoder_hidden, 32u);
  EXPECT_EQ(toy.mixtures, 3u);
  EXPECT_EQ(toy.max_seq_len, 20u);
  const auto paper = ModelConfig::paper();
  EXPECT_EQ(paper.latent_dim, 128u);
  EXPECT_EQ(paper.decoder_hidden, 512u);
  EXPECT_EQ(paper.mixtures, 20u);
  EXPECT_EQ(paper.max_seq_len, 200u);
  EXPECT_EQ(paper.patches, 20u);
  const auto back = ModelConfig::from_text(toy.describe());
  EXPECT_EQ(back.describe(), toy.describe());
  const auto changed = ModelConfig::from_text("channels = 4,4\nrel_pe = 0\n", toy);
  EXPECT_EQ(changed.channels, (std::vector<std::size_t>{4, 4}));
  EXPECT_FALSE(changed.use_relative_pe);
  EXPECT_NE(changed.fingerprint(), toy.fingerprint());
  auto bad = toy;
  bad.embed_dim = 7;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

TEST(GradientCheck, EveryParameterGroupMatchesFiniteDifferences) {
  const auto cfg = ModelConfig::gradcheck();
  EXPECT_EQ(cfg.embed_dim, 16u);
  EXPECT_EQ(cfg.patches, 3u);
  EXPECT_EQ(cfg.max_seq_len, 5u);
  Model<double> model(cfg, 21);
  const auto rep = check_model_gradients(model, make_grad_fixture(cfg, 21));
  EXPECT_TRUE(rep.unreached.empty());
  for (const char* g : {"cnn", "relative_pe", "latent_mlp", "decoder"}) {
    ASSERT_TRUE(rep.groups.contains(g)) << g;
    EXPECT_GT(rep.groups.at(g).coordinates, 0u);
    EXPECT_LT(rep.groups.at(g).max_rel_error, 1e-4) << g << " worst " << rep.groups.at(g).worst_parameter;
  }
  EXPECT_TRUE(rep.passed(1e-4));
}
