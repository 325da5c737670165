// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "dcg/gradcheck.hpp"
#include "dcg/training.hpp"

using namespace dcg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::vector<double> vec(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(Shape{r, c});
  for (auto& v : t.values()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

long double cosine_ld(const Tensor<double>& v, std::size_t i, std::size_t j) {
  long double dot = 0, ni = 0, nj = 0;
  for (std::size_t k = 0; k < v.extent(1); ++k) {
    dot += static_cast<long double>(v(i, k)) * v(j, k);
    ni += static_cast<long double>(v(i, k)) * v(i, k);
    nj += static_cast<long double>(v(j, k)) * v(j, k);
  }
  return dot / std::sqrt(ni * nj);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" DCG_CLI_PATH "' " + args + " >>cli.log 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("dcg_accept_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto cfg = ModelConfig::gradcheck();
  const Model<double> model(cfg, 0);
  const auto rep = check_model_gradients(model, make_grad_fixture(cfg, 0));
  const double secs = seconds_since(t0);
  bool groups = true;
  for (const char* g : {"cnn", "relative_pe", "latent_mlp", "decoder"}) groups &= rep.groups.contains(g) && rep.groups.at(g).coordinates > 0;
  return {groups && rep.passed(1e-4) && secs < 120, "max rel error " + fmt(rep.max_rel_error()) + ", " + fmt(secs) + " s"};
}

Outcome adjacency_structure() {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 2 + rng() % 19;
    const auto v = random_matrix(m, 2 + rng() % 11, rng);
    const auto a = build_masked_adjacency(v);
    for (std::size_t i = 0; i < m; ++i) {
      if (a(i, i) != 1.0) return {false, "diagonal not 1 in trial " + std::to_string(trial)};
      std::vector<std::size_t> others;
      for (std::size_t j = 0; j < m; ++j)
        if (j != i) others.push_back(j);
      std::stable_sort(others.begin(), others.end(), [&](auto x, auto y) { return cosine_ld(v, i, x) > cosine_ld(v, i, y); });
      std::size_t nonzero = 0;
      for (std::size_t r = 0; r < others.size(); ++r) {
        const std::size_t j = others[r];
        nonzero += a(i, j) != 0.0;
        const double s = static_cast<double>(cosine_ld(v, i, j));
        const double want = r == 0 ? 0.5 * s : r == 1 ? 0.2 * s : 0.0;
        if (std::abs(a(i, j) - want) > 1e-12) return {false, "trial " + std::to_string(trial) + " row " + std::to_string(i) + " col " + std::to_string(j) + ": got " + fmt(a(i, j)) + ", want " + fmt(want)};
      }
      if (nonzero > 2) return {false, "more than two neighbors in trial " + std::to_string(trial)};
    }
  }
  // crafted ties: identical rows, and a row with two equal runners-up
  const auto same = build_masked_adjacency(Tensor<double>(Shape{6, 3}, std::vector<double>(18, 0.4)));
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t first = i == 0 ? 1 : 0, second = i <= 1 ? 2 : 1;
    for (std::size_t j = 0; j < 6; ++j) {
      const double want = j == i ? 1.0 : j == first ? 0.5 : j == second ? 0.2 : 0.0;
      if (std::abs(same(i, j) - want) > 1e-12) return {false, "identical-row tie broken wrongly"};
    }
  }
  const auto tie = build_masked_adjacency(Tensor<double>(Shape{4, 2}, std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1}));
  if (tie(0, 2) != 0.5 || tie(0, 1) != 0.0 || tie(0, 3) != 0.0 || tie(1, 3) != 0.5 || tie(1, 0) != 0.0) return {false, "orthogonal tie broken wrongly"};
  if (vec(tie) != vec(build_masked_adjacency(Tensor<double>(Shape{4, 2}, std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1}))))
    return {false, "tie handling not deterministic"};
  // one-dimensional embeddings: every similarity is exactly +1 or -1
  const auto line = build_masked_adjacency(Tensor<double>(Shape{5, 1}, std::vector<double>{-2, 4, 0.5, -1, 8}));
  const std::vector<double> row0 = {1, -0.2, 0, 0.5, 0}, row1 = {0, 1, 0.5, 0, 0.2};
  for (std::size_t j = 0; j < 5; ++j)
    if (line(0, j) != row0[j] || line(1, j) != row1[j]) return {false, "one-dimensional tie broken wrongly"};
  return {true, "1000 random sets plus crafted ties"};
}

Outcome pe_isolation() {
  const auto cfg = ModelConfig::toy();
  const Model<double> model(cfg, 11);
  auto params = model.params();
  Rng rng(5);
  for (auto& x : params.value("rel_pe.offsets").values()) x += standard_normal(rng);
  for (auto& x : params.value("abs_pe.placeholder").values()) x += standard_normal(rng);
  const Model<double> perturbed(cfg, params);
  for (auto shape : {SyntheticShape::circle, SyntheticShape::square, SyntheticShape::zigzag, SyntheticShape::two_strokes}) {
    const auto seqs = synthetic_sketches(3, {shape}, 4).begin()->second;
    for (auto& s : seqs) {
      const auto images = sketch_images<double>(normalize(s), cfg);
      const auto a = inspect_graph(model, images), b = inspect_graph(perturbed, images);
      if (vec(a.adjacency) != vec(b.adjacency) || vec(a.normalized) != vec(b.normalized)) return {false, "default graph moved with the PEs"};
    }
  }
  auto edges_cfg = cfg;
  edges_cfg.pe_in_edges = true;
  const Model<double> edges(edges_cfg, model.params());
  const auto images = sketch_images<double>(normalize(synthetic_sketches(1, {SyntheticShape::two_strokes}, 9).begin()->second[0]), cfg);
  const auto plain = inspect_graph(model, images), with_pe = inspect_graph(edges, images);
  double diff = 0;
  for (std::size_t k = 0; k < plain.adjacency.size(); ++k) diff += std::abs(plain.adjacency[k] - with_pe.adjacency[k]);
  return {diff > 0, "bit-identical under perturbation; pe-in-edges moves A by " + fmt(diff)};
}

Outcome relative_constraints() {
  Rng rng(77);
  const std::size_t m = 20, d = 8;
  Tensor<double> offsets = normal_tensor<double>({m, d}, 0.02, rng);
  Tensor<double> placeholder(Shape{d});
  RelativePEBank<double> bank(offsets, placeholder);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t i = 1 + rng() % m, j = 1 + rng() % m;
    const std::size_t hi = std::max(i, j);
    const std::size_t k = hi < m ? rng() % (m - hi + 1) : 0;
    if (bank.lookup(i, j).data() != bank.lookup(i + k, j + k).data()) return {false, "target invariance broken"};
    if (bank.lookup(i, j).data() != bank.lookup(j, i).data()) return {false, "undirectedness broken"};
    if (bank.lookup(i, j).data() != offsets.data() + d * (hi - std::min(i, j))) return {false, "wrong storage row"};
  }
  const auto cfg = ModelConfig::toy();
  Model<double> model(cfg, 3);
  const auto ds = synthetic_dataset(4, {SyntheticShape::circle, SyntheticShape::zigzag}, 2, cfg.max_seq_len);
  const auto ex = make_examples<double>(ds, cfg);
  Tape<double> tape;
  Binder<double> p(tape, model.params());
  std::vector<const Example<double>*> batch{&ex[0], &ex[1], &ex[2]};
  auto pass = forward_batch(model, p, batch, NormMode::train, nullptr);
  const auto grads = p.named(tape.gradient(pass.loss));
  if (grads.contains("rel_pe.placeholder") || grads.contains("abs_pe.placeholder")) return {false, "placeholder received a gradient"};
  if (!grads.contains("rel_pe.offsets")) return {false, "offsets received no gradient"};
  return {true, "10000 random (i, j, k); placeholders gradient-free"};
}

Outcome sinusoidal_table() {
  double worst = 0;
  for (std::size_t dim = 2; dim <= 512; dim += 2)
    for (std::size_t pos = 0; pos <= 64; ++pos) {
      const auto v = absolute_pe(pos, dim);
      for (std::size_t e = 0; e < dim / 2; ++e) {
        const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(e) / static_cast<double>(dim));
        worst = std::max({worst, std::abs(v[2 * e] - std::sin(angle)), std::abs(v[2 * e + 1] - std::cos(angle))});
      }
    }
  return {worst <= 1e-12, "max abs error " + fmt(worst)};
}

Outcome normalization_algebra() {
  Rng rng(99);
  double worst = 0, worst_scale = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto a = random_matrix(5, 5, rng, 0.01, 1.0);
    const auto n = sym_normalize(a);
    // brute force: build D^{-1/2} and multiply out
    long double dinv[5][5] = {}, left[5][5] = {}, full[5][5] = {};
    for (std::size_t i = 0; i < 5; ++i) {
      long double deg = 0;
      for (std::size_t j = 0; j < 5; ++j) deg += a(i, j);
      dinv[i][i] = 1.0L / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t k = 0; k < 5; ++k) left[i][j] += dinv[i][k] * a(k, j);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t k = 0; k < 5; ++k) full[i][j] += left[i][k] * dinv[k][j];
    Tensor<double> scaled = a;
    const double c = 0.1 + 20.0 * uniform01(rng);
    for (auto& x : scaled.values()) x *= c;
    const auto ns = sym_normalize(scaled);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        worst = std::max(worst, static_cast<double>(std::abs(n(i, j) - full[i][j])));
        worst_scale = std::max(worst_scale, std::abs(ns(i, j) - n(i, j)));
      }
  }
  return {worst <= 1e-12 && worst_scale <= 1e-10, "oracle error " + fmt(worst) + ", scale error " + fmt(worst_scale)};
}

Outcome overfit_and_retrieve() {
  const auto t0 = Clock::now();
  const auto cfg = ModelConfig::toy();
  const auto ds = synthetic_dataset(32, {SyntheticShape::circle, SyntheticShape::zigzag}, 0, cfg.max_seq_len);
  const auto data = make_examples<float>(ds, cfg);
  Model<float> model(cfg, 0);
  const double initial = dataset_nll(model, data);
  TrainConfig tc;
  tc.batch = 4;
  tc.epochs = 63;
  tc.max_steps = 500;
  const auto steps = train(model, data, tc).steps;
  const double final_nll = dataset_nll(model, data);
  EvalConfig ec;
  const double ret0 = evaluate(model, ds, ec).ret[0];
  ec.mask_prob = 0.1;
  const double ret10 = evaluate(model, ds, ec).ret[0];
  const double secs = seconds_since(t0);
  const bool ok = steps <= 500 && final_nll <= 0.5 * initial && ret0 >= 90 && ret10 >= 60 && secs < 600;
  return {ok, std::to_string(steps) + " steps, NLL " + fmt(initial) + " -> " + fmt(final_nll) + ", Ret@1 " + fmt(ret0) + "% (mask 0), " + fmt(ret10) +
                  "% (mask 0.1), " + fmt(secs) + " s"};
}

std::string first_nll(const fs::path& csv) {
  std::ifstream is(csv);
  std::string line;
  std::getline(is, line);
  std::getline(is, line);
  return line.substr(line.rfind(',') + 1);
}

Outcome ablation_mechanics() {
  const auto dir = scratch("ablation");
  if (cli(dir, "synth-data --count 8 --seed 3 --out data") != 0) return {false, "synth-data failed"};
  std::map<std::string, std::string> loss;
  for (auto [name, flag] : std::vector<std::pair<std::string, std::string>>{{"default", ""}, {"no_abs", "--no-abs-pe"}, {"no_rel", "--no-rel-pe"}, {"edges", "--pe-in-edges"}}) {
    if (cli(dir, "train --data data --scale toy --seed 5 --max-steps 1 --classifier-steps 0 " + flag + " --out " + name) != 0)
      return {false, name + " run failed"};
    loss[name] = first_nll(dir / name / "loss_curve.csv");
  }
  fs::remove_all(dir);
  const bool ok = loss["no_abs"] != loss["default"] && loss["no_rel"] != loss["default"] && loss["edges"] != loss["default"];
  return {ok, "step-1 NLL default " + loss["default"] + ", no-abs " + loss["no_abs"] + ", no-rel " + loss["no_rel"] + ", pe-in-edges " + loss["edges"]};
}

Outcome determinism() {
  const auto dir = scratch("determinism");
  if (cli(dir, "synth-data --count 16 --seed 2 --out data") != 0) return {false, "synth-data failed"};
  for (const char* r : {"a", "b"}) {
    const std::string run = r;
    if (cli(dir, "train --data data --scale toy --seed 4 --epochs 3 --threads 1 --classifier-steps 50 --out " + run) != 0) return {false, "train failed"};
    if (cli(dir, "eval --data data --ckpt " + run + "/model.dck --seed 4 --mask 0.1 --threads 1 --out " + run + "/eval") != 0) return {false, "eval failed"};
  }
  const bool ckpt = slurp(dir / "a" / "model.dck") == slurp(dir / "b" / "model.dck") && !slurp(dir / "a" / "model.dck").empty();
  const bool metrics = slurp(dir / "a" / "eval" / "metrics.json") == slurp(dir / "b" / "eval" / "metrics.json");
  fs::remove_all(dir);
  return {ckpt && metrics, std::string("checkpoints ") + (ckpt ? "identical" : "differ") + ", metrics " + (metrics ? "identical" : "differ")};
}

Outcome schedule_exactness() {
  const auto cfg = ModelConfig::toy();
  const auto ds = synthetic_dataset(6, {SyntheticShape::circle, SyntheticShape::square}, 8, cfg.max_seq_len);
  const auto data = make_examples<float>(ds, cfg);
  Model<float> model(cfg, 1);
  TrainConfig tc;
  tc.batch = 3;
  tc.epochs = 30;
  const auto rep = train(model, data, tc);
  double worst = 0;
  for (auto& r : rep.curve) worst = std::max(worst, std::abs(r.lr - 1e-3 * std::pow(0.95, static_cast<double>(r.epoch))));
  return {!rep.curve.empty() && rep.curve.back().epoch == 29 && worst <= 1e-12, std::to_string(rep.curve.size()) + " steps, max error " + fmt(worst)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"adjacency structure", adjacency_structure},
      {"positional encodings isolated from edges", pe_isolation},
      {"relative offset constraints", relative_constraints},
      {"sinusoidal table", sinusoidal_table},
      {"normalization algebra", normalization_algebra},
      {"overfit and retrieve", overfit_and_retrieve},
      {"ablation mechanics", ablation_mechanics},
      {"train/eval determinism", determinism},
      {"learning-rate schedule", schedule_exactness},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.ok;
    std::cout << (o.ok ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
